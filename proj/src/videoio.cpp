#include "motok/videoio.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "motok/binio.hpp"

#ifdef MOTOK_WITH_PNG
#include <png.h>
#endif

namespace motok {

namespace {

constexpr char kMagic[4] = {'R', 'V', 'I', 'D'};
constexpr uint16_t kVersion = 1;
constexpr uint32_t kMaxDim = 16384;
constexpr uint32_t kMaxFrames = 1u << 20;

}  // namespace

void RawVideo::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("video: non-positive dimensions");
  if (channels != 1 && channels != 3) {
    throw std::invalid_argument("video: channels must be 1 or 3, got " +
                                std::to_string(channels));
  }
  if (fps_num == 0 || fps_den == 0) throw std::invalid_argument("video: fps must be positive");
  for (size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].size() != frame_bytes()) {
      throw std::invalid_argument("video: frame " + std::to_string(i) + " has " +
                                  std::to_string(frames[i].size()) + " bytes, expected " +
                                  std::to_string(frame_bytes()));
    }
  }
}

void write_rvid(std::ostream& os, const RawVideo& v) {
  v.validate();
  binio::put_bytes(os, kMagic, 4);
  binio::put_u16(os, kVersion);
  binio::put_u32(os, static_cast<uint32_t>(v.frames.size()));
  binio::put_u32(os, static_cast<uint32_t>(v.height));
  binio::put_u32(os, static_cast<uint32_t>(v.width));
  binio::put_u8(os, static_cast<uint8_t>(v.channels));
  binio::put_u32(os, v.fps_num);
  binio::put_u32(os, v.fps_den);
  for (const auto& f : v.frames) binio::put_bytes(os, f.data(), f.size());
  if (!os) throw std::runtime_error("video: write failed");
}

void write_rvid(const std::string& path, const RawVideo& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("video: cannot open '" + path + "' for writing");
  write_rvid(os, v);
}

RawVideo read_rvid(std::istream& is) {
  char magic[4];
  binio::get_bytes(is, magic, 4, "video magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("video: input is not an RVID stream");
  }
  uint16_t version = binio::get_u16(is, "video version");
  if (version != kVersion) {
    throw std::runtime_error("video: unsupported version " + std::to_string(version));
  }
  uint32_t count = binio::get_u32(is, "frame count");
  uint32_t height = binio::get_u32(is, "height");
  uint32_t width = binio::get_u32(is, "width");
  uint8_t channels = binio::get_u8(is, "channels");
  uint32_t fps_num = binio::get_u32(is, "fps numerator");
  uint32_t fps_den = binio::get_u32(is, "fps denominator");
  if (height == 0 || width == 0 || height > kMaxDim || width > kMaxDim) {
    throw std::runtime_error("video: implausible dimensions " + std::to_string(width) + "x" +
                             std::to_string(height));
  }
  if (count > kMaxFrames) {
    throw std::runtime_error("video: implausible frame count " + std::to_string(count));
  }
  RawVideo v;
  v.width = static_cast<int>(width);
  v.height = static_cast<int>(height);
  v.channels = channels;
  v.fps_num = fps_num;
  v.fps_den = fps_den;
  const size_t fb = v.frame_bytes();
  v.frames.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    std::vector<uint8_t> frame(fb);
    is.read(reinterpret_cast<char*>(frame.data()), static_cast<std::streamsize>(fb));
    const size_t got = static_cast<size_t>(is.gcount());
    if (got != fb) {
      throw std::runtime_error("video: truncated payload in frame " + std::to_string(i) +
                               ": expected " + std::to_string(fb) + " bytes, got " +
                               std::to_string(got));
    }
    v.frames.push_back(std::move(frame));
  }
  v.validate();
  return v;
}

RawVideo read_rvid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("video: cannot open '" + path + "'");
  return read_rvid(is);
}

std::vector<Clip> sample_clips(const RawVideo& v, double clip_fps, int clip_len,
                               int video_index) {
  v.validate();
  if (clip_fps <= 0 || clip_len <= 0) {
    throw std::invalid_argument("sample_clips: clip_fps and clip_len must be positive");
  }
  if (v.fps() < clip_fps) {
    throw std::invalid_argument("sample_clips: source fps " + std::to_string(v.fps()) +
                                " below clip fps " + std::to_string(clip_fps));
  }
  const double stride = v.fps() / clip_fps;
  std::vector<int> sampled;
  const int n = static_cast<int>(v.frames.size());
  for (int k = 0;; ++k) {
    int idx = static_cast<int>(std::llround(k * stride));
    if (idx >= n) break;
    sampled.push_back(idx);
  }
  std::vector<Clip> clips;
  const int window = clip_len + 1;
  for (size_t w0 = 0; w0 + window <= sampled.size(); w0 += window) {
    Clip c;
    c.width = v.width;
    c.height = v.height;
    c.channels = v.channels;
    c.clip_fps = clip_fps;
    c.video_index = video_index;
    c.start_frame = sampled[w0];
    c.keyframe = v.frames[static_cast<size_t>(sampled[w0])];
    c.frames.reserve(static_cast<size_t>(clip_len));
    for (int k = 1; k <= clip_len; ++k) {
      c.frames.push_back(v.frames[static_cast<size_t>(sampled[w0 + static_cast<size_t>(k)])]);
    }
    clips.push_back(std::move(c));
  }
  return clips;
}

// ---------------------------------------------------------------------------
// still images

void write_pnm(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw std::invalid_argument("pnm: channels must be 1 or 3");
  }
  if (img.pix.size() != static_cast<size_t>(img.height) * img.width * img.channels) {
    throw std::invalid_argument("pnm: pixel buffer size mismatch");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("pnm: cannot open '" + path + "' for writing");
  os << (img.channels == 1 ? "P5" : "P6") << "\n"
     << img.width << " " << img.height << "\n255\n";
  binio::put_bytes(os, img.pix.data(), img.pix.size());
  if (!os) throw std::runtime_error("pnm: write to '" + path + "' failed");
}

namespace {

int pnm_token(std::istream& is, const std::string& path) {
  // skips whitespace and '#' comments, then reads one non-negative integer
  int c = is.get();
  while (c != std::istream::traits_type::eof()) {
    if (c == '#') {
      while (c != '\n' && c != std::istream::traits_type::eof()) c = is.get();
    } else if (std::isspace(c)) {
      c = is.get();
    } else {
      break;
    }
  }
  if (!std::isdigit(c)) throw std::runtime_error("pnm: malformed header in '" + path + "'");
  int value = 0;
  while (std::isdigit(c)) {
    value = value * 10 + (c - '0');
    if (value > 1 << 24) throw std::runtime_error("pnm: absurd header value in '" + path + "'");
    c = is.get();
  }
  return value;
}

}  // namespace

Image8 read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("pnm: cannot open '" + path + "'");
  char m0 = static_cast<char>(is.get());
  char m1 = static_cast<char>(is.get());
  if (m0 != 'P' || (m1 != '5' && m1 != '6')) {
    throw std::runtime_error("pnm: '" + path + "' is not a binary PGM/PPM file");
  }
  Image8 img;
  img.channels = (m1 == '5') ? 1 : 3;
  img.width = pnm_token(is, path);
  img.height = pnm_token(is, path);
  int maxval = pnm_token(is, path);
  if (maxval != 255) {
    throw std::runtime_error("pnm: only maxval 255 supported, got " + std::to_string(maxval));
  }
  // the value parser consumed the single whitespace after maxval already
  img.pix.resize(static_cast<size_t>(img.width) * img.height * img.channels);
  is.read(reinterpret_cast<char*>(img.pix.data()), static_cast<std::streamsize>(img.pix.size()));
  if (static_cast<size_t>(is.gcount()) != img.pix.size()) {
    throw std::runtime_error("pnm: truncated pixel data in '" + path + "'");
  }
  return img;
}

#ifdef MOTOK_WITH_PNG

bool png_support() { return true; }

namespace {

Image8 read_png_file(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("png: cannot open '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("png: allocation failure");
  }
  Image8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("png: failed to decode '" + path + "'");
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  color = png_get_color_type(png, info);
  img.channels = (color == PNG_COLOR_TYPE_GRAY) ? 1 : 3;
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  img.pix.resize(static_cast<size_t>(img.width) * img.height * img.channels);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) {
    rows[y] = img.pix.data() + static_cast<size_t>(y) * img.width * img.channels;
  }
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

}  // namespace

#else

bool png_support() { return false; }

#endif

Image8 read_image(const std::string& path) {
  auto ends_with = [&](const char* suf) {
    size_t n = std::string(suf).size();
    return path.size() >= n && path.compare(path.size() - n, n, suf) == 0;
  };
  if (ends_with(".pgm") || ends_with(".ppm") || ends_with(".pnm")) return read_pnm(path);
  if (ends_with(".png")) {
#ifdef MOTOK_WITH_PNG
    return read_png_file(path);
#else
    throw std::runtime_error("png: built without libpng; convert '" + path + "' to PGM/PPM");
#endif
  }
  throw std::runtime_error("image: unsupported extension on '" + path + "'");
}

Image8 resize_nearest(const Image8& img, int target_h, int target_w) {
  if (target_h <= 0 || target_w <= 0) {
    throw std::invalid_argument("resize: non-positive target size");
  }
  Image8 out;
  out.height = target_h;
  out.width = target_w;
  out.channels = img.channels;
  out.pix.resize(static_cast<size_t>(target_h) * target_w * img.channels);
  for (int y = 0; y < target_h; ++y) {
    int sy = static_cast<int>(static_cast<int64_t>(y) * img.height / target_h);
    for (int x = 0; x < target_w; ++x) {
      int sx = static_cast<int>(static_cast<int64_t>(x) * img.width / target_w);
      const uint8_t* s = img.pix.data() + (static_cast<size_t>(sy) * img.width + sx) * img.channels;
      uint8_t* d = out.pix.data() + (static_cast<size_t>(y) * target_w + x) * img.channels;
      for (int c = 0; c < img.channels; ++c) d[c] = s[c];
    }
  }
  return out;
}

}  // namespace motok
