#include "motok/motion.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "motok/binio.hpp"

namespace motok {

std::vector<std::string> MotionField::range_violations() const {
  std::vector<std::string> out;
  const float limit = normalized ? 1.f : static_cast<float>(search_range);
  for (int ti = 0; ti < t; ++ti) {
    for (int y = 0; y < hb; ++y) {
      for (int x = 0; x < wb; ++x) {
        float a = dx(ti, y, x), b = dy(ti, y, x);
        if (!std::isfinite(a) || !std::isfinite(b) || std::fabs(a) > limit ||
            std::fabs(b) > limit) {
          out.push_back("cell (t=" + std::to_string(ti) + ",y=" + std::to_string(y) + ",x=" +
                        std::to_string(x) + ") = (" + std::to_string(a) + "," +
                        std::to_string(b) + ") exceeds " +
                        (normalized ? "[-1,1]" : "search range " + std::to_string(search_range)));
          if (out.size() >= 16) return out;  // enough to diagnose
        }
      }
    }
  }
  return out;
}

void MotionField::validate() const {
  if (t <= 0 || hb <= 0 || wb <= 0) {
    throw std::invalid_argument("motion field: non-positive dims (t=" + std::to_string(t) +
                                ",hb=" + std::to_string(hb) + ",wb=" + std::to_string(wb) + ")");
  }
  if (v.size() != static_cast<size_t>(t) * hb * wb * 2) {
    throw std::invalid_argument("motion field: buffer holds " + std::to_string(v.size()) +
                                " floats, expected " + std::to_string(t * hb * wb * 2));
  }
}

std::vector<uint8_t> to_luma(const uint8_t* frame, int h, int w, int c) {
  if (c != 1 && c != 3) throw std::invalid_argument("luma: channels must be 1 or 3");
  std::vector<uint8_t> out(static_cast<size_t>(h) * w);
  if (c == 1) {
    std::copy(frame, frame + out.size(), out.begin());
    return out;
  }
  for (size_t i = 0; i < out.size(); ++i) {
    const uint8_t* p = frame + i * 3;
    out[i] = luma_of(p[0], p[1], p[2]);
  }
  return out;
}

void estimate_motion_luma(const uint8_t* prev, const uint8_t* cur, int h, int w, int block_size,
                          int search_range, int* out) {
  if (h < block_size || w < block_size) {
    throw std::invalid_argument("motion: frame " + std::to_string(w) + "x" + std::to_string(h) +
                                " smaller than one " + std::to_string(block_size) + "px block");
  }
  const int hb = h / block_size;
  const int wb = w / block_size;
  for (int p = 0; p < hb; ++p) {
    for (int q = 0; q < wb; ++q) {
      const int by = p * block_size;
      const int bx = q * block_size;
      long best_cost = std::numeric_limits<long>::max();
      int best_key1 = 0, best_dy = 0, best_dx = 0;
      for (int dy = -search_range; dy <= search_range; ++dy) {
        const int sy = by - dy;
        if (sy < 0 || sy + block_size > h) continue;
        for (int dx = -search_range; dx <= search_range; ++dx) {
          const int sx = bx - dx;
          if (sx < 0 || sx + block_size > w) continue;
          long sad = 0;
          for (int y = 0; y < block_size; ++y) {
            const uint8_t* cr = cur + static_cast<size_t>(by + y) * w + bx;
            const uint8_t* pr = prev + static_cast<size_t>(sy + y) * w + sx;
            int row = 0;
            for (int x = 0; x < block_size; ++x) row += std::abs(cr[x] - pr[x]);
            sad += row;
          }
          const int key1 = std::abs(dx) + std::abs(dy);
          // order: cost, |dx|+|dy|, dy, dx
          if (sad < best_cost ||
              (sad == best_cost &&
               (key1 < best_key1 ||
                (key1 == best_key1 && (dy < best_dy || (dy == best_dy && dx < best_dx)))))) {
            best_cost = sad;
            best_key1 = key1;
            best_dy = dy;
            best_dx = dx;
          }
        }
      }
      out[(static_cast<size_t>(p) * wb + q) * 2] = best_dx;
      out[(static_cast<size_t>(p) * wb + q) * 2 + 1] = best_dy;
    }
  }
}

MotionField estimate_motion(const uint8_t* prev, const uint8_t* cur, int h, int w, int c,
                            int block_size, int search_range) {
  auto pl = to_luma(prev, h, w, c);
  auto cl = to_luma(cur, h, w, c);
  MotionField f(1, h / block_size, w / block_size, false);
  f.block_size = block_size;
  f.search_range = search_range;
  std::vector<int> tmp(static_cast<size_t>(f.hb) * f.wb * 2);
  estimate_motion_luma(pl.data(), cl.data(), h, w, block_size, search_range, tmp.data());
  for (size_t i = 0; i < tmp.size(); ++i) f.v[i] = static_cast<float>(tmp[i]);
  return f;
}

MotionField clip_motion(const Clip& clip, int block_size, int search_range) {
  if (clip.frames.empty()) throw std::invalid_argument("motion: clip has no frames");
  const int h = clip.height, w = clip.width, c = clip.channels;
  MotionField f(clip.t(), h / block_size, w / block_size, false);
  f.block_size = block_size;
  f.search_range = search_range;
  std::vector<uint8_t> prev = to_luma(clip.keyframe.data(), h, w, c);
  std::vector<int> tmp(static_cast<size_t>(f.hb) * f.wb * 2);
  for (int t = 0; t < clip.t(); ++t) {
    std::vector<uint8_t> cur = to_luma(clip.frames[static_cast<size_t>(t)].data(), h, w, c);
    estimate_motion_luma(prev.data(), cur.data(), h, w, block_size, search_range, tmp.data());
    float* dst = f.v.data() + f.cell(t, 0, 0);
    for (size_t i = 0; i < tmp.size(); ++i) dst[i] = static_cast<float>(tmp[i]);
    prev = std::move(cur);
  }
  return f;
}

MotionField normalize_motion(const MotionField& f, int width, int height) {
  f.validate();
  if (f.normalized) throw std::logic_error("motion: field is already normalized");
  if (width <= 0 || height <= 0) throw std::invalid_argument("motion: non-positive frame size");
  MotionField out = f;
  out.normalized = true;
  const float iw = 1.f / static_cast<float>(width);
  const float ih = 1.f / static_cast<float>(height);
  for (size_t i = 0; i < out.v.size(); i += 2) {
    out.v[i] *= iw;
    out.v[i + 1] *= ih;
  }
  return out;
}

MotionField denormalize_motion(const MotionField& f, int width, int height) {
  f.validate();
  if (!f.normalized) throw std::logic_error("motion: field is not normalized");
  if (width <= 0 || height <= 0) throw std::invalid_argument("motion: non-positive frame size");
  MotionField out = f;
  out.normalized = false;
  for (size_t i = 0; i < out.v.size(); i += 2) {
    out.v[i] *= static_cast<float>(width);
    out.v[i + 1] *= static_cast<float>(height);
  }
  return out;
}

MotionField resize_motion(const MotionField& f, int target_h, int target_w,
                          std::string* warning) {
  f.validate();
  if (!f.normalized) throw std::logic_error("motion: resize expects a normalized field");
  if (target_h <= 0 || target_w <= 0) {
    throw std::invalid_argument("motion: non-positive resize target");
  }
  if (warning && (target_h > 4 * f.hb || target_w > 4 * f.wb)) {
    *warning += "resize " + std::to_string(f.hb) + "x" + std::to_string(f.wb) + " -> " +
                std::to_string(target_h) + "x" + std::to_string(target_w) +
                " upscales beyond 4x\n";
  }
  MotionField out(f.t, target_h, target_w, true);
  out.block_size = f.block_size;
  out.search_range = f.search_range;
  for (int t = 0; t < f.t; ++t) {
    for (int y = 0; y < target_h; ++y) {
      const int sy = static_cast<int>(static_cast<int64_t>(y) * f.hb / target_h);
      for (int x = 0; x < target_w; ++x) {
        const int sx = static_cast<int>(static_cast<int64_t>(x) * f.wb / target_w);
        out.dx(t, y, x) = f.dx(t, sy, sx);
        out.dy(t, y, x) = f.dy(t, sy, sx);
      }
    }
  }
  return out;
}

namespace {
constexpr char kMvecMagic[4] = {'M', 'V', 'E', 'C'};
constexpr uint16_t kMvecVersion = 1;
constexpr uint32_t kMaxGrid = 1u << 16;
}  // namespace

void write_mvec(std::ostream& os, const MotionField& f) {
  f.validate();
  binio::put_bytes(os, kMvecMagic, 4);
  binio::put_u16(os, kMvecVersion);
  binio::put_u32(os, static_cast<uint32_t>(f.t));
  binio::put_u32(os, static_cast<uint32_t>(f.hb));
  binio::put_u32(os, static_cast<uint32_t>(f.wb));
  binio::put_u8(os, f.normalized ? 1 : 0);
  for (float x : f.v) binio::put_f32(os, x);
  if (!os) throw std::runtime_error("motion: MVEC write failed");
}

void write_mvec(const std::string& path, const MotionField& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("motion: cannot open '" + path + "' for writing");
  write_mvec(os, f);
}

MotionField read_mvec(std::istream& is) {
  char magic[4];
  binio::get_bytes(is, magic, 4, "MVEC magic");
  if (std::memcmp(magic, kMvecMagic, 4) != 0) {
    throw std::runtime_error("motion: input is not an MVEC stream");
  }
  uint16_t version = binio::get_u16(is, "MVEC version");
  if (version != kMvecVersion) {
    throw std::runtime_error("motion: unsupported MVEC version " + std::to_string(version));
  }
  uint32_t t = binio::get_u32(is, "MVEC T");
  uint32_t hb = binio::get_u32(is, "MVEC Hb");
  uint32_t wb = binio::get_u32(is, "MVEC Wb");
  uint8_t flags = binio::get_u8(is, "MVEC flags");
  if (t == 0 || hb == 0 || wb == 0 || t > kMaxGrid || hb > kMaxGrid || wb > kMaxGrid) {
    throw std::runtime_error("motion: implausible MVEC dims");
  }
  MotionField f(static_cast<int>(t), static_cast<int>(hb), static_cast<int>(wb),
                (flags & 1) != 0);
  for (auto& x : f.v) x = binio::get_f32(is, "MVEC payload");
  return f;
}

MotionField read_mvec(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("motion: cannot open '" + path + "'");
  return read_mvec(is);
}

}  // namespace motok
