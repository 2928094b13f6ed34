#pragma once
// Raw video container ("RVID"), clip sampling, and still-image helpers.
//
// RVID layout, little-endian:
//   magic "RVID" | u16 version=1 | u32 frame_count | u32 height | u32 width
//   | u8 channels | u32 fps_numerator | u32 fps_denominator
//   | frames as raw bytes, row-major, channel-interleaved

#include <cstdint>
#include <string>
#include <vector>

namespace motok {

struct RawVideo {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 or 3
  uint32_t fps_num = 0;
  uint32_t fps_den = 1;
  std::vector<std::vector<uint8_t>> frames;  // each height*width*channels

  double fps() const { return static_cast<double>(fps_num) / fps_den; }
  size_t frame_bytes() const {
    return static_cast<size_t>(width) * static_cast<size_t>(height) *
           static_cast<size_t>(channels);
  }
  // Throws std::invalid_argument when an invariant is broken.
  void validate() const;
};

struct Clip {
  int width = 0;
  int height = 0;
  int channels = 1;
  double clip_fps = 6.0;
  int video_index = 0;
  int start_frame = 0;  // source index of the keyframe
  std::vector<uint8_t> keyframe;
  std::vector<std::vector<uint8_t>> frames;  // exactly T frames

  int t() const { return static_cast<int>(frames.size()); }
};

void write_rvid(std::ostream& os, const RawVideo& v);
void write_rvid(const std::string& path, const RawVideo& v);
RawVideo read_rvid(std::istream& is);
RawVideo read_rvid(const std::string& path);

// Uniform temporal stride source_fps/clip_fps with nearest-index rounding,
// then consecutive non-overlapping windows of clip_len+1 sampled frames.
// The first frame of each window becomes the keyframe; a trailing remainder
// shorter than a window is dropped.
std::vector<Clip> sample_clips(const RawVideo& v, double clip_fps = 6.0, int clip_len = 24,
                               int video_index = 0);

struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<uint8_t> pix;
};

// Binary PGM (P5) / PPM (P6), maxval 255.
void write_pnm(const std::string& path, const Image8& img);
Image8 read_pnm(const std::string& path);

// Dispatches on file extension: .pgm/.ppm/.pnm always work; .png only when
// built with libpng (otherwise throws with a message saying so).
Image8 read_image(const std::string& path);
bool png_support();

Image8 resize_nearest(const Image8& img, int target_h, int target_w);

}  // namespace motok
