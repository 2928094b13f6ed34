#pragma once
// Block-matching motion estimation and the motion-field container.
//
// A vector (dx, dy) at block (p, q) means the block's pixels in the current
// frame came from the previous frame shifted by (dx, dy):
//   cur(y, x) ~ prev(y - dy, x - dx)
//
// MVEC layout, little-endian: magic "MVEC" | u16 version=1 | u32 T | u32 Hb
// | u32 Wb | u8 flags (bit0 = normalized) | f32 (dx, dy) pairs, t-major,
// row-major.

#include <cstdint>
#include <string>
#include <vector>

#include "motok/videoio.hpp"

namespace motok {

struct MotionField {
  int t = 0;
  int hb = 0;
  int wb = 0;
  bool normalized = false;
  int block_size = 16;
  int search_range = 8;
  std::vector<float> v;  // t*hb*wb*2, (dx, dy) per cell

  MotionField() = default;
  MotionField(int t_, int hb_, int wb_, bool norm = false)
      : t(t_), hb(hb_), wb(wb_), normalized(norm),
        v(static_cast<size_t>(t_) * hb_ * wb_ * 2, 0.f) {}

  size_t cell(int ti, int y, int x) const {
    return ((static_cast<size_t>(ti) * hb + y) * wb + x) * 2;
  }
  float& dx(int ti, int y, int x) { return v[cell(ti, y, x)]; }
  float& dy(int ti, int y, int x) { return v[cell(ti, y, x) + 1]; }
  float dx(int ti, int y, int x) const { return v[cell(ti, y, x)]; }
  float dy(int ti, int y, int x) const { return v[cell(ti, y, x) + 1]; }

  // Throws std::invalid_argument on an inconsistent container; returns a
  // list of range violations (empty when clean) for inspection tooling.
  std::vector<std::string> range_violations() const;
  void validate() const;
};

// BT.601 integer luma; for single-channel frames the value passes through.
std::vector<uint8_t> to_luma(const uint8_t* frame, int h, int w, int c);
inline uint8_t luma_of(uint8_t r, uint8_t g, uint8_t b) {
  return static_cast<uint8_t>((77 * r + 150 * g + 29 * b + 128) >> 8);
}

// Exhaustive SAD search on luma planes. Writes hb*wb (dx, dy) int pairs.
// Candidates reading outside the previous frame are skipped; ties break by
// smallest |dx|+|dy|, then smallest dy, then smallest dx.
void estimate_motion_luma(const uint8_t* prev, const uint8_t* cur, int h, int w, int block_size,
                          int search_range, int* out);

// Single frame pair -> one-slice raw field.
MotionField estimate_motion(const uint8_t* prev, const uint8_t* cur, int h, int w, int c,
                            int block_size = 16, int search_range = 8);

// Keyframe plus T frames -> T-slice raw field.
MotionField clip_motion(const Clip& clip, int block_size = 16, int search_range = 8);

MotionField normalize_motion(const MotionField& f, int width, int height);
MotionField denormalize_motion(const MotionField& f, int width, int height);

// Nearest-neighbor spatial resize of a normalized field; temporal axis kept.
// When the target exceeds 4x the source in either axis a note is appended to
// *warning (the resize still happens).
MotionField resize_motion(const MotionField& f, int target_h, int target_w,
                          std::string* warning = nullptr);

void write_mvec(std::ostream& os, const MotionField& f);
void write_mvec(const std::string& path, const MotionField& f);
MotionField read_mvec(std::istream& is);
MotionField read_mvec(const std::string& path);

}  // namespace motok
