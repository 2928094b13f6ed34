#pragma once
// Deterministic synthetic data: videos with known motion, parametric motion
// fields for tokenizer training, and Markov id streams for the language
// model. Tests regenerate expected values from the same closed forms.

#include <cstdint>
#include <vector>

#include "motok/motion.hpp"
#include "motok/tensor.hpp"
#include "motok/videoio.hpp"

namespace motok {

// pixel(t, y, x, c) = (3x + 5y + 7t + 11c) mod 256
RawVideo synth_gradient_video(int width, int height, int frames, int channels = 3,
                              uint32_t fps_num = 30, uint32_t fps_den = 1);

struct MovingSquareParams {
  int width = 64;
  int height = 64;
  int frames = 25;
  int channels = 3;
  uint32_t fps_num = 6;
  uint32_t fps_den = 1;
  int square = 16;
  int x0 = 8;
  int y0 = 8;
  int vx = 2;  // pixels per frame
  int vy = 0;
  uint8_t background = 32;
  uint8_t foreground = 220;
  // Pattern the square interior so block matching sees gradients everywhere,
  // not just at the edges.
  bool textured = false;
};

// Square at (x0 + t*vx, y0 + t*vy), clipped to the frame.
RawVideo synth_moving_square_video(const MovingSquareParams& p);

// out(y, x) = src(clamp(y - dy), clamp(x - dx)): content shifts by (dx, dy).
std::vector<uint8_t> translate_replicate(const uint8_t* src, int h, int w, int c, int dx, int dy);

std::vector<uint8_t> random_frame(Rng& rng, int h, int w, int c);

// Normalized motion-field patterns for tokenizer training.
enum class MotionPattern { kConstant, kLinearRamp, kRotating };
MotionField synth_motion_pattern(MotionPattern kind, int t, int hb, int wb, Rng& rng,
                                 double noise_std = 0.0);

// First-order Markov chain over `states` symbols, started from its
// stationary distribution so the per-position optimal NLL equals the
// entropy rate at every position.
struct MarkovSource {
  int states = 2;
  std::vector<double> trans;  // states x states, rows sum to 1

  explicit MarkovSource(std::vector<double> transition, int n_states);
  const std::vector<double>& stationary() const { return pi_; }
  double entropy_rate() const;  // nats per symbol
  std::vector<int> sample(int len, Rng& rng) const;

 private:
  std::vector<double> pi_;
};

}  // namespace motok
