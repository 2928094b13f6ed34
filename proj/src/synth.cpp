#include "motok/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace motok {

RawVideo synth_gradient_video(int width, int height, int frames, int channels,
                              uint32_t fps_num, uint32_t fps_den) {
  RawVideo v;
  v.width = width;
  v.height = height;
  v.channels = channels;
  v.fps_num = fps_num;
  v.fps_den = fps_den;
  v.frames.reserve(static_cast<size_t>(frames));
  for (int t = 0; t < frames; ++t) {
    std::vector<uint8_t> f(v.frame_bytes());
    size_t i = 0;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        for (int c = 0; c < channels; ++c) {
          f[i++] = static_cast<uint8_t>((3 * x + 5 * y + 7 * t + 11 * c) & 0xff);
        }
      }
    }
    v.frames.push_back(std::move(f));
  }
  v.validate();
  return v;
}

RawVideo synth_moving_square_video(const MovingSquareParams& p) {
  RawVideo v;
  v.width = p.width;
  v.height = p.height;
  v.channels = p.channels;
  v.fps_num = p.fps_num;
  v.fps_den = p.fps_den;
  v.frames.reserve(static_cast<size_t>(p.frames));
  for (int t = 0; t < p.frames; ++t) {
    std::vector<uint8_t> f(v.frame_bytes(), p.background);
    const int sx = p.x0 + t * p.vx;
    const int sy = p.y0 + t * p.vy;
    const int x_lo = std::max(0, sx), x_hi = std::min(p.width, sx + p.square);
    const int y_lo = std::max(0, sy), y_hi = std::min(p.height, sy + p.square);
    for (int y = y_lo; y < y_hi; ++y) {
      for (int x = x_lo; x < x_hi; ++x) {
        uint8_t val = p.foreground;
        if (p.textured) {
          // texture follows square-local coordinates so it moves with the square
          const int u = x - sx, s = y - sy;
          val = static_cast<uint8_t>(p.foreground + ((u * 7 + s * 13) & 31));
        }
        uint8_t* px = f.data() + (static_cast<size_t>(y) * p.width + x) * p.channels;
        for (int c = 0; c < p.channels; ++c) px[c] = val;
      }
    }
    v.frames.push_back(std::move(f));
  }
  v.validate();
  return v;
}

std::vector<uint8_t> translate_replicate(const uint8_t* src, int h, int w, int c, int dx,
                                         int dy) {
  std::vector<uint8_t> out(static_cast<size_t>(h) * w * c);
  for (int y = 0; y < h; ++y) {
    const int sy = std::clamp(y - dy, 0, h - 1);
    for (int x = 0; x < w; ++x) {
      const int sx = std::clamp(x - dx, 0, w - 1);
      const uint8_t* s = src + (static_cast<size_t>(sy) * w + sx) * c;
      uint8_t* d = out.data() + (static_cast<size_t>(y) * w + x) * c;
      for (int k = 0; k < c; ++k) d[k] = s[k];
    }
  }
  return out;
}

std::vector<uint8_t> random_frame(Rng& rng, int h, int w, int c) {
  std::vector<uint8_t> out(static_cast<size_t>(h) * w * c);
  for (auto& v : out) v = static_cast<uint8_t>(rng.uniform_int(0, 255));
  return out;
}

MotionField synth_motion_pattern(MotionPattern kind, int t, int hb, int wb, Rng& rng,
                                 double noise_std) {
  MotionField f(t, hb, wb, true);
  auto clip1 = [](double v) { return static_cast<float>(std::clamp(v, -1.0, 1.0)); };
  switch (kind) {
    case MotionPattern::kConstant: {
      const double a = rng.uniform(-0.9, 0.9);
      const double b = rng.uniform(-0.9, 0.9);
      for (size_t i = 0; i < f.v.size(); i += 2) {
        f.v[i] = static_cast<float>(a);
        f.v[i + 1] = static_cast<float>(b);
      }
      break;
    }
    case MotionPattern::kLinearRamp: {
      const double a0 = rng.uniform(-0.9, 0.9), a1 = rng.uniform(-0.9, 0.9);
      const double b0 = rng.uniform(-0.9, 0.9), b1 = rng.uniform(-0.9, 0.9);
      for (int ti = 0; ti < t; ++ti) {
        for (int y = 0; y < hb; ++y) {
          for (int x = 0; x < wb; ++x) {
            const double fx = wb > 1 ? static_cast<double>(x) / (wb - 1) : 0.0;
            const double fy = hb > 1 ? static_cast<double>(y) / (hb - 1) : 0.0;
            f.dx(ti, y, x) = static_cast<float>(a0 + (a1 - a0) * fx);
            f.dy(ti, y, x) = static_cast<float>(b0 + (b1 - b0) * fy);
          }
        }
      }
      break;
    }
    case MotionPattern::kRotating: {
      double omega = rng.uniform(0.3, 0.9) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
      const double cy = (hb - 1) / 2.0, cx = (wb - 1) / 2.0;
      const double s = std::max(1.0, std::max(hb - 1, wb - 1) / 2.0);
      for (int ti = 0; ti < t; ++ti) {
        for (int y = 0; y < hb; ++y) {
          for (int x = 0; x < wb; ++x) {
            f.dx(ti, y, x) = clip1(-omega * (y - cy) / s);
            f.dy(ti, y, x) = clip1(omega * (x - cx) / s);
          }
        }
      }
      break;
    }
  }
  if (noise_std > 0.0) {
    for (auto& v : f.v) v = clip1(v + noise_std * rng.normal());
  }
  return f;
}

MarkovSource::MarkovSource(std::vector<double> transition, int n_states)
    : states(n_states), trans(std::move(transition)) {
  if (states < 2 || trans.size() != static_cast<size_t>(states) * states) {
    throw std::invalid_argument("markov: transition matrix must be states x states");
  }
  for (int s = 0; s < states; ++s) {
    double row = 0.0;
    for (int j = 0; j < states; ++j) {
      double p = trans[static_cast<size_t>(s) * states + j];
      if (p < 0) throw std::invalid_argument("markov: negative transition probability");
      row += p;
    }
    if (std::fabs(row - 1.0) > 1e-9) {
      throw std::invalid_argument("markov: row " + std::to_string(s) + " sums to " +
                                  std::to_string(row));
    }
  }
  // stationary distribution by power iteration
  pi_.assign(static_cast<size_t>(states), 1.0 / states);
  for (int it = 0; it < 10000; ++it) {
    std::vector<double> next(static_cast<size_t>(states), 0.0);
    for (int s = 0; s < states; ++s) {
      for (int j = 0; j < states; ++j) {
        next[static_cast<size_t>(j)] += pi_[static_cast<size_t>(s)] *
                                        trans[static_cast<size_t>(s) * states + j];
      }
    }
    double delta = 0.0;
    for (int s = 0; s < states; ++s) {
      delta += std::fabs(next[static_cast<size_t>(s)] - pi_[static_cast<size_t>(s)]);
    }
    pi_ = std::move(next);
    if (delta < 1e-14) break;
  }
}

double MarkovSource::entropy_rate() const {
  double h = 0.0;
  for (int s = 0; s < states; ++s) {
    double row_h = 0.0;
    for (int j = 0; j < states; ++j) {
      double p = trans[static_cast<size_t>(s) * states + j];
      if (p > 0) row_h -= p * std::log(p);
    }
    h += pi_[static_cast<size_t>(s)] * row_h;
  }
  return h;
}

std::vector<int> MarkovSource::sample(int len, Rng& rng) const {
  std::vector<int> out;
  out.reserve(static_cast<size_t>(len));
  auto draw = [&](const double* dist) {
    double u = rng.uniform();
    double acc = 0.0;
    for (int j = 0; j < states; ++j) {
      acc += dist[j];
      if (u < acc) return j;
    }
    return states - 1;
  };
  int s = draw(pi_.data());
  out.push_back(s);
  for (int i = 1; i < len; ++i) {
    s = draw(trans.data() + static_cast<size_t>(s) * states);
    out.push_back(s);
  }
  return out;
}

}  // namespace motok
