#pragma once
// Optimizers and schedules for the training loops in this repo.

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "motok/tensor.hpp"

namespace motok {

struct AdamWConfig {
  float beta1 = 0.9f;
  float beta2 = 0.99f;
  float eps = 1e-6f;
  float weight_decay = 0.001f;
  float max_grad_norm = 0.f;  // 0 disables clipping
};

// Decoupled weight decay Adam. Moments are keyed by parameter storage, so a
// parameter keeps its state across tapes. A non-finite gradient anywhere
// aborts the step before any state is touched; the error names the parameter.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // Applies one update from the gradients accumulated on `tape`.
  // Returns the global (pre-clip) gradient L2 norm.
  double step(const Tape& tape, const std::vector<Parameter*>& params, float lr);

  int64_t steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  struct Moments {
    std::vector<float> m, v;
  };
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::unordered_map<const void*, Moments> state_;
};

// Plain gradient descent. Same non-finite rejection as AdamW.
double sgd_step(const Tape& tape, const std::vector<Parameter*>& params, float lr);

// Linear warmup to base_lr, then cosine decay to zero over the remainder.
double cosine_lr(int64_t step, int64_t total_steps, double base_lr, int64_t warmup_steps);

}  // namespace motok
