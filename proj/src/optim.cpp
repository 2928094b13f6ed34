#include "motok/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace motok {

namespace {

// Gathers (param, grad) pairs, rejecting non-finite gradients up front so a
// poisoned backward pass cannot corrupt optimizer or parameter state.
std::vector<std::pair<Parameter*, const std::vector<float>*>> collect_grads(
    const Tape& tape, const std::vector<Parameter*>& params) {
  std::vector<std::pair<Parameter*, const std::vector<float>*>> out;
  out.reserve(params.size());
  for (Parameter* p : params) {
    const std::vector<float>* g = tape.grad_for(*p);
    if (!g) continue;
    for (float v : *g) {
      if (!std::isfinite(v)) {
        throw std::runtime_error("optimizer: non-finite gradient for parameter '" + p->name +
                                 "', step rejected");
      }
    }
    out.emplace_back(p, g);
  }
  return out;
}

double global_norm(const std::vector<std::pair<Parameter*, const std::vector<float>*>>& gs) {
  double acc = 0.0;
  for (const auto& [p, g] : gs) {
    (void)p;
    for (float v : *g) acc += static_cast<double>(v) * v;
  }
  return std::sqrt(acc);
}

}  // namespace

double AdamW::step(const Tape& tape, const std::vector<Parameter*>& params, float lr) {
  auto grads = collect_grads(tape, params);
  double norm = global_norm(grads);
  double scale = 1.0;
  if (cfg_.max_grad_norm > 0.f && norm > cfg_.max_grad_norm) {
    scale = cfg_.max_grad_norm / (norm + 1e-12);
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
  for (auto& [p, g] : grads) {
    auto& mom = state_[p->value.data.get()];
    const size_t n = g->size();
    if (mom.m.size() != n) {
      mom.m.assign(n, 0.f);
      mom.v.assign(n, 0.f);
    }
    float* theta = p->value.ptr();
    for (size_t i = 0; i < n; ++i) {
      double gi = static_cast<double>((*g)[i]) * scale;
      double m = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * gi;
      double v = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      mom.m[i] = static_cast<float>(m);
      mom.v[i] = static_cast<float>(v);
      double mhat = m / bc1;
      double vhat = v / bc2;
      double upd = mhat / (std::sqrt(vhat) + cfg_.eps) +
                   static_cast<double>(cfg_.weight_decay) * theta[i];
      theta[i] = static_cast<float>(theta[i] - static_cast<double>(lr) * upd);
    }
  }
  return norm;
}

double sgd_step(const Tape& tape, const std::vector<Parameter*>& params, float lr) {
  auto grads = collect_grads(tape, params);
  double norm = global_norm(grads);
  for (auto& [p, g] : grads) {
    float* theta = p->value.ptr();
    for (size_t i = 0; i < g->size(); ++i) theta[i] -= lr * (*g)[i];
  }
  return norm;
}

double cosine_lr(int64_t step, int64_t total_steps, double base_lr, int64_t warmup_steps) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  int64_t span = total_steps - warmup_steps;
  if (span <= 0) return base_lr;
  double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
  progress = std::min(1.0, std::max(0.0, progress));
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace motok
