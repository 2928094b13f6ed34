#pragma once
// Finite-difference gradient checker. Rebuilds the loss through a
// caller-supplied closure, perturbs parameter storage in place, and compares
// analytic gradients against a difference quotient whose denominator is the
// actually stored step (theta_plus - theta_minus), not the nominal 2h.
//
// Plain central differences carry an O(h^2 f''') truncation term that gets
// large for deep attention stacks (layer norm near small variances bends the
// loss hard), so by default the estimate Richardson-extrapolates two central
// differences at h and h/2, cancelling the h^2 term. f32 storage still makes
// the quotient noisy at roughly eps32 * |L| / h, so the acceptance test is
//   |a - fd| <= rel_tol * max(|a|, |fd|) + abs_floor * max(1, |L|).

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "motok/tensor.hpp"

namespace motok::testing {

struct GradCheckOpts {
  double h = 1e-3;
  double rel_tol = 1.5e-3;
  double abs_floor = 8e-4;
  int max_per_param = 32;  // elements sampled per parameter
  uint64_t seed = 1234;
  bool richardson = true;  // (4 fd(h/2) - fd(h)) / 3, kills the h^2 term
};

struct GradCheckResult {
  int checked = 0;
  std::vector<std::string> failures;
  bool ok() const { return failures.empty(); }
  std::string report() const {
    std::string s;
    for (const auto& f : failures) s += f + "\n";
    return s;
  }
};

inline GradCheckResult fd_gradcheck(const std::function<Tensor(Tape&)>& loss_fn,
                                    const std::vector<Parameter*>& params,
                                    GradCheckOpts opts = {}) {
  GradCheckResult res;

  Tape tape;
  Tensor loss = loss_fn(tape);
  tape.backward(loss);
  const double l0 = loss.at(0);
  const double floor = opts.abs_floor * std::max(1.0, std::fabs(l0));

  auto eval = [&loss_fn]() -> double {
    Tape t(false);
    Tensor l = loss_fn(t);
    return l.at(0);
  };

  Rng pick(opts.seed);
  for (Parameter* p : params) {
    const std::vector<float>* ag = tape.grad_for(*p);
    const int64_t n = p->value.numel();
    std::vector<int64_t> idx;
    if (n <= opts.max_per_param) {
      for (int64_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (int k = 0; k < opts.max_per_param; ++k) {
        idx.push_back(pick.uniform_int(0, static_cast<int>(n - 1)));
      }
    }
    for (int64_t i : idx) {
      const float saved = p->value.at(i);
      auto central = [&](double h) -> double {
        p->value.at(i) = static_cast<float>(saved + h);
        const float theta_plus = p->value.at(i);
        const double lp = eval();
        p->value.at(i) = static_cast<float>(saved - h);
        const float theta_minus = p->value.at(i);
        const double lm = eval();
        p->value.at(i) = saved;
        return (lp - lm) / (static_cast<double>(theta_plus) - theta_minus);
      };
      double fd = central(opts.h);
      if (opts.richardson) fd = (4.0 * central(opts.h / 2) - fd) / 3.0;
      const double a = ag ? (*ag)[static_cast<size_t>(i)] : 0.0;
      ++res.checked;
      const double err = std::fabs(a - fd);
      const double tol = opts.rel_tol * std::max(std::fabs(a), std::fabs(fd)) + floor;
      if (!(err <= tol)) {
        res.failures.push_back(p->name + "[" + std::to_string(i) + "]: analytic " +
                               std::to_string(a) + " vs fd " + std::to_string(fd) + " (err " +
                               std::to_string(err) + ", tol " + std::to_string(tol) + ")");
      }
    }
  }
  return res;
}

}  // namespace motok::testing
