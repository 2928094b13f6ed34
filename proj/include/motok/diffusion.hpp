#pragma once
// Deterministic diffusion math for the detokenizer side: a discrete
// noise-level grid, the straight-line denoising update in rescaled state
// space, its exact discrete inverse, the weighted denoising training
// objective, and an analytic Gaussian denoiser used as ground truth in
// tests.
//
// State convention. Samplers operate on y_t = x_t / sqrt(alphas[t]), the
// state divided by its cumulative signal scale. In that variable a noisy
// sample is y_t = x0 + sigma_tilde(t) * eps with
//   sigma_tilde(t) = sqrt(1 / alphas[t] - 1),
// and one deterministic (eta = 0) denoising step is the straight line
//   y_{t-1} = y_t + (sigma_tilde(t-1) - sigma_tilde(t)) * eps_hat(y_t, t).
// alphas[0] = 1 pins sigma_tilde(0) = 0, so grid position 0 is a plain
// sample and no rescaling is needed at either endpoint. Running the same
// line upward gives the inversion step; it is solved self-consistently
// (eps_hat evaluated at the arriving state) so one up-step followed by one
// down-step cancels exactly for any denoiser the iteration converges on.
//
// All sampler state is double precision: noise-to-signal ratios reach ~150
// at the top of the default grid and the inverse pair is tested to 1e-6,
// which float storage cannot carry across 50 steps.

#include <cstdint>
#include <string>
#include <vector>

#include "motok/tensor.hpp"

namespace motok {

struct ConditionPack;  // defined in detok.hpp; opaque to the math below

// Cumulative-signal grid alphas[0..num_steps], 1 = alphas[0] > ... > 0,
// plus the parameters of the training-time noise-level draw
// (log sigma ~ N(mean, std^2)) and the characteristic data scale entering
// the loss weight.
struct DiffusionSchedule {
  std::vector<double> alphas;
  double edm_logsigma_mean = 1.0;
  double edm_logsigma_std = 1.2;
  double sigma_data = 0.5;

  // Default: the 50-step linear() grid below.
  DiffusionSchedule();
  explicit DiffusionSchedule(std::vector<double> cumulative_alphas,
                             double logsigma_mean = 1.0, double logsigma_std = 1.2,
                             double sigma_data_scale = 0.5);

  // Variance-accumulation grid from a linearly spaced per-step noise
  // fraction beta (beta_lo..beta_hi over base_steps), subsampled so that
  // grid position t maps to base index t * (base_steps / num_steps) - 1.
  // base_steps must be a multiple of num_steps.
  static DiffusionSchedule linear(int num_steps = 50, int base_steps = 1000,
                                  double beta_lo = 1e-4, double beta_hi = 2e-2);

  int num_steps() const { return static_cast<int>(alphas.size()) - 1; }
  double alpha(int t) const;
  double sigma_tilde(int t) const;  // sqrt(1/alpha(t) - 1)

  // Throws std::invalid_argument when a field breaks the invariants above.
  void validate() const;

  std::string to_json() const;
  static DiffusionSchedule from_json(const std::string& text);
};

// Dense double-precision sampler state with an explicit shape.
struct Latent {
  Shape shape;
  std::vector<double> v;

  Latent() = default;
  explicit Latent(Shape s, double fill = 0.0);

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
};

Latent to_latent(const Tensor& t);
Tensor to_tensor(const Latent& l);
Latent noise_latent(Rng& rng, const Shape& shape, double std);
double max_abs_diff(const Latent& a, const Latent& b);
double l2_dist(const Latent& a, const Latent& b);

// Predicts the clean state from a noisy one at noise level sigma (in the
// rescaled convention above). Implementations must preserve the shape.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Latent denoise(const Latent& x, double sigma, const ConditionPack* cond) const = 0;
};

// Closed-form posterior mean for independently Gaussian data
// x0_i ~ N(mean_i, var_i): given y = x0 + sigma * eps,
//   x0_hat_i = mean_i + var_i / (var_i + sigma^2) * (y_i - mean_i).
// mean/var hold either one broadcast value or one value per element.
// The condition argument is ignored. Serves as the analytic oracle every
// sampler exactness test is scored against.
class LinearGaussianOracle final : public Denoiser {
 public:
  LinearGaussianOracle(std::vector<double> mean, std::vector<double> var);

  Latent denoise(const Latent& x, double sigma, const ConditionPack* cond) const override;

  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& var() const { return var_; }

  std::string to_json() const;
  static LinearGaussianOracle from_json(const std::string& text);

 private:
  std::vector<double> mean_;
  std::vector<double> var_;
};

// Loss weight (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2. Equals
// 8.0 at sigma = sigma_data = 0.5, and is the exact inverse of the squared
// output scale of the preconditioned denoiser, so every noise level
// contributes a unit-order gradient.
double edm_lambda(double sigma, double sigma_data);

// One training-time noise level: exp of a normal draw with the schedule's
// log-sigma moments.
double sample_sigma(const DiffusionSchedule& s, Rng& rng);

// Weighted denoising objective evaluated once:
//   lambda(sigma) * mean((g(x0 + sigma * eps, sigma, cond) - x0)^2).
// Pure measurement path (double precision, no autodiff); the trainable
// counterpart lives with the toy denoiser.
double edm_loss_value(const Denoiser& g, const DiffusionSchedule& s, const Latent& x0,
                      const ConditionPack* cond, Rng& rng);

// Deterministic descent start_step -> 0. start_step = 0 returns the input
// unchanged. Throws std::out_of_range when start_step is outside
// [0, num_steps].
Latent ddim_sample(const Denoiser& g, const DiffusionSchedule& s, Latent x,
                   const ConditionPack* cond, int start_step);

// Deterministic ascent 0 -> delta_t of a clean state. Each up-step solves
//   y_{t+1} = y_t + (sigma_tilde(t+1) - sigma_tilde(t)) * eps_hat(y_{t+1})
// by fixed-point iteration seeded with the explicit estimate
// eps_hat(y_t, t), so the matching down-step undoes it exactly.
// delta_t = 0 is the identity. Throws std::out_of_range when delta_t is
// outside [0, num_steps]. No randomness anywhere: equal inputs give
// bit-equal outputs.
Latent ddim_invert(const Denoiser& g, const DiffusionSchedule& s, Latent x0,
                   const ConditionPack* cond, int delta_t);

}  // namespace motok
