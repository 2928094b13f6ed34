#include "motok/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

#include "json.hpp"

namespace motok {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("diffusion: " + msg); }

void check_step_range(int value, int num_steps, const char* what) {
  if (value < 0 || value > num_steps) {
    throw std::out_of_range("diffusion: " + std::string(what) + " " + std::to_string(value) +
                            " outside [0, " + std::to_string(num_steps) + "]");
  }
}

// eps_hat(y, t) = (y - g(y, sigma_tilde(t))) / sigma_tilde(t); zero at
// sigma_tilde = 0 where the state is already clean and the direction is
// undefined.
std::vector<double> eps_hat(const Denoiser& g, const DiffusionSchedule& s, const Latent& y, int t,
                            const ConditionPack* cond) {
  const double st = s.sigma_tilde(t);
  if (st == 0.0) return std::vector<double>(y.v.size(), 0.0);
  Latent x0 = g.denoise(y, st, cond);
  if (x0.shape != y.shape) {
    throw std::runtime_error("diffusion: denoiser changed the state shape");
  }
  std::vector<double> e(y.v.size());
  for (size_t i = 0; i < e.size(); ++i) e[i] = (y.v[i] - x0.v[i]) / st;
  return e;
}

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(x));
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// schedule

DiffusionSchedule::DiffusionSchedule() { *this = linear(); }

DiffusionSchedule::DiffusionSchedule(std::vector<double> cumulative_alphas, double logsigma_mean,
                                     double logsigma_std, double sigma_data_scale)
    : alphas(std::move(cumulative_alphas)),
      edm_logsigma_mean(logsigma_mean),
      edm_logsigma_std(logsigma_std),
      sigma_data(sigma_data_scale) {
  validate();
}

DiffusionSchedule DiffusionSchedule::linear(int num_steps, int base_steps, double beta_lo,
                                            double beta_hi) {
  if (num_steps < 1) fail("num_steps must be positive");
  if (base_steps < num_steps || base_steps % num_steps != 0) {
    fail("base_steps must be a positive multiple of num_steps");
  }
  if (!(beta_lo > 0.0) || !(beta_hi < 1.0) || !(beta_lo <= beta_hi)) {
    fail("per-step noise fractions must satisfy 0 < beta_lo <= beta_hi < 1");
  }
  std::vector<double> base(static_cast<size_t>(base_steps));
  double acc = 1.0;
  for (int i = 0; i < base_steps; ++i) {
    const double frac = base_steps == 1 ? 0.0 : static_cast<double>(i) / (base_steps - 1);
    acc *= 1.0 - (beta_lo + (beta_hi - beta_lo) * frac);
    base[static_cast<size_t>(i)] = acc;
  }
  const int stride = base_steps / num_steps;
  std::vector<double> grid(static_cast<size_t>(num_steps) + 1);
  grid[0] = 1.0;
  for (int t = 1; t <= num_steps; ++t) {
    grid[static_cast<size_t>(t)] = base[static_cast<size_t>(t * stride - 1)];
  }
  return DiffusionSchedule(std::move(grid));
}

double DiffusionSchedule::alpha(int t) const {
  check_step_range(t, num_steps(), "grid position");
  return alphas[static_cast<size_t>(t)];
}

double DiffusionSchedule::sigma_tilde(int t) const { return std::sqrt(1.0 / alpha(t) - 1.0); }

void DiffusionSchedule::validate() const {
  if (alphas.size() < 2) fail("grid needs at least positions 0 and 1");
  if (alphas[0] != 1.0) fail("grid position 0 must hold exactly 1");
  for (size_t i = 1; i < alphas.size(); ++i) {
    if (!(alphas[i] > 0.0) || !(alphas[i] < alphas[i - 1])) {
      fail("cumulative signal fractions must decrease strictly and stay positive");
    }
  }
  if (!(edm_logsigma_std > 0.0)) fail("log-sigma std must be positive");
  if (!(sigma_data > 0.0)) fail("sigma_data must be positive");
  if (!std::isfinite(edm_logsigma_mean)) fail("log-sigma mean must be finite");
}

std::string DiffusionSchedule::to_json() const {
  nlohmann::json j;
  j["schema"] = 1;
  j["alphas"] = alphas;
  j["edm_logsigma_mean"] = edm_logsigma_mean;
  j["edm_logsigma_std"] = edm_logsigma_std;
  j["sigma_data"] = sigma_data;
  return j.dump();
}

DiffusionSchedule DiffusionSchedule::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    fail("schedule JSON does not parse");
  }
  if (!j.is_object() || j.value("schema", 0) != 1 || !j.contains("alphas")) {
    fail("schedule JSON is missing required fields");
  }
  try {
    return DiffusionSchedule(j.at("alphas").get<std::vector<double>>(),
                             j.at("edm_logsigma_mean").get<double>(),
                             j.at("edm_logsigma_std").get<double>(),
                             j.at("sigma_data").get<double>());
  } catch (const nlohmann::json::exception&) {
    fail("schedule JSON has wrongly typed fields");
  }
}

// ---------------------------------------------------------------------------
// latent helpers

Latent::Latent(Shape s, double fill)
    : shape(std::move(s)), v(static_cast<size_t>(shape_numel(shape)), fill) {}

Latent to_latent(const Tensor& t) {
  Latent l;
  l.shape = t.shape;
  l.v.assign(t.data->begin(), t.data->end());
  return l;
}

Tensor to_tensor(const Latent& l) {
  Tensor t(l.shape, 0.f);
  for (size_t i = 0; i < l.v.size(); ++i) (*t.data)[i] = static_cast<float>(l.v[i]);
  return t;
}

Latent noise_latent(Rng& rng, const Shape& shape, double std) {
  Latent l(shape);
  for (double& x : l.v) x = rng.normal(0.0, std);
  return l;
}

double max_abs_diff(const Latent& a, const Latent& b) {
  if (a.shape != b.shape) fail("latent shapes differ");
  double m = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::fabs(a.v[i] - b.v[i]));
  return m;
}

double l2_dist(const Latent& a, const Latent& b) {
  if (a.shape != b.shape) fail("latent shapes differ");
  double acc = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    const double d = a.v[i] - b.v[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// analytic oracle

LinearGaussianOracle::LinearGaussianOracle(std::vector<double> mean, std::vector<double> var)
    : mean_(std::move(mean)), var_(std::move(var)) {
  if (mean_.empty() || var_.empty()) fail("oracle needs at least one mean and one variance");
  for (double s2 : var_) {
    if (!(s2 > 0.0)) fail("oracle variances must be positive");
  }
}

Latent LinearGaussianOracle::denoise(const Latent& x, double sigma, const ConditionPack*) const {
  const size_t n = x.v.size();
  if ((mean_.size() != 1 && mean_.size() != n) || (var_.size() != 1 && var_.size() != n)) {
    throw std::runtime_error("diffusion: oracle parameter length matches neither 1 nor the state");
  }
  Latent out(x.shape);
  const double s2g = sigma * sigma;
  for (size_t i = 0; i < n; ++i) {
    const double mu = mean_[mean_.size() == 1 ? 0 : i];
    const double s2 = var_[var_.size() == 1 ? 0 : i];
    out.v[i] = mu + s2 / (s2 + s2g) * (x.v[i] - mu);
  }
  return out;
}

std::string LinearGaussianOracle::to_json() const {
  nlohmann::json j;
  j["mean"] = mean_;
  j["var"] = var_;
  return j.dump();
}

LinearGaussianOracle LinearGaussianOracle::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    fail("oracle JSON does not parse");
  }
  if (!j.is_object() || !j.contains("mean") || !j.contains("var")) {
    fail("oracle JSON is missing required fields");
  }
  try {
    return LinearGaussianOracle(j.at("mean").get<std::vector<double>>(),
                                j.at("var").get<std::vector<double>>());
  } catch (const nlohmann::json::exception&) {
    fail("oracle JSON has wrongly typed fields");
  }
}

// ---------------------------------------------------------------------------
// objective

double edm_lambda(double sigma, double sigma_data) {
  return (sigma * sigma + sigma_data * sigma_data) / ((sigma * sigma_data) * (sigma * sigma_data));
}

double sample_sigma(const DiffusionSchedule& s, Rng& rng) {
  return std::exp(rng.normal(s.edm_logsigma_mean, s.edm_logsigma_std));
}

double edm_loss_value(const Denoiser& g, const DiffusionSchedule& s, const Latent& x0,
                      const ConditionPack* cond, Rng& rng) {
  const double sigma = sample_sigma(s, rng);
  Latent noisy = x0;
  for (double& x : noisy.v) x += rng.normal(0.0, sigma);
  Latent pred = g.denoise(noisy, sigma, cond);
  if (pred.shape != x0.shape) {
    throw std::runtime_error("diffusion: denoiser changed the state shape");
  }
  double mse = 0.0;
  for (size_t i = 0; i < x0.v.size(); ++i) {
    const double d = pred.v[i] - x0.v[i];
    mse += d * d;
  }
  mse /= static_cast<double>(x0.v.size());
  return edm_lambda(sigma, s.sigma_data) * mse;
}

// ---------------------------------------------------------------------------
// deterministic sampler and its inverse

Latent ddim_sample(const Denoiser& g, const DiffusionSchedule& s, Latent x,
                   const ConditionPack* cond, int start_step) {
  s.validate();
  check_step_range(start_step, s.num_steps(), "start step");
  for (int t = start_step; t >= 1; --t) {
    const std::vector<double> e = eps_hat(g, s, x, t, cond);
    const double d = s.sigma_tilde(t - 1) - s.sigma_tilde(t);
    for (size_t i = 0; i < x.v.size(); ++i) x.v[i] += d * e[i];
  }
  return x;
}

Latent ddim_invert(const Denoiser& g, const DiffusionSchedule& s, Latent x0,
                   const ConditionPack* cond, int delta_t) {
  s.validate();
  check_step_range(delta_t, s.num_steps(), "inversion depth");
  constexpr int kMaxIters = 64;
  constexpr double kTol = 1e-12;
  for (int t = 0; t < delta_t; ++t) {
    const double d = s.sigma_tilde(t + 1) - s.sigma_tilde(t);
    // Explicit estimate first, then iterate the up-step equation to its
    // fixed point so eps_hat is evaluated where the state arrives.
    std::vector<double> e = eps_hat(g, s, x0, t, cond);
    Latent y = x0;
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] += d * e[i];
    for (int it = 0; it < kMaxIters; ++it) {
      e = eps_hat(g, s, y, t + 1, cond);
      double diff = 0.0;
      for (size_t i = 0; i < y.v.size(); ++i) {
        const double next = x0.v[i] + d * e[i];
        diff = std::max(diff, std::fabs(next - y.v[i]));
        y.v[i] = next;
      }
      if (diff <= kTol * std::max(1.0, max_abs(y.v))) break;
    }
    x0 = std::move(y);
  }
  return x0;
}

}  // namespace motok
