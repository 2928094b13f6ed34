#include "motok/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <thread>

namespace motok {

namespace {

constexpr float kLayerNormEps = 1e-5f;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
}

int64_t rows_of(const Tensor& t) {
  if (t.rank() == 0) fail("rows_of: scalar has no rows");
  return t.numel() / t.dim(t.rank() - 1);
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape s, float fill) : shape(std::move(s)) {
  for (int d : shape) {
    if (d <= 0) fail("tensor: non-positive dim in " + shape_str(shape));
  }
  data = std::make_shared<std::vector<float>>(static_cast<size_t>(shape_numel(shape)), fill);
}

Tensor::Tensor(Shape s, std::vector<float> values) : shape(std::move(s)) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    fail("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  }
  data = std::make_shared<std::vector<float>>(std::move(values));
}

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) fail("uniform_int: empty range");
  uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 1.0 - uniform();  // (0,1]
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

void Rng::fill_normal(Tensor& t, double mean, double std) {
  for (auto& v : *t.data) v = static_cast<float>(normal(mean, std));
}

void Rng::fill_uniform(Tensor& t, double lo, double hi) {
  for (auto& v : *t.data) v = static_cast<float>(uniform(lo, hi));
}

int worker_count() {
  static int cached = [] {
    if (const char* env = std::getenv("MOTOK_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
  }();
  return cached;
}

namespace {

// Splits [0, n) across workers; inline when one worker suffices.
void parallel_rows(int n, int min_chunk, const std::function<void(int, int)>& fn) {
  int workers = std::min(worker_count(), std::max(1, n / std::max(1, min_chunk)));
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  int chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    int lo = w * chunk;
    int hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back(fn, lo, hi);
  }
  for (auto& t : pool) t.join();
}

}  // namespace

void gemm(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * n);
  constexpr int kb_tile = 256;
  parallel_rows(m, 32, [&](int i0, int i1) {
    for (int k0 = 0; k0 < k; k0 += kb_tile) {
      int k1 = std::min(k, k0 + kb_tile);
      for (int i = i0; i < i1; ++i) {
        const float* arow = a + static_cast<int64_t>(i) * k;
        float* crow = c + static_cast<int64_t>(i) * n;
        for (int kk = k0; kk < k1; ++kk) {
          float av = arow[kk];
          const float* brow = b + static_cast<int64_t>(kk) * n;
          for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  });
}

void gemm_nt(int m, int n, int k, const float* a, const float* bt, float* c, bool accumulate) {
  parallel_rows(m, 16, [&](int i0, int i1) {
    for (int i = i0; i < i1; ++i) {
      const float* arow = a + static_cast<int64_t>(i) * k;
      float* crow = c + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const float* brow = bt + static_cast<int64_t>(j) * k;
        float acc[16] = {};
        int kk = 0;
        for (; kk + 16 <= k; kk += 16) {
          for (int l = 0; l < 16; ++l) acc[l] += arow[kk + l] * brow[kk + l];
        }
        float dot = 0.f;
        for (int l = 0; l < 16; ++l) dot += acc[l];
        for (; kk < k; ++kk) dot += arow[kk] * brow[kk];
        if (accumulate) {
          crow[j] += dot;
        } else {
          crow[j] = dot;
        }
      }
    }
  });
}

void gemm_tn(int m, int n, int k, const float* at, const float* b, float* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * n);
  constexpr int kb_tile = 64;
  parallel_rows(m, 32, [&](int i0, int i1) {
    for (int k0 = 0; k0 < k; k0 += kb_tile) {
      int k1 = std::min(k, k0 + kb_tile);
      for (int i = i0; i < i1; ++i) {
        float* crow = c + static_cast<int64_t>(i) * n;
        for (int kk = k0; kk < k1; ++kk) {
          float av = at[static_cast<int64_t>(kk) * m + i];
          const float* brow = b + static_cast<int64_t>(kk) * n;
          for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  });
}

int Tape::fresh_id(int64_t n) {
  sizes_.push_back(n);
  grads_.emplace_back();
  return static_cast<int>(sizes_.size()) - 1;
}

Tensor Tape::make_out(Shape s, bool requires_grad) {
  Tensor t(std::move(s), 0.f);
  t.requires_grad = requires_grad && grad_enabled_;
  t.id = fresh_id(t.numel());
  return t;
}

std::vector<float>& Tape::gbuf(int id) {
  auto& g = grads_[static_cast<size_t>(id)];
  if (g.empty()) g.assign(static_cast<size_t>(sizes_[static_cast<size_t>(id)]), 0.f);
  return g;
}

Tensor Tape::leaf(const Tensor& storage) {
  if (!storage.data) fail("leaf: empty tensor");
  if (storage.requires_grad && grad_enabled_) {
    auto it = bound_params_.find(storage.data.get());
    if (it != bound_params_.end()) {
      Tensor t = storage;
      t.id = it->second;
      return t;
    }
    Tensor t = storage;
    t.id = fresh_id(t.numel());
    bound_params_[storage.data.get()] = t.id;
    return t;
  }
  Tensor t = storage;
  t.requires_grad = false;
  t.id = fresh_id(t.numel());
  return t;
}

Tensor Tape::constant(const Tensor& storage) {
  Tensor t = storage;
  t.requires_grad = false;
  t.id = fresh_id(t.numel());
  return t;
}

bool Tape::has_grad(const Tensor& t) const {
  return t.id >= 0 && t.id < static_cast<int>(grads_.size()) &&
         !grads_[static_cast<size_t>(t.id)].empty();
}

const std::vector<float>& Tape::grad(const Tensor& t) const {
  static const std::vector<float> empty;
  if (!has_grad(t)) return empty;
  return grads_[static_cast<size_t>(t.id)];
}

const std::vector<float>* Tape::grad_for(const Parameter& p) const {
  auto it = bound_params_.find(p.value.data.get());
  if (it == bound_params_.end()) return nullptr;
  const auto& g = grads_[static_cast<size_t>(it->second)];
  return g.empty() ? nullptr : &g;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) fail("backward: loss must be scalar, got " + shape_str(loss.shape));
  if (loss.id < 0 || loss.id >= static_cast<int>(sizes_.size())) {
    fail("backward: loss tensor is not on this tape");
  }
  gbuf(loss.id)[0] = 1.f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
}

// ---------------------------------------------------------------------------
// elementwise

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = make_out(a.shape, a.requires_grad || b.requires_grad);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  if (out.requires_grad) {
    record([this, a, b, out] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      if (a.requires_grad) {
        auto& ga = gbuf(a.id);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad) {
        auto& gb = gbuf(b.id);
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = make_out(a.shape, a.requires_grad || b.requires_grad);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  if (out.requires_grad) {
    record([this, a, b, out] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      if (a.requires_grad) {
        auto& ga = gbuf(a.id);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad) {
        auto& gb = gbuf(b.id);
        for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = make_out(a.shape, a.requires_grad || b.requires_grad);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  if (out.requires_grad) {
    record([this, a, b, out] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      if (a.requires_grad) {
        auto& ga = gbuf(a.id);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b.at(static_cast<int64_t>(i));
      }
      if (b.requires_grad) {
        auto& gb = gbuf(b.id);
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a.at(static_cast<int64_t>(i));
      }
    });
  }
  return out;
}

Tensor Tape::scale(const Tensor& a, float s) {
  Tensor out = make_out(a.shape, a.requires_grad);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) * s;
  if (out.requires_grad) {
    record([this, a, out, s] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& ga = gbuf(a.id);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
    });
  }
  return out;
}

Tensor Tape::add_scalar(const Tensor& a, float s) {
  Tensor out = make_out(a.shape, a.requires_grad);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) + s;
  if (out.requires_grad) {
    record([this, a, out] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& ga = gbuf(a.id);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

Tensor Tape::add_rowwise(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.dim(x.rank() - 1) != bias.dim(0)) {
    fail("add_rowwise: " + shape_str(x.shape) + " with bias " + shape_str(bias.shape));
  }
  const int d = bias.dim(0);
  const int64_t rows = rows_of(x);
  Tensor out = make_out(x.shape, x.requires_grad || bias.requires_grad);
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x.ptr() + r * d;
    float* or_ = out.ptr() + r * d;
    for (int j = 0; j < d; ++j) or_[j] = xr[j] + bias.at(j);
  }
  if (out.requires_grad) {
    record([this, x, bias, out, rows, d] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      if (x.requires_grad) {
        auto& gx = gbuf(x.id);
        for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (bias.requires_grad) {
        auto& gb = gbuf(bias.id);
        for (int64_t r = 0; r < rows; ++r) {
          const float* gr = go.data() + r * d;
          for (int j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += gr[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul / linear

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail("matmul: shape mismatch " + shape_str(a.shape) + " x " + shape_str(b.shape));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_out({m, n}, a.requires_grad || b.requires_grad);
  gemm(m, n, k, a.ptr(), b.ptr(), out.ptr(), false);
  if (out.requires_grad) {
    record([this, a, b, out, m, k, n] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      if (a.requires_grad) {
        auto& ga = gbuf(a.id);
        gemm_nt(m, k, n, go.data(), b.ptr(), ga.data(), true);
      }
      if (b.requires_grad) {
        auto& gb = gbuf(b.id);
        gemm_tn(k, n, m, a.ptr(), go.data(), gb.data(), true);
      }
    });
  }
  return out;
}

Tensor Tape::linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(x.rank() - 1) != w.dim(0)) {
    fail("linear: input " + shape_str(x.shape) + " with weight " + shape_str(w.shape));
  }
  const int k = w.dim(0), n = w.dim(1);
  const int64_t rows = rows_of(x);
  Shape out_shape = x.shape;
  out_shape.back() = n;
  bool need_bias = bias.data && bias.numel() > 0;
  if (need_bias && (bias.rank() != 1 || bias.dim(0) != n)) {
    fail("linear: bias " + shape_str(bias.shape) + " for weight " + shape_str(w.shape));
  }
  Tensor out = make_out(out_shape,
                        x.requires_grad || w.requires_grad || (need_bias && bias.requires_grad));
  gemm(static_cast<int>(rows), n, k, x.ptr(), w.ptr(), out.ptr(), false);
  if (need_bias) {
    for (int64_t r = 0; r < rows; ++r) {
      float* orow = out.ptr() + r * n;
      for (int j = 0; j < n; ++j) orow[j] += bias.at(j);
    }
  }
  if (out.requires_grad) {
    record([this, x, w, bias, out, rows, k, n, need_bias] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      if (x.requires_grad) {
        auto& gx = gbuf(x.id);
        gemm_nt(static_cast<int>(rows), k, n, go.data(), w.ptr(), gx.data(), true);
      }
      if (w.requires_grad) {
        auto& gw = gbuf(w.id);
        gemm_tn(k, n, static_cast<int>(rows), x.ptr(), go.data(), gw.data(), true);
      }
      if (need_bias && bias.requires_grad) {
        auto& gb = gbuf(bias.id);
        for (int64_t r = 0; r < rows; ++r) {
          const float* gr = go.data() + r * n;
          for (int j = 0; j < n; ++j) gb[static_cast<size_t>(j)] += gr[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations

Tensor Tape::gelu(const Tensor& a) {
  Tensor out = make_out(a.shape, a.requires_grad);
  const int64_t n = out.numel();
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (int64_t i = 0; i < n; ++i) {
    double x = a.at(i);
    out.at(i) = static_cast<float>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  if (out.requires_grad) {
    record([this, a, out, n] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& ga = gbuf(a.id);
      constexpr double inv_sqrt2pi = 0.39894228040143267794;
      for (int64_t i = 0; i < n; ++i) {
        double x = a.at(i);
        double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
                   x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * static_cast<float>(d);
      }
    });
  }
  return out;
}

Tensor Tape::silu(const Tensor& a) {
  Tensor out = make_out(a.shape, a.requires_grad);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    double x = a.at(i);
    out.at(i) = static_cast<float>(x / (1.0 + std::exp(-x)));
  }
  if (out.requires_grad) {
    record([this, a, out, n] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& ga = gbuf(a.id);
      for (int64_t i = 0; i < n; ++i) {
        double x = a.at(i);
        double s = 1.0 / (1.0 + std::exp(-x));
        double d = s * (1.0 + x * (1.0 - s));
        ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * static_cast<float>(d);
      }
    });
  }
  return out;
}

Tensor Tape::tanh_op(const Tensor& a) {
  Tensor out = make_out(a.shape, a.requires_grad);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = std::tanh(a.at(i));
  if (out.requires_grad) {
    record([this, a, out, n] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& ga = gbuf(a.id);
      for (int64_t i = 0; i < n; ++i) {
        float y = out.at(i);
        ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * (1.f - y * y);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer norm / softmax

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() < 1) fail("layer_norm: scalar input");
  const int d = x.dim(x.rank() - 1);
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
    fail("layer_norm: affine params " + shape_str(gamma.shape) + "/" + shape_str(beta.shape) +
         " for input " + shape_str(x.shape));
  }
  const int64_t rows = rows_of(x);
  Tensor out =
      make_out(x.shape, x.requires_grad || gamma.requires_grad || beta.requires_grad);
  auto mean = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
  auto rstd = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x.ptr() + r * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = xr[j] - mu;
      var += c * c;
    }
    var /= d;
    float rs = static_cast<float>(1.0 / std::sqrt(var + kLayerNormEps));
    (*mean)[static_cast<size_t>(r)] = static_cast<float>(mu);
    (*rstd)[static_cast<size_t>(r)] = rs;
    float* orow = out.ptr() + r * d;
    for (int j = 0; j < d; ++j) {
      float xh = (xr[j] - static_cast<float>(mu)) * rs;
      orow[j] = xh * gamma.at(j) + beta.at(j);
    }
  }
  if (out.requires_grad) {
    record([this, x, gamma, beta, out, mean, rstd, rows, d] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      for (int64_t r = 0; r < rows; ++r) {
        const float* xr = x.ptr() + r * d;
        const float* gr = go.data() + r * d;
        float mu = (*mean)[static_cast<size_t>(r)];
        float rs = (*rstd)[static_cast<size_t>(r)];
        if (gamma.requires_grad || beta.requires_grad) {
          auto* gg = gamma.requires_grad ? &gbuf(gamma.id) : nullptr;
          auto* gb = beta.requires_grad ? &gbuf(beta.id) : nullptr;
          for (int j = 0; j < d; ++j) {
            float xh = (xr[j] - mu) * rs;
            if (gg) (*gg)[static_cast<size_t>(j)] += gr[j] * xh;
            if (gb) (*gb)[static_cast<size_t>(j)] += gr[j];
          }
        }
        if (x.requires_grad) {
          auto& gx = gbuf(x.id);
          double s1 = 0.0, s2 = 0.0;
          for (int j = 0; j < d; ++j) {
            float xh = (xr[j] - mu) * rs;
            double gy = static_cast<double>(gr[j]) * gamma.at(j);
            s1 += gy;
            s2 += gy * xh;
          }
          s1 /= d;
          s2 /= d;
          float* gxr = gx.data() + r * d;
          for (int j = 0; j < d; ++j) {
            float xh = (xr[j] - mu) * rs;
            double gy = static_cast<double>(gr[j]) * gamma.at(j);
            gxr[j] += static_cast<float>(rs * (gy - s1 - xh * s2));
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::softmax_rows(const Tensor& x) {
  if (x.rank() < 1) fail("softmax_rows: scalar input");
  const int d = x.dim(x.rank() - 1);
  const int64_t rows = rows_of(x);
  Tensor out = make_out(x.shape, x.requires_grad);
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x.ptr() + r * d;
    float* orow = out.ptr() + r * d;
    float mx = xr[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (int j = 0; j < d; ++j) {
      double e = std::exp(static_cast<double>(xr[j]) - mx);
      orow[j] = static_cast<float>(e);
      z += e;
    }
    float inv = static_cast<float>(1.0 / z);
    for (int j = 0; j < d; ++j) orow[j] *= inv;
  }
  if (out.requires_grad) {
    record([this, x, out, rows, d] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& gx = gbuf(x.id);
      for (int64_t r = 0; r < rows; ++r) {
        const float* pr = out.ptr() + r * d;
        const float* gr = go.data() + r * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += static_cast<double>(gr[j]) * pr[j];
        float* gxr = gx.data() + r * d;
        for (int j = 0; j < d; ++j) {
          gxr[j] += pr[j] * (gr[j] - static_cast<float>(dot));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// attention

namespace {

void pack_head(const float* src, int64_t b, int n, int d_model, int head, int dh, float* dst) {
  const float* base = src + b * static_cast<int64_t>(n) * d_model + head * dh;
  for (int i = 0; i < n; ++i) {
    std::memcpy(dst + static_cast<int64_t>(i) * dh, base + static_cast<int64_t>(i) * d_model,
                sizeof(float) * static_cast<size_t>(dh));
  }
}

void scatter_head_add(float* dst, int64_t b, int n, int d_model, int head, int dh,
                      const float* src) {
  float* base = dst + b * static_cast<int64_t>(n) * d_model + head * dh;
  for (int i = 0; i < n; ++i) {
    float* row = base + static_cast<int64_t>(i) * d_model;
    const float* s = src + static_cast<int64_t>(i) * dh;
    for (int j = 0; j < dh; ++j) row[j] += s[j];
  }
}

}  // namespace

Tensor Tape::attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                       bool causal) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    fail("attention: expected rank-3 inputs, got " + shape_str(q.shape) + ", " +
         shape_str(k.shape) + ", " + shape_str(v.shape));
  }
  const int b = q.dim(0), nq = q.dim(1), d = q.dim(2);
  const int nk = k.dim(1);
  if (k.dim(0) != b || v.dim(0) != b || v.dim(1) != nk || k.dim(2) != d || v.dim(2) != d) {
    fail("attention: mismatched q " + shape_str(q.shape) + ", k " + shape_str(k.shape) +
         ", v " + shape_str(v.shape));
  }
  if (heads <= 0 || d % heads != 0) {
    fail("attention: " + std::to_string(heads) + " heads do not divide model dim " +
         std::to_string(d));
  }
  if (causal && nq != nk) fail("attention: causal requires square attention");
  const int dh = d / heads;
  const float scale = 1.f / std::sqrt(static_cast<float>(dh));
  Tensor out = make_out(q.shape, q.requires_grad || k.requires_grad || v.requires_grad);
  const bool keep_probs = out.requires_grad;
  auto probs = keep_probs ? std::make_shared<std::vector<float>>(
                                static_cast<size_t>(b) * heads * nq * nk)
                          : nullptr;
  std::vector<float> qb(static_cast<size_t>(nq) * dh), kb(static_cast<size_t>(nk) * dh),
      vb(static_cast<size_t>(nk) * dh), sb(static_cast<size_t>(nq) * nk),
      ob(static_cast<size_t>(nq) * dh);
  for (int bi = 0; bi < b; ++bi) {
    for (int h = 0; h < heads; ++h) {
      pack_head(q.ptr(), bi, nq, d, h, dh, qb.data());
      pack_head(k.ptr(), bi, nk, d, h, dh, kb.data());
      pack_head(v.ptr(), bi, nk, d, h, dh, vb.data());
      for (auto& x : qb) x *= scale;
      gemm_nt(nq, nk, dh, qb.data(), kb.data(), sb.data(), false);
      for (int i = 0; i < nq; ++i) {
        float* srow = sb.data() + static_cast<int64_t>(i) * nk;
        int lim = causal ? i + 1 : nk;
        float mx = srow[0];
        for (int j = 1; j < lim; ++j) mx = std::max(mx, srow[j]);
        double z = 0.0;
        for (int j = 0; j < lim; ++j) {
          double e = std::exp(static_cast<double>(srow[j]) - mx);
          srow[j] = static_cast<float>(e);
          z += e;
        }
        float inv = static_cast<float>(1.0 / z);
        for (int j = 0; j < lim; ++j) srow[j] *= inv;
        for (int j = lim; j < nk; ++j) srow[j] = 0.f;
      }
      gemm(nq, dh, nk, sb.data(), vb.data(), ob.data(), false);
      float* obase = out.ptr() + (static_cast<int64_t>(bi) * nq) * d + h * dh;
      for (int i = 0; i < nq; ++i) {
        std::memcpy(obase + static_cast<int64_t>(i) * d, ob.data() + static_cast<int64_t>(i) * dh,
                    sizeof(float) * static_cast<size_t>(dh));
      }
      if (keep_probs) {
        std::memcpy(probs->data() +
                        ((static_cast<int64_t>(bi) * heads + h) * nq) * nk,
                    sb.data(), sizeof(float) * sb.size());
      }
    }
  }
  if (out.requires_grad) {
    record([this, q, k, v, out, probs, b, nq, nk, d, heads, dh, scale] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto* gq = q.requires_grad ? &gbuf(q.id) : nullptr;
      auto* gk = k.requires_grad ? &gbuf(k.id) : nullptr;
      auto* gv = v.requires_grad ? &gbuf(v.id) : nullptr;
      std::vector<float> qb(static_cast<size_t>(nq) * dh), kb(static_cast<size_t>(nk) * dh),
          vb(static_cast<size_t>(nk) * dh), dob(static_cast<size_t>(nq) * dh),
          dp(static_cast<size_t>(nq) * nk), ds(static_cast<size_t>(nq) * nk),
          dqb(static_cast<size_t>(nq) * dh), dkb(static_cast<size_t>(nk) * dh),
          dvb(static_cast<size_t>(nk) * dh);
      for (int bi = 0; bi < b; ++bi) {
        for (int h = 0; h < heads; ++h) {
          const float* p = probs->data() + ((static_cast<int64_t>(bi) * heads + h) * nq) * nk;
          pack_head(go.data(), bi, nq, d, h, dh, dob.data());
          pack_head(k.ptr(), bi, nk, d, h, dh, kb.data());
          pack_head(v.ptr(), bi, nk, d, h, dh, vb.data());
          pack_head(q.ptr(), bi, nq, d, h, dh, qb.data());
          if (gv) gemm_tn(nk, dh, nq, p, dob.data(), dvb.data(), false);
          gemm_nt(nq, nk, dh, dob.data(), vb.data(), dp.data(), false);
          for (int i = 0; i < nq; ++i) {
            const float* pr = p + static_cast<int64_t>(i) * nk;
            const float* dpr = dp.data() + static_cast<int64_t>(i) * nk;
            double dot = 0.0;
            for (int j = 0; j < nk; ++j) dot += static_cast<double>(dpr[j]) * pr[j];
            float* dsr = ds.data() + static_cast<int64_t>(i) * nk;
            for (int j = 0; j < nk; ++j) {
              dsr[j] = pr[j] * (dpr[j] - static_cast<float>(dot));
            }
          }
          if (gq) {
            gemm(nq, dh, nk, ds.data(), kb.data(), dqb.data(), false);
            for (auto& x : dqb) x *= scale;
            scatter_head_add(gq->data(), bi, nq, d, h, dh, dqb.data());
          }
          if (gk) {
            for (auto& x : qb) x *= scale;
            gemm_tn(nk, dh, nq, ds.data(), qb.data(), dkb.data(), false);
            scatter_head_add(gk->data(), bi, nk, d, h, dh, dkb.data());
          }
          if (gv) scatter_head_add(gv->data(), bi, nk, d, h, dh, dvb.data());
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// embedding / losses

Tensor Tape::embedding(const std::vector<int>& ids, const Tensor& table) {
  if (table.rank() != 2) fail("embedding: table must be [V,D], got " + shape_str(table.shape));
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= v) {
      fail("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(v));
    }
  }
  const int n = static_cast<int>(ids.size());
  Tensor out = make_out({n, d}, table.requires_grad);
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.ptr() + static_cast<int64_t>(i) * d,
                table.ptr() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d,
                sizeof(float) * static_cast<size_t>(d));
  }
  if (out.requires_grad) {
    record([this, ids, table, out, n, d] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& gt = gbuf(table.id);
      for (int i = 0; i < n; ++i) {
        float* row = gt.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d;
        const float* g = go.data() + static_cast<int64_t>(i) * d;
        for (int j = 0; j < d; ++j) row[j] += g[j];
      }
    });
  }
  return out;
}

Tensor Tape::cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets,
                                int ignore_index) {
  if (logits.rank() != 2) fail("cross_entropy: logits must be [N,V], got " + shape_str(logits.shape));
  const int n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != n) {
    fail("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
         std::to_string(n) + " rows");
  }
  auto lse = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  int64_t counted = 0;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    int y = targets[static_cast<size_t>(i)];
    if (y == ignore_index) continue;
    if (y < 0 || y >= v) {
      fail("cross_entropy: target " + std::to_string(y) + " outside vocab " + std::to_string(v));
    }
    const float* row = logits.ptr() + static_cast<int64_t>(i) * v;
    float mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    double l = mx + std::log(z);
    (*lse)[static_cast<size_t>(i)] = l;
    total += l - row[y];
    ++counted;
  }
  if (counted == 0) fail("cross_entropy: every target ignored");
  Tensor out = make_out({1}, logits.requires_grad);
  out.at(0) = static_cast<float>(total / static_cast<double>(counted));
  if (out.requires_grad) {
    record([this, logits, targets, out, lse, n, v, counted, ignore_index] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const float gl = grads_[static_cast<size_t>(out.id)][0];
      auto& gx = gbuf(logits.id);
      const float inv = gl / static_cast<float>(counted);
      for (int i = 0; i < n; ++i) {
        int y = targets[static_cast<size_t>(i)];
        if (y == ignore_index) continue;
        const float* row = logits.ptr() + static_cast<int64_t>(i) * v;
        float* g = gx.data() + static_cast<int64_t>(i) * v;
        double l = (*lse)[static_cast<size_t>(i)];
        for (int j = 0; j < v; ++j) {
          double p = std::exp(static_cast<double>(row[j]) - l);
          g[j] += inv * static_cast<float>(p - (j == y ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor Tape::mse_mean(const Tensor& a, const Tensor& b) {
  check_same_shape("mse_mean", a, b);
  const int64_t n = a.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double d = static_cast<double>(a.at(i)) - b.at(i);
    acc += d * d;
  }
  Tensor out = make_out({1}, a.requires_grad || b.requires_grad);
  out.at(0) = static_cast<float>(acc / static_cast<double>(n));
  if (out.requires_grad) {
    record([this, a, b, out, n] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const float gl = grads_[static_cast<size_t>(out.id)][0];
      const float c = 2.f * gl / static_cast<float>(n);
      if (a.requires_grad) {
        auto& ga = gbuf(a.id);
        for (int64_t i = 0; i < n; ++i) {
          ga[static_cast<size_t>(i)] += c * (a.at(i) - b.at(i));
        }
      }
      if (b.requires_grad) {
        auto& gb = gbuf(b.id);
        for (int64_t i = 0; i < n; ++i) {
          gb[static_cast<size_t>(i)] += c * (b.at(i) - a.at(i));
        }
      }
    });
  }
  return out;
}

Tensor Tape::sum_all(const Tensor& a) {
  const int64_t n = a.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += a.at(i);
  Tensor out = make_out({1}, a.requires_grad);
  out.at(0) = static_cast<float>(acc);
  if (out.requires_grad) {
    record([this, a, out, n] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const float gl = grads_[static_cast<size_t>(out.id)][0];
      auto& ga = gbuf(a.id);
      for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += gl;
    });
  }
  return out;
}

Tensor Tape::mean_all(const Tensor& a) {
  Tensor s = sum_all(a);
  return scale(s, 1.f / static_cast<float>(a.numel()));
}

Tensor Tape::straight_through(const Tensor& values, const Tensor& grad_carrier) {
  check_same_shape("straight_through", values, grad_carrier);
  Tensor out = make_out(values.shape, grad_carrier.requires_grad);
  std::memcpy(out.ptr(), values.ptr(), sizeof(float) * static_cast<size_t>(values.numel()));
  if (out.requires_grad) {
    record([this, grad_carrier, out] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& gc = gbuf(grad_carrier.id);
      for (size_t i = 0; i < go.size(); ++i) gc[i] += go[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

Tensor Tape::reshape(const Tensor& a, Shape s) {
  if (shape_numel(s) != a.numel()) {
    fail("reshape: " + shape_str(a.shape) + " to " + shape_str(s));
  }
  Tensor out = make_out(std::move(s), a.requires_grad);
  std::memcpy(out.ptr(), a.ptr(), sizeof(float) * static_cast<size_t>(a.numel()));
  if (out.requires_grad) {
    record([this, a, out] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& ga = gbuf(a.id);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

namespace {

// idx math shared by permute forward/backward
struct PermuteMap {
  Shape in_shape, out_shape;
  std::vector<int> axes;
  std::vector<int64_t> in_strides, out_strides;
};

PermuteMap build_permute(const Shape& in_shape, const std::vector<int>& axes) {
  const int r = static_cast<int>(in_shape.size());
  if (static_cast<int>(axes.size()) != r) fail("permute: axes rank mismatch");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int a : axes) {
    if (a < 0 || a >= r || seen[static_cast<size_t>(a)]) fail("permute: invalid axes");
    seen[static_cast<size_t>(a)] = true;
  }
  PermuteMap m;
  m.in_shape = in_shape;
  m.axes = axes;
  m.out_shape.resize(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) m.out_shape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(axes[static_cast<size_t>(i)])];
  m.in_strides.assign(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) {
    m.in_strides[static_cast<size_t>(i)] =
        m.in_strides[static_cast<size_t>(i + 1)] * in_shape[static_cast<size_t>(i + 1)];
  }
  m.out_strides.assign(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) {
    m.out_strides[static_cast<size_t>(i)] =
        m.out_strides[static_cast<size_t>(i + 1)] * m.out_shape[static_cast<size_t>(i + 1)];
  }
  return m;
}

template <typename Fn>
void for_each_permuted(const PermuteMap& m, Fn&& fn) {
  const int r = static_cast<int>(m.in_shape.size());
  const int64_t n = shape_numel(m.out_shape);
  std::vector<int64_t> coord(static_cast<size_t>(r), 0);
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, src = 0;
    for (int i = 0; i < r; ++i) {
      int64_t c = rem / m.out_strides[static_cast<size_t>(i)];
      rem -= c * m.out_strides[static_cast<size_t>(i)];
      src += c * m.in_strides[static_cast<size_t>(m.axes[static_cast<size_t>(i)])];
    }
    fn(o, src);
  }
}

}  // namespace

Tensor Tape::permute(const Tensor& a, const std::vector<int>& axes) {
  PermuteMap m = build_permute(a.shape, axes);
  Tensor out = make_out(m.out_shape, a.requires_grad);
  for_each_permuted(m, [&](int64_t o, int64_t src) { out.at(o) = a.at(src); });
  if (out.requires_grad) {
    record([this, a, out, m] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& ga = gbuf(a.id);
      for_each_permuted(m, [&](int64_t o, int64_t src) {
        ga[static_cast<size_t>(src)] += go[static_cast<size_t>(o)];
      });
    });
  }
  return out;
}

Tensor Tape::concat_last(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() < 1) {
    fail("concat_last: rank mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  for (int i = 0; i + 1 < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      fail("concat_last: leading dims differ, " + shape_str(a.shape) + " vs " +
           shape_str(b.shape));
    }
  }
  const int da = a.dim(a.rank() - 1), db = b.dim(b.rank() - 1);
  Shape s = a.shape;
  s.back() = da + db;
  const int64_t rows = rows_of(a);
  Tensor out = make_out(s, a.requires_grad || b.requires_grad);
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(out.ptr() + r * (da + db), a.ptr() + r * da, sizeof(float) * static_cast<size_t>(da));
    std::memcpy(out.ptr() + r * (da + db) + da, b.ptr() + r * db,
                sizeof(float) * static_cast<size_t>(db));
  }
  if (out.requires_grad) {
    record([this, a, b, out, rows, da, db] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      if (a.requires_grad) {
        auto& ga = gbuf(a.id);
        for (int64_t r = 0; r < rows; ++r) {
          const float* g = go.data() + r * (da + db);
          float* dst = ga.data() + r * da;
          for (int j = 0; j < da; ++j) dst[j] += g[j];
        }
      }
      if (b.requires_grad) {
        auto& gb = gbuf(b.id);
        for (int64_t r = 0; r < rows; ++r) {
          const float* g = go.data() + r * (da + db) + da;
          float* dst = gb.data() + r * db;
          for (int j = 0; j < db; ++j) dst[j] += g[j];
        }
      }
    });
  }
  return out;
}

Tensor Tape::slice_last(const Tensor& a, int start, int len) {
  const int d = a.dim(a.rank() - 1);
  if (start < 0 || len <= 0 || start + len > d) {
    fail("slice_last: [" + std::to_string(start) + "," + std::to_string(start + len) +
         ") of last dim " + std::to_string(d));
  }
  Shape s = a.shape;
  s.back() = len;
  const int64_t rows = rows_of(a);
  Tensor out = make_out(s, a.requires_grad);
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(out.ptr() + r * len, a.ptr() + r * d + start,
                sizeof(float) * static_cast<size_t>(len));
  }
  if (out.requires_grad) {
    record([this, a, out, rows, d, start, len] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& ga = gbuf(a.id);
      for (int64_t r = 0; r < rows; ++r) {
        const float* g = go.data() + r * len;
        float* dst = ga.data() + r * d + start;
        for (int j = 0; j < len; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv / pooling

Tensor Tape::conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 4 || w.rank() != 4) {
    fail("conv2d: x " + shape_str(x.shape) + ", w " + shape_str(w.shape));
  }
  const int b = x.dim(0), hh = x.dim(1), ww = x.dim(2), ci = x.dim(3);
  const int kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
  if (w.dim(2) != ci) {
    fail("conv2d: weight channels " + shape_str(w.shape) + " vs input " + shape_str(x.shape));
  }
  if (kh % 2 == 0 || kw % 2 == 0) fail("conv2d: even kernel dims unsupported");
  const int ph = kh / 2, pw = kw / 2;
  bool need_bias = bias.data && bias.numel() > 0;
  if (need_bias && (bias.rank() != 1 || bias.dim(0) != co)) {
    fail("conv2d: bias " + shape_str(bias.shape) + " for " + std::to_string(co) + " channels");
  }
  Tensor out = make_out({b, hh, ww, co},
                        x.requires_grad || w.requires_grad || (need_bias && bias.requires_grad));
  for (int bi = 0; bi < b; ++bi) {
    for (int y = 0; y < hh; ++y) {
      for (int xx = 0; xx < ww; ++xx) {
        float* orow = out.ptr() + (((static_cast<int64_t>(bi) * hh + y) * ww) + xx) * co;
        if (need_bias) {
          for (int c = 0; c < co; ++c) orow[c] = bias.at(c);
        }
        for (int ky = 0; ky < kh; ++ky) {
          int sy = y + ky - ph;
          if (sy < 0 || sy >= hh) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int sx = xx + kx - pw;
            if (sx < 0 || sx >= ww) continue;
            const float* xrow = x.ptr() + (((static_cast<int64_t>(bi) * hh + sy) * ww) + sx) * ci;
            const float* wbase = w.ptr() + ((static_cast<int64_t>(ky) * kw + kx) * ci) * co;
            for (int c = 0; c < ci; ++c) {
              float a = xrow[c];
              const float* wrow = wbase + static_cast<int64_t>(c) * co;
              for (int o = 0; o < co; ++o) orow[o] += a * wrow[o];
            }
          }
        }
      }
    }
  }
  if (out.requires_grad) {
    record([this, x, w, bias, out, b, hh, ww, ci, kh, kw, co, ph, pw, need_bias] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto* gx = x.requires_grad ? &gbuf(x.id) : nullptr;
      auto* gw = w.requires_grad ? &gbuf(w.id) : nullptr;
      auto* gb = (need_bias && bias.requires_grad) ? &gbuf(bias.id) : nullptr;
      for (int bi = 0; bi < b; ++bi) {
        for (int y = 0; y < hh; ++y) {
          for (int xx = 0; xx < ww; ++xx) {
            const float* grow = go.data() + (((static_cast<int64_t>(bi) * hh + y) * ww) + xx) * co;
            if (gb) {
              for (int o = 0; o < co; ++o) (*gb)[static_cast<size_t>(o)] += grow[o];
            }
            for (int ky = 0; ky < kh; ++ky) {
              int sy = y + ky - ph;
              if (sy < 0 || sy >= hh) continue;
              for (int kx = 0; kx < kw; ++kx) {
                int sx = xx + kx - pw;
                if (sx < 0 || sx >= ww) continue;
                const int64_t xoff = (((static_cast<int64_t>(bi) * hh + sy) * ww) + sx) * ci;
                const int64_t woff = ((static_cast<int64_t>(ky) * kw + kx) * ci) * co;
                if (gx) {
                  float* gxrow = gx->data() + xoff;
                  for (int c = 0; c < ci; ++c) {
                    const float* wrow = w.ptr() + woff + static_cast<int64_t>(c) * co;
                    float acc = 0.f;
                    for (int o = 0; o < co; ++o) acc += grow[o] * wrow[o];
                    gxrow[c] += acc;
                  }
                }
                if (gw) {
                  const float* xrow = x.ptr() + xoff;
                  for (int c = 0; c < ci; ++c) {
                    float a = xrow[c];
                    float* gwrow = gw->data() + woff + static_cast<int64_t>(c) * co;
                    for (int o = 0; o < co; ++o) gwrow[o] += a * grow[o];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::pool_mean(const Tensor& x, int ft, int fh, int fw) {
  if (x.rank() != 4) fail("pool_mean: expected [T,H,W,D], got " + shape_str(x.shape));
  const int t = x.dim(0), h = x.dim(1), w = x.dim(2), d = x.dim(3);
  if (ft <= 0 || fh <= 0 || fw <= 0 || t % ft || h % fh || w % fw) {
    fail("pool_mean: factors (" + std::to_string(ft) + "," + std::to_string(fh) + "," +
         std::to_string(fw) + ") do not divide " + shape_str(x.shape));
  }
  const int to = t / ft, ho = h / fh, wo = w / fw;
  const float inv = 1.f / static_cast<float>(ft * fh * fw);
  Tensor out = make_out({to, ho, wo, d}, x.requires_grad);
  for (int ti = 0; ti < to; ++ti) {
    for (int yi = 0; yi < ho; ++yi) {
      for (int xi = 0; xi < wo; ++xi) {
        float* orow = out.ptr() + (((static_cast<int64_t>(ti) * ho + yi) * wo) + xi) * d;
        for (int dt = 0; dt < ft; ++dt) {
          for (int dy = 0; dy < fh; ++dy) {
            for (int dx = 0; dx < fw; ++dx) {
              const float* xrow =
                  x.ptr() + (((static_cast<int64_t>(ti * ft + dt) * h + (yi * fh + dy)) * w) +
                             (xi * fw + dx)) *
                                d;
              for (int c = 0; c < d; ++c) orow[c] += xrow[c];
            }
          }
        }
        for (int c = 0; c < d; ++c) orow[c] *= inv;
      }
    }
  }
  if (out.requires_grad) {
    record([this, x, out, t, h, w, d, ft, fh, fw, to, ho, wo, inv] {
      (void)t;
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& gx = gbuf(x.id);
      for (int ti = 0; ti < to; ++ti) {
        for (int yi = 0; yi < ho; ++yi) {
          for (int xi = 0; xi < wo; ++xi) {
            const float* grow = go.data() + (((static_cast<int64_t>(ti) * ho + yi) * wo) + xi) * d;
            for (int dt = 0; dt < ft; ++dt) {
              for (int dy = 0; dy < fh; ++dy) {
                for (int dx = 0; dx < fw; ++dx) {
                  float* gxr =
                      gx.data() + (((static_cast<int64_t>(ti * ft + dt) * h + (yi * fh + dy)) * w) +
                                   (xi * fw + dx)) *
                                      d;
                  for (int c = 0; c < d; ++c) gxr[c] += grow[c] * inv;
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::repeat_nn(const Tensor& x, int ft, int fh, int fw) {
  if (x.rank() != 4) fail("repeat_nn: expected [T,H,W,D], got " + shape_str(x.shape));
  if (ft <= 0 || fh <= 0 || fw <= 0) fail("repeat_nn: non-positive factor");
  const int t = x.dim(0), h = x.dim(1), w = x.dim(2), d = x.dim(3);
  const int to = t * ft, ho = h * fh, wo = w * fw;
  Tensor out = make_out({to, ho, wo, d}, x.requires_grad);
  for (int ti = 0; ti < to; ++ti) {
    for (int yi = 0; yi < ho; ++yi) {
      for (int xi = 0; xi < wo; ++xi) {
        const float* xrow =
            x.ptr() + (((static_cast<int64_t>(ti / ft) * h + (yi / fh)) * w) + (xi / fw)) * d;
        float* orow = out.ptr() + (((static_cast<int64_t>(ti) * ho + yi) * wo) + xi) * d;
        std::memcpy(orow, xrow, sizeof(float) * static_cast<size_t>(d));
      }
    }
  }
  if (out.requires_grad) {
    record([this, x, out, h, w, d, ft, fh, fw, to, ho, wo] {
      if (grads_[static_cast<size_t>(out.id)].empty()) return;
      const auto& go = grads_[static_cast<size_t>(out.id)];
      auto& gx = gbuf(x.id);
      for (int ti = 0; ti < to; ++ti) {
        for (int yi = 0; yi < ho; ++yi) {
          for (int xi = 0; xi < wo; ++xi) {
            const float* grow = go.data() + (((static_cast<int64_t>(ti) * ho + yi) * wo) + xi) * d;
            float* gxr =
                gx.data() + (((static_cast<int64_t>(ti / ft) * h + (yi / fh)) * w) + (xi / fw)) * d;
            for (int c = 0; c < d; ++c) gxr[c] += grow[c];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace motok
