#pragma once

// Dense f32 tensors with a recorded-operation tape for reverse-mode
// differentiation. Single scalar type, row-major contiguous storage.
// Kernels accumulate reductions in double so finite-difference checks
// at h = 1e-3 stay meaningful in f32.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace motok {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<float>> data;
  int id = -1;                 // tape handle; -1 until bound to a tape
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, float fill);
  Tensor(Shape s, std::vector<float> values);

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return shape_numel(shape); }
  float* ptr() { return data->data(); }
  const float* ptr() const { return data->data(); }
  float& at(int64_t i) { return (*data)[static_cast<size_t>(i)]; }
  float at(int64_t i) const { return (*data)[static_cast<size_t>(i)]; }
};

// Named trainable tensor. Storage is stable across tapes; binding a
// parameter to a tape twice yields one gradient buffer.
struct Parameter {
  std::string name;
  Tensor value;
  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    value.requires_grad = true;
  }
};

// Deterministic RNG: mt19937_64 + Box-Muller, no libstdc++ distribution
// dependence, so a seed pins every stream bit-for-bit.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}
  uint64_t next_u64() { return gen_(); }
  double uniform() {  // [0,1)
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi);  // inclusive bounds
  double normal();
  double normal(double mean, double std) { return mean + std * normal(); }
  void fill_normal(Tensor& t, double mean, double std);
  void fill_uniform(Tensor& t, double lo, double hi);
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Row-major GEMM trio. C (M x N) = A (M x K) * B (K x N), optionally
// accumulating into C. _nt takes B transposed (N x K), _tn takes A
// transposed (K x M).
void gemm(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
void gemm_nt(int m, int n, int k, const float* a, const float* bt, float* c, bool accumulate);
void gemm_tn(int m, int n, int k, const float* at, const float* b, float* c, bool accumulate);

// Worker cap from MOTOK_THREADS (default: hardware concurrency).
int worker_count();

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  // Binds existing storage. Parameters (requires_grad) are memoized by
  // storage pointer so repeated binds share one gradient buffer.
  Tensor leaf(const Tensor& storage);
  Tensor leaf(Parameter& p) { return leaf(p.value); }
  Tensor constant(const Tensor& storage);

  // Elementwise; shapes must match exactly.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, float s);
  Tensor add_scalar(const Tensor& a, float s);

  // x: [..., D] plus bias [D], broadcast over leading dims.
  Tensor add_rowwise(const Tensor& x, const Tensor& bias);

  Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K]x[K,N]
  // x: [..., K] flattened to rows, w: [K,N], bias: [N] or empty.
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

  Tensor gelu(const Tensor& a);
  Tensor silu(const Tensor& a);
  Tensor tanh_op(const Tensor& a);

  // Normalizes the last dim; eps pinned at 1e-5.
  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

  // Stable softmax over the last dim (row max subtracted).
  Tensor softmax_rows(const Tensor& x);

  // q: [B,Nq,D], k/v: [B,Nk,D]. Multi-head scaled dot-product attention,
  // heads must divide D. causal masks j > i (requires Nq == Nk).
  Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, bool causal);

  // ids index rows of table [V,D]; out: [n, D].
  Tensor embedding(const std::vector<int>& ids, const Tensor& table);

  // logits: [N,V]; mean NLL over rows whose target != ignore_index.
  Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets,
                            int ignore_index = -1);

  Tensor mse_mean(const Tensor& a, const Tensor& b);
  Tensor sum_all(const Tensor& a);
  Tensor mean_all(const Tensor& a);

  // Forward value of `values`, gradient routed to `grad_carrier` untouched.
  // Shapes must match. The quantizer's codes ride through here.
  Tensor straight_through(const Tensor& values, const Tensor& grad_carrier);

  Tensor reshape(const Tensor& a, Shape s);
  Tensor permute(const Tensor& a, const std::vector<int>& axes);
  Tensor concat_last(const Tensor& a, const Tensor& b);
  Tensor slice_last(const Tensor& a, int start, int len);

  // x: [B,H,W,Cin], w: [KH,KW,Cin,Cout], bias: [Cout] or empty.
  // Stride 1, zero padding KH/2 x KW/2 (odd kernels only).
  Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias);

  // x: [T,H,W,D]; factors must divide the dims exactly.
  Tensor pool_mean(const Tensor& x, int ft, int fh, int fw);
  Tensor repeat_nn(const Tensor& x, int ft, int fh, int fw);

  void backward(const Tensor& loss);  // loss must be scalar
  bool has_grad(const Tensor& t) const;
  const std::vector<float>& grad(const Tensor& t) const;
  const std::vector<float>* grad_for(const Parameter& p) const;  // null if unused

 private:
  struct Node {
    std::function<void()> back;
  };

  int fresh_id(int64_t n);
  Tensor make_out(Shape s, bool requires_grad);
  std::vector<float>& gbuf(int id);
  void record(std::function<void()> fn) { nodes_.push_back({std::move(fn)}); }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<std::vector<float>> grads_;
  std::vector<int64_t> sizes_;
  std::unordered_map<const void*, int> bound_params_;
};

}  // namespace motok
