#pragma once
// Motion tokenizer: a spatiotemporal transformer encoder, an EMA-updated
// vector-quantizer codebook, and a mirrored decoder. Fields of shape
// (T, H, W, 2) go in, N discrete ids come out, and the decoder maps ids back
// to a field clamped to [-1, 1].
//
// Layout conventions: activations are kept rank-4 (T, H, W, D). Spatial
// attention runs over H*W positions with T as the batch axis; temporal
// attention runs over T positions with H*W as the batch axis. Downsampling
// is strided mean-pooling plus a linear layer placed after selected encoder
// blocks; the decoder mirrors it with nearest-neighbor repeats placed before
// the corresponding blocks in reverse order.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "motok/motion.hpp"
#include "motok/optim.hpp"
#include "motok/tensor.hpp"

namespace motok {

// Which axes a downsample layer halves.
enum class DownAxes : int { kSpatial = 0, kTemporal = 1, kBoth = 2 };

struct VqVaeConfig {
  int t = 24;
  int grid_h = 20;
  int grid_w = 36;
  int dim = 512;
  int heads = 8;
  int blocks = 12;
  int ffn_mult = 4;
  int d_code = 32;
  int codebook_size = 1024;
  float beta = 0.25f;
  float decay = 0.995f;
  // 1-based encoder block indices a downsample follows, plus its axes.
  std::vector<int> down_after = {3, 6, 9, 12};
  std::vector<DownAxes> down_axes = {DownAxes::kSpatial, DownAxes::kTemporal, DownAxes::kBoth,
                                     DownAxes::kTemporal};
  int revive_after = 512;

  void validate() const;  // throws std::invalid_argument with the failing field
  // Latent grid after all downsample layers.
  int latent_t() const;
  int latent_h() const;
  int latent_w() const;
  int n_latents() const { return latent_t() * latent_h() * latent_w(); }

  std::string to_json() const;
  static VqVaeConfig from_json(const std::string& text);
};

struct QuantizeResult {
  int id = 0;
  bool degenerate = false;  // zero-norm input, raw distance used
};

struct Codebook {
  int size = 0;
  int dim = 0;
  float decay = 0.995f;
  std::vector<float> codes;     // size x dim
  std::vector<float> ema_size;  // size
  std::vector<float> ema_sum;   // size x dim
  std::vector<int> unused_steps;
  int64_t degenerate_inputs = 0;

  Codebook() = default;
  Codebook(int k, int d, float decay_, Rng& rng);

  // argmin over L2-normalized distances; ties break to the smallest index.
  // A zero-norm input falls back to raw distance and bumps
  // degenerate_inputs.
  QuantizeResult quantize_one(const float* z);
  std::vector<int> quantize(const float* z, int n);

  // One EMA step from a batch of (id, vector) assignments. Counts and sums
  // decay at `decay`; every code is refreshed as
  // smoothed-sum / max(smoothed-count, 1e-5), which leaves untouched codes
  // exactly stable (sum and count shrink by the same factor).
  void ema_update(const std::vector<int>& ids, const float* z, int n);

  // Reseed a code from a fresh vector (dead-code revival).
  void reseed(int k, const float* z);
};

struct UsageStats {
  double perplexity = 0.0;
  int dead_codes = 0;
};
// counts[k] = assignments observed for code k over some window.
UsageStats codebook_usage(const std::vector<int64_t>& counts);

class MotionVqVae {
 public:
  MotionVqVae(const VqVaeConfig& cfg, uint64_t seed);

  const VqVaeConfig& config() const { return cfg_; }

  // Encoder forward; x is (T, H, W, 2). Returns (N, d_code).
  Tensor encode(Tape& tape, const Tensor& x) const;
  // Decoder forward from latent rows (N, d_code). Returns (T, H, W, 2),
  // not clamped (training wants raw values).
  Tensor decode_latents(Tape& tape, const Tensor& z) const;

  // Field in, ids out. The field must be normalized and match the grid.
  std::vector<int> tokenize(const MotionField& f);
  // Ids in, clamped normalized field out.
  MotionField detokenize(const std::vector<int>& ids) const;

  // (T,H,W,2) tensor from a normalized field, shape-checked.
  Tensor field_tensor(const MotionField& f) const;

  std::vector<Parameter*> parameters();
  const Parameter* find(const std::string& name) const;  // null if absent

  Codebook cb;

 private:
  VqVaeConfig cfg_;
  std::vector<std::unique_ptr<Parameter>> params_;

  Parameter* add_param(const std::string& name, Shape shape);
  Parameter& get(const std::string& name) const;
};

struct VqTrainStats {
  double total = 0.0;
  double recon = 0.0;
  double commit = 0.0;
  double grad_norm = 0.0;
  double latent_sigma = 0.0;  // filled on abort diagnostics
  int degenerate = 0;
  bool aborted = false;       // non-finite loss; no state was touched
  std::string diagnostics;
};

class VqVaeTrainer {
 public:
  VqVaeTrainer(MotionVqVae& model, uint64_t seed);

  // One optimization step over a batch of fields. Updates the model via
  // AdamW, the codebook via EMA, and revives codes unused for
  // cfg.revive_after consecutive steps from recently seen latents.
  VqTrainStats step(const std::vector<const MotionField*>& batch, float lr);
  VqTrainStats step(const std::vector<MotionField>& batch, float lr);

  const std::vector<int64_t>& assignment_counts() const { return counts_; }
  AdamW& optimizer() { return opt_; }

 private:
  MotionVqVae& model_;
  AdamW opt_;
  Rng rng_;
  std::vector<int64_t> counts_;       // lifetime assignment histogram
  std::vector<float> recent_;        // ring buffer of recent latents
  size_t recent_head_ = 0;
  size_t recent_filled_ = 0;
};

}  // namespace motok
