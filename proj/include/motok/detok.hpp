#pragma once
// Toy conditional video denoiser stack: the condition assembly (motion
// resized to the latent grid, keyframe tiled along time, channel concat in
// the order [noisy, keyframe, motion]), a conditioning encoder that embeds
// motion cells without any downsampling, a small conv-attention denoiser
// with skip-scaled preconditioning, the weighted denoising trainer, and the
// chained long-sequence decoder that carries consistency between clips by
// inverting the previous clip's last frame instead of starting from fresh
// noise.
//
// Latent layout everywhere: (T, H, W, C) float tensors for training,
// double Latent states for sampling. H and W must be even (one 2x
// down/up pair inside the denoiser).

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "motok/diffusion.hpp"
#include "motok/motion.hpp"
#include "motok/tensor.hpp"

namespace motok {

// Conditioning bundle for one clip.
//   motion:          (T, H, W, 2) normalized per-cell displacement
//   keyframe:        (T, H, W, C) keyframe latent repeated along time
//   motion_features: (1, T*H*W, feat_dim) conditioning-encoder output for
//                    cross-attention; empty when built without an encoder.
// Features are a function of the encoder weights: rebuild the pack after
// training before using it for sampling.
struct ConditionPack {
  Tensor motion;
  Tensor keyframe;
  Tensor motion_features;

  int temporal() const { return motion.rank() > 0 ? static_cast<int>(motion.dim(0)) : 0; }
};

struct MotionEncoderConfig {
  int feat_dim = 16;
  int heads = 4;
  int max_t = 16;

  void validate() const;
  std::string to_json() const;
  static MotionEncoderConfig from_json(const std::string& text);
};

// Embeds every motion cell and mixes information along the temporal axis
// only (one pre-norm attention + feedforward block per spatial site, no
// pooling), so each frame keeps its own feature token per cell.
class MotionEncoder {
 public:
  MotionEncoder(MotionEncoderConfig cfg, uint64_t seed);

  const MotionEncoderConfig& config() const { return cfg_; }

  // motion: (T, H, W, 2) -> (1, T*H*W, feat_dim), frame-major token order.
  Tensor forward(Tape& tape, const Tensor& motion) const;
  // Convenience: forward on a gradient-free tape.
  Tensor features(const Tensor& motion) const;

  std::vector<Parameter*> parameters();
  Parameter* find(const std::string& name) const;

 private:
  Parameter& add_param(const std::string& name, Shape shape);
  Parameter& get(const std::string& name) const;

  MotionEncoderConfig cfg_;
  std::vector<std::unique_ptr<Parameter>> params_;
};

struct ToyUNetConfig {
  int channels = 1;   // latent channels C; the net consumes C + C + 2
  int width = 16;     // conv feature width
  int heads = 4;      // attention heads (temporal and cross)
  int feat_dim = 16;  // conditioning feature dimension, matches the encoder
  double sigma_data = 0.5;

  void validate() const;
  std::string to_json() const;
  static ToyUNetConfig from_json(const std::string& text);
};

// Conv-attention denoiser over (T, H, W, C) latents: channel-concatenated
// conditions at the input, one 2x spatial down/up pair with a skip concat,
// temporal self-attention and motion cross-attention at the coarse scale.
// Noise level enters twice: as the skip-scaled preconditioning
//   x0_hat = c_skip x + c_out F(c_in x concat cond, log(sigma)/4)
// with c_skip = sd^2/(sigma^2+sd^2), c_out = sigma sd/sqrt(sigma^2+sd^2),
// c_in = 1/sqrt(sigma^2+sd^2)  (so lambda(sigma) c_out^2 = 1), and as a
// learned per-channel bias from log(sigma)/4. The keyframe denoiser is the
// same network run at T = 1.
class ToyUNet3D final : public Denoiser {
 public:
  ToyUNet3D(ToyUNetConfig cfg, uint64_t seed);

  const ToyUNetConfig& config() const { return cfg_; }

  // x_cat: (T, H, W, 2C+2) preconditioned input with conditions attached,
  // features: (1, M, feat_dim). Returns the raw prediction head output
  // (T, H, W, C); callers apply the c_skip/c_out combination.
  Tensor forward(Tape& tape, const Tensor& x_cat, double c_noise, const Tensor& features) const;

  // Denoiser entry point used by the samplers. Requires a pack whose
  // keyframe/motion/motion_features all match the state's (T, H, W).
  Latent denoise(const Latent& x, double sigma, const ConditionPack* cond) const override;

  std::vector<Parameter*> parameters();
  Parameter* find(const std::string& name) const;

 private:
  Parameter& add_param(const std::string& name, Shape shape);
  Parameter& get(const std::string& name) const;

  ToyUNetConfig cfg_;
  std::vector<std::unique_ptr<Parameter>> params_;
};

// Assembles the conditioning bundle for a T-frame clip from a keyframe
// latent (H, W, C) and a normalized motion field with exactly T temporal
// slices. The field is nearest-neighbor resized to (H, W); at equal
// resolution the values pass through bit-exactly. Features are computed
// when an encoder is supplied.
ConditionPack build_condition(const Tensor& keyframe_latent, const MotionField& motion, int t,
                              const MotionEncoder* enc = nullptr);

// One training measurement of the weighted denoising objective:
//   lambda(sigma) * mean((x0_hat - x0)^2),  log sigma ~ N(schedule moments).
// Motion features are recomputed on the tape so encoder weights train
// jointly; the pack's cached features are ignored here.
Tensor edm_loss(Tape& tape, const ToyUNet3D& net, const MotionEncoder& enc,
                const DiffusionSchedule& sched, const Tensor& x0, const ConditionPack& pack,
                Rng& rng);

struct DetokTrainConfig {
  int steps = 400;     // total schedule length
  int start_step = 0;  // resume point; batches replay deterministically
  int run_steps = -1;  // steps to execute from start_step; -1 runs to the end
  int batch = 4;
  double lr = 2e-3;
  double warmup_frac = 0.06;
  uint64_t seed = 0;
  double divergence_factor = 10.0;  // abort when loss exceeds this times losses[0]
};

struct DetokTrainItem {
  Tensor x0;  // (T, H, W, C)
  ConditionPack pack;
};

struct DetokTrainStats {
  std::vector<double> losses;
  bool aborted = false;
  std::string diagnostics;
};

// AdamW + cosine schedule over the denoiser and encoder jointly. The batch
// and noise draws at step k depend only on (seed, k). Aborts before
// touching parameters when the loss is non-finite or exceeds
// divergence_factor times the first step's loss.
DetokTrainStats train_toy_detokenizer(ToyUNet3D& net, MotionEncoder& enc,
                                      const std::vector<DetokTrainItem>& data,
                                      const DiffusionSchedule& sched, const DetokTrainConfig& tc);

// Synthetic training corpus: textured squares with per-clip random start
// and velocity, motion estimated from the rendered frames, latents =
// luma / 255. Every clip in the set shares (t, h, w).
struct DetokDatasetConfig {
  int clips = 16;
  int t = 3;
  int h = 16;
  int w = 16;
  int square = 6;
  int max_speed = 1;  // per-axis pixels per frame
  int block = 4;
  int search = 2;
  uint64_t seed = 0;
};

std::vector<DetokTrainItem> make_detok_dataset(const DetokDatasetConfig& cfg);

// One clip's decode inputs: keyframe latent (H, W, C) plus its normalized
// motion field (one temporal slice per frame).
struct DecodeClipSpec {
  Tensor keyframe;
  MotionField motion;
};

struct DecodedClip {
  Latent keyframe;  // (1, H, W, C)
  Latent frames;    // (T, H, W, C)
};

// Chained decode. Clip 0's keyframe starts from fresh noise at the top of
// the grid; when constrained, every later keyframe starts from the
// delta_t-step inversion of the previous clip's last decoded frame (so
// delta_t = 0 copies it exactly), otherwise from fresh noise. Frames are
// decoded from fresh noise conditioned on the clip's keyframe latent and
// motion. Noise draw order per clip: keyframe noise (when drawn), then
// frame noise. Keyframe passes run at T = 1 with a zero motion field.
std::vector<DecodedClip> decode_long(const Denoiser& g_i, const Denoiser& g_v,
                                     const std::vector<DecodeClipSpec>& clips,
                                     const DiffusionSchedule& sched, int delta_t, uint64_t seed,
                                     const MotionEncoder* enc = nullptr, bool constrained = true);

// Peak signal-to-noise ratio in dB for signals on a [0, peak] scale;
// +infinity when the inputs match exactly.
double psnr(const Latent& a, const Latent& b, double peak = 1.0);

// Clamps every element into [0, 1]; reconstruction metrics quantize there.
void clamp01(Latent& l);

// Snapshot of denoiser + encoder weights and configs in one file.
void save_detokenizer(const std::string& path, const ToyUNet3D& net, const MotionEncoder& enc);
std::pair<ToyUNet3D, MotionEncoder> load_detokenizer(const std::string& path);

}  // namespace motok
