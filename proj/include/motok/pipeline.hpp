#pragma once
// End-to-end wiring behind the command-line tool: one configuration object
// spanning every stage, tokenizer-bundle persistence, video to token-stream
// conversion and back, and the per-stage training entry points.
//
// Checkpoints are MTOK snapshots whose config string is a JSON envelope
//   {"schema": 1, "kind": "tokenizer"|"detok"|"lm", "pipeline": {...},
//    "step": N, ...kind-specific model configs...}
// so a checkpoint is self-describing and a resumed run can verify it was
// produced under the same configuration.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "motok/detok.hpp"
#include "motok/diffusion.hpp"
#include "motok/lm.hpp"
#include "motok/motion.hpp"
#include "motok/sequence.hpp"
#include "motok/videoio.hpp"
#include "motok/vqvae.hpp"

namespace motok {

// Steps/batch/learning-rate triple for one training stage.
struct StageSchedule {
  int steps = 0;
  int batch = 0;
  double lr = 0.0;
};

struct PipelineConfig {
  // Clip sampling.
  double clip_fps = 6.0;
  int clip_len = 24;

  // Block matching at source resolution.
  int block_size = 16;
  int search_range = 8;

  // Per-clip token budget: motion ids per clip and the keyframe patch side
  // (224 / keyframe_patch squared patches per keyframe).
  int motion_tokens = 135;
  int keyframe_patch = 28;

  UnifiedVocab vocab;
  VqVaeConfig vqvae;
  LMConfig lm;
  ToyUNetConfig detok_net;
  MotionEncoderConfig detok_enc;

  // Decoder-side latent grid, the clip length used for detokenizer
  // training, and the block matcher run at that grid.
  int detok_h = 16;
  int detok_w = 16;
  int detok_train_t = 3;
  int detok_block = 4;
  int detok_search = 2;

  // Sampling grid and training noise distribution.
  int sched_steps = 50;
  int sched_base = 1000;
  double beta_lo = 1e-4;
  double beta_hi = 2e-2;
  double edm_logsigma_mean = 1.0;
  double edm_logsigma_std = 1.2;
  double sigma_data = 0.5;

  StageSchedule tokenizer_train{300, 16, 1e-3};
  StageSchedule detok_train{400, 4, 2e-3};
  StageSchedule lm_train{300, 8, 3e-3};

  uint64_t seed = 0;

  PipelineConfig();

  // Cross-field consistency on top of each sub-config's own checks; throws
  // std::invalid_argument naming the failing relation.
  void validate() const;

  DiffusionSchedule schedule() const;

  std::string to_json() const;
  static PipelineConfig from_json(const std::string& text);
  void save_file(const std::string& path) const;
  static PipelineConfig load_file(const std::string& path);
};

// The two per-clip tokenizers: motion fields and keyframes.
struct TokenizerBundle {
  MotionVqVae vq;
  StubKeyframeTokenizer kf;

  TokenizerBundle(const PipelineConfig& cfg, uint64_t seed);
};

struct TokenizerSnapshot {
  PipelineConfig cfg;
  TokenizerBundle bundle;
  int64_t step = 0;
};

void save_tokenizer(const std::string& path, const PipelineConfig& cfg,
                    const TokenizerBundle& bundle, int64_t step);
TokenizerSnapshot load_tokenizer(const std::string& path);

struct DetokSnapshot {
  PipelineConfig cfg;
  ToyUNet3D net;
  MotionEncoder enc;
  int64_t step = 0;
};

// Tensor layout matches the plain detokenizer snapshot, so such a file also
// loads through load_detokenizer().
void save_detok_stage(const std::string& path, const PipelineConfig& cfg, const ToyUNet3D& net,
                      const MotionEncoder& enc, int64_t step);
DetokSnapshot load_detok_stage(const std::string& path);

struct LmSnapshot {
  PipelineConfig cfg;
  LM model;
  int64_t step = 0;
};

void save_lm_stage(const std::string& path, const PipelineConfig& cfg, const LM& model,
                   int64_t step);
LmSnapshot load_lm_stage(const std::string& path);

struct TokenizeResult {
  TokenSequence seq;                // one sequence for the whole video
  std::vector<int> visual_counts;  // per clip
  std::vector<int> motion_counts;  // per clip
  UsageStats usage;                // motion-code usage across the video
};

// Video to one interleaved sequence: sampled clips, each contributing a
// keyframe token group and a motion token group. Throws std::runtime_error
// with the training command when the keyframe codebook is unfitted, and
// std::invalid_argument when the video is too short to yield one clip.
TokenizeResult tokenize_video(const PipelineConfig& cfg, TokenizerBundle& bundle,
                              const RawVideo& video);

// Media groups of a well-formed sequence, in temporal order. Throws
// std::invalid_argument when validation fails or the groups do not
// alternate keyframe-then-motion.
std::vector<ClipTokens> extract_clips(const TokenSequence& seq, const UnifiedVocab& vocab);

// Sequences back to frames: keyframe ids to a codebook reconstruction
// resized onto the decode grid, motion ids through the motion decoder, then
// chained sampling with the noise constraint. Each clip emits its decoded
// keyframe followed by its frames; clips from all sequences concatenate in
// order.
RawVideo detokenize_sequences(const PipelineConfig& cfg, const TokenizerBundle& bundle,
                              const ToyUNet3D& net, const MotionEncoder& enc,
                              const std::vector<TokenSequence>& seqs, int delta_t,
                              uint64_t seed);

struct TrainReport {
  std::string stage;
  std::string checkpoint;
  int64_t start_step = 0;
  int64_t steps_done = 0;
  int64_t total_steps = 0;
  double wall_seconds = 0.0;
  std::vector<double> losses;  // one entry per completed step of this run
  std::string held_out_name;
  double held_out = 0.0;
  bool aborted = false;
  std::string diagnostics;
  std::map<std::string, double> scalars;  // stage extras (perplexity, ...)

  std::string to_json() const;
};

// Stage entry points. data_dir is scanned non-recursively for the stage's
// inputs in sorted filename order; resume_ckpt empty starts fresh, else the
// checkpoint must carry an identical pipeline configuration. run_steps caps
// how many schedule steps this invocation executes (-1 runs to the end), so
// a capped run plus a resume replays the exact step sequence of one
// uninterrupted run. Inputs are split with roughly the last tenth held out
// whenever more than one item is available. Throws std::invalid_argument
// for unusable inputs and propagates I/O failures.
//
//   tokenizer: *.mvec normalized motion fields (temporal length clip_len,
//              any spatial grid; resized to the model grid) train the
//              motion codebook; *.rvid frames fit the keyframe codebook.
//              Held-out metric: mean field reconstruction MSE.
//   detok:     *.rvid videos, clipped at detok_train_t frames and resized
//              to the decode grid. Held-out metric: decoded PSNR.
//   lm:        *.tseq / *.jsonl sequence files. Held-out metric: mean NLL.
TrainReport train_stage_tokenizer(const PipelineConfig& cfg, const std::string& data_dir,
                                  const std::string& out_ckpt, const std::string& resume_ckpt,
                                  int run_steps = -1);
TrainReport train_stage_detok(const PipelineConfig& cfg, const std::string& data_dir,
                              const std::string& out_ckpt, const std::string& resume_ckpt,
                              int run_steps = -1);
TrainReport train_stage_lm(const PipelineConfig& cfg, const std::string& data_dir,
                           const std::string& out_ckpt, const std::string& resume_ckpt,
                           int run_steps = -1);

}  // namespace motok
