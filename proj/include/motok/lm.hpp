#pragma once
// Decoder-only autoregressive transformer over the unified vocabulary:
// next-token objective, grammar-constrained sampling, and a small training
// loop. Capability is deliberately desk-scale; the contracts cover objective
// calibration, causality, and well-formedness of sampled sequences.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "motok/optim.hpp"
#include "motok/sequence.hpp"
#include "motok/tensor.hpp"

namespace motok {

struct LMConfig {
  UnifiedVocab vocab;
  int layers = 4;
  int dim = 256;
  int heads = 4;
  int context = 512;

  void validate() const;  // heads divides dim, positive sizes
  std::string to_json() const;
  static LMConfig from_json(const std::string& text);
};

// Pre-LN GPT: token + learned positional embeddings, `layers` blocks of
// causal self-attention and a gelu FFN, final layer norm, linear head. The
// head starts at zero so an untrained model scores every token uniformly:
// mean NLL is exactly ln(vocab size).
class LM {
 public:
  LM(LMConfig cfg, uint64_t seed);

  const LMConfig& config() const { return cfg_; }

  // Next-token logits for every input position; out is (n, vocab).
  Tensor logits(Tape& tape, const std::vector<uint32_t>& ids) const;

  // Mean -log P(y_i | y_<i) over positions i >= 1, skipping PAD targets.
  // Throws std::invalid_argument when ids exceed the context window (the
  // sequence is never silently truncated) or holds fewer than two tokens.
  Tensor nll_loss(Tape& tape, const std::vector<uint32_t>& ids) const;
  double nll(const std::vector<uint32_t>& ids) const;

  std::vector<Parameter*> parameters();
  Parameter* find(const std::string& name) const;

  void save(const std::string& path) const;
  static LM load(const std::string& path);

 private:
  Parameter& add_param(const std::string& name, Shape shape);
  Parameter& get(const std::string& name) const;

  LMConfig cfg_;
  std::vector<std::unique_ptr<Parameter>> params_;
};

struct SamplePolicy {
  bool greedy = true;
  float temperature = 1.0f;  // used when greedy is off; <= 1e-6 acts greedy
  bool grammar = true;       // mask next-token support to well-formed continuations
  int max_new = -1;          // cap on generated tokens; -1 means up to the context
  uint64_t seed = 0;
};

struct GenerateResult {
  TokenSequence seq;
  bool truncated = false;  // hit the length budget before EOS
};

// Autoregressively extends the prefix until EOS or the length budget
// (min(context, prefix + max_new)). The prefix must pass validate(); an
// empty prefix starts from BOS. With grammar on, the emitted support is
// masked so every possible output, including budget-truncated ones, passes
// the sequence validator: spans stay modality-pure, spans are never opened
// without room to close them, and closure is forced as the budget runs out.
GenerateResult generate(const LM& model, const TokenSequence& prefix, SamplePolicy policy);

struct LMTrainConfig {
  int steps = 300;     // total schedule length
  int start_step = 0;  // resume point; batches replay deterministically
  int run_steps = -1;  // steps to execute from start_step; -1 runs to the end
  int batch = 8;
  double lr = 3e-3;
  double warmup_frac = 0.06;  // of total steps, linear warmup then cosine
  uint64_t seed = 0;
};

struct LMTrainStats {
  std::vector<double> losses;  // one entry per completed step
  bool aborted = false;        // non-finite loss; model kept at last good step
  std::string diagnostics;
};

// AdamW training over uniformly sampled corpus batches. Deterministic for a
// fixed seed. Sequences longer than the context are rejected up front.
LMTrainStats train_lm(LM& model, const std::vector<TokenSequence>& corpus,
                      const LMTrainConfig& tc);

}  // namespace motok
