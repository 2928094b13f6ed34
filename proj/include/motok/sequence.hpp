#pragma once
// Unified interleaved token sequences over a four-part vocabulary
// [text | visual | motion | specials], sequence assembly and validation,
// the serialized stream formats, and a fixed-grid patch tokenizer for
// keyframes.
//
// TSEQ layout, little-endian:
//   magic "TSEQ" | u16 version=1 | u64 vocab_sig | u32 count | u32 ids[count]
// Multi-sequence files concatenate their id streams; readers split after
// each EOS, and a trailing run without EOS becomes a final sequence.
// The JSONL variant stores one {"vocab_sig", "segments", "ids"} object per
// line and keeps segments verbatim.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "motok/videoio.hpp"
#include "motok/vqvae.hpp"

namespace motok {

enum class Modality { kText = 0, kVisual = 1, kMotion = 2, kSpecial = 3 };

const char* modality_name(Modality m);
Modality modality_from_name(const std::string& name);

// Vocabulary order of the delimiter/control tokens.
enum class SpecialToken { kBos = 0, kEos, kImg, kImgEnd, kMov, kMovEnd, kPad };
inline constexpr int kNumSpecials = 7;

const char* special_name(SpecialToken t);

struct UnifiedVocab {
  int text_size = 256;
  int visual_size = 256;
  int motion_size = 1024;

  int total() const { return text_size + visual_size + motion_size + kNumSpecials; }
  int text_base() const { return 0; }
  int visual_base() const { return text_size; }
  int motion_base() const { return text_size + visual_size; }
  int special_base() const { return text_size + visual_size + motion_size; }

  uint32_t special(SpecialToken t) const {
    return static_cast<uint32_t>(special_base() + static_cast<int>(t));
  }
  uint32_t bos() const { return special(SpecialToken::kBos); }
  uint32_t eos() const { return special(SpecialToken::kEos); }
  uint32_t img() const { return special(SpecialToken::kImg); }
  uint32_t img_end() const { return special(SpecialToken::kImgEnd); }
  uint32_t mov() const { return special(SpecialToken::kMov); }
  uint32_t mov_end() const { return special(SpecialToken::kMovEnd); }
  uint32_t pad() const { return special(SpecialToken::kPad); }

  void validate() const;  // positive range sizes

  // Total over [0, total()); throws std::out_of_range beyond it.
  Modality modality_of(uint32_t id) const;

  // Raw per-modality codes to unified ids and back, bounds-checked.
  uint32_t text_id(int byte) const;
  uint32_t visual_id(int code) const;
  uint32_t motion_id(int code) const;
  int visual_code(uint32_t id) const;
  int motion_code(uint32_t id) const;

  std::vector<uint32_t> text_ids(const std::string& bytes) const;

  // Layout fingerprint (FNV-1a over sizes and special names), embedded in
  // every serialized stream so mismatched vocabularies fail loudly.
  uint64_t signature() const;
};

struct Segment {
  Modality modality = Modality::kText;
  int64_t start = 0;
  int64_t len = 0;
  friend bool operator==(const Segment&, const Segment&) = default;
};

struct TokenSequence {
  std::vector<uint32_t> ids;
  std::vector<Segment> segments;
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// Canonical segmentation: maximal runs of equal modality, tiling the ids.
std::vector<Segment> derive_segments(const std::vector<uint32_t>& ids,
                                     const UnifiedVocab& vocab);

// One clip's media tokens, already mapped into unified ranges.
struct ClipTokens {
  std::vector<uint32_t> visual;
  std::vector<uint32_t> motion;
};

enum class SequenceOrder { kTextFirst, kMediaFirst };

// BOS, then text and media in the requested order, then EOS. Media is one
// IMG v.. /IMG MOV m.. /MOV group per clip, clips kept in temporal order.
// Throws std::invalid_argument when an id sits outside its declared range
// (naming the offending index) or a clip group is empty.
TokenSequence build_sequence(const std::vector<uint32_t>& text,
                             const std::vector<ClipTokens>& clips, SequenceOrder order,
                             const UnifiedVocab& vocab);

struct Violation {
  std::string message;
  int64_t position = -1;  // token index the violation was detected at
};

// First broken sequence invariant, or nullopt for a well-formed sequence:
// ids in range, BOS only at position 0, nothing after EOS, no PAD, IMG and
// MOV spans closed and nonempty with only their own modality inside, media
// ids never outside a span, and segments equal to the canonical runs.
// Unclosed spans report the opening delimiter's position.
std::optional<Violation> validate(const TokenSequence& seq, const UnifiedVocab& vocab);

void write_jsonl(std::ostream& os, const std::vector<TokenSequence>& seqs,
                 const UnifiedVocab& vocab);
void write_jsonl(const std::string& path, const std::vector<TokenSequence>& seqs,
                 const UnifiedVocab& vocab);
std::vector<TokenSequence> read_jsonl(std::istream& is, const UnifiedVocab& vocab);
std::vector<TokenSequence> read_jsonl(const std::string& path, const UnifiedVocab& vocab);

void write_tseq(std::ostream& os, const std::vector<TokenSequence>& seqs,
                const UnifiedVocab& vocab);
void write_tseq(const std::string& path, const std::vector<TokenSequence>& seqs,
                const UnifiedVocab& vocab);
std::vector<TokenSequence> read_tseq(std::istream& is, const UnifiedVocab& vocab);
std::vector<TokenSequence> read_tseq(const std::string& path, const UnifiedVocab& vocab);

// Row-major (grid*grid, patch_size^2) luma patches scaled to [0,1].
// The frame must be square with side divisible by patch_size.
std::vector<float> keyframe_patches(const Image8& frame, int patch_size);

// Fixed-grid patch vector quantizer over 224x224 keyframes. Every 28x28
// luma patch is flattened and matched against a trainable codebook, giving
// (224/28)^2 = 64 tokens per frame under defaults. Stands in for a real
// image tokenizer; anything emitting visual-range ids can replace it.
struct StubKeyframeTokenizer {
  static constexpr int kFrameSide = 224;

  int patch_size = 28;
  Codebook cb;  // visual_size x patch_size^2
  bool fitted = false;

  StubKeyframeTokenizer(int patch, int codebook_size, uint64_t seed);

  int grid() const { return kFrameSide / patch_size; }
  int tokens_per_frame() const { return grid() * grid(); }

  // K-means over the training frames' patches: codes seeded from sampled
  // patches, then `iters` rounds of assign-to-nearest / recompute-mean
  // (empty clusters keep their code). Deterministic for a fixed seed.
  void fit(const std::vector<Image8>& frames, int iters = 8);

  // 224x224 frame (any channel count) to tokens_per_frame() unified
  // visual-range ids. Throws std::logic_error until fit() has run.
  std::vector<uint32_t> tokenize(const Image8& frame, const UnifiedVocab& vocab);

  // Code vectors pasted back as luma patches, clamped to [0,1] and
  // quantized to 8 bits.
  Image8 reconstruct(const std::vector<uint32_t>& ids, const UnifiedVocab& vocab) const;

 private:
  uint64_t seed_ = 0;
};

}  // namespace motok
