#include "motok/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "motok/binio.hpp"
#include "motok/motion.hpp"

namespace motok {

namespace {

constexpr char kTseqMagic[4] = {'T', 'S', 'E', 'Q'};
constexpr uint16_t kTseqVersion = 1;

const char* kSpecialNames[kNumSpecials] = {"BOS", "EOS", "IMG", "/IMG", "MOV", "/MOV", "PAD"};

uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

[[noreturn]] void seq_fail(const std::string& msg) {
  throw std::invalid_argument("sequence: " + msg);
}

}  // namespace

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kText: return "text";
    case Modality::kVisual: return "visual";
    case Modality::kMotion: return "motion";
    case Modality::kSpecial: return "special";
  }
  return "?";
}

Modality modality_from_name(const std::string& name) {
  for (Modality m : {Modality::kText, Modality::kVisual, Modality::kMotion, Modality::kSpecial}) {
    if (name == modality_name(m)) return m;
  }
  seq_fail("unknown modality name '" + name + "'");
}

const char* special_name(SpecialToken t) {
  return kSpecialNames[static_cast<int>(t)];
}

void UnifiedVocab::validate() const {
  if (text_size <= 0 || visual_size <= 0 || motion_size <= 0) {
    seq_fail("vocabulary range sizes must be positive");
  }
}

Modality UnifiedVocab::modality_of(uint32_t id) const {
  const int i = static_cast<int>(id);
  if (id >= static_cast<uint32_t>(total())) {
    throw std::out_of_range("sequence: id " + std::to_string(id) +
                            " outside vocabulary of size " + std::to_string(total()));
  }
  if (i < visual_base()) return Modality::kText;
  if (i < motion_base()) return Modality::kVisual;
  if (i < special_base()) return Modality::kMotion;
  return Modality::kSpecial;
}

uint32_t UnifiedVocab::text_id(int byte) const {
  if (byte < 0 || byte >= text_size) seq_fail("text byte " + std::to_string(byte) + " out of range");
  return static_cast<uint32_t>(text_base() + byte);
}

uint32_t UnifiedVocab::visual_id(int code) const {
  if (code < 0 || code >= visual_size) {
    seq_fail("visual code " + std::to_string(code) + " out of range");
  }
  return static_cast<uint32_t>(visual_base() + code);
}

uint32_t UnifiedVocab::motion_id(int code) const {
  if (code < 0 || code >= motion_size) {
    seq_fail("motion code " + std::to_string(code) + " out of range");
  }
  return static_cast<uint32_t>(motion_base() + code);
}

int UnifiedVocab::visual_code(uint32_t id) const {
  if (modality_of(id) != Modality::kVisual) {
    seq_fail("id " + std::to_string(id) + " is not a visual token");
  }
  return static_cast<int>(id) - visual_base();
}

int UnifiedVocab::motion_code(uint32_t id) const {
  if (modality_of(id) != Modality::kMotion) {
    seq_fail("id " + std::to_string(id) + " is not a motion token");
  }
  return static_cast<int>(id) - motion_base();
}

std::vector<uint32_t> UnifiedVocab::text_ids(const std::string& bytes) const {
  std::vector<uint32_t> out;
  out.reserve(bytes.size());
  for (unsigned char c : bytes) out.push_back(text_id(c));
  return out;
}

uint64_t UnifiedVocab::signature() const {
  std::string layout = "text:" + std::to_string(text_size) +
                       "|visual:" + std::to_string(visual_size) +
                       "|motion:" + std::to_string(motion_size) + "|specials:";
  for (int i = 0; i < kNumSpecials; ++i) {
    if (i) layout += ',';
    layout += kSpecialNames[i];
  }
  return fnv1a64(layout);
}

std::vector<Segment> derive_segments(const std::vector<uint32_t>& ids,
                                     const UnifiedVocab& vocab) {
  std::vector<Segment> segs;
  for (size_t i = 0; i < ids.size(); ++i) {
    Modality m = vocab.modality_of(ids[i]);
    if (!segs.empty() && segs.back().modality == m) {
      ++segs.back().len;
    } else {
      segs.push_back({m, static_cast<int64_t>(i), 1});
    }
  }
  return segs;
}

TokenSequence build_sequence(const std::vector<uint32_t>& text,
                             const std::vector<ClipTokens>& clips, SequenceOrder order,
                             const UnifiedVocab& vocab) {
  vocab.validate();
  for (size_t i = 0; i < text.size(); ++i) {
    if (text[i] >= static_cast<uint32_t>(vocab.total()) ||
        vocab.modality_of(text[i]) != Modality::kText) {
      seq_fail("text id at index " + std::to_string(i) + " (" + std::to_string(text[i]) +
               ") is outside the text range");
    }
  }
  for (size_t c = 0; c < clips.size(); ++c) {
    const std::string where = "clip " + std::to_string(c);
    if (clips[c].visual.empty()) seq_fail(where + " has an empty visual token group");
    if (clips[c].motion.empty()) seq_fail(where + " has an empty motion token group");
    for (size_t i = 0; i < clips[c].visual.size(); ++i) {
      uint32_t id = clips[c].visual[i];
      if (id >= static_cast<uint32_t>(vocab.total()) ||
          vocab.modality_of(id) != Modality::kVisual) {
        seq_fail(where + " visual id at index " + std::to_string(i) + " (" +
                 std::to_string(id) + ") is outside the visual range");
      }
    }
    for (size_t i = 0; i < clips[c].motion.size(); ++i) {
      uint32_t id = clips[c].motion[i];
      if (id >= static_cast<uint32_t>(vocab.total()) ||
          vocab.modality_of(id) != Modality::kMotion) {
        seq_fail(where + " motion id at index " + std::to_string(i) + " (" +
                 std::to_string(id) + ") is outside the motion range");
      }
    }
  }

  TokenSequence seq;
  seq.ids.push_back(vocab.bos());
  auto emit_media = [&] {
    for (const ClipTokens& clip : clips) {
      seq.ids.push_back(vocab.img());
      seq.ids.insert(seq.ids.end(), clip.visual.begin(), clip.visual.end());
      seq.ids.push_back(vocab.img_end());
      seq.ids.push_back(vocab.mov());
      seq.ids.insert(seq.ids.end(), clip.motion.begin(), clip.motion.end());
      seq.ids.push_back(vocab.mov_end());
    }
  };
  auto emit_text = [&] { seq.ids.insert(seq.ids.end(), text.begin(), text.end()); };
  if (order == SequenceOrder::kMediaFirst) {
    emit_media();
    emit_text();
  } else {
    emit_text();
    emit_media();
  }
  seq.ids.push_back(vocab.eos());
  seq.segments = derive_segments(seq.ids, vocab);
  return seq;
}

std::optional<Violation> validate(const TokenSequence& seq, const UnifiedVocab& vocab) {
  const uint32_t total = static_cast<uint32_t>(vocab.total());
  // -1 when no span is open, otherwise the opening delimiter's position.
  int64_t open_img = -1;
  int64_t open_mov = -1;
  int64_t span_media = 0;  // media ids seen inside the open span
  bool saw_eos = false;

  for (size_t i = 0; i < seq.ids.size(); ++i) {
    const int64_t pos = static_cast<int64_t>(i);
    const uint32_t id = seq.ids[i];
    if (id >= total) {
      return Violation{"id " + std::to_string(id) + " outside vocabulary of size " +
                           std::to_string(total),
                       pos};
    }
    if (saw_eos) return Violation{"token after EOS", pos};
    if (id == vocab.pad()) return Violation{"PAD token in sequence", pos};
    if (id == vocab.bos() && i != 0) return Violation{"BOS after position 0", pos};

    const Modality m = vocab.modality_of(id);
    const bool in_span = open_img >= 0 || open_mov >= 0;
    if (id == vocab.img() || id == vocab.mov()) {
      if (in_span) return Violation{"delimiter opened inside an open span", pos};
      (id == vocab.img() ? open_img : open_mov) = pos;
      span_media = 0;
    } else if (id == vocab.img_end() || id == vocab.mov_end()) {
      const bool matches = (id == vocab.img_end()) ? open_img >= 0 : open_mov >= 0;
      if (!matches) return Violation{"closing delimiter without matching open span", pos};
      if (span_media == 0) return Violation{"media span contains no media tokens", pos};
      open_img = open_mov = -1;
    } else if (id == vocab.eos()) {
      if (in_span) return Violation{"EOS inside an open span", pos};
      saw_eos = true;
    } else if (m == Modality::kVisual) {
      if (open_img < 0) {
        return Violation{open_mov >= 0 ? "visual id inside MOV span" : "visual id outside IMG span",
                         pos};
      }
      ++span_media;
    } else if (m == Modality::kMotion) {
      if (open_mov < 0) {
        return Violation{open_img >= 0 ? "motion id inside IMG span" : "motion id outside MOV span",
                         pos};
      }
      ++span_media;
    } else if (m == Modality::kText) {
      if (in_span) return Violation{"text id inside media span", pos};
    }
  }
  if (open_img >= 0) return Violation{"unclosed IMG span", open_img};
  if (open_mov >= 0) return Violation{"unclosed MOV span", open_mov};

  const std::vector<Segment> canon = derive_segments(seq.ids, vocab);
  if (seq.segments != canon) {
    size_t k = 0;
    while (k < seq.segments.size() && k < canon.size() && seq.segments[k] == canon[k]) ++k;
    const int64_t pos = k < canon.size() ? canon[k].start
                        : k < seq.segments.size() ? seq.segments[k].start
                                                  : static_cast<int64_t>(seq.ids.size());
    return Violation{"segments do not match the canonical run decomposition", pos};
  }
  return std::nullopt;
}

// JSONL

namespace {

nlohmann::json seq_to_json(const TokenSequence& seq, const UnifiedVocab& vocab) {
  nlohmann::json j;
  j["vocab_sig"] = vocab.signature();
  auto& segs = j["segments"] = nlohmann::json::array();
  for (const Segment& s : seq.segments) {
    segs.push_back({modality_name(s.modality), s.start, s.len});
  }
  j["ids"] = seq.ids;
  return j;
}

TokenSequence seq_from_json(const nlohmann::json& j, const UnifiedVocab& vocab) {
  if (!j.is_object() || !j.contains("vocab_sig") || !j.contains("ids") ||
      !j.contains("segments")) {
    throw std::runtime_error("sequence: JSONL record is missing required fields");
  }
  if (j.at("vocab_sig").get<uint64_t>() != vocab.signature()) {
    throw std::runtime_error("sequence: vocabulary signature mismatch");
  }
  TokenSequence seq;
  for (const auto& v : j.at("ids")) {
    const uint64_t id = v.get<uint64_t>();
    if (id >= static_cast<uint64_t>(vocab.total())) {
      throw std::runtime_error("sequence: id " + std::to_string(id) +
                               " outside vocabulary of size " + std::to_string(vocab.total()));
    }
    seq.ids.push_back(static_cast<uint32_t>(id));
  }
  for (const auto& s : j.at("segments")) {
    if (!s.is_array() || s.size() != 3) {
      throw std::runtime_error("sequence: malformed segment record");
    }
    seq.segments.push_back(
        {modality_from_name(s[0].get<std::string>()), s[1].get<int64_t>(), s[2].get<int64_t>()});
  }
  return seq;
}

}  // namespace

void write_jsonl(std::ostream& os, const std::vector<TokenSequence>& seqs,
                 const UnifiedVocab& vocab) {
  for (const TokenSequence& seq : seqs) os << seq_to_json(seq, vocab).dump() << '\n';
  if (!os) throw std::runtime_error("sequence: write failed");
}

void write_jsonl(const std::string& path, const std::vector<TokenSequence>& seqs,
                 const UnifiedVocab& vocab) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("sequence: cannot open '" + path + "' for writing");
  write_jsonl(os, seqs, vocab);
}

std::vector<TokenSequence> read_jsonl(std::istream& is, const UnifiedVocab& vocab) {
  std::vector<TokenSequence> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("sequence: bad JSONL line " + std::to_string(out.size() + 1) +
                               ": " + e.what());
    }
    out.push_back(seq_from_json(j, vocab));
  }
  return out;
}

std::vector<TokenSequence> read_jsonl(const std::string& path, const UnifiedVocab& vocab) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("sequence: cannot open '" + path + "'");
  return read_jsonl(is, vocab);
}

// TSEQ

void write_tseq(std::ostream& os, const std::vector<TokenSequence>& seqs,
                const UnifiedVocab& vocab) {
  uint64_t count = 0;
  for (const TokenSequence& seq : seqs) count += seq.ids.size();
  if (count > 0xffffffffull) throw std::runtime_error("sequence: TSEQ stream too large");
  binio::put_bytes(os, kTseqMagic, 4);
  binio::put_u16(os, kTseqVersion);
  binio::put_u64(os, vocab.signature());
  binio::put_u32(os, static_cast<uint32_t>(count));
  for (const TokenSequence& seq : seqs) {
    for (uint32_t id : seq.ids) binio::put_u32(os, id);
  }
  if (!os) throw std::runtime_error("sequence: write failed");
}

void write_tseq(const std::string& path, const std::vector<TokenSequence>& seqs,
                const UnifiedVocab& vocab) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("sequence: cannot open '" + path + "' for writing");
  write_tseq(os, seqs, vocab);
}

std::vector<TokenSequence> read_tseq(std::istream& is, const UnifiedVocab& vocab) {
  char magic[4];
  binio::get_bytes(is, magic, 4, "token stream magic");
  if (std::memcmp(magic, kTseqMagic, 4) != 0) {
    throw std::runtime_error("sequence: input is not a TSEQ stream");
  }
  const uint16_t version = binio::get_u16(is, "token stream version");
  if (version != kTseqVersion) {
    throw std::runtime_error("sequence: unsupported version " + std::to_string(version));
  }
  const uint64_t sig = binio::get_u64(is, "vocabulary signature");
  if (sig != vocab.signature()) {
    throw std::runtime_error("sequence: vocabulary signature mismatch");
  }
  const uint32_t count = binio::get_u32(is, "token count");
  std::vector<TokenSequence> out;
  TokenSequence cur;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t id = binio::get_u32(is, "token id");
    if (id >= static_cast<uint32_t>(vocab.total())) {
      throw std::runtime_error("sequence: id " + std::to_string(id) +
                               " outside vocabulary of size " + std::to_string(vocab.total()));
    }
    cur.ids.push_back(id);
    if (id == vocab.eos()) {
      out.push_back(std::move(cur));
      cur = TokenSequence{};
    }
  }
  if (!cur.ids.empty()) out.push_back(std::move(cur));
  for (TokenSequence& seq : out) seq.segments = derive_segments(seq.ids, vocab);
  return out;
}

std::vector<TokenSequence> read_tseq(const std::string& path, const UnifiedVocab& vocab) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("sequence: cannot open '" + path + "'");
  return read_tseq(is, vocab);
}

// Keyframe tokenizer

std::vector<float> keyframe_patches(const Image8& frame, int patch_size) {
  if (frame.height != frame.width || patch_size <= 0 || frame.height % patch_size != 0) {
    seq_fail("frame must be square with side divisible by the patch size, got " +
             std::to_string(frame.height) + "x" + std::to_string(frame.width) + " at patch " +
             std::to_string(patch_size));
  }
  const std::vector<uint8_t> luma =
      to_luma(frame.pix.data(), frame.height, frame.width, frame.channels);
  const int g = frame.height / patch_size;
  const int d = patch_size * patch_size;
  std::vector<float> out(static_cast<size_t>(g) * g * d);
  for (int p = 0; p < g; ++p) {
    for (int q = 0; q < g; ++q) {
      float* dst = out.data() + (static_cast<size_t>(p) * g + q) * d;
      for (int r = 0; r < patch_size; ++r) {
        for (int s = 0; s < patch_size; ++s) {
          const int y = p * patch_size + r;
          const int x = q * patch_size + s;
          dst[r * patch_size + s] = static_cast<float>(luma[y * frame.width + x]) / 255.0f;
        }
      }
    }
  }
  return out;
}

StubKeyframeTokenizer::StubKeyframeTokenizer(int patch, int codebook_size, uint64_t seed)
    : patch_size(patch), seed_(seed) {
  if (patch <= 0 || kFrameSide % patch != 0) {
    seq_fail("patch size " + std::to_string(patch) + " must divide " +
             std::to_string(kFrameSide));
  }
  if (codebook_size <= 0) seq_fail("codebook size must be positive");
  Rng rng(seed);
  cb = Codebook(codebook_size, patch * patch, 0.995f, rng);
}

void StubKeyframeTokenizer::fit(const std::vector<Image8>& frames, int iters) {
  if (frames.empty()) seq_fail("cannot fit the keyframe tokenizer on zero frames");
  const int d = patch_size * patch_size;
  std::vector<float> patches;
  for (const Image8& f : frames) {
    if (f.height != kFrameSide || f.width != kFrameSide) {
      seq_fail("fit frame must be " + std::to_string(kFrameSide) + "x" +
               std::to_string(kFrameSide) + ", got " + std::to_string(f.height) + "x" +
               std::to_string(f.width));
    }
    std::vector<float> p = keyframe_patches(f, patch_size);
    patches.insert(patches.end(), p.begin(), p.end());
  }
  const int n = static_cast<int>(patches.size()) / d;

  Rng rng(seed_ ^ 0x9e3779b97f4a7c15ull);
  for (int k = 0; k < cb.size; ++k) {
    const int src = rng.uniform_int(0, n - 1);
    std::copy_n(patches.data() + static_cast<size_t>(src) * d, d,
                cb.codes.data() + static_cast<size_t>(k) * d);
  }
  std::vector<double> sum(static_cast<size_t>(cb.size) * d);
  std::vector<int64_t> cnt(cb.size);
  for (int it = 0; it < iters; ++it) {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(cnt.begin(), cnt.end(), 0);
    const std::vector<int> ids = cb.quantize(patches.data(), n);
    for (int i = 0; i < n; ++i) {
      const float* z = patches.data() + static_cast<size_t>(i) * d;
      double* s = sum.data() + static_cast<size_t>(ids[i]) * d;
      for (int j = 0; j < d; ++j) s[j] += z[j];
      ++cnt[ids[i]];
    }
    for (int k = 0; k < cb.size; ++k) {
      if (cnt[k] == 0) continue;  // empty cluster keeps its code
      float* c = cb.codes.data() + static_cast<size_t>(k) * d;
      for (int j = 0; j < d; ++j) {
        c[j] = static_cast<float>(sum[static_cast<size_t>(k) * d + j] / cnt[k]);
      }
    }
  }
  // Keep the EMA state consistent with the fitted codes so later streaming
  // updates start from them.
  std::copy(cb.codes.begin(), cb.codes.end(), cb.ema_sum.begin());
  std::fill(cb.ema_size.begin(), cb.ema_size.end(), 1.0f);
  fitted = true;
}

std::vector<uint32_t> StubKeyframeTokenizer::tokenize(const Image8& frame,
                                                      const UnifiedVocab& vocab) {
  if (!fitted) {
    throw std::logic_error(
        "sequence: keyframe tokenizer is not fitted; call fit() on training frames first");
  }
  if (cb.size != vocab.visual_size) {
    seq_fail("keyframe codebook size " + std::to_string(cb.size) +
             " does not match the visual vocabulary size " + std::to_string(vocab.visual_size));
  }
  if (frame.height != kFrameSide || frame.width != kFrameSide) {
    seq_fail("keyframe must be " + std::to_string(kFrameSide) + "x" +
             std::to_string(kFrameSide) + ", got " + std::to_string(frame.height) + "x" +
             std::to_string(frame.width));
  }
  const std::vector<float> patches = keyframe_patches(frame, patch_size);
  const std::vector<int> codes = cb.quantize(patches.data(), tokens_per_frame());
  std::vector<uint32_t> ids;
  ids.reserve(codes.size());
  for (int c : codes) ids.push_back(vocab.visual_id(c));
  return ids;
}

Image8 StubKeyframeTokenizer::reconstruct(const std::vector<uint32_t>& ids,
                                          const UnifiedVocab& vocab) const {
  if (static_cast<int>(ids.size()) != tokens_per_frame()) {
    seq_fail("expected " + std::to_string(tokens_per_frame()) + " visual ids, got " +
             std::to_string(ids.size()));
  }
  const int g = grid();
  const int d = patch_size * patch_size;
  Image8 img;
  img.height = img.width = kFrameSide;
  img.channels = 1;
  img.pix.assign(static_cast<size_t>(kFrameSide) * kFrameSide, 0);
  for (int p = 0; p < g; ++p) {
    for (int q = 0; q < g; ++q) {
      const int code = vocab.visual_code(ids[static_cast<size_t>(p) * g + q]);
      if (code >= cb.size) seq_fail("visual code " + std::to_string(code) + " out of codebook");
      const float* c = cb.codes.data() + static_cast<size_t>(code) * d;
      for (int r = 0; r < patch_size; ++r) {
        for (int s = 0; s < patch_size; ++s) {
          const float v = std::clamp(c[r * patch_size + s], 0.0f, 1.0f);
          img.pix[static_cast<size_t>(p * patch_size + r) * kFrameSide + q * patch_size + s] =
              static_cast<uint8_t>(std::lround(v * 255.0f));
        }
      }
    }
  }
  return img;
}

}  // namespace motok
