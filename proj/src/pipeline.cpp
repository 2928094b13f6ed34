#include "motok/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <utility>

#include "json.hpp"
#include "motok/checkpoint.hpp"

namespace motok {
namespace {

using nlohmann::json;

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("pipeline: " + msg);
}

json stage_json(const StageSchedule& s) {
  return json{{"steps", s.steps}, {"batch", s.batch}, {"lr", s.lr}};
}

StageSchedule stage_from_json(const json& j) {
  StageSchedule s;
  s.steps = j.at("steps").get<int>();
  s.batch = j.at("batch").get<int>();
  s.lr = j.at("lr").get<double>();
  return s;
}

json meta_or_throw(const std::string& config_json, const std::string& path,
                   const char* expect_kind) {
  if (config_json.empty()) fail("checkpoint '" + path + "' carries no config");
  json meta;
  try {
    meta = json::parse(config_json);
  } catch (const json::exception&) {
    fail("checkpoint '" + path + "' has unreadable config");
  }
  if (meta.value("schema", 0) != 1) fail("checkpoint '" + path + "' has an unknown schema");
  if (meta.value("kind", std::string()) != expect_kind) {
    fail("checkpoint '" + path + "' is not a " + std::string(expect_kind) + " checkpoint");
  }
  if (!meta.contains("pipeline") || !meta.contains("step")) {
    fail("checkpoint '" + path + "' lacks pipeline config or step");
  }
  return meta;
}

// Copies stored values into live parameters, keeping storage identity.
void restore_params(const Snapshot& snap, const std::string& prefix,
                    const std::vector<Parameter*>& params, const std::string& path) {
  for (Parameter* p : params) {
    auto it = snap.tensors.find(prefix + p->name);
    if (it == snap.tensors.end()) fail("checkpoint '" + path + "' is missing tensor " + prefix + p->name);
    if (it->second.shape != p->value.shape) {
      fail("checkpoint '" + path + "' tensor " + prefix + p->name + " has the wrong shape");
    }
    *p->value.data = *it->second.data;
  }
}

const Tensor& tensor_or_throw(const Snapshot& snap, const std::string& name, const Shape& shape,
                              const std::string& path) {
  auto it = snap.tensors.find(name);
  if (it == snap.tensors.end()) fail("checkpoint '" + path + "' is missing tensor " + name);
  if (it->second.shape != shape) fail("checkpoint '" + path + "' tensor " + name + " has the wrong shape");
  return it->second;
}

struct WallTimer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

std::vector<std::string> list_files(const std::string& dir,
                                    std::initializer_list<const char*> exts) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) fail("data directory not found: " + dir);
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    for (const char* want : exts) {
      if (ext == want) {
        out.push_back(entry.path().string());
        break;
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

void check_same_config(const PipelineConfig& cfg, const PipelineConfig& stored,
                       const std::string& path) {
  if (cfg.to_json() != stored.to_json()) {
    fail("resume checkpoint '" + path + "' was produced under a different configuration");
  }
}

// Last ~tenth of n items, at least one once there are two.
size_t held_out_count(size_t n) { return n >= 2 ? std::max<size_t>(1, n / 10) : 0; }

int end_step(int total, int start, int run_steps) {
  return run_steps < 0 ? total : std::min(total, start + run_steps);
}

json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(); }

Image8 keyframe_image(const Clip& clip) {
  return Image8{clip.height, clip.width, clip.channels, clip.keyframe};
}

double field_mse(const MotionField& a, const MotionField& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    const double d = static_cast<double>(a.v[i]) - static_cast<double>(b.v[i]);
    acc += d * d;
  }
  return a.v.empty() ? 0.0 : acc / static_cast<double>(a.v.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration

PipelineConfig::PipelineConfig() {
  detok_enc.max_t = 32;  // must cover clip_len at decode time
}

void PipelineConfig::validate() const {
  vocab.validate();
  vqvae.validate();
  lm.validate();
  detok_net.validate();
  detok_enc.validate();
  if (!(clip_fps > 0.0)) fail("clip_fps must be positive");
  if (clip_len < 1) fail("clip_len must be at least 1");
  if (block_size < 1 || search_range < 1) fail("block_size and search_range must be positive");
  if (keyframe_patch < 1 || StubKeyframeTokenizer::kFrameSide % keyframe_patch != 0) {
    fail("keyframe_patch must divide the keyframe side " +
         std::to_string(StubKeyframeTokenizer::kFrameSide));
  }
  if (clip_len != vqvae.t) fail("clip_len must equal the motion tokenizer's temporal dim");
  if (motion_tokens != vqvae.n_latents()) {
    fail("motion_tokens is " + std::to_string(motion_tokens) +
         " but the downsample schedule yields " + std::to_string(vqvae.n_latents()));
  }
  if (vocab.motion_size != vqvae.codebook_size) {
    fail("vocab motion range must match the motion codebook size");
  }
  if (lm.vocab.signature() != vocab.signature()) {
    fail("lm vocabulary differs from the pipeline vocabulary");
  }
  if (detok_net.feat_dim != detok_enc.feat_dim) {
    fail("denoiser and motion-feature dimensions differ");
  }
  if (sigma_data != detok_net.sigma_data) {
    fail("sigma_data differs between the schedule and the denoiser");
  }
  if (detok_net.channels != 1) fail("the decode path is single-channel");
  if (detok_h < 2 || detok_w < 2 || detok_h % 2 != 0 || detok_w % 2 != 0) {
    fail("decode grid must be even and at least 2x2");
  }
  if (detok_block < 1 || detok_h % detok_block != 0 || detok_w % detok_block != 0) {
    fail("detok_block must divide the decode grid");
  }
  if (detok_search < 1) fail("detok_search must be positive");
  if (detok_train_t < 1 || detok_train_t > detok_enc.max_t) {
    fail("detok_train_t must fit the motion encoder's temporal capacity");
  }
  if (clip_len > detok_enc.max_t) fail("clip_len exceeds the motion encoder's temporal capacity");
  if (sched_steps < 1 || sched_base < sched_steps || sched_base % sched_steps != 0) {
    fail("sched_base must be a positive multiple of sched_steps");
  }
  if (!(beta_lo > 0.0) || beta_hi < beta_lo || beta_hi >= 1.0) {
    fail("beta range must satisfy 0 < lo <= hi < 1");
  }
  if (!(edm_logsigma_std > 0.0) || !(sigma_data > 0.0)) {
    fail("noise distribution scales must be positive");
  }
  const auto check_stage = [](const StageSchedule& s, const char* name) {
    if (s.steps < 1 || s.batch < 1 || !(s.lr > 0.0)) {
      fail(std::string(name) + " schedule needs positive steps, batch, and lr");
    }
  };
  check_stage(tokenizer_train, "tokenizer_train");
  check_stage(detok_train, "detok_train");
  check_stage(lm_train, "lm_train");
}

DiffusionSchedule PipelineConfig::schedule() const {
  DiffusionSchedule s = DiffusionSchedule::linear(sched_steps, sched_base, beta_lo, beta_hi);
  s.edm_logsigma_mean = edm_logsigma_mean;
  s.edm_logsigma_std = edm_logsigma_std;
  s.sigma_data = sigma_data;
  return s;
}

std::string PipelineConfig::to_json() const {
  json j;
  j["schema"] = 1;
  j["clip_fps"] = clip_fps;
  j["clip_len"] = clip_len;
  j["block_size"] = block_size;
  j["search_range"] = search_range;
  j["motion_tokens"] = motion_tokens;
  j["keyframe_patch"] = keyframe_patch;
  j["vocab"] = json{{"text_size", vocab.text_size},
                    {"visual_size", vocab.visual_size},
                    {"motion_size", vocab.motion_size}};
  j["vqvae"] = json::parse(vqvae.to_json());
  j["lm"] = json::parse(lm.to_json());
  j["detok_net"] = json::parse(detok_net.to_json());
  j["detok_enc"] = json::parse(detok_enc.to_json());
  j["detok_h"] = detok_h;
  j["detok_w"] = detok_w;
  j["detok_train_t"] = detok_train_t;
  j["detok_block"] = detok_block;
  j["detok_search"] = detok_search;
  j["sched_steps"] = sched_steps;
  j["sched_base"] = sched_base;
  j["beta_lo"] = beta_lo;
  j["beta_hi"] = beta_hi;
  j["edm_logsigma_mean"] = edm_logsigma_mean;
  j["edm_logsigma_std"] = edm_logsigma_std;
  j["sigma_data"] = sigma_data;
  j["tokenizer_train"] = stage_json(tokenizer_train);
  j["detok_train"] = stage_json(detok_train);
  j["lm_train"] = stage_json(lm_train);
  j["seed"] = seed;
  return j.dump(2);
}

PipelineConfig PipelineConfig::from_json(const std::string& text) {
  PipelineConfig c;
  try {
    const json j = json::parse(text);
    if (j.value("schema", 0) != 1) fail("config schema must be 1");
    c.clip_fps = j.at("clip_fps").get<double>();
    c.clip_len = j.at("clip_len").get<int>();
    c.block_size = j.at("block_size").get<int>();
    c.search_range = j.at("search_range").get<int>();
    c.motion_tokens = j.at("motion_tokens").get<int>();
    c.keyframe_patch = j.at("keyframe_patch").get<int>();
    const json& v = j.at("vocab");
    c.vocab.text_size = v.at("text_size").get<int>();
    c.vocab.visual_size = v.at("visual_size").get<int>();
    c.vocab.motion_size = v.at("motion_size").get<int>();
    c.vqvae = VqVaeConfig::from_json(j.at("vqvae").dump());
    c.lm = LMConfig::from_json(j.at("lm").dump());
    c.detok_net = ToyUNetConfig::from_json(j.at("detok_net").dump());
    c.detok_enc = MotionEncoderConfig::from_json(j.at("detok_enc").dump());
    c.detok_h = j.at("detok_h").get<int>();
    c.detok_w = j.at("detok_w").get<int>();
    c.detok_train_t = j.at("detok_train_t").get<int>();
    c.detok_block = j.at("detok_block").get<int>();
    c.detok_search = j.at("detok_search").get<int>();
    c.sched_steps = j.at("sched_steps").get<int>();
    c.sched_base = j.at("sched_base").get<int>();
    c.beta_lo = j.at("beta_lo").get<double>();
    c.beta_hi = j.at("beta_hi").get<double>();
    c.edm_logsigma_mean = j.at("edm_logsigma_mean").get<double>();
    c.edm_logsigma_std = j.at("edm_logsigma_std").get<double>();
    c.sigma_data = j.at("sigma_data").get<double>();
    c.tokenizer_train = stage_from_json(j.at("tokenizer_train"));
    c.detok_train = stage_from_json(j.at("detok_train"));
    c.lm_train = stage_from_json(j.at("lm_train"));
    c.seed = j.at("seed").get<uint64_t>();
  } catch (const json::exception& e) {
    fail(std::string("config parse: ") + e.what());
  }
  c.validate();
  return c;
}

void PipelineConfig::save_file(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("pipeline: cannot write config file '" + path + "'");
  os << to_json() << "\n";
  if (!os) throw std::runtime_error("pipeline: write failed for config file '" + path + "'");
}

PipelineConfig PipelineConfig::load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open config file '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return from_json(text);
}

// ---------------------------------------------------------------------------
// tokenizer bundle persistence

TokenizerBundle::TokenizerBundle(const PipelineConfig& cfg, uint64_t seed)
    : vq(cfg.vqvae, seed), kf(cfg.keyframe_patch, cfg.vocab.visual_size, seed + 1) {}

void save_tokenizer(const std::string& path, const PipelineConfig& cfg,
                    const TokenizerBundle& bundle, int64_t step) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (Parameter* p : const_cast<TokenizerBundle&>(bundle).vq.parameters()) {
    tensors.emplace_back("vq/" + p->name, p->value);
  }
  const Codebook& cb = bundle.vq.cb;
  tensors.emplace_back("vq/cb/codes", Tensor({cb.size, cb.dim}, cb.codes));
  tensors.emplace_back("vq/cb/ema_size", Tensor({cb.size}, cb.ema_size));
  tensors.emplace_back("vq/cb/ema_sum", Tensor({cb.size, cb.dim}, cb.ema_sum));
  std::vector<float> unused(cb.unused_steps.begin(), cb.unused_steps.end());
  tensors.emplace_back("vq/cb/unused_steps", Tensor({cb.size}, unused));
  const Codebook& kcb = bundle.kf.cb;
  tensors.emplace_back("kf/cb/codes", Tensor({kcb.size, kcb.dim}, kcb.codes));
  tensors.emplace_back("kf/fitted",
                       Tensor({1}, std::vector<float>{bundle.kf.fitted ? 1.0f : 0.0f}));
  json meta;
  meta["schema"] = 1;
  meta["kind"] = "tokenizer";
  meta["pipeline"] = json::parse(cfg.to_json());
  meta["step"] = step;
  save_snapshot(path, tensors, meta.dump());
}

TokenizerSnapshot load_tokenizer(const std::string& path) {
  const Snapshot snap = load_snapshot(path);
  const json meta = meta_or_throw(snap.config_json, path, "tokenizer");
  PipelineConfig cfg = PipelineConfig::from_json(meta.at("pipeline").dump());
  TokenizerBundle bundle(cfg, cfg.seed);
  restore_params(snap, "vq/", bundle.vq.parameters(), path);
  Codebook& cb = bundle.vq.cb;
  cb.codes = *tensor_or_throw(snap, "vq/cb/codes", {cb.size, cb.dim}, path).data;
  cb.ema_size = *tensor_or_throw(snap, "vq/cb/ema_size", {cb.size}, path).data;
  cb.ema_sum = *tensor_or_throw(snap, "vq/cb/ema_sum", {cb.size, cb.dim}, path).data;
  const Tensor& unused = tensor_or_throw(snap, "vq/cb/unused_steps", {cb.size}, path);
  for (int k = 0; k < cb.size; ++k) {
    cb.unused_steps[static_cast<size_t>(k)] =
        static_cast<int>(std::lround((*unused.data)[static_cast<size_t>(k)]));
  }
  Codebook& kcb = bundle.kf.cb;
  kcb.codes = *tensor_or_throw(snap, "kf/cb/codes", {kcb.size, kcb.dim}, path).data;
  bundle.kf.fitted = (*tensor_or_throw(snap, "kf/fitted", {1}, path).data)[0] != 0.0f;
  return TokenizerSnapshot{std::move(cfg), std::move(bundle), meta.at("step").get<int64_t>()};
}

void save_detok_stage(const std::string& path, const PipelineConfig& cfg, const ToyUNet3D& net,
                      const MotionEncoder& enc, int64_t step) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (Parameter* p : const_cast<ToyUNet3D&>(net).parameters()) {
    tensors.emplace_back("unet/" + p->name, p->value);
  }
  for (Parameter* p : const_cast<MotionEncoder&>(enc).parameters()) {
    tensors.emplace_back("menc/" + p->name, p->value);
  }
  json meta;
  meta["schema"] = 1;
  meta["kind"] = "detok";
  meta["unet"] = json::parse(net.config().to_json());
  meta["menc"] = json::parse(enc.config().to_json());
  meta["pipeline"] = json::parse(cfg.to_json());
  meta["step"] = step;
  save_snapshot(path, tensors, meta.dump());
}

DetokSnapshot load_detok_stage(const std::string& path) {
  const Snapshot snap = load_snapshot(path);
  const json meta = meta_or_throw(snap.config_json, path, "detok");
  PipelineConfig cfg = PipelineConfig::from_json(meta.at("pipeline").dump());
  auto [net, enc] = load_detokenizer(path);
  return DetokSnapshot{std::move(cfg), std::move(net), std::move(enc),
                       meta.at("step").get<int64_t>()};
}

void save_lm_stage(const std::string& path, const PipelineConfig& cfg, const LM& model,
                   int64_t step) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (Parameter* p : const_cast<LM&>(model).parameters()) {
    tensors.emplace_back(p->name, p->value);
  }
  json meta;
  meta["schema"] = 1;
  meta["kind"] = "lm";
  meta["lm"] = json::parse(model.config().to_json());
  meta["pipeline"] = json::parse(cfg.to_json());
  meta["step"] = step;
  save_snapshot(path, tensors, meta.dump());
}

LmSnapshot load_lm_stage(const std::string& path) {
  const Snapshot snap = load_snapshot(path);
  const json meta = meta_or_throw(snap.config_json, path, "lm");
  PipelineConfig cfg = PipelineConfig::from_json(meta.at("pipeline").dump());
  LM model(LMConfig::from_json(meta.at("lm").dump()), cfg.seed);
  restore_params(snap, "", model.parameters(), path);
  return LmSnapshot{std::move(cfg), std::move(model), meta.at("step").get<int64_t>()};
}

// ---------------------------------------------------------------------------
// video <-> token streams

TokenizeResult tokenize_video(const PipelineConfig& cfg, TokenizerBundle& bundle,
                              const RawVideo& video) {
  cfg.validate();
  video.validate();
  if (!bundle.kf.fitted) {
    throw std::runtime_error(
        "pipeline: keyframe codebook is untrained; run `motok train --stage tokenizer` and "
        "pass the resulting checkpoint");
  }
  const std::vector<Clip> clips = sample_clips(video, cfg.clip_fps, cfg.clip_len);
  if (clips.empty()) {
    fail("video yields no clip (needs " + std::to_string(cfg.clip_len + 1) +
         " sampled frames at " + std::to_string(cfg.clip_fps) + " fps)");
  }
  TokenizeResult out;
  std::vector<int64_t> counts(static_cast<size_t>(cfg.vocab.motion_size), 0);
  std::vector<ClipTokens> groups;
  groups.reserve(clips.size());
  for (const Clip& clip : clips) {
    ClipTokens ct;
    const Image8 key = resize_nearest(keyframe_image(clip), StubKeyframeTokenizer::kFrameSide,
                                      StubKeyframeTokenizer::kFrameSide);
    ct.visual = bundle.kf.tokenize(key, cfg.vocab);
    const MotionField raw = clip_motion(clip, cfg.block_size, cfg.search_range);
    const MotionField norm = normalize_motion(raw, clip.width, clip.height);
    const MotionField grid = resize_motion(norm, cfg.vqvae.grid_h, cfg.vqvae.grid_w);
    const std::vector<int> codes = bundle.vq.tokenize(grid);
    ct.motion.reserve(codes.size());
    for (int c : codes) {
      ct.motion.push_back(cfg.vocab.motion_id(c));
      ++counts[static_cast<size_t>(c)];
    }
    out.visual_counts.push_back(static_cast<int>(ct.visual.size()));
    out.motion_counts.push_back(static_cast<int>(ct.motion.size()));
    groups.push_back(std::move(ct));
  }
  out.seq = build_sequence({}, groups, SequenceOrder::kMediaFirst, cfg.vocab);
  out.usage = codebook_usage(counts);
  return out;
}

std::vector<ClipTokens> extract_clips(const TokenSequence& seq, const UnifiedVocab& vocab) {
  if (const auto viol = validate(seq, vocab)) {
    fail("sequence invalid at position " + std::to_string(viol->position) + ": " +
         viol->message);
  }
  std::vector<ClipTokens> clips;
  ClipTokens cur;
  bool awaiting_motion = false;
  const size_t n = seq.ids.size();
  for (size_t i = 0; i < n;) {
    const uint32_t id = seq.ids[i];
    if (id == vocab.img()) {
      if (awaiting_motion) fail("keyframe group lacks a following motion group");
      cur = ClipTokens{};
      for (++i; i < n && seq.ids[i] != vocab.img_end(); ++i) cur.visual.push_back(seq.ids[i]);
      if (i == n) fail("keyframe group never closes");
      ++i;
      awaiting_motion = true;
    } else if (id == vocab.mov()) {
      if (!awaiting_motion) fail("motion group lacks a preceding keyframe group");
      for (++i; i < n && seq.ids[i] != vocab.mov_end(); ++i) cur.motion.push_back(seq.ids[i]);
      if (i == n) fail("motion group never closes");
      ++i;
      clips.push_back(std::move(cur));
      awaiting_motion = false;
    } else {
      ++i;
    }
  }
  if (awaiting_motion) fail("keyframe group lacks a following motion group");
  return clips;
}

RawVideo detokenize_sequences(const PipelineConfig& cfg, const TokenizerBundle& bundle,
                              const ToyUNet3D& net, const MotionEncoder& enc,
                              const std::vector<TokenSequence>& seqs, int delta_t,
                              uint64_t seed) {
  cfg.validate();
  std::vector<DecodeClipSpec> specs;
  for (const TokenSequence& seq : seqs) {
    for (ClipTokens& ct : extract_clips(seq, cfg.vocab)) {
      if (static_cast<int>(ct.visual.size()) != bundle.kf.tokens_per_frame()) {
        fail("keyframe group holds " + std::to_string(ct.visual.size()) + " ids, expected " +
             std::to_string(bundle.kf.tokens_per_frame()));
      }
      if (static_cast<int>(ct.motion.size()) != cfg.motion_tokens) {
        fail("motion group holds " + std::to_string(ct.motion.size()) + " ids, expected " +
             std::to_string(cfg.motion_tokens));
      }
      const Image8 recon = bundle.kf.reconstruct(ct.visual, cfg.vocab);
      const Image8 sized = resize_nearest(recon, cfg.detok_h, cfg.detok_w);
      const std::vector<uint8_t> luma =
          to_luma(sized.pix.data(), sized.height, sized.width, sized.channels);
      std::vector<float> kv(luma.size());
      for (size_t i = 0; i < luma.size(); ++i) kv[i] = static_cast<float>(luma[i]) / 255.0f;
      DecodeClipSpec spec;
      spec.keyframe = Tensor({cfg.detok_h, cfg.detok_w, 1}, kv);
      std::vector<int> codes(ct.motion.size());
      for (size_t i = 0; i < ct.motion.size(); ++i) {
        codes[i] = cfg.vocab.motion_code(ct.motion[i]);
      }
      spec.motion = bundle.vq.detokenize(codes);
      specs.push_back(std::move(spec));
    }
  }
  if (specs.empty()) fail("no media groups to decode");

  std::vector<DecodedClip> decoded =
      decode_long(net, net, specs, cfg.schedule(), delta_t, seed, &enc, true);

  RawVideo out;
  out.width = cfg.detok_w;
  out.height = cfg.detok_h;
  out.channels = 1;
  int64_t num = std::llround(cfg.clip_fps * 1000.0);
  int64_t den = 1000;
  const int64_t g = std::gcd(num, den);
  if (g > 0) {
    num /= g;
    den /= g;
  }
  out.fps_num = static_cast<uint32_t>(std::max<int64_t>(1, num));
  out.fps_den = static_cast<uint32_t>(den);
  const size_t per = static_cast<size_t>(cfg.detok_h) * static_cast<size_t>(cfg.detok_w);
  const auto emit = [&](Latent& l) {
    clamp01(l);
    const int frames = l.shape.empty() ? 0 : l.shape[0];
    for (int f = 0; f < frames; ++f) {
      std::vector<uint8_t> frame(per);
      for (size_t i = 0; i < per; ++i) {
        frame[i] = static_cast<uint8_t>(
            std::lround(l.v[static_cast<size_t>(f) * per + i] * 255.0));
      }
      out.frames.push_back(std::move(frame));
    }
  };
  for (DecodedClip& d : decoded) {
    emit(d.keyframe);
    emit(d.frames);
  }
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// training stages

std::string TrainReport::to_json() const {
  json j;
  j["stage"] = stage;
  j["checkpoint"] = checkpoint;
  j["start_step"] = start_step;
  j["steps_done"] = steps_done;
  j["total_steps"] = total_steps;
  j["wall_seconds"] = wall_seconds;
  j["losses"] = losses;
  j["held_out"] = json{{"name", held_out_name}, {"value", finite_or_null(held_out)}};
  j["aborted"] = aborted;
  j["diagnostics"] = diagnostics;
  j["scalars"] = scalars;
  return j.dump(2);
}

TrainReport train_stage_tokenizer(const PipelineConfig& cfg, const std::string& data_dir,
                                  const std::string& out_ckpt, const std::string& resume_ckpt,
                                  int run_steps) {
  cfg.validate();
  WallTimer timer;
  const std::vector<std::string> field_files = list_files(data_dir, {".mvec"});
  const std::vector<std::string> video_files = list_files(data_dir, {".rvid"});
  if (field_files.empty()) fail("no .mvec motion fields in " + data_dir);

  std::vector<MotionField> fields;
  fields.reserve(field_files.size());
  for (const std::string& f : field_files) {
    MotionField m = read_mvec(f);
    if (!m.normalized) fail(f + " holds a raw field; training expects normalized fields");
    if (m.t != cfg.clip_len) {
      fail(f + " has " + std::to_string(m.t) + " temporal slices, expected " +
           std::to_string(cfg.clip_len));
    }
    fields.push_back(resize_motion(m, cfg.vqvae.grid_h, cfg.vqvae.grid_w));
  }
  const size_t held = held_out_count(fields.size());
  const size_t n_train = fields.size() - held;

  int64_t start = 0;
  std::optional<TokenizerBundle> bundle;
  if (!resume_ckpt.empty()) {
    TokenizerSnapshot snap = load_tokenizer(resume_ckpt);
    check_same_config(cfg, snap.cfg, resume_ckpt);
    start = snap.step;
    bundle.emplace(std::move(snap.bundle));
  } else {
    bundle.emplace(cfg, cfg.seed);
  }
  if (start > cfg.tokenizer_train.steps) fail("checkpoint is past the configured schedule");

  if (!bundle->kf.fitted) {
    if (video_files.empty()) {
      fail("no .rvid videos in " + data_dir + " to fit the keyframe codebook");
    }
    std::vector<Image8> frames;
    for (const std::string& f : video_files) {
      const RawVideo v = read_rvid(f);
      const std::vector<Clip> clips = sample_clips(v, cfg.clip_fps, cfg.clip_len);
      if (clips.empty()) {
        const Image8 first{v.height, v.width, v.channels, v.frames.at(0)};
        frames.push_back(resize_nearest(first, StubKeyframeTokenizer::kFrameSide,
                                        StubKeyframeTokenizer::kFrameSide));
        continue;
      }
      for (const Clip& clip : clips) {
        frames.push_back(resize_nearest(keyframe_image(clip), StubKeyframeTokenizer::kFrameSide,
                                        StubKeyframeTokenizer::kFrameSide));
      }
    }
    bundle->kf.fit(frames);
  }

  TrainReport rep;
  rep.stage = "tokenizer";
  rep.checkpoint = out_ckpt;
  rep.start_step = start;
  rep.total_steps = cfg.tokenizer_train.steps;
  VqVaeTrainer trainer(bundle->vq, cfg.seed + 2);
  const int stop = end_step(cfg.tokenizer_train.steps, static_cast<int>(start), run_steps);
  for (int step = static_cast<int>(start); step < stop; ++step) {
    Rng srng(cfg.seed * kGolden + static_cast<uint64_t>(step));
    std::vector<const MotionField*> batch;
    batch.reserve(static_cast<size_t>(cfg.tokenizer_train.batch));
    for (int b = 0; b < cfg.tokenizer_train.batch; ++b) {
      batch.push_back(&fields[static_cast<size_t>(
          srng.uniform_int(0, static_cast<int>(n_train) - 1))]);
    }
    const VqTrainStats st = trainer.step(batch, static_cast<float>(cfg.tokenizer_train.lr));
    if (st.aborted) {
      rep.aborted = true;
      rep.diagnostics = st.diagnostics;
      break;
    }
    if (!rep.losses.empty() && st.total > 10.0 * (rep.losses.front() + 1e-9)) {
      rep.aborted = true;
      rep.diagnostics = "diverged at step " + std::to_string(step) + ": loss " +
                        std::to_string(st.total) + " exceeds 10x the initial " +
                        std::to_string(rep.losses.front());
      break;
    }
    rep.losses.push_back(st.total);
  }
  rep.steps_done = static_cast<int64_t>(rep.losses.size());

  double held_mse = 0.0;
  const size_t eval_from = held > 0 ? n_train : 0;
  const size_t eval_n = held > 0 ? held : 1;
  for (size_t i = eval_from; i < eval_from + eval_n; ++i) {
    const MotionField rec = bundle->vq.detokenize(bundle->vq.tokenize(fields[i]));
    held_mse += field_mse(fields[i], rec);
  }
  rep.held_out_name = "held_out_recon_mse";
  rep.held_out = held_mse / static_cast<double>(eval_n);
  const UsageStats usage = codebook_usage(trainer.assignment_counts());
  rep.scalars["perplexity"] = usage.perplexity;
  rep.scalars["dead_codes"] = static_cast<double>(usage.dead_codes);

  save_tokenizer(out_ckpt, cfg, *bundle, start + rep.steps_done);
  rep.wall_seconds = timer.seconds();
  return rep;
}

namespace {

// One training clip shrunk onto the decode grid, with its decode-time view.
struct GridClip {
  DetokTrainItem item;
  DecodeClipSpec spec;
};

GridClip grid_clip(const PipelineConfig& cfg, const Clip& clip) {
  Clip small;
  small.width = cfg.detok_w;
  small.height = cfg.detok_h;
  small.channels = 1;
  const auto shrink = [&](const std::vector<uint8_t>& frame) {
    const Image8 img{clip.height, clip.width, clip.channels, frame};
    const Image8 sized = resize_nearest(img, cfg.detok_h, cfg.detok_w);
    return to_luma(sized.pix.data(), sized.height, sized.width, sized.channels);
  };
  small.keyframe = shrink(clip.keyframe);
  small.frames.reserve(clip.frames.size());
  for (const auto& fr : clip.frames) small.frames.push_back(shrink(fr));

  const MotionField norm = normalize_motion(
      clip_motion(small, cfg.detok_block, cfg.detok_search), cfg.detok_w, cfg.detok_h);
  const int t = small.t();
  const size_t per = static_cast<size_t>(cfg.detok_h) * static_cast<size_t>(cfg.detok_w);
  std::vector<float> x0(static_cast<size_t>(t) * per);
  for (int f = 0; f < t; ++f) {
    for (size_t i = 0; i < per; ++i) {
      x0[static_cast<size_t>(f) * per + i] = static_cast<float>(small.frames[static_cast<size_t>(f)][i]) / 255.0f;
    }
  }
  std::vector<float> kv(per);
  for (size_t i = 0; i < per; ++i) kv[i] = static_cast<float>(small.keyframe[i]) / 255.0f;

  GridClip out;
  out.spec.keyframe = Tensor({cfg.detok_h, cfg.detok_w, 1}, kv);
  out.spec.motion = norm;
  out.item.x0 = Tensor({t, cfg.detok_h, cfg.detok_w, 1}, x0);
  out.item.pack = build_condition(out.spec.keyframe, norm, t, nullptr);
  return out;
}

}  // namespace

TrainReport train_stage_detok(const PipelineConfig& cfg, const std::string& data_dir,
                              const std::string& out_ckpt, const std::string& resume_ckpt,
                              int run_steps) {
  cfg.validate();
  WallTimer timer;
  const std::vector<std::string> video_files = list_files(data_dir, {".rvid"});
  if (video_files.empty()) fail("no .rvid videos in " + data_dir);

  std::vector<GridClip> clips;
  for (const std::string& f : video_files) {
    const RawVideo v = read_rvid(f);
    for (const Clip& clip : sample_clips(v, cfg.clip_fps, cfg.detok_train_t)) {
      clips.push_back(grid_clip(cfg, clip));
    }
  }
  if (clips.empty()) {
    fail("videos in " + data_dir + " are too short for " + std::to_string(cfg.detok_train_t) +
         "-frame clips");
  }
  const size_t held = held_out_count(clips.size());
  const size_t n_train = clips.size() - held;

  int64_t start = 0;
  std::optional<ToyUNet3D> net;
  std::optional<MotionEncoder> enc;
  if (!resume_ckpt.empty()) {
    DetokSnapshot snap = load_detok_stage(resume_ckpt);
    check_same_config(cfg, snap.cfg, resume_ckpt);
    start = snap.step;
    net.emplace(std::move(snap.net));
    enc.emplace(std::move(snap.enc));
  } else {
    net.emplace(cfg.detok_net, cfg.seed + 3);
    enc.emplace(cfg.detok_enc, cfg.seed + 4);
  }
  if (start > cfg.detok_train.steps) fail("checkpoint is past the configured schedule");

  TrainReport rep;
  rep.stage = "detok";
  rep.checkpoint = out_ckpt;
  rep.start_step = start;
  rep.total_steps = cfg.detok_train.steps;

  if (start < cfg.detok_train.steps) {
    std::vector<DetokTrainItem> items;
    items.reserve(n_train);
    for (size_t i = 0; i < n_train; ++i) items.push_back(clips[i].item);
    DetokTrainConfig tc;
    tc.steps = cfg.detok_train.steps;
    tc.start_step = static_cast<int>(start);
    tc.run_steps = run_steps;
    tc.batch = cfg.detok_train.batch;
    tc.lr = cfg.detok_train.lr;
    tc.seed = cfg.seed + 5;
    const DetokTrainStats st = train_toy_detokenizer(*net, *enc, items, cfg.schedule(), tc);
    rep.losses = st.losses;
    rep.aborted = st.aborted;
    rep.diagnostics = st.diagnostics;
  }
  rep.steps_done = static_cast<int64_t>(rep.losses.size());

  const size_t probe = held > 0 ? n_train : 0;
  const std::vector<DecodedClip> dec = decode_long(*net, *net, {clips[probe].spec},
                                                   cfg.schedule(), 0, cfg.seed + 6, &*enc, true);
  Latent truth = to_latent(clips[probe].item.x0);
  Latent got = dec.at(0).frames;
  clamp01(truth);
  clamp01(got);
  rep.held_out_name = "held_out_psnr_db";
  rep.held_out = psnr(got, truth);

  save_detok_stage(out_ckpt, cfg, *net, *enc, start + rep.steps_done);
  rep.wall_seconds = timer.seconds();
  return rep;
}

TrainReport train_stage_lm(const PipelineConfig& cfg, const std::string& data_dir,
                           const std::string& out_ckpt, const std::string& resume_ckpt,
                           int run_steps) {
  cfg.validate();
  WallTimer timer;
  const std::vector<std::string> files = list_files(data_dir, {".tseq", ".jsonl"});
  if (files.empty()) fail("no .tseq or .jsonl sequence files in " + data_dir);

  std::vector<TokenSequence> corpus;
  for (const std::string& f : files) {
    std::vector<TokenSequence> part = f.ends_with(".jsonl") ? read_jsonl(f, cfg.vocab)
                                                            : read_tseq(f, cfg.vocab);
    corpus.insert(corpus.end(), std::make_move_iterator(part.begin()),
                  std::make_move_iterator(part.end()));
  }
  if (corpus.empty()) fail("sequence files in " + data_dir + " hold no sequences");
  const size_t held = held_out_count(corpus.size());
  const size_t n_train = corpus.size() - held;

  int64_t start = 0;
  std::optional<LM> model;
  if (!resume_ckpt.empty()) {
    LmSnapshot snap = load_lm_stage(resume_ckpt);
    check_same_config(cfg, snap.cfg, resume_ckpt);
    start = snap.step;
    model.emplace(std::move(snap.model));
  } else {
    model.emplace(cfg.lm, cfg.seed + 7);
  }
  if (start > cfg.lm_train.steps) fail("checkpoint is past the configured schedule");

  TrainReport rep;
  rep.stage = "lm";
  rep.checkpoint = out_ckpt;
  rep.start_step = start;
  rep.total_steps = cfg.lm_train.steps;

  if (start < cfg.lm_train.steps) {
    const std::vector<TokenSequence> train_set(corpus.begin(),
                                               corpus.begin() + static_cast<int64_t>(n_train));
    LMTrainConfig tc;
    tc.steps = cfg.lm_train.steps;
    tc.start_step = static_cast<int>(start);
    tc.run_steps = run_steps;
    tc.batch = cfg.lm_train.batch;
    tc.lr = cfg.lm_train.lr;
    tc.seed = cfg.seed + 8;
    const LMTrainStats st = train_lm(*model, train_set, tc);
    rep.losses = st.losses;
    rep.aborted = st.aborted;
    rep.diagnostics = st.diagnostics;
  }
  rep.steps_done = static_cast<int64_t>(rep.losses.size());

  const size_t eval_from = held > 0 ? n_train : 0;
  const size_t eval_n = held > 0 ? held : 1;
  double nll_sum = 0.0;
  int evaluated = 0;
  for (size_t i = eval_from; i < eval_from + eval_n; ++i) {
    const auto& ids = corpus[i].ids;
    if (ids.size() < 2 || static_cast<int>(ids.size()) > cfg.lm.context) continue;
    nll_sum += model->nll(ids);
    ++evaluated;
  }
  rep.held_out_name = "held_out_nll";
  rep.held_out = evaluated > 0 ? nll_sum / evaluated
                               : std::numeric_limits<double>::quiet_NaN();

  save_lm_stage(out_ckpt, cfg, *model, start + rep.steps_done);
  rep.wall_seconds = timer.seconds();
  return rep;
}

}  // namespace motok
