#include "motok/detok.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"
#include "motok/checkpoint.hpp"
#include "motok/optim.hpp"
#include "motok/synth.hpp"

namespace motok {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("detok: " + msg); }

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;
constexpr float kMotionGain = 8.0f;

void check_motion_tensor(const Tensor& m) {
  if (m.rank() != 4 || m.dim(3) != 2) {
    fail("motion tensor must be (T, H, W, 2), got " + shape_str(m.shape));
  }
}

std::string dims(const Tensor& t) { return shape_str(t.shape); }

}  // namespace

// ---------------------------------------------------------------------------
// conditioning encoder

void MotionEncoderConfig::validate() const {
  if (feat_dim <= 0 || heads <= 0 || max_t <= 0) fail("encoder dimensions must be positive");
  if (feat_dim % heads != 0) {
    fail("encoder heads (" + std::to_string(heads) + ") must divide feat_dim (" +
         std::to_string(feat_dim) + ")");
  }
}

std::string MotionEncoderConfig::to_json() const {
  nlohmann::json j;
  j["schema"] = 1;
  j["feat_dim"] = feat_dim;
  j["heads"] = heads;
  j["max_t"] = max_t;
  return j.dump();
}

MotionEncoderConfig MotionEncoderConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    fail("encoder config JSON does not parse");
  }
  if (j.value("schema", 0) != 1) fail("encoder config JSON has an unknown schema");
  MotionEncoderConfig cfg;
  try {
    cfg.feat_dim = j.at("feat_dim").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.max_t = j.at("max_t").get<int>();
  } catch (const nlohmann::json::exception&) {
    fail("encoder config JSON is missing required fields");
  }
  cfg.validate();
  return cfg;
}

MotionEncoder::MotionEncoder(MotionEncoderConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int d = cfg_.feat_dim;
  auto weight = [&](const std::string& name, Shape shape) {
    rng.fill_normal(add_param(name, std::move(shape)).value, 0.0, 0.02);
  };
  auto zeros = [&](const std::string& name, Shape shape) { add_param(name, std::move(shape)); };
  auto gamma = [&](const std::string& name) {
    Parameter& p = add_param(name, {d});
    std::fill(p.value.data->begin(), p.value.data->end(), 1.0f);
  };

  weight("embed.w", {2, d});
  zeros("embed.b", {d});
  weight("pos.emb", {cfg_.max_t, d});
  gamma("attn.ln.g");
  zeros("attn.ln.b", {d});
  for (const char* w : {"wq", "wk", "wv", "wo"}) weight(std::string("attn.") + w, {d, d});
  for (const char* b : {"bq", "bk", "bv", "bo"}) zeros(std::string("attn.") + b, {d});
  gamma("ffn.ln.g");
  zeros("ffn.ln.b", {d});
  weight("ffn.w1", {d, 4 * d});
  zeros("ffn.b1", {4 * d});
  weight("ffn.w2", {4 * d, d});
  zeros("ffn.b2", {d});
}

Parameter& MotionEncoder::add_param(const std::string& name, Shape shape) {
  params_.push_back(std::make_unique<Parameter>(name, Tensor(std::move(shape), 0.0f)));
  return *params_.back();
}

Parameter& MotionEncoder::get(const std::string& name) const {
  Parameter* p = find(name);
  if (!p) throw std::logic_error("detok: no encoder parameter named '" + name + "'");
  return *p;
}

Parameter* MotionEncoder::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

std::vector<Parameter*> MotionEncoder::parameters() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

Tensor MotionEncoder::forward(Tape& tape, const Tensor& motion) const {
  check_motion_tensor(motion);
  const int t = static_cast<int>(motion.dim(0));
  const int h = static_cast<int>(motion.dim(1));
  const int w = static_cast<int>(motion.dim(2));
  if (t > cfg_.max_t) {
    fail("motion has " + std::to_string(t) + " temporal slices but the encoder caps at " +
         std::to_string(cfg_.max_t));
  }
  const int d = cfg_.feat_dim;
  const int sites = h * w;
  const int n = sites * t;

  auto P = [&](const std::string& s) { return tape.leaf(get(s)); };

  // Normalized displacements are fractions of the frame, typically well
  // below 0.1; bring them to unit scale before embedding so the tokens do
  // not start drowned under the positional vectors.
  Tensor x = tape.linear(tape.scale(tape.reshape(tape.constant(motion), {n, 2}), kMotionGain),
                         P("embed.w"), P("embed.b"));
  std::vector<int> tids(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) tids[static_cast<size_t>(i)] = i / sites;
  x = tape.add(x, tape.embedding(tids, P("pos.emb")));

  // (T*H*W, d) -> (sites, T, d): temporal mixing only, one batch per cell.
  x = tape.reshape(tape.permute(tape.reshape(x, {t, sites, d}), {1, 0, 2}), {sites, t, d});
  {
    Tensor a = tape.layer_norm(x, P("attn.ln.g"), P("attn.ln.b"));
    Tensor att = tape.attention(tape.linear(a, P("attn.wq"), P("attn.bq")),
                                tape.linear(a, P("attn.wk"), P("attn.bk")),
                                tape.linear(a, P("attn.wv"), P("attn.bv")), cfg_.heads, false);
    x = tape.add(x, tape.linear(att, P("attn.wo"), P("attn.bo")));
  }
  {
    Tensor a = tape.layer_norm(x, P("ffn.ln.g"), P("ffn.ln.b"));
    a = tape.linear(tape.gelu(tape.linear(a, P("ffn.w1"), P("ffn.b1"))), P("ffn.w2"), P("ffn.b2"));
    x = tape.add(x, a);
  }
  x = tape.reshape(tape.permute(tape.reshape(x, {sites, t, d}), {1, 0, 2}), {1, n, d});
  return x;
}

Tensor MotionEncoder::features(const Tensor& motion) const {
  Tape tape(false);
  return forward(tape, motion);
}

// ---------------------------------------------------------------------------
// toy denoiser

void ToyUNetConfig::validate() const {
  if (channels <= 0 || width <= 0 || heads <= 0 || feat_dim <= 0) {
    fail("denoiser dimensions must be positive");
  }
  if (width % heads != 0) {
    fail("denoiser heads (" + std::to_string(heads) + ") must divide width (" +
         std::to_string(width) + ")");
  }
  if (!(sigma_data > 0.0)) fail("sigma_data must be positive");
}

std::string ToyUNetConfig::to_json() const {
  nlohmann::json j;
  j["schema"] = 1;
  j["channels"] = channels;
  j["width"] = width;
  j["heads"] = heads;
  j["feat_dim"] = feat_dim;
  j["sigma_data"] = sigma_data;
  return j.dump();
}

ToyUNetConfig ToyUNetConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    fail("denoiser config JSON does not parse");
  }
  if (j.value("schema", 0) != 1) fail("denoiser config JSON has an unknown schema");
  ToyUNetConfig cfg;
  try {
    cfg.channels = j.at("channels").get<int>();
    cfg.width = j.at("width").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.feat_dim = j.at("feat_dim").get<int>();
    cfg.sigma_data = j.at("sigma_data").get<double>();
  } catch (const nlohmann::json::exception&) {
    fail("denoiser config JSON is missing required fields");
  }
  cfg.validate();
  return cfg;
}

ToyUNet3D::ToyUNet3D(ToyUNetConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int f = cfg_.width;
  const int c = cfg_.channels;
  const int in_ch = 2 * c + 2;
  auto weight = [&](const std::string& name, Shape shape) {
    rng.fill_normal(add_param(name, std::move(shape)).value, 0.0, 0.02);
  };
  auto zeros = [&](const std::string& name, Shape shape) { add_param(name, std::move(shape)); };
  auto gamma = [&](const std::string& name) {
    Parameter& p = add_param(name, {f});
    std::fill(p.value.data->begin(), p.value.data->end(), 1.0f);
  };

  weight("in.w", {3, 3, in_ch, f});
  zeros("in.b", {f});
  weight("ne.w1", {1, f});
  zeros("ne.b1", {f});
  weight("ne.w2", {f, f});
  zeros("ne.b2", {f});
  weight("down.w", {3, 3, f, f});
  zeros("down.b", {f});
  gamma("tattn.ln.g");
  zeros("tattn.ln.b", {f});
  for (const char* w : {"wq", "wk", "wv", "wo"}) weight(std::string("tattn.") + w, {f, f});
  for (const char* b : {"bq", "bk", "bv", "bo"}) zeros(std::string("tattn.") + b, {f});
  gamma("xattn.ln.g");
  zeros("xattn.ln.b", {f});
  weight("xattn.wq", {f, f});
  zeros("xattn.bq", {f});
  weight("xattn.wk", {cfg_.feat_dim, f});
  zeros("xattn.bk", {f});
  weight("xattn.wv", {cfg_.feat_dim, f});
  zeros("xattn.bv", {f});
  weight("xattn.wo", {f, f});
  zeros("xattn.bo", {f});
  weight("up.w", {3, 3, 2 * f, f});
  zeros("up.b", {f});
  // Zero prediction head: the untrained denoiser is the pure skip path.
  zeros("out.w", {3, 3, f, c});
  zeros("out.b", {c});
}

Parameter& ToyUNet3D::add_param(const std::string& name, Shape shape) {
  params_.push_back(std::make_unique<Parameter>(name, Tensor(std::move(shape), 0.0f)));
  return *params_.back();
}

Parameter& ToyUNet3D::get(const std::string& name) const {
  Parameter* p = find(name);
  if (!p) throw std::logic_error("detok: no denoiser parameter named '" + name + "'");
  return *p;
}

Parameter* ToyUNet3D::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

std::vector<Parameter*> ToyUNet3D::parameters() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

Tensor ToyUNet3D::forward(Tape& tape, const Tensor& x_cat, double c_noise,
                          const Tensor& features) const {
  const int f = cfg_.width;
  const int in_ch = 2 * cfg_.channels + 2;
  if (x_cat.rank() != 4 || x_cat.dim(3) != in_ch) {
    fail("denoiser input must be (T, H, W, " + std::to_string(in_ch) + "), got " + dims(x_cat));
  }
  const int t = static_cast<int>(x_cat.dim(0));
  const int h = static_cast<int>(x_cat.dim(1));
  const int w = static_cast<int>(x_cat.dim(2));
  if (h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2) {
    fail("latent height and width must be even, got " + dims(x_cat));
  }
  if (features.rank() != 3 || features.dim(0) != 1 || features.dim(2) != cfg_.feat_dim) {
    fail("motion features must be (1, M, " + std::to_string(cfg_.feat_dim) + "), got " +
         dims(features));
  }

  auto P = [&](const std::string& s) { return tape.leaf(get(s)); };

  // Noise-level bias, one value per feature channel.
  Tensor cn = tape.constant(Tensor({1, 1}, std::vector<float>{static_cast<float>(c_noise)}));
  Tensor ne = tape.linear(tape.silu(tape.linear(cn, P("ne.w1"), P("ne.b1"))), P("ne.w2"),
                          P("ne.b2"));
  Tensor h0 = tape.silu(
      tape.add_rowwise(tape.conv2d(x_cat, P("in.w"), P("in.b")), tape.reshape(ne, {f})));

  Tensor x = tape.silu(tape.conv2d(tape.pool_mean(h0, 1, 2, 2), P("down.w"), P("down.b")));
  const int h2 = h / 2, w2 = w / 2;
  const int sites = h2 * w2;

  // Temporal self-attention per coarse cell.
  x = tape.reshape(tape.permute(x, {1, 2, 0, 3}), {sites, t, f});
  {
    Tensor a = tape.layer_norm(x, P("tattn.ln.g"), P("tattn.ln.b"));
    Tensor att = tape.attention(tape.linear(a, P("tattn.wq"), P("tattn.bq")),
                                tape.linear(a, P("tattn.wk"), P("tattn.bk")),
                                tape.linear(a, P("tattn.wv"), P("tattn.bv")), cfg_.heads, false);
    x = tape.add(x, tape.linear(att, P("tattn.wo"), P("tattn.bo")));
  }
  x = tape.permute(tape.reshape(x, {h2, w2, t, f}), {2, 0, 1, 3});

  // Cross-attention from every coarse position to the motion features.
  x = tape.reshape(x, {1, t * sites, f});
  {
    Tensor a = tape.layer_norm(x, P("xattn.ln.g"), P("xattn.ln.b"));
    Tensor att = tape.attention(tape.linear(a, P("xattn.wq"), P("xattn.bq")),
                                tape.linear(features, P("xattn.wk"), P("xattn.bk")),
                                tape.linear(features, P("xattn.wv"), P("xattn.bv")), cfg_.heads,
                                false);
    x = tape.add(x, tape.linear(att, P("xattn.wo"), P("xattn.bo")));
  }
  x = tape.reshape(x, {t, h2, w2, f});

  Tensor up = tape.concat_last(tape.repeat_nn(x, 1, 2, 2), h0);
  up = tape.silu(tape.conv2d(up, P("up.w"), P("up.b")));
  return tape.conv2d(up, P("out.w"), P("out.b"));
}

Latent ToyUNet3D::denoise(const Latent& x, double sigma, const ConditionPack* cond) const {
  if (!(sigma > 0.0)) fail("denoiser queried at a non-positive noise level");
  if (x.shape.size() != 4 || x.shape[3] != cfg_.channels) {
    fail("denoiser state must be (T, H, W, " + std::to_string(cfg_.channels) + "), got " +
         shape_str(x.shape));
  }
  if (cond == nullptr) fail("toy denoiser needs a condition pack");
  if (cond->keyframe.shape != x.shape) {
    fail("condition keyframe " + dims(cond->keyframe) + " does not match the state " +
         shape_str(x.shape));
  }
  check_motion_tensor(cond->motion);
  if (cond->motion.dim(0) != x.shape[0] || cond->motion.dim(1) != x.shape[1] ||
      cond->motion.dim(2) != x.shape[2]) {
    fail("condition motion " + dims(cond->motion) + " does not match the state " +
         shape_str(x.shape));
  }
  if (!cond->motion_features.data || cond->motion_features.numel() == 0) {
    fail("toy denoiser needs motion features; build the condition with an encoder");
  }

  const double sd = cfg_.sigma_data;
  const double s2 = sigma * sigma + sd * sd;
  const double c_skip = sd * sd / s2;
  const double c_out = sigma * sd / std::sqrt(s2);
  const double c_in = 1.0 / std::sqrt(s2);
  const double c_noise = 0.25 * std::log(sigma);

  Tensor xt(x.shape, 0.f);
  for (size_t i = 0; i < x.v.size(); ++i) (*xt.data)[i] = static_cast<float>(c_in * x.v[i]);

  Tape tape(false);
  Tensor x_cat = tape.concat_last(tape.concat_last(tape.constant(xt), tape.constant(cond->keyframe)),
                                  tape.constant(cond->motion));
  Tensor raw = forward(tape, x_cat, c_noise, cond->motion_features);

  Latent out(x.shape);
  for (size_t i = 0; i < out.v.size(); ++i) {
    out.v[i] = c_skip * x.v[i] + c_out * static_cast<double>((*raw.data)[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// condition assembly

ConditionPack build_condition(const Tensor& keyframe_latent, const MotionField& motion, int t,
                              const MotionEncoder* enc) {
  if (t < 1) fail("condition needs at least one frame");
  if (keyframe_latent.rank() != 3) {
    fail("keyframe latent must be (H, W, C), got " + dims(keyframe_latent));
  }
  if (motion.t != t) {
    fail("condition: motion field has " + std::to_string(motion.t) +
         " temporal slices but the clip has " + std::to_string(t) + " frames");
  }
  if (!motion.normalized) fail("condition: motion field must be normalized");
  const int h = static_cast<int>(keyframe_latent.dim(0));
  const int w = static_cast<int>(keyframe_latent.dim(1));
  const int c = static_cast<int>(keyframe_latent.dim(2));

  const MotionField sized = resize_motion(motion, h, w);

  ConditionPack pack;
  // The field's flat layout (t-major, row-major cells, (dx, dy) last) is
  // exactly the (T, H, W, 2) tensor layout, so the values copy through
  // bit-for-bit.
  pack.motion = Tensor({t, h, w, 2}, sized.v);
  pack.keyframe = Tensor({t, h, w, c}, 0.f);
  const int64_t frame_n = keyframe_latent.numel();
  for (int ti = 0; ti < t; ++ti) {
    std::copy(keyframe_latent.data->begin(), keyframe_latent.data->end(),
              pack.keyframe.data->begin() + static_cast<int64_t>(ti) * frame_n);
  }
  if (enc != nullptr) pack.motion_features = enc->features(pack.motion);
  return pack;
}

// ---------------------------------------------------------------------------
// objective and trainer

Tensor edm_loss(Tape& tape, const ToyUNet3D& net, const MotionEncoder& enc,
                const DiffusionSchedule& sched, const Tensor& x0, const ConditionPack& pack,
                Rng& rng) {
  if (x0.rank() != 4 || x0.dim(3) != net.config().channels) {
    fail("training clip must be (T, H, W, " + std::to_string(net.config().channels) + "), got " +
         dims(x0));
  }
  if (pack.keyframe.shape != x0.shape) {
    fail("condition keyframe " + dims(pack.keyframe) + " does not match the clip " + dims(x0));
  }
  check_motion_tensor(pack.motion);
  if (pack.motion.dim(0) != x0.dim(0) || pack.motion.dim(1) != x0.dim(1) ||
      pack.motion.dim(2) != x0.dim(2)) {
    fail("condition motion " + dims(pack.motion) + " does not match the clip " + dims(x0));
  }

  const double sigma = sample_sigma(sched, rng);
  const double sd = sched.sigma_data;
  const double s2 = sigma * sigma + sd * sd;
  const double c_skip = sd * sd / s2;
  const double c_out = sigma * sd / std::sqrt(s2);
  const double c_in = 1.0 / std::sqrt(s2);
  const double c_noise = 0.25 * std::log(sigma);

  Tensor noisy(x0.shape, 0.f);
  rng.fill_normal(noisy, 0.0, sigma);
  for (int64_t i = 0; i < x0.numel(); ++i) noisy.at(i) += x0.at(i);

  Tensor noisy_t = tape.constant(noisy);
  Tensor x_cat = tape.concat_last(
      tape.concat_last(tape.scale(noisy_t, static_cast<float>(c_in)), tape.constant(pack.keyframe)),
      tape.constant(pack.motion));
  Tensor features = enc.forward(tape, pack.motion);
  Tensor raw = net.forward(tape, x_cat, c_noise, features);
  Tensor x0_hat = tape.add(tape.scale(noisy_t, static_cast<float>(c_skip)),
                           tape.scale(raw, static_cast<float>(c_out)));
  const double lambda = edm_lambda(sigma, sd);
  return tape.scale(tape.mse_mean(x0_hat, tape.constant(x0)), static_cast<float>(lambda));
}

DetokTrainStats train_toy_detokenizer(ToyUNet3D& net, MotionEncoder& enc,
                                      const std::vector<DetokTrainItem>& data,
                                      const DiffusionSchedule& sched, const DetokTrainConfig& tc) {
  if (data.empty()) fail("training set is empty");
  if (tc.steps <= 0 || tc.batch <= 0) fail("steps and batch must be positive");
  if (tc.start_step < 0 || tc.start_step >= tc.steps) fail("start_step outside the schedule");

  DetokTrainStats stats;
  std::vector<Parameter*> params = net.parameters();
  for (Parameter* p : enc.parameters()) params.push_back(p);
  AdamW opt;
  const int64_t warmup = std::llround(tc.warmup_frac * tc.steps);
  const int end_step = tc.run_steps < 0
                           ? tc.steps
                           : std::min(tc.steps, tc.start_step + tc.run_steps);
  for (int step = tc.start_step; step < end_step; ++step) {
    Rng srng(tc.seed * kGolden + static_cast<uint64_t>(step));
    Tape tape;
    Tensor total;
    for (int b = 0; b < tc.batch; ++b) {
      const int idx = srng.uniform_int(0, static_cast<int>(data.size()) - 1);
      const auto& item = data[static_cast<size_t>(idx)];
      const Tensor l = edm_loss(tape, net, enc, sched, item.x0, item.pack, srng);
      total = b == 0 ? l : tape.add(total, l);
    }
    const Tensor loss = tape.scale(total, 1.0f / static_cast<float>(tc.batch));
    const double lv = loss.at(0);
    if (!std::isfinite(lv)) {
      stats.aborted = true;
      stats.diagnostics = "non-finite loss at step " + std::to_string(step) +
                          "; model kept at the last completed step";
      return stats;
    }
    if (!stats.losses.empty() && tc.divergence_factor > 0.0 &&
        lv > tc.divergence_factor * stats.losses.front()) {
      stats.aborted = true;
      stats.diagnostics = "diverged at step " + std::to_string(step) + ": loss " +
                          std::to_string(lv) + " exceeds " +
                          std::to_string(tc.divergence_factor) + "x the initial " +
                          std::to_string(stats.losses.front());
      return stats;
    }
    tape.backward(loss);
    const double lr = cosine_lr(step, tc.steps, tc.lr, warmup);
    opt.step(tape, params, static_cast<float>(lr));
    stats.losses.push_back(lv);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// synthetic corpus

std::vector<DetokTrainItem> make_detok_dataset(const DetokDatasetConfig& cfg) {
  if (cfg.clips <= 0 || cfg.t <= 0) fail("dataset needs clips and frames");
  if (cfg.h % cfg.block != 0 || cfg.w % cfg.block != 0) {
    fail("dataset frame size must be a multiple of the block size");
  }
  if (cfg.search < cfg.max_speed) fail("search range must cover the square speed");
  Rng rng(cfg.seed);
  std::vector<DetokTrainItem> items;
  items.reserve(static_cast<size_t>(cfg.clips));
  for (int i = 0; i < cfg.clips; ++i) {
    const int vx = rng.uniform_int(-cfg.max_speed, cfg.max_speed);
    const int vy = rng.uniform_int(-cfg.max_speed, cfg.max_speed);
    const int lo_x = 1 + (vx < 0 ? cfg.t * -vx : 0);
    const int hi_x = cfg.w - cfg.square - 1 - (vx > 0 ? cfg.t * vx : 0);
    const int lo_y = 1 + (vy < 0 ? cfg.t * -vy : 0);
    const int hi_y = cfg.h - cfg.square - 1 - (vy > 0 ? cfg.t * vy : 0);
    if (lo_x > hi_x || lo_y > hi_y) {
      fail("square travel does not fit the frame; shrink square, speed, or frames");
    }
    MovingSquareParams p;
    p.width = cfg.w;
    p.height = cfg.h;
    p.frames = cfg.t + 1;
    p.channels = 1;
    p.square = cfg.square;
    p.x0 = rng.uniform_int(lo_x, hi_x);
    p.y0 = rng.uniform_int(lo_y, hi_y);
    p.vx = vx;
    p.vy = vy;
    p.textured = true;
    RawVideo vid = synth_moving_square_video(p);

    Clip clip;
    clip.width = cfg.w;
    clip.height = cfg.h;
    clip.channels = 1;
    clip.keyframe = vid.frames[0];
    clip.frames.assign(vid.frames.begin() + 1, vid.frames.end());

    MotionField field = clip_motion(clip, cfg.block, cfg.search);
    MotionField norm = normalize_motion(field, cfg.w, cfg.h);

    DetokTrainItem item;
    item.x0 = Tensor({cfg.t, cfg.h, cfg.w, 1}, 0.f);
    for (int ti = 0; ti < cfg.t; ++ti) {
      const auto& fr = clip.frames[static_cast<size_t>(ti)];
      float* dst = item.x0.ptr() + static_cast<int64_t>(ti) * cfg.h * cfg.w;
      for (size_t j = 0; j < fr.size(); ++j) dst[j] = static_cast<float>(fr[j]) / 255.f;
    }
    Tensor kf({cfg.h, cfg.w, 1}, 0.f);
    for (size_t j = 0; j < clip.keyframe.size(); ++j) {
      kf.at(static_cast<int64_t>(j)) = static_cast<float>(clip.keyframe[j]) / 255.f;
    }
    item.pack = build_condition(kf, norm, cfg.t, nullptr);
    items.push_back(std::move(item));
  }
  return items;
}

// ---------------------------------------------------------------------------
// chained decoding

std::vector<DecodedClip> decode_long(const Denoiser& g_i, const Denoiser& g_v,
                                     const std::vector<DecodeClipSpec>& clips,
                                     const DiffusionSchedule& sched, int delta_t, uint64_t seed,
                                     const MotionEncoder* enc, bool constrained) {
  if (clips.empty()) fail("decode needs at least one clip");
  if (delta_t < 0 || delta_t > sched.num_steps()) {
    throw std::out_of_range("detok: inversion depth " + std::to_string(delta_t) + " outside [0, " +
                            std::to_string(sched.num_steps()) + "]");
  }
  Rng rng(seed);
  const double top = sched.sigma_tilde(sched.num_steps());
  std::vector<DecodedClip> out;
  out.reserve(clips.size());
  for (size_t r = 0; r < clips.size(); ++r) {
    const DecodeClipSpec& spec = clips[r];
    if (spec.keyframe.rank() != 3) {
      fail("clip " + std::to_string(r) + " keyframe latent must be (H, W, C)");
    }
    const int h = static_cast<int>(spec.keyframe.dim(0));
    const int w = static_cast<int>(spec.keyframe.dim(1));
    const int c = static_cast<int>(spec.keyframe.dim(2));
    const int t = spec.motion.t;

    MotionField still(1, h, w, true);
    const ConditionPack pack_i = build_condition(spec.keyframe, still, 1, enc);
    const ConditionPack pack_v = build_condition(spec.keyframe, spec.motion, t, enc);

    DecodedClip dec;
    if (r == 0 || !constrained) {
      Latent start = noise_latent(rng, {1, h, w, c}, top);
      dec.keyframe = ddim_sample(g_i, sched, std::move(start), &pack_i, sched.num_steps());
    } else {
      const Latent& prev = out.back().frames;
      Latent last({1, h, w, c});
      const size_t frame_n = last.v.size();
      std::copy(prev.v.end() - static_cast<int64_t>(frame_n), prev.v.end(), last.v.begin());
      Latent inv = ddim_invert(g_i, sched, std::move(last), &pack_i, delta_t);
      dec.keyframe = ddim_sample(g_i, sched, std::move(inv), &pack_i, delta_t);
    }
    Latent fnoise = noise_latent(rng, {t, h, w, c}, top);
    dec.frames = ddim_sample(g_v, sched, std::move(fnoise), &pack_v, sched.num_steps());
    out.push_back(std::move(dec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// metrics and persistence

double psnr(const Latent& a, const Latent& b, double peak) {
  if (a.shape != b.shape) fail("psnr: shapes differ");
  if (a.v.empty()) fail("psnr: empty input");
  double mse = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    const double d = a.v[i] - b.v[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.v.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

void clamp01(Latent& l) {
  for (double& x : l.v) x = std::min(1.0, std::max(0.0, x));
}

void save_detokenizer(const std::string& path, const ToyUNet3D& net, const MotionEncoder& enc) {
  nlohmann::json meta;
  meta["schema"] = 1;
  meta["unet"] = nlohmann::json::parse(net.config().to_json());
  meta["menc"] = nlohmann::json::parse(enc.config().to_json());
  std::vector<std::pair<std::string, Tensor>> tensors;
  // parameters() is non-const by design; snapshotting only reads values.
  for (Parameter* p : const_cast<ToyUNet3D&>(net).parameters()) {
    tensors.emplace_back("unet/" + p->name, p->value);
  }
  for (Parameter* p : const_cast<MotionEncoder&>(enc).parameters()) {
    tensors.emplace_back("menc/" + p->name, p->value);
  }
  save_snapshot(path, tensors, meta.dump());
}

std::pair<ToyUNet3D, MotionEncoder> load_detokenizer(const std::string& path) {
  Snapshot snap = load_snapshot(path);
  if (snap.config_json.empty()) {
    throw std::runtime_error("detok: checkpoint '" + path + "' carries no config");
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(snap.config_json);
  } catch (const nlohmann::json::exception&) {
    throw std::runtime_error("detok: checkpoint '" + path + "' has unreadable config");
  }
  if (meta.value("schema", 0) != 1 || !meta.contains("unet") || !meta.contains("menc")) {
    throw std::runtime_error("detok: checkpoint '" + path + "' has an unknown config layout");
  }
  ToyUNet3D net(ToyUNetConfig::from_json(meta.at("unet").dump()), 0);
  MotionEncoder enc(MotionEncoderConfig::from_json(meta.at("menc").dump()), 0);
  auto restore = [&](const std::string& prefix, std::vector<Parameter*> params) {
    for (Parameter* p : params) {
      auto it = snap.tensors.find(prefix + p->name);
      if (it == snap.tensors.end()) {
        throw std::runtime_error("detok: checkpoint is missing tensor '" + prefix + p->name + "'");
      }
      if (it->second.shape != p->value.shape) {
        throw std::runtime_error("detok: checkpoint tensor '" + prefix + p->name +
                                 "' has the wrong shape");
      }
      *p->value.data = *it->second.data;
    }
  };
  restore("unet/", net.parameters());
  restore("menc/", enc.parameters());
  return {std::move(net), std::move(enc)};
}

}  // namespace motok
