#include "motok/vqvae.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace motok {

namespace {

constexpr float kCountFloor = 1e-5f;  // denominator guard for the code refresh

[[noreturn]] void cfg_fail(const std::string& what) {
  throw std::invalid_argument("vqvae config: " + what);
}

void apply_down(DownAxes a, int& t, int& h, int& w, const char* where) {
  const bool dt = a == DownAxes::kTemporal || a == DownAxes::kBoth;
  const bool ds = a == DownAxes::kSpatial || a == DownAxes::kBoth;
  if (dt) {
    if (t % 2 != 0) cfg_fail(std::string(where) + ": temporal dim " + std::to_string(t) + " not divisible by 2");
    t /= 2;
  }
  if (ds) {
    if (h % 2 != 0 || w % 2 != 0)
      cfg_fail(std::string(where) + ": spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
               " not divisible by 2");
    h /= 2;
    w /= 2;
  }
}

}  // namespace

void VqVaeConfig::validate() const {
  if (t <= 0 || grid_h <= 0 || grid_w <= 0) cfg_fail("grid dims must be positive");
  if (dim <= 0 || blocks <= 0 || ffn_mult <= 0) cfg_fail("model dims must be positive");
  if (heads <= 0 || dim % heads != 0) cfg_fail("heads must divide dim");
  if (d_code <= 0 || codebook_size <= 0) cfg_fail("codebook dims must be positive");
  if (down_after.size() != down_axes.size()) cfg_fail("down_after/down_axes length mismatch");
  int prev = 0;
  for (int b : down_after) {
    if (b <= prev || b > blocks) cfg_fail("down_after must be strictly increasing block indices in [1, blocks]");
    prev = b;
  }
  int ct = t, ch = grid_h, cw = grid_w;
  for (size_t i = 0; i < down_axes.size(); ++i) apply_down(down_axes[i], ct, ch, cw, "downsample");
  if (revive_after <= 0) cfg_fail("revive_after must be positive");
  if (!(beta >= 0.f) || !(decay >= 0.f && decay <= 1.f)) cfg_fail("beta/decay out of range");
}

int VqVaeConfig::latent_t() const {
  int ct = t, ch = grid_h, cw = grid_w;
  for (auto a : down_axes) apply_down(a, ct, ch, cw, "latent_t");
  return ct;
}
int VqVaeConfig::latent_h() const {
  int ct = t, ch = grid_h, cw = grid_w;
  for (auto a : down_axes) apply_down(a, ct, ch, cw, "latent_h");
  return ch;
}
int VqVaeConfig::latent_w() const {
  int ct = t, ch = grid_h, cw = grid_w;
  for (auto a : down_axes) apply_down(a, ct, ch, cw, "latent_w");
  return cw;
}

std::string VqVaeConfig::to_json() const {
  nlohmann::json j;
  j["schema"] = 1;
  j["t"] = t;
  j["grid_h"] = grid_h;
  j["grid_w"] = grid_w;
  j["dim"] = dim;
  j["heads"] = heads;
  j["blocks"] = blocks;
  j["ffn_mult"] = ffn_mult;
  j["d_code"] = d_code;
  j["codebook_size"] = codebook_size;
  j["beta"] = beta;
  j["decay"] = decay;
  j["down_after"] = down_after;
  std::vector<int> axes;
  for (auto a : down_axes) axes.push_back(static_cast<int>(a));
  j["down_axes"] = axes;
  j["revive_after"] = revive_after;
  return j.dump();
}

VqVaeConfig VqVaeConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  VqVaeConfig c;
  c.t = j.at("t").get<int>();
  c.grid_h = j.at("grid_h").get<int>();
  c.grid_w = j.at("grid_w").get<int>();
  c.dim = j.at("dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.blocks = j.at("blocks").get<int>();
  c.ffn_mult = j.at("ffn_mult").get<int>();
  c.d_code = j.at("d_code").get<int>();
  c.codebook_size = j.at("codebook_size").get<int>();
  c.beta = j.at("beta").get<float>();
  c.decay = j.at("decay").get<float>();
  c.down_after = j.at("down_after").get<std::vector<int>>();
  c.down_axes.clear();
  for (int a : j.at("down_axes").get<std::vector<int>>()) {
    if (a < 0 || a > 2) cfg_fail("down_axes entry out of range");
    c.down_axes.push_back(static_cast<DownAxes>(a));
  }
  c.revive_after = j.at("revive_after").get<int>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Codebook

Codebook::Codebook(int k, int d, float decay_, Rng& rng)
    : size(k), dim(d), decay(decay_) {
  if (k <= 0 || d <= 0) throw std::invalid_argument("codebook: size and dim must be positive");
  codes.resize(static_cast<size_t>(k) * d);
  for (auto& c : codes) c = static_cast<float>(rng.normal(0.0, 0.1));
  ema_size.assign(static_cast<size_t>(k), 1.0f);
  ema_sum = codes;  // code == sum / size holds from the start
  unused_steps.assign(static_cast<size_t>(k), 0);
}

namespace {

// Normalized copy in doubles; zero-norm rows are left as zeros.
std::vector<double> l2_rows(const float* v, int n, int d) {
  std::vector<double> out(static_cast<size_t>(n) * d, 0.0);
  for (int i = 0; i < n; ++i) {
    const float* row = v + static_cast<size_t>(i) * d;
    double ss = 0.0;
    for (int j = 0; j < d; ++j) ss += static_cast<double>(row[j]) * row[j];
    if (ss > 0.0) {
      const double inv = 1.0 / std::sqrt(ss);
      for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] = row[j] * inv;
    }
  }
  return out;
}

}  // namespace

QuantizeResult Codebook::quantize_one(const float* z) {
  auto ids = quantize(z, 1);
  QuantizeResult r;
  r.id = ids[0];
  double ss = 0.0;
  for (int j = 0; j < dim; ++j) ss += static_cast<double>(z[j]) * z[j];
  r.degenerate = ss == 0.0;
  return r;
}

std::vector<int> Codebook::quantize(const float* z, int n) {
  const std::vector<double> cn = l2_rows(codes.data(), size, dim);
  std::vector<int> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const float* row = z + static_cast<size_t>(i) * dim;
    double ss = 0.0;
    for (int j = 0; j < dim; ++j) ss += static_cast<double>(row[j]) * row[j];
    const bool degenerate = ss == 0.0;
    if (degenerate) ++degenerate_inputs;
    std::vector<double> q(static_cast<size_t>(dim));
    if (degenerate) {
      for (int j = 0; j < dim; ++j) q[static_cast<size_t>(j)] = row[j];
    } else {
      const double inv = 1.0 / std::sqrt(ss);
      for (int j = 0; j < dim; ++j) q[static_cast<size_t>(j)] = row[j] * inv;
    }
    int best = 0;
    double best_d = 0.0;
    for (int k = 0; k < size; ++k) {
      double d2 = 0.0;
      if (degenerate) {
        // normalization is undefined at 0; compare against raw codes
        const float* c = codes.data() + static_cast<size_t>(k) * dim;
        for (int j = 0; j < dim; ++j) {
          const double diff = q[static_cast<size_t>(j)] - c[j];
          d2 += diff * diff;
        }
      } else {
        const double* c = cn.data() + static_cast<size_t>(k) * dim;
        for (int j = 0; j < dim; ++j) {
          const double diff = q[static_cast<size_t>(j)] - c[j];
          d2 += diff * diff;
        }
      }
      if (k == 0 || d2 < best_d) {
        best = k;
        best_d = d2;
      }
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

void Codebook::ema_update(const std::vector<int>& ids, const float* z, int n) {
  if (static_cast<int>(ids.size()) != n)
    throw std::invalid_argument("codebook: ids/vector count mismatch");
  std::vector<double> cnt(static_cast<size_t>(size), 0.0);
  std::vector<double> sum(static_cast<size_t>(size) * dim, 0.0);
  for (int i = 0; i < n; ++i) {
    const int k = ids[static_cast<size_t>(i)];
    if (k < 0 || k >= size) throw std::out_of_range("codebook: assignment id out of range");
    cnt[static_cast<size_t>(k)] += 1.0;
    for (int j = 0; j < dim; ++j)
      sum[static_cast<size_t>(k) * dim + j] += z[static_cast<size_t>(i) * dim + j];
  }
  const float keep = decay, mix = 1.0f - decay;
  for (int k = 0; k < size; ++k) {
    ema_size[static_cast<size_t>(k)] =
        keep * ema_size[static_cast<size_t>(k)] + mix * static_cast<float>(cnt[static_cast<size_t>(k)]);
    for (int j = 0; j < dim; ++j) {
      const size_t idx = static_cast<size_t>(k) * dim + j;
      ema_sum[idx] = keep * ema_sum[idx] + mix * static_cast<float>(sum[idx]);
    }
  }
  for (int k = 0; k < size; ++k) {
    const float denom = std::max(ema_size[static_cast<size_t>(k)], kCountFloor);
    for (int j = 0; j < dim; ++j) {
      const size_t idx = static_cast<size_t>(k) * dim + j;
      codes[idx] = ema_sum[idx] / denom;
    }
  }
}

void Codebook::reseed(int k, const float* z) {
  if (k < 0 || k >= size) throw std::out_of_range("codebook: reseed id out of range");
  for (int j = 0; j < dim; ++j) codes[static_cast<size_t>(k) * dim + j] = z[j];
  ema_size[static_cast<size_t>(k)] = 1.0f;
  for (int j = 0; j < dim; ++j) ema_sum[static_cast<size_t>(k) * dim + j] = z[j];
  unused_steps[static_cast<size_t>(k)] = 0;
}

UsageStats codebook_usage(const std::vector<int64_t>& counts) {
  UsageStats s;
  long double total = 0;
  for (auto c : counts) total += static_cast<long double>(c);
  if (total <= 0) {
    s.dead_codes = static_cast<int>(counts.size());
    return s;
  }
  long double h = 0;
  for (auto c : counts) {
    if (c == 0) {
      ++s.dead_codes;
      continue;
    }
    const long double p = static_cast<long double>(c) / total;
    h -= p * std::log(static_cast<double>(p));
  }
  s.perplexity = std::exp(static_cast<double>(h));
  return s;
}

// ---------------------------------------------------------------------------
// Model

MotionVqVae::MotionVqVae(const VqVaeConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int D = cfg_.dim;
  const int F = D * cfg_.ffn_mult;

  auto weight = [&](const std::string& name, Shape s) {
    Parameter* p = add_param(name, std::move(s));
    rng.fill_normal(p->value, 0.0, 0.02);
  };
  auto zeros = [&](const std::string& name, Shape s) { add_param(name, std::move(s)); };
  auto ones = [&](const std::string& name, Shape s) {
    Parameter* p = add_param(name, std::move(s));
    std::fill(p->value.data->begin(), p->value.data->end(), 1.0f);
  };
  auto block_params = [&](const std::string& pre) {
    for (const char* a : {"sp", "tm"}) {
      ones(pre + "." + a + ".ln.g", {D});
      zeros(pre + "." + a + ".ln.b", {D});
      for (const char* m : {"wq", "wk", "wv", "wo"}) weight(pre + "." + a + "." + m, {D, D});
      for (const char* m : {"bq", "bk", "bv", "bo"}) zeros(pre + "." + a + "." + m, {D});
    }
    ones(pre + ".ffn.ln.g", {D});
    zeros(pre + ".ffn.ln.b", {D});
    weight(pre + ".ffn.w1", {D, F});
    zeros(pre + ".ffn.b1", {F});
    weight(pre + ".ffn.w2", {F, D});
    zeros(pre + ".ffn.b2", {D});
  };

  // encoder
  weight("enc.embed.w", {2, D});
  zeros("enc.embed.b", {D});
  weight("enc.pos_s", {cfg_.grid_h * cfg_.grid_w, D});
  weight("enc.pos_t", {cfg_.t, D});
  for (int b = 0; b < cfg_.blocks; ++b) block_params("enc.b" + std::to_string(b));
  for (size_t d = 0; d < cfg_.down_after.size(); ++d) {
    weight("enc.down" + std::to_string(d) + ".w", {D, D});
    zeros("enc.down" + std::to_string(d) + ".b", {D});
  }
  ones("enc.out.ln.g", {D});
  zeros("enc.out.ln.b", {D});
  weight("enc.head.w", {D, cfg_.d_code});
  zeros("enc.head.b", {cfg_.d_code});

  // decoder
  weight("dec.embed.w", {cfg_.d_code, D});
  zeros("dec.embed.b", {D});
  weight("dec.pos_s", {cfg_.latent_h() * cfg_.latent_w(), D});
  weight("dec.pos_t", {cfg_.latent_t(), D});
  for (int b = 0; b < cfg_.blocks; ++b) block_params("dec.b" + std::to_string(b));
  for (size_t d = 0; d < cfg_.down_after.size(); ++d) {
    weight("dec.up" + std::to_string(d) + ".w", {D, D});
    zeros("dec.up" + std::to_string(d) + ".b", {D});
  }
  ones("dec.out.ln.g", {D});
  zeros("dec.out.ln.b", {D});
  weight("dec.head.w", {D, 2});
  zeros("dec.head.b", {2});

  cb = Codebook(cfg_.codebook_size, cfg_.d_code, cfg_.decay, rng);
}

Parameter* MotionVqVae::add_param(const std::string& name, Shape shape) {
  params_.push_back(std::make_unique<Parameter>(name, Tensor(std::move(shape), 0.f)));
  return params_.back().get();
}

Parameter& MotionVqVae::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return *p;
  throw std::logic_error("vqvae: no parameter named " + name);
}

std::vector<Parameter*> MotionVqVae::parameters() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

const Parameter* MotionVqVae::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

namespace {

struct GridDims {
  int t, h, w;
};

// One transformer block: spatial attention, temporal attention, feed-forward,
// each pre-LN with a residual connection. x is (t, h, w, D).
Tensor block_forward(Tape& tp, const Tensor& x_in, const std::string& pre, GridDims g, int dim,
                     int heads, const std::function<Tensor(const std::string&)>& P) {
  Tensor x = x_in;
  {  // spatial: batch = t, sequence = h*w
    Tensor h = tp.layer_norm(x, P(pre + ".sp.ln.g"), P(pre + ".sp.ln.b"));
    Tensor q = tp.reshape(tp.linear(h, P(pre + ".sp.wq"), P(pre + ".sp.bq")), {g.t, g.h * g.w, dim});
    Tensor k = tp.reshape(tp.linear(h, P(pre + ".sp.wk"), P(pre + ".sp.bk")), {g.t, g.h * g.w, dim});
    Tensor v = tp.reshape(tp.linear(h, P(pre + ".sp.wv"), P(pre + ".sp.bv")), {g.t, g.h * g.w, dim});
    Tensor a = tp.reshape(tp.attention(q, k, v, heads, false), {g.t, g.h, g.w, dim});
    x = tp.add(x, tp.linear(a, P(pre + ".sp.wo"), P(pre + ".sp.bo")));
  }
  {  // temporal: batch = h*w, sequence = t
    Tensor h = tp.layer_norm(x, P(pre + ".tm.ln.g"), P(pre + ".tm.ln.b"));
    auto seq_t = [&](Tensor y) {
      return tp.reshape(tp.permute(y, {1, 2, 0, 3}), {g.h * g.w, g.t, dim});
    };
    Tensor q = seq_t(tp.linear(h, P(pre + ".tm.wq"), P(pre + ".tm.bq")));
    Tensor k = seq_t(tp.linear(h, P(pre + ".tm.wk"), P(pre + ".tm.bk")));
    Tensor v = seq_t(tp.linear(h, P(pre + ".tm.wv"), P(pre + ".tm.bv")));
    Tensor a = tp.attention(q, k, v, heads, false);
    a = tp.permute(tp.reshape(a, {g.h, g.w, g.t, dim}), {2, 0, 1, 3});
    x = tp.add(x, tp.linear(a, P(pre + ".tm.wo"), P(pre + ".tm.bo")));
  }
  {  // feed-forward
    Tensor h = tp.layer_norm(x, P(pre + ".ffn.ln.g"), P(pre + ".ffn.ln.b"));
    h = tp.linear(h, P(pre + ".ffn.w1"), P(pre + ".ffn.b1"));
    h = tp.gelu(h);
    h = tp.linear(h, P(pre + ".ffn.w2"), P(pre + ".ffn.b2"));
    x = tp.add(x, h);
  }
  return x;
}

void down_factors(DownAxes a, int& ft, int& fh, int& fw) {
  ft = (a == DownAxes::kTemporal || a == DownAxes::kBoth) ? 2 : 1;
  fh = fw = (a == DownAxes::kSpatial || a == DownAxes::kBoth) ? 2 : 1;
}

}  // namespace

Tensor MotionVqVae::encode(Tape& tp, const Tensor& x) const {
  const auto& c = cfg_;
  if (x.rank() != 4 || x.dim(0) != c.t || x.dim(1) != c.grid_h || x.dim(2) != c.grid_w ||
      x.dim(3) != 2) {
    std::ostringstream os;
    os << "motion encoder: expected field (" << c.t << ", " << c.grid_h << ", " << c.grid_w
       << ", 2), got (";
    for (int i = 0; i < x.rank(); ++i) os << (i ? ", " : "") << x.dim(i);
    os << ")";
    throw std::invalid_argument(os.str());
  }
  auto P = [&](const std::string& n) { return tp.leaf(get(n).value); };

  Tensor h = tp.linear(x, P("enc.embed.w"), P("enc.embed.b"));
  // learned absolute positions, broadcast by nearest repeat
  Tensor ps = tp.repeat_nn(tp.reshape(P("enc.pos_s"), {1, c.grid_h, c.grid_w, c.dim}), c.t, 1, 1);
  Tensor pt = tp.repeat_nn(tp.reshape(P("enc.pos_t"), {c.t, 1, 1, c.dim}), 1, c.grid_h, c.grid_w);
  h = tp.add(tp.add(h, ps), pt);

  GridDims g{c.t, c.grid_h, c.grid_w};
  size_t next_down = 0;
  for (int b = 0; b < c.blocks; ++b) {
    h = block_forward(tp, h, "enc.b" + std::to_string(b), g, c.dim, c.heads, P);
    if (next_down < c.down_after.size() && c.down_after[next_down] == b + 1) {
      int ft, fh, fw;
      down_factors(c.down_axes[next_down], ft, fh, fw);
      h = tp.pool_mean(h, ft, fh, fw);
      g.t /= ft;
      g.h /= fh;
      g.w /= fw;
      const std::string dn = "enc.down" + std::to_string(next_down);
      h = tp.linear(h, P(dn + ".w"), P(dn + ".b"));
      ++next_down;
    }
  }
  h = tp.layer_norm(h, P("enc.out.ln.g"), P("enc.out.ln.b"));
  h = tp.linear(h, P("enc.head.w"), P("enc.head.b"));
  return tp.reshape(h, {g.t * g.h * g.w, c.d_code});
}

Tensor MotionVqVae::decode_latents(Tape& tp, const Tensor& z) const {
  const auto& c = cfg_;
  const int n = c.n_latents();
  if (z.rank() != 2 || z.dim(0) != n || z.dim(1) != c.d_code) {
    std::ostringstream os;
    os << "motion decoder: expected latents (" << n << ", " << c.d_code << "), got (";
    for (int i = 0; i < z.rank(); ++i) os << (i ? ", " : "") << z.dim(i);
    os << ")";
    throw std::invalid_argument(os.str());
  }
  auto P = [&](const std::string& nm) { return tp.leaf(get(nm).value); };

  GridDims g{c.latent_t(), c.latent_h(), c.latent_w()};
  Tensor h = tp.linear(z, P("dec.embed.w"), P("dec.embed.b"));
  h = tp.reshape(h, {g.t, g.h, g.w, c.dim});
  Tensor ps = tp.repeat_nn(tp.reshape(P("dec.pos_s"), {1, g.h, g.w, c.dim}), g.t, 1, 1);
  Tensor pt = tp.repeat_nn(tp.reshape(P("dec.pos_t"), {g.t, 1, 1, c.dim}), 1, g.h, g.w);
  h = tp.add(tp.add(h, ps), pt);

  // mirror: upsample before block L+1-a for each downsample after block a,
  // visiting the schedule in reverse
  const int m = static_cast<int>(c.down_after.size());
  for (int b = 0; b < c.blocks; ++b) {
    for (int d = m - 1; d >= 0; --d) {
      if (c.blocks + 1 - c.down_after[d] == b + 1) {
        int ft, fh, fw;
        down_factors(c.down_axes[d], ft, fh, fw);
        h = tp.repeat_nn(h, ft, fh, fw);
        g.t *= ft;
        g.h *= fh;
        g.w *= fw;
        const std::string un = "dec.up" + std::to_string(m - 1 - d);
        h = tp.linear(h, P(un + ".w"), P(un + ".b"));
      }
    }
    h = block_forward(tp, h, "dec.b" + std::to_string(b), g, c.dim, c.heads, P);
  }
  h = tp.layer_norm(h, P("dec.out.ln.g"), P("dec.out.ln.b"));
  return tp.linear(h, P("dec.head.w"), P("dec.head.b"));
}

Tensor MotionVqVae::field_tensor(const MotionField& f) const {
  const auto& c = cfg_;
  if (!f.normalized)
    throw std::invalid_argument("motion tokenizer: field must be normalized first");
  if (f.t != c.t || f.hb != c.grid_h || f.wb != c.grid_w) {
    std::ostringstream os;
    os << "motion tokenizer: expected field (" << c.t << ", " << c.grid_h << ", " << c.grid_w
       << "), got (" << f.t << ", " << f.hb << ", " << f.wb << ")";
    throw std::invalid_argument(os.str());
  }
  f.validate();
  return Tensor({c.t, c.grid_h, c.grid_w, 2}, f.v);
}

std::vector<int> MotionVqVae::tokenize(const MotionField& f) {
  Tensor x = field_tensor(f);
  Tape tp(false);
  Tensor z = encode(tp, tp.constant(x));
  return cb.quantize(z.ptr(), cfg_.n_latents());
}

MotionField MotionVqVae::detokenize(const std::vector<int>& ids) const {
  const auto& c = cfg_;
  if (static_cast<int>(ids.size()) != c.n_latents())
    throw std::invalid_argument("motion tokenizer: expected " + std::to_string(c.n_latents()) +
                                " ids, got " + std::to_string(ids.size()));
  Tensor z({c.n_latents(), c.d_code}, 0.f);
  for (int i = 0; i < c.n_latents(); ++i) {
    const int k = ids[static_cast<size_t>(i)];
    if (k < 0 || k >= cb.size)
      throw std::out_of_range("motion tokenizer: id " + std::to_string(k) +
                              " outside codebook of size " + std::to_string(cb.size));
    for (int j = 0; j < c.d_code; ++j)
      z.at(static_cast<int64_t>(i) * c.d_code + j) = cb.codes[static_cast<size_t>(k) * c.d_code + j];
  }
  Tape tp(false);
  Tensor out = decode_latents(tp, tp.constant(z));
  MotionField f(c.t, c.grid_h, c.grid_w, true);
  for (size_t i = 0; i < f.v.size(); ++i)
    f.v[i] = std::clamp(out.at(static_cast<int64_t>(i)), -1.0f, 1.0f);
  return f;
}

// ---------------------------------------------------------------------------
// Training

VqVaeTrainer::VqVaeTrainer(MotionVqVae& model, uint64_t seed)
    : model_(model), rng_(seed) {
  counts_.assign(static_cast<size_t>(model.cb.size), 0);
  const size_t cap = 1024;
  recent_.assign(cap * static_cast<size_t>(model.cb.dim), 0.f);
}

VqTrainStats VqVaeTrainer::step(const std::vector<MotionField>& batch, float lr) {
  std::vector<const MotionField*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& f : batch) ptrs.push_back(&f);
  return step(ptrs, lr);
}

VqTrainStats VqVaeTrainer::step(const std::vector<const MotionField*>& batch, float lr) {
  if (batch.empty()) throw std::invalid_argument("vqvae trainer: empty batch");
  const auto& c = model_.config();
  const int n = c.n_latents();
  VqTrainStats st;

  Tape tp;
  std::vector<int> all_ids;
  std::vector<float> all_z;
  all_ids.reserve(batch.size() * static_cast<size_t>(n));
  all_z.reserve(batch.size() * static_cast<size_t>(n) * c.d_code);

  Tensor recon_sum, commit_sum;
  for (size_t i = 0; i < batch.size(); ++i) {
    Tensor x = tp.constant(model_.field_tensor(*batch[i]));
    Tensor zhat = model_.encode(tp, x);
    std::vector<int> ids = model_.cb.quantize(zhat.ptr(), n);

    Tensor codes({n, c.d_code}, 0.f);
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < c.d_code; ++j)
        codes.at(static_cast<int64_t>(r) * c.d_code + j) =
            model_.cb.codes[static_cast<size_t>(ids[static_cast<size_t>(r)]) * c.d_code + j];
    Tensor codes_c = tp.constant(codes);

    Tensor zq = tp.straight_through(codes_c, zhat);
    Tensor recon = model_.decode_latents(tp, zq);
    Tensor l_rec = tp.mse_mean(recon, x);
    Tensor l_com = tp.mse_mean(zhat, codes_c);
    recon_sum = i == 0 ? l_rec : tp.add(recon_sum, l_rec);
    commit_sum = i == 0 ? l_com : tp.add(commit_sum, l_com);

    all_ids.insert(all_ids.end(), ids.begin(), ids.end());
    all_z.insert(all_z.end(), zhat.ptr(), zhat.ptr() + static_cast<size_t>(n) * c.d_code);
  }
  const float inv_b = 1.0f / static_cast<float>(batch.size());
  Tensor recon_m = tp.scale(recon_sum, inv_b);
  Tensor commit_m = tp.scale(commit_sum, inv_b);
  Tensor loss = tp.add(recon_m, tp.scale(commit_m, c.beta));

  st.recon = recon_m.at(0);
  st.commit = commit_m.at(0);
  st.total = loss.at(0);

  double mean = 0.0, sq = 0.0;
  for (float v : all_z) {
    mean += v;
    sq += static_cast<double>(v) * v;
  }
  mean /= static_cast<double>(all_z.size());
  st.latent_sigma = std::sqrt(std::max(0.0, sq / static_cast<double>(all_z.size()) - mean * mean));

  if (!std::isfinite(st.total)) {
    st.aborted = true;
    UsageStats u = codebook_usage(counts_);
    std::ostringstream os;
    os << "non-finite loss; latent sigma " << st.latent_sigma << ", codebook perplexity "
       << u.perplexity << ", dead codes " << u.dead_codes;
    st.diagnostics = os.str();
    return st;
  }

  tp.backward(loss);
  auto params = model_.parameters();
  st.grad_norm = opt_.step(tp, params, lr);

  model_.cb.ema_update(all_ids, all_z.data(), static_cast<int>(all_ids.size()));

  // bookkeeping for usage stats and dead-code revival
  std::vector<char> used(static_cast<size_t>(model_.cb.size), 0);
  for (size_t i = 0; i < all_ids.size(); ++i) {
    used[static_cast<size_t>(all_ids[i])] = 1;
    ++counts_[static_cast<size_t>(all_ids[i])];
  }
  const size_t cap = recent_.size() / static_cast<size_t>(model_.cb.dim);
  for (size_t i = 0; i < all_ids.size(); ++i) {
    std::copy_n(all_z.data() + i * static_cast<size_t>(c.d_code), c.d_code,
                recent_.data() + recent_head_ * static_cast<size_t>(c.d_code));
    recent_head_ = (recent_head_ + 1) % cap;
    recent_filled_ = std::min(recent_filled_ + 1, cap);
  }
  for (int k = 0; k < model_.cb.size; ++k) {
    if (used[static_cast<size_t>(k)]) {
      model_.cb.unused_steps[static_cast<size_t>(k)] = 0;
    } else if (++model_.cb.unused_steps[static_cast<size_t>(k)] >= c.revive_after &&
               recent_filled_ > 0) {
      const size_t pick = static_cast<size_t>(
          rng_.uniform_int(0, static_cast<int>(recent_filled_) - 1));
      model_.cb.reseed(k, recent_.data() + pick * static_cast<size_t>(model_.cb.dim));
    }
  }
  st.degenerate = static_cast<int>(model_.cb.degenerate_inputs);
  return st;
}

}  // namespace motok
