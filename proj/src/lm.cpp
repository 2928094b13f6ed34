#include "motok/lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "motok/checkpoint.hpp"

namespace motok {

namespace {

[[noreturn]] void lm_fail(const std::string& msg) {
  throw std::invalid_argument("lm: " + msg);
}

}  // namespace

void LMConfig::validate() const {
  vocab.validate();
  if (layers <= 0 || dim <= 0 || heads <= 0 || context < 2) {
    lm_fail("layers, dim, heads must be positive and context at least 2");
  }
  if (dim % heads != 0) {
    lm_fail("heads (" + std::to_string(heads) + ") must divide dim (" + std::to_string(dim) + ")");
  }
}

std::string LMConfig::to_json() const {
  nlohmann::json j;
  j["schema"] = 1;
  j["vocab"] = {{"text_size", vocab.text_size},
                {"visual_size", vocab.visual_size},
                {"motion_size", vocab.motion_size}};
  j["layers"] = layers;
  j["dim"] = dim;
  j["heads"] = heads;
  j["context"] = context;
  return j.dump();
}

LMConfig LMConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  LMConfig c;
  const auto& v = j.at("vocab");
  c.vocab.text_size = v.at("text_size").get<int>();
  c.vocab.visual_size = v.at("visual_size").get<int>();
  c.vocab.motion_size = v.at("motion_size").get<int>();
  c.layers = j.at("layers").get<int>();
  c.dim = j.at("dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.context = j.at("context").get<int>();
  c.validate();
  return c;
}

LM::LM(LMConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const int d = cfg_.dim;
  const int v = cfg_.vocab.total();
  auto weight = [&](const std::string& name, Shape shape) {
    rng.fill_normal(add_param(name, std::move(shape)).value, 0.0, 0.02);
  };
  auto zeros = [&](const std::string& name, Shape shape) -> Parameter& {
    return add_param(name, std::move(shape));
  };
  auto gamma = [&](const std::string& name) {
    Parameter& p = add_param(name, {d});
    std::fill(p.value.data->begin(), p.value.data->end(), 1.0f);
  };

  weight("tok.emb", {v, d});
  weight("pos.emb", {cfg_.context, d});
  for (int i = 0; i < cfg_.layers; ++i) {
    const std::string b = "b" + std::to_string(i) + ".";
    gamma(b + "attn.ln.g");
    zeros(b + "attn.ln.b", {d});
    for (const char* w : {"wq", "wk", "wv", "wo"}) weight(b + "attn." + w, {d, d});
    for (const char* bn : {"bq", "bk", "bv", "bo"}) zeros(b + "attn." + bn, {d});
    gamma(b + "ffn.ln.g");
    zeros(b + "ffn.ln.b", {d});
    weight(b + "ffn.w1", {d, 4 * d});
    zeros(b + "ffn.b1", {4 * d});
    weight(b + "ffn.w2", {4 * d, d});
    zeros(b + "ffn.b2", {d});
  }
  gamma("out.ln.g");
  zeros("out.ln.b", {d});
  // Zero head: an untrained model is exactly uniform over the vocabulary.
  zeros("head.w", {d, v});
  zeros("head.b", {v});
}

Parameter& LM::add_param(const std::string& name, Shape shape) {
  params_.push_back(std::make_unique<Parameter>(name, Tensor(std::move(shape), 0.0f)));
  return *params_.back();
}

Parameter& LM::get(const std::string& name) const {
  Parameter* p = find(name);
  if (!p) throw std::logic_error("lm: no parameter named '" + name + "'");
  return *p;
}

Parameter* LM::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

std::vector<Parameter*> LM::parameters() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

Tensor LM::logits(Tape& tape, const std::vector<uint32_t>& ids) const {
  const int n = static_cast<int>(ids.size());
  if (n == 0) lm_fail("cannot score an empty sequence");
  if (n > cfg_.context) {
    lm_fail("sequence length " + std::to_string(n) + " exceeds the context window " +
            std::to_string(cfg_.context) + "; sequences are never silently truncated");
  }
  std::vector<int> tok(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= static_cast<uint32_t>(cfg_.vocab.total())) {
      lm_fail("id " + std::to_string(ids[i]) + " outside vocabulary of size " +
              std::to_string(cfg_.vocab.total()));
    }
    tok[i] = static_cast<int>(ids[i]);
  }
  std::vector<int> pos(ids.size());
  std::iota(pos.begin(), pos.end(), 0);

  const int d = cfg_.dim;
  Tensor x = tape.add(tape.embedding(tok, tape.leaf(get("tok.emb"))),
                      tape.embedding(pos, tape.leaf(get("pos.emb"))));
  x = tape.reshape(x, {1, n, d});
  for (int i = 0; i < cfg_.layers; ++i) {
    const std::string b = "b" + std::to_string(i) + ".";
    auto P = [&](const std::string& s) { return tape.leaf(get(b + s)); };
    Tensor h = tape.layer_norm(x, P("attn.ln.g"), P("attn.ln.b"));
    Tensor q = tape.linear(h, P("attn.wq"), P("attn.bq"));
    Tensor k = tape.linear(h, P("attn.wk"), P("attn.bk"));
    Tensor v = tape.linear(h, P("attn.wv"), P("attn.bv"));
    Tensor a = tape.attention(q, k, v, cfg_.heads, /*causal=*/true);
    x = tape.add(x, tape.linear(a, P("attn.wo"), P("attn.bo")));
    Tensor f = tape.layer_norm(x, P("ffn.ln.g"), P("ffn.ln.b"));
    f = tape.gelu(tape.linear(f, P("ffn.w1"), P("ffn.b1")));
    x = tape.add(x, tape.linear(f, P("ffn.w2"), P("ffn.b2")));
  }
  x = tape.layer_norm(x, tape.leaf(get("out.ln.g")), tape.leaf(get("out.ln.b")));
  Tensor lg = tape.linear(x, tape.leaf(get("head.w")), tape.leaf(get("head.b")));
  return tape.reshape(lg, {n, cfg_.vocab.total()});
}

Tensor LM::nll_loss(Tape& tape, const std::vector<uint32_t>& ids) const {
  const int n = static_cast<int>(ids.size());
  if (n < 2) lm_fail("needs at least two tokens to score next-token likelihoods");
  if (n > cfg_.context) {
    lm_fail("sequence length " + std::to_string(n) + " exceeds the context window " +
            std::to_string(cfg_.context) + "; sequences are never silently truncated");
  }
  const std::vector<uint32_t> inputs(ids.begin(), ids.end() - 1);
  std::vector<int> targets(ids.begin() + 1, ids.end());
  const int pad = static_cast<int>(cfg_.vocab.pad());
  if (std::count_if(targets.begin(), targets.end(), [&](int t) { return t != pad; }) == 0) {
    lm_fail("every target position is PAD; nothing to score");
  }
  return tape.cross_entropy_mean(logits(tape, inputs), targets, pad);
}

double LM::nll(const std::vector<uint32_t>& ids) const {
  Tape tape(false);
  return nll_loss(tape, ids).at(0);
}

void LM::save(const std::string& path) const {
  std::vector<Parameter*> ps;
  ps.reserve(params_.size());
  for (const auto& p : params_) ps.push_back(p.get());
  save_parameters(path, ps, cfg_.to_json());
}

LM LM::load(const std::string& path) {
  Snapshot snap = load_snapshot(path);
  if (snap.config_json.empty()) {
    throw std::runtime_error("lm: checkpoint '" + path + "' carries no config");
  }
  LM model(LMConfig::from_json(snap.config_json), 0);
  for (auto& p : model.params_) {
    auto it = snap.tensors.find(p->name);
    if (it == snap.tensors.end()) {
      throw std::runtime_error("lm: checkpoint is missing tensor '" + p->name + "'");
    }
    if (it->second.shape != p->value.shape) {
      throw std::runtime_error("lm: checkpoint tensor '" + p->name + "' has the wrong shape");
    }
    *p->value.data = *it->second.data;
  }
  return model;
}

// Sampling

namespace {

struct SpanState {
  int open = 0;  // 0 none, 1 IMG, 2 MOV
  int media = 0; // media ids inside the open span
  bool done = false;

  void feed(uint32_t id, const UnifiedVocab& v) {
    if (id == v.img()) {
      open = 1;
      media = 0;
    } else if (id == v.mov()) {
      open = 2;
      media = 0;
    } else if (id == v.img_end() || id == v.mov_end()) {
      open = 0;
    } else if (id == v.eos()) {
      done = true;
    } else {
      const Modality m = v.modality_of(id);
      if (open != 0 && (m == Modality::kVisual || m == Modality::kMotion)) ++media;
    }
  }
};

// Next-token support that keeps every reachable output well-formed, even
// when the budget runs out mid-sequence: a span may only open with room for
// one media token plus its closing delimiter, and closing is forced on the
// last affordable slot.
void grammar_mask(std::vector<char>& allowed, const SpanState& st, int left,
                  const UnifiedVocab& v) {
  std::fill(allowed.begin(), allowed.end(), 0);
  if (st.open != 0) {
    const int base = st.open == 1 ? v.visual_base() : v.motion_base();
    const int size = st.open == 1 ? v.visual_size : v.motion_size;
    const uint32_t close = st.open == 1 ? v.img_end() : v.mov_end();
    if (st.media == 0) {
      std::fill(allowed.begin() + base, allowed.begin() + base + size, 1);
    } else if (left <= 1) {
      allowed[close] = 1;
    } else {
      std::fill(allowed.begin() + base, allowed.begin() + base + size, 1);
      allowed[close] = 1;
    }
    return;
  }
  std::fill(allowed.begin(), allowed.begin() + v.text_size, 1);
  allowed[v.eos()] = 1;
  if (left >= 3) {
    allowed[v.img()] = 1;
    allowed[v.mov()] = 1;
  }
}

}  // namespace

GenerateResult generate(const LM& model, const TokenSequence& prefix, SamplePolicy policy) {
  const UnifiedVocab& v = model.config().vocab;
  if (!prefix.ids.empty()) {
    const auto viol = validate(prefix, v);
    if (viol.has_value()) {
      lm_fail("prefix is malformed: " + viol->message + " at position " +
              std::to_string(viol->position));
    }
  }
  std::vector<uint32_t> ids = prefix.ids;
  if (ids.empty()) ids.push_back(v.bos());

  int64_t cap = model.config().context;
  if (policy.max_new >= 0) {
    cap = std::min<int64_t>(cap, static_cast<int64_t>(ids.size()) + policy.max_new);
  }

  SpanState st;  // a valid prefix leaves no span open
  st.done = !ids.empty() && ids.back() == v.eos();
  const int total = v.total();
  std::vector<char> allowed(static_cast<size_t>(total), 1);
  Rng rng(policy.seed);
  const bool greedy = policy.greedy || policy.temperature <= 1e-6f;

  while (!st.done && static_cast<int64_t>(ids.size()) < cap) {
    Tape tape(false);
    const Tensor lg = model.logits(tape, ids);
    const int64_t row = static_cast<int64_t>(ids.size() - 1) * total;

    if (policy.grammar) {
      grammar_mask(allowed, st, static_cast<int>(cap - static_cast<int64_t>(ids.size())), v);
    } else {
      std::fill(allowed.begin(), allowed.end(), 1);
    }

    int pick = -1;
    if (greedy) {
      float best = 0.f;
      for (int i = 0; i < total; ++i) {
        if (!allowed[i]) continue;
        const float l = lg.at(row + i);
        if (pick < 0 || l > best) {
          pick = i;
          best = l;
        }
      }
    } else {
      double mx = 0.0;
      bool any = false;
      for (int i = 0; i < total; ++i) {
        if (!allowed[i]) continue;
        const double l = lg.at(row + i);
        if (!any || l > mx) mx = l;
        any = true;
      }
      double z = 0.0;
      std::vector<double> w(static_cast<size_t>(total), 0.0);
      for (int i = 0; i < total; ++i) {
        if (!allowed[i]) continue;
        w[i] = std::exp((static_cast<double>(lg.at(row + i)) - mx) / policy.temperature);
        z += w[i];
      }
      double u = rng.uniform() * z;
      for (int i = 0; i < total; ++i) {
        if (!allowed[i]) continue;
        u -= w[i];
        pick = i;
        if (u <= 0.0) break;
      }
    }

    const uint32_t id = static_cast<uint32_t>(pick);
    ids.push_back(id);
    st.feed(id, v);
  }

  GenerateResult r;
  r.seq.ids = std::move(ids);
  r.seq.segments = derive_segments(r.seq.ids, v);
  r.truncated = !st.done;
  return r;
}

// Training

LMTrainStats train_lm(LM& model, const std::vector<TokenSequence>& corpus,
                      const LMTrainConfig& tc) {
  if (corpus.empty()) lm_fail("training corpus is empty");
  if (tc.steps <= 0 || tc.batch <= 0) lm_fail("steps and batch must be positive");
  if (tc.start_step < 0 || tc.start_step >= tc.steps) lm_fail("start_step outside the schedule");
  for (size_t i = 0; i < corpus.size(); ++i) {
    if (static_cast<int>(corpus[i].ids.size()) > model.config().context) {
      lm_fail("corpus sequence " + std::to_string(i) + " has " +
              std::to_string(corpus[i].ids.size()) + " tokens but the context window is " +
              std::to_string(model.config().context));
    }
  }

  LMTrainStats stats;
  const std::vector<Parameter*> params = model.parameters();
  AdamW opt;
  const int64_t warmup = std::llround(tc.warmup_frac * tc.steps);
  const int end_step =
      tc.run_steps < 0 ? tc.steps : std::min(tc.steps, tc.start_step + tc.run_steps);
  for (int step = tc.start_step; step < end_step; ++step) {
    // Per-step generator: the batch at step k depends only on (seed, k), so
    // a resumed run replays the same batches.
    Rng srng(tc.seed * 0x9E3779B97F4A7C15ull + static_cast<uint64_t>(step));
    Tape tape;
    Tensor total;
    for (int b = 0; b < tc.batch; ++b) {
      const int idx = srng.uniform_int(0, static_cast<int>(corpus.size()) - 1);
      const Tensor l = model.nll_loss(tape, corpus[static_cast<size_t>(idx)].ids);
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
    tape.backward(loss);
    const double lr = cosine_lr(step, tc.steps, tc.lr, warmup);
    opt.step(tape, params, static_cast<float>(lr));
    stats.losses.push_back(lv);
  }
  return stats;
}

}  // namespace motok
