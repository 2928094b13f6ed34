#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "motok/vqvae.hpp"
#include "support/gradcheck.hpp"
#include "support/vqvae_oracle.hpp"

using namespace motok;

namespace {

VqVaeConfig tiny_cfg() {
  VqVaeConfig c;
  c.t = 4;
  c.grid_h = 4;
  c.grid_w = 4;
  c.dim = 16;
  c.heads = 2;
  c.blocks = 2;
  c.ffn_mult = 2;
  c.d_code = 4;
  c.codebook_size = 16;
  c.down_after = {2};
  c.down_axes = {DownAxes::kBoth};
  return c;
}

MotionField random_field(int t, int hb, int wb, uint64_t seed) {
  MotionField f(t, hb, wb, true);
  Rng rng(seed);
  for (auto& v : f.v) v = static_cast<float>(rng.uniform(-0.9, 0.9));
  return f;
}

Codebook make_cb(int k, int d, std::vector<float> codes) {
  Rng rng(1);
  Codebook cb(k, d, 0.995f, rng);
  cb.codes = std::move(codes);
  cb.ema_sum = cb.codes;
  std::fill(cb.ema_size.begin(), cb.ema_size.end(), 1.0f);
  return cb;
}

}  // namespace

TEST_SUITE("vqvae") {

TEST_CASE("config arithmetic and validation") {
  VqVaeConfig c;  // defaults
  c.validate();
  CHECK(c.latent_t() == 3);
  CHECK(c.latent_h() == 5);
  CHECK(c.latent_w() == 9);
  CHECK(c.n_latents() == 135);

  SUBCASE("heads must divide dim") {
    c.heads = 7;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  }
  SUBCASE("downsample divisibility") {
    c.t = 25;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  }
  SUBCASE("down_after ordering") {
    c.down_after = {6, 3, 9, 12};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  }
  SUBCASE("json round trip") {
    VqVaeConfig t = tiny_cfg();
    VqVaeConfig back = VqVaeConfig::from_json(t.to_json());
    CHECK(back.t == t.t);
    CHECK(back.grid_h == t.grid_h);
    CHECK(back.grid_w == t.grid_w);
    CHECK(back.dim == t.dim);
    CHECK(back.heads == t.heads);
    CHECK(back.blocks == t.blocks);
    CHECK(back.d_code == t.d_code);
    CHECK(back.codebook_size == t.codebook_size);
    CHECK(back.beta == t.beta);
    CHECK(back.decay == t.decay);
    CHECK(back.down_after == t.down_after);
    REQUIRE(back.down_axes.size() == t.down_axes.size());
    CHECK(back.down_axes[0] == t.down_axes[0]);
    CHECK(back.revive_after == t.revive_after);
  }
}

TEST_CASE("quantize picks the nearest code by angle") {
  Codebook cb = make_cb(2, 2, {1, 0, 0, 1});
  float z0[2] = {0.9f, 0.1f};
  float z1[2] = {0.1f, 0.9f};
  CHECK(cb.quantize_one(z0).id == 0);
  CHECK(cb.quantize_one(z1).id == 1);
  // magnitude is irrelevant, only direction matters
  float z2[2] = {90.f, 10.f};
  CHECK(cb.quantize_one(z2).id == 0);
}

TEST_CASE("quantize tie-break takes the smallest index") {
  std::vector<float> codes(8 * 2, 0.f);
  for (int k = 0; k < 8; ++k) {
    codes[static_cast<size_t>(k) * 2] = -1.f;  // far from the query
  }
  codes[3 * 2] = 1.f;
  codes[3 * 2 + 1] = 0.f;
  codes[7 * 2] = 0.f;
  codes[7 * 2 + 1] = 1.f;
  Codebook cb = make_cb(8, 2, codes);
  float z[2] = {0.5f, 0.5f};  // exactly equidistant from codes 3 and 7
  CHECK(cb.quantize_one(z).id == 3);
}

TEST_CASE("zero vector quantizes by raw distance and is flagged") {
  Codebook cb = make_cb(2, 2, {10.f, 0.f, 0.1f, 0.f});
  float z[2] = {0.f, 0.f};
  auto r = cb.quantize_one(z);
  CHECK(r.id == 1);  // nearest raw code, not nearest direction
  CHECK(r.degenerate);
  CHECK(cb.degenerate_inputs == 1);
}

TEST_CASE("quantizer self-match is the identity") {
  Rng rng(71);
  Codebook cb(32, 8, 0.995f, rng);
  for (int k = 0; k < 32; ++k) {
    CHECK(cb.quantize_one(cb.codes.data() + static_cast<size_t>(k) * 8).id == k);
  }
}

TEST_CASE("quantizer matches the brute force oracle on a full-size codebook") {
  Rng rng(72);
  Codebook cb(1024, 32, 0.995f, rng);
  std::vector<float> z(32);
  for (int iter = 0; iter < 100; ++iter) {
    const double s = iter % 5 == 0 ? 1e-4 : 1.0;  // include tiny magnitudes
    for (auto& v : z) v = static_cast<float>(rng.normal(0.0, s));
    const int got = cb.quantize(z.data(), 1)[0];
    const int want = testing::naive_quantize(cb.codes, 1024, 32, z.data());
    CHECK(got == want);
  }
}

TEST_CASE("ema update follows the closed-form geometric limit") {
  Rng rng(73);
  Codebook cb(8, 4, 0.995f, rng);
  const std::vector<float> c0(cb.codes.begin() + 5 * 4, cb.codes.begin() + 6 * 4);
  const std::vector<float> c2(cb.codes.begin() + 2 * 4, cb.codes.begin() + 3 * 4);
  std::vector<float> mu = {0.4f, -0.2f, 0.7f, -0.9f};
  std::vector<int> ids = {5};

  for (int step = 1; step <= 2000; ++step) {
    cb.ema_update(ids, mu.data(), 1);
    if (step == 1 || step == 10 || step == 100) {
      const double g = std::pow(0.995, step);
      for (int j = 0; j < 4; ++j) {
        const double want = mu[static_cast<size_t>(j)] +
                            (c0[static_cast<size_t>(j)] - mu[static_cast<size_t>(j)]) * g;
        CHECK(cb.codes[5 * 4 + j] == doctest::Approx(want).epsilon(2e-5));
      }
      CHECK(cb.ema_size[5] == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  for (int j = 0; j < 4; ++j) {
    CHECK(std::fabs(cb.codes[5 * 4 + j] - mu[static_cast<size_t>(j)]) < 1e-4);
  }
  // a never-assigned code keeps its value while its count decays
  CHECK(cb.ema_size[2] == doctest::Approx(std::pow(0.995, 2000)).epsilon(2e-3));
  for (int j = 0; j < 4; ++j) {
    CHECK(cb.codes[2 * 4 + j] == doctest::Approx(c2[static_cast<size_t>(j)]).epsilon(1e-3));
  }
  // the invariant: codes equal smoothed-sum over floored count, recomputed
  for (int k = 0; k < 8; ++k) {
    const float denom = std::max(cb.ema_size[static_cast<size_t>(k)], 1e-5f);
    for (int j = 0; j < 4; ++j) {
      CHECK(cb.codes[static_cast<size_t>(k) * 4 + j] ==
            cb.ema_sum[static_cast<size_t>(k) * 4 + j] / denom);
    }
  }
}

TEST_CASE("ema boundary cases") {
  SUBCASE("decay 1 leaves everything alone") {
    Rng rng(74);
    Codebook cb(4, 3, 1.0f, rng);
    const auto codes0 = cb.codes;
    std::vector<float> z = {9.f, 9.f, 9.f};
    std::vector<int> ids = {1};
    cb.ema_update(ids, z.data(), 1);
    CHECK(cb.codes == codes0);
  }
  SUBCASE("empty batch decays counts, codes stay put") {
    Rng rng(75);
    Codebook cb(4, 3, 0.995f, rng);
    const auto codes0 = cb.codes;
    cb.ema_update({}, nullptr, 0);
    CHECK(cb.ema_size[0] == doctest::Approx(0.995).epsilon(1e-7));
    for (size_t i = 0; i < codes0.size(); ++i) {
      CHECK(cb.codes[i] == doctest::Approx(codes0[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("usage statistics") {
  std::vector<int64_t> uniform(16, 100);
  auto u = codebook_usage(uniform);
  CHECK(u.perplexity == doctest::Approx(16.0).epsilon(1e-12));
  CHECK(u.dead_codes == 0);

  std::vector<int64_t> single(16, 0);
  single[3] = 777;
  auto s = codebook_usage(single);
  CHECK(s.perplexity == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.dead_codes == 15);

  auto e = codebook_usage(std::vector<int64_t>(16, 0));
  CHECK(e.perplexity == 0.0);
  CHECK(e.dead_codes == 16);
}

TEST_CASE("encoder output shape, determinism, and shape errors") {
  MotionVqVae m(tiny_cfg(), 99);
  MotionField f = random_field(4, 4, 4, 5);

  auto ids = m.tokenize(f);
  REQUIRE(static_cast<int>(ids.size()) == 8);
  for (int id : ids) CHECK((id >= 0 && id < 16));

  MotionVqVae m2(tiny_cfg(), 99);
  CHECK(m2.tokenize(f) == ids);

  Tape t1(false), t2(false);
  Tensor x = m.field_tensor(f);
  Tensor z1 = m.encode(t1, t1.constant(x));
  Tensor z2 = m.encode(t2, t2.constant(x));
  REQUIRE(z1.numel() == 8 * 4);
  for (int64_t i = 0; i < z1.numel(); ++i) CHECK(z1.at(i) == z2.at(i));

  MotionField bad = random_field(3, 4, 4, 6);
  CHECK_THROWS_WITH_AS(m.tokenize(bad), doctest::Contains("expected field (4, 4, 4)"),
                       std::invalid_argument);
  MotionField raw = random_field(4, 4, 4, 7);
  raw.normalized = false;
  CHECK_THROWS_AS(m.tokenize(raw), std::invalid_argument);
}

TEST_CASE("encoder forward matches the naive reimplementation") {
  MotionVqVae m(tiny_cfg(), 321);
  MotionField f = random_field(4, 4, 4, 8);

  Tape tp(false);
  Tensor z = m.encode(tp, tp.constant(m.field_tensor(f)));
  auto want = testing::naive_encode(m, f.v);
  REQUIRE(static_cast<size_t>(z.numel()) == want.size());
  double worst = 0;
  for (int64_t i = 0; i < z.numel(); ++i) {
    worst = std::max(worst, std::fabs(z.at(i) - want[static_cast<size_t>(i)]));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("decoder shape, clamp, and vocabulary errors") {
  MotionVqVae m(tiny_cfg(), 11);
  std::vector<int> ids(8, 3);
  MotionField f = m.detokenize(ids);
  CHECK(f.t == 4);
  CHECK(f.hb == 4);
  CHECK(f.wb == 4);
  CHECK(f.normalized);
  for (float v : f.v) CHECK((v >= -1.f && v <= 1.f));
  CHECK(m.detokenize(ids).v == f.v);

  // saturate the output head so the clamp actually engages
  for (Parameter* p : m.parameters()) {
    if (p->name == "dec.head.b") {
      p->value.at(0) = 50.f;
      p->value.at(1) = -50.f;
    }
  }
  MotionField sat = m.detokenize(ids);
  for (int ti = 0; ti < 4; ++ti) {
    CHECK(sat.dx(ti, 0, 0) == 1.0f);
    CHECK(sat.dy(ti, 0, 0) == -1.0f);
  }

  CHECK_THROWS_AS(m.detokenize(std::vector<int>(7, 0)), std::invalid_argument);
  CHECK_THROWS_AS(m.detokenize(std::vector<int>(8, 16)), std::out_of_range);
}

TEST_CASE("train steps keep the loss algebra and reduce reconstruction error") {
  MotionVqVae m(tiny_cfg(), 2025);
  VqVaeTrainer tr(m, 7);
  MotionField f = random_field(4, 4, 4, 9);

  VqTrainStats first{};
  VqTrainStats last{};
  for (int s = 0; s < 40; ++s) {
    auto st = tr.step(std::vector<MotionField>{f}, 3e-4f);
    REQUIRE(!st.aborted);
    CHECK(st.total == doctest::Approx(st.recon + 0.25 * st.commit).epsilon(1e-5));
    CHECK(st.grad_norm > 0.0);
    if (s == 0) first = st;
    last = st;
  }
  CHECK(last.recon < first.recon);
}

TEST_CASE("straight-through gradients equal the identity-quantizer gradients") {
  VqVaeConfig cfg = tiny_cfg();
  MotionVqVae m(cfg, 555);
  MotionField f = random_field(4, 4, 4, 10);
  Tensor x0 = m.field_tensor(f);

  // Pin the codebook to the exact latents so quantization is the identity on
  // this input; the two backward paths must then agree exactly.
  {
    Tape warm(false);
    Tensor z = m.encode(warm, warm.constant(x0));
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 4; ++j)
        m.cb.codes[static_cast<size_t>(i) * 4 + j] = z.at(static_cast<int64_t>(i) * 4 + j);
    for (int i = 8; i < 16; ++i)
      for (int j = 0; j < 4; ++j) m.cb.codes[static_cast<size_t>(i) * 4 + j] = 40.f + i;
  }

  Tensor codes_now({8, 4}, 0.f);

  Tape ta;
  {
    Tensor x = ta.constant(x0);
    Tensor zhat = m.encode(ta, x);
    auto ids = m.cb.quantize(zhat.ptr(), 8);
    for (int i = 0; i < 8; ++i) {
      CHECK(ids[static_cast<size_t>(i)] == i);  // self-match
      for (int j = 0; j < 4; ++j)
        codes_now.at(static_cast<int64_t>(i) * 4 + j) =
            m.cb.codes[static_cast<size_t>(ids[static_cast<size_t>(i)]) * 4 + j];
    }
    Tensor zq = ta.straight_through(ta.constant(codes_now), zhat);
    Tensor recon = m.decode_latents(ta, zq);
    Tensor loss = ta.add(ta.mse_mean(recon, x), ta.scale(ta.mse_mean(zhat, ta.constant(codes_now)), 0.25f));
    ta.backward(loss);
  }

  Tape tb;
  {
    Tensor x = tb.constant(x0);
    Tensor zhat = m.encode(tb, x);
    Tensor recon = m.decode_latents(tb, zhat);  // quantizer replaced by identity
    Tensor loss = tb.add(tb.mse_mean(recon, x), tb.scale(tb.mse_mean(zhat, tb.constant(codes_now)), 0.25f));
    tb.backward(loss);
  }

  int compared = 0;
  for (Parameter* p : m.parameters()) {
    if (p->name.rfind("enc.", 0) != 0) continue;
    const std::vector<float>* ga = ta.grad_for(*p);
    const std::vector<float>* gb = tb.grad_for(*p);
    REQUIRE(ga != nullptr);
    REQUIRE(gb != nullptr);
    REQUIRE(ga->size() == gb->size());
    for (size_t i = 0; i < ga->size(); ++i) {
      CHECK((*ga)[i] == doctest::Approx((*gb)[i]).epsilon(1e-6));
    }
    ++compared;
  }
  CHECK(compared > 10);

  // and the identity-quantizer loss passes finite differences end to end
  auto loss_fn = [&](Tape& tp) {
    Tensor x = tp.constant(x0);
    Tensor zhat = m.encode(tp, x);
    Tensor recon = m.decode_latents(tp, zhat);
    return tp.add(tp.mse_mean(recon, x),
                  tp.scale(tp.mse_mean(zhat, tp.constant(codes_now)), 0.25f));
  };
  testing::GradCheckOpts opts;
  opts.max_per_param = 3;
  auto res = testing::fd_gradcheck(loss_fn, m.parameters(), opts);
  INFO(res.report());
  CHECK(res.ok());
  CHECK(res.checked > 100);
}

TEST_CASE("non-finite loss aborts the step without touching state") {
  MotionVqVae m(tiny_cfg(), 777);
  VqVaeTrainer tr(m, 8);
  MotionField f = random_field(4, 4, 4, 11);

  for (Parameter* p : m.parameters()) {
    if (p->name == "enc.head.w") p->value.at(0) = std::numeric_limits<float>::quiet_NaN();
  }
  const auto codes0 = m.cb.codes;
  std::vector<float> w0;
  for (Parameter* p : m.parameters())
    if (p->name == "dec.embed.w") w0 = *p->value.data;

  auto st = tr.step(std::vector<MotionField>{f}, 1e-3f);
  CHECK(st.aborted);
  CHECK(st.diagnostics.find("latent sigma") != std::string::npos);
  CHECK(st.diagnostics.find("perplexity") != std::string::npos);
  CHECK(m.cb.codes == codes0);
  CHECK(tr.optimizer().steps_taken() == 0);
  for (Parameter* p : m.parameters())
    if (p->name == "dec.embed.w") CHECK(*p->value.data == w0);
}

TEST_CASE("codes dead long enough get reseeded from recent latents") {
  VqVaeConfig cfg = tiny_cfg();
  cfg.revive_after = 2;
  MotionVqVae m(cfg, 31);
  VqVaeTrainer tr(m, 9);
  MotionField f = random_field(4, 4, 4, 12);

  for (int s = 0; s < 4; ++s) {
    auto st = tr.step(std::vector<MotionField>{f}, 1e-4f);
    REQUIRE(!st.aborted);
  }
  for (int k = 0; k < m.cb.size; ++k) {
    CHECK(m.cb.unused_steps[static_cast<size_t>(k)] < 2);
  }
}

}  // TEST_SUITE vqvae
