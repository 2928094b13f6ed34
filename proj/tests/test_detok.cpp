#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "motok/detok.hpp"
#include "motok/synth.hpp"
#include "support/gradcheck.hpp"

using namespace motok;

namespace {

Tensor random_latent(Shape s, uint64_t seed) {
  Tensor t(std::move(s), 0.f);
  Rng rng(seed);
  rng.fill_uniform(t, 0.0, 1.0);
  return t;
}

MotionField random_field(int t, int hb, int wb, uint64_t seed) {
  MotionField f(t, hb, wb, true);
  Rng rng(seed);
  for (float& x : f.v) x = static_cast<float>(rng.uniform(-0.2, 0.2));
  return f;
}

MotionEncoderConfig tiny_enc_cfg() {
  MotionEncoderConfig c;
  c.feat_dim = 8;
  c.heads = 2;
  c.max_t = 4;
  return c;
}

ToyUNetConfig tiny_net_cfg() {
  ToyUNetConfig c;
  c.channels = 1;
  c.width = 8;
  c.heads = 2;
  c.feat_dim = 8;
  return c;
}

// One trained model shared by the slow cases; built once, on first use.
struct Trained {
  DiffusionSchedule sched;
  DetokDatasetConfig dc;
  std::vector<DetokTrainItem> data;
  ToyUNet3D net;
  MotionEncoder enc;
  DetokTrainStats stats;
};

Trained build_trained() {
  DetokDatasetConfig dc;
  dc.clips = 3;
  dc.t = 3;
  dc.h = 16;
  dc.w = 16;
  dc.square = 6;
  dc.max_speed = 1;
  dc.block = 4;
  dc.search = 2;
  dc.seed = 7;
  std::vector<DetokTrainItem> data = make_detok_dataset(dc);

  ToyUNetConfig nc;  // defaults: width 16, heads 4, feat_dim 16
  MotionEncoderConfig ec;
  ToyUNet3D net(nc, 11);
  MotionEncoder enc(ec, 12);

  DetokTrainConfig tc;
  tc.steps = 800;
  tc.batch = 2;
  tc.lr = 1e-2;
  tc.seed = 21;
  DiffusionSchedule sched;
  DetokTrainStats stats = train_toy_detokenizer(net, enc, data, sched, tc);
  return Trained{std::move(sched), dc, std::move(data), std::move(net), std::move(enc),
                 std::move(stats)};
}

const Trained& trained() {
  static Trained t = build_trained();
  return t;
}

// Pack with features refreshed from the given encoder.
ConditionPack with_features(const ConditionPack& pack, const MotionEncoder& enc) {
  ConditionPack out = pack;
  out.motion_features = enc.features(pack.motion);
  return out;
}

}  // namespace

TEST_CASE("config validation and json round trips") {
  MotionEncoderConfig ec = tiny_enc_cfg();
  ec.validate();
  const MotionEncoderConfig eb = MotionEncoderConfig::from_json(ec.to_json());
  CHECK(eb.feat_dim == 8);
  CHECK(eb.heads == 2);
  CHECK(eb.max_t == 4);
  ec.heads = 3;  // does not divide feat_dim
  CHECK_THROWS_AS(ec.validate(), std::invalid_argument);
  CHECK_THROWS_AS(MotionEncoderConfig::from_json("{"), std::invalid_argument);
  CHECK_THROWS_AS(MotionEncoderConfig::from_json("{\"schema\":9}"), std::invalid_argument);

  ToyUNetConfig nc = tiny_net_cfg();
  nc.validate();
  const ToyUNetConfig nb = ToyUNetConfig::from_json(nc.to_json());
  CHECK(nb.width == 8);
  CHECK(nb.channels == 1);
  CHECK(nb.sigma_data == doctest::Approx(0.5));
  nc.heads = 3;
  CHECK_THROWS_AS(nc.validate(), std::invalid_argument);
  nc = tiny_net_cfg();
  nc.sigma_data = 0.0;
  CHECK_THROWS_AS(nc.validate(), std::invalid_argument);
  CHECK_THROWS_AS(ToyUNetConfig::from_json("{\"schema\":1}"), std::invalid_argument);
}

TEST_CASE("condition assembly tiles the keyframe and copies motion through") {
  const int t = 3, h = 8, w = 8, c = 2;
  const Tensor kf = random_latent({h, w, c}, 3);
  const MotionField field = random_field(t, h, w, 4);

  const ConditionPack pack = build_condition(kf, field, t);
  REQUIRE(pack.keyframe.shape == Shape{t, h, w, c});
  REQUIRE(pack.motion.shape == Shape{t, h, w, 2});
  CHECK(pack.temporal() == t);
  CHECK(pack.motion_features.data == nullptr);  // no encoder supplied

  // Keyframe repeats along time.
  for (int ti = 0; ti < t; ++ti) {
    for (int64_t i = 0; i < kf.numel(); ++i) {
      CHECK(pack.keyframe.at(static_cast<int64_t>(ti) * kf.numel() + i) == kf.at(i));
    }
  }
  // Same-resolution field passes through bit for bit.
  for (size_t i = 0; i < field.v.size(); ++i) CHECK(pack.motion.at(static_cast<int64_t>(i)) == field.v[i]);

  // Coarse field: nearest-neighbor upscale, spot-checked against the source cells.
  const MotionField coarse = random_field(t, h / 4, w / 4, 5);
  const ConditionPack up = build_condition(kf, coarse, t);
  REQUIRE(up.motion.shape == Shape{t, h, w, 2});
  const MotionField sized = resize_motion(coarse, h, w);
  for (size_t i = 0; i < sized.v.size(); ++i) CHECK(up.motion.at(static_cast<int64_t>(i)) == sized.v[i]);

  CHECK_THROWS_AS(build_condition(kf, field, 0), std::invalid_argument);
  CHECK_THROWS_AS(build_condition(kf, field, t + 1), std::invalid_argument);
  CHECK_THROWS_AS(build_condition(random_latent({h, w}, 6), field, t), std::invalid_argument);
  MotionField raw = field;
  raw.normalized = false;
  CHECK_THROWS_AS(build_condition(kf, raw, t), std::invalid_argument);
}

TEST_CASE("motion encoder output shape, determinism, and limits") {
  const MotionEncoderConfig cfg = tiny_enc_cfg();
  const MotionEncoder enc(cfg, 5);
  const ConditionPack pack =
      build_condition(random_latent({4, 4, 1}, 1), random_field(2, 4, 4, 2), 2, &enc);
  REQUIRE(pack.motion_features.shape == Shape{1, 2 * 4 * 4, 8});

  // Cached features equal a fresh recomputation.
  const Tensor again = enc.features(pack.motion);
  for (int64_t i = 0; i < again.numel(); ++i) {
    CHECK(pack.motion_features.at(i) == again.at(i));
  }
  // Same seed, same weights, same output.
  const MotionEncoder twin(cfg, 5);
  const Tensor twin_out = twin.features(pack.motion);
  for (int64_t i = 0; i < twin_out.numel(); ++i) {
    CHECK(pack.motion_features.at(i) == twin_out.at(i));
  }

  Tape tape(false);
  CHECK_THROWS_AS(enc.forward(tape, random_latent({4, 4, 3}, 3)), std::invalid_argument);
  CHECK_THROWS_AS(enc.forward(tape, random_latent({cfg.max_t + 1, 4, 4, 2}, 3)),
                  std::invalid_argument);
}

TEST_CASE("untrained denoiser is the pure skip path") {
  const ToyUNet3D net(tiny_net_cfg(), 9);
  const MotionEncoder enc(tiny_enc_cfg(), 10);
  const ConditionPack pack =
      build_condition(random_latent({4, 4, 1}, 1), random_field(2, 4, 4, 2), 2, &enc);

  Latent x(Shape{2, 4, 4, 1});
  Rng rng(77);
  for (double& e : x.v) e = rng.normal();

  const double sd = net.config().sigma_data;
  for (double sigma : {0.05, 0.7, 13.0}) {
    const Latent out = net.denoise(x, sigma, &pack);
    const double c_skip = sd * sd / (sigma * sigma + sd * sd);
    for (size_t i = 0; i < x.v.size(); ++i) CHECK(out.v[i] == c_skip * x.v[i]);
  }

  // Repeat runs match bit for bit.
  const Latent a = net.denoise(x, 0.7, &pack);
  const Latent b = net.denoise(x, 0.7, &pack);
  for (size_t i = 0; i < a.v.size(); ++i) CHECK(a.v[i] == b.v[i]);

  CHECK_THROWS_AS(net.denoise(x, 0.7, nullptr), std::invalid_argument);
  CHECK_THROWS_AS(net.denoise(x, 0.0, &pack), std::invalid_argument);
  ConditionPack bare = pack;
  bare.motion_features = Tensor();
  CHECK_THROWS_AS(net.denoise(x, 0.7, &bare), std::invalid_argument);
  ConditionPack wrong = pack;
  wrong.keyframe = random_latent({2, 4, 4, 2}, 8);
  CHECK_THROWS_AS(net.denoise(x, 0.7, &wrong), std::invalid_argument);
  Latent odd(Shape{2, 5, 4, 1});
  CHECK_THROWS_AS(net.denoise(odd, 0.7, &pack), std::invalid_argument);
}

TEST_CASE("denoising loss gradients match finite differences") {
  ToyUNet3D net(tiny_net_cfg(), 31);
  MotionEncoder enc(tiny_enc_cfg(), 32);
  // Give the zero-initialized head nonzero weights so its gradient path is
  // exercised too.
  {
    Rng r(33);
    r.fill_normal(net.find("out.w")->value, 0.0, 0.02);
    r.fill_normal(net.find("out.b")->value, 0.0, 0.02);
  }
  const DiffusionSchedule sched;
  const Tensor x0 = random_latent({2, 4, 4, 1}, 34);
  const ConditionPack pack =
      build_condition(random_latent({4, 4, 1}, 35), random_field(2, 4, 4, 36), 2);

  auto loss_fn = [&](Tape& tape) {
    Rng r(99);  // pins sigma and the noise draw across evaluations
    return edm_loss(tape, net, enc, sched, x0, pack, r);
  };
  std::vector<Parameter*> params = net.parameters();
  for (Parameter* p : enc.parameters()) params.push_back(p);

  testing::GradCheckOpts opts;
  opts.max_per_param = 8;
  const auto res = testing::fd_gradcheck(loss_fn, params, opts);
  INFO(res.report());
  CHECK(res.ok());
  CHECK(res.checked > 200);
}

TEST_CASE("loss is positive and reproducible before training") {
  const ToyUNet3D net(tiny_net_cfg(), 41);
  const MotionEncoder enc(tiny_enc_cfg(), 42);
  const DiffusionSchedule sched;
  const Tensor x0 = random_latent({2, 4, 4, 1}, 43);
  const ConditionPack pack =
      build_condition(random_latent({4, 4, 1}, 44), random_field(2, 4, 4, 45), 2);

  double first = 0.0;
  for (int rep = 0; rep < 2; ++rep) {
    Tape tape(false);
    Rng r(7);
    const Tensor loss = edm_loss(tape, net, enc, sched, x0, pack, r);
    REQUIRE(loss.numel() == 1);
    const double lv = loss.at(0);
    CHECK(std::isfinite(lv));
    CHECK(lv > 0.0);
    if (rep == 0) {
      first = lv;
    } else {
      CHECK(lv == first);
    }
  }

  Tape tape(false);
  Rng r(7);
  CHECK_THROWS_AS(edm_loss(tape, net, enc, sched, random_latent({2, 4, 4, 2}, 1), pack, r),
                  std::invalid_argument);
  ConditionPack wrong = pack;
  wrong.motion = random_latent({3, 4, 4, 2}, 2);
  CHECK_THROWS_AS(edm_loss(tape, net, enc, sched, x0, wrong, r), std::invalid_argument);
}

TEST_CASE("synthetic dataset is deterministic and well formed") {
  DetokDatasetConfig dc;
  dc.clips = 2;
  dc.t = 3;
  dc.h = 16;
  dc.w = 16;
  dc.square = 6;
  dc.max_speed = 1;
  dc.block = 4;
  dc.search = 2;
  dc.seed = 123;
  const auto a = make_detok_dataset(dc);
  const auto b = make_detok_dataset(dc);
  REQUIRE(a.size() == 2);
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].x0.shape == Shape{3, 16, 16, 1});
    REQUIRE(a[i].pack.keyframe.shape == Shape{3, 16, 16, 1});
    REQUIRE(a[i].pack.motion.shape == Shape{3, 16, 16, 2});
    CHECK(a[i].pack.motion_features.data == nullptr);
    for (int64_t j = 0; j < a[i].x0.numel(); ++j) {
      CHECK(a[i].x0.at(j) >= 0.f);
      CHECK(a[i].x0.at(j) <= 1.f);
      CHECK(a[i].x0.at(j) == b[i].x0.at(j));
    }
    for (int64_t j = 0; j < a[i].pack.motion.numel(); ++j) {
      CHECK(a[i].pack.motion.at(j) == b[i].pack.motion.at(j));
    }
  }

  DetokDatasetConfig bad = dc;
  bad.square = 14;  // travel cannot fit
  CHECK_THROWS_AS(make_detok_dataset(bad), std::invalid_argument);
  bad = dc;
  bad.h = 15;
  CHECK_THROWS_AS(make_detok_dataset(bad), std::invalid_argument);
  bad = dc;
  bad.search = 0;
  CHECK_THROWS_AS(make_detok_dataset(bad), std::invalid_argument);
}

TEST_CASE("training aborts on divergence without touching the loss history") {
  DetokDatasetConfig dc;
  dc.clips = 1;
  dc.t = 2;
  dc.h = 8;
  dc.w = 8;
  dc.square = 4;
  dc.max_speed = 1;
  dc.block = 4;
  dc.search = 2;
  dc.seed = 3;
  const auto data = make_detok_dataset(dc);
  ToyUNet3D net(tiny_net_cfg(), 1);
  MotionEncoder enc(tiny_enc_cfg(), 2);
  DetokTrainConfig tc;
  tc.steps = 10;
  tc.batch = 1;
  tc.lr = 1e-3;
  tc.seed = 5;
  tc.divergence_factor = 0.5;  // any non-halving step counts as divergence
  const DiffusionSchedule sched;
  const auto stats = train_toy_detokenizer(net, enc, data, sched, tc);
  CHECK(stats.aborted);
  CHECK(stats.diagnostics.find("diverged") != std::string::npos);
  CHECK(stats.losses.size() >= 1);

  CHECK_THROWS_AS(train_toy_detokenizer(net, enc, {}, sched, tc), std::invalid_argument);
}

TEST_CASE("chained decoding with the analytic denoiser") {
  const DiffusionSchedule sched;
  const LinearGaussianOracle oracle({0.3}, {0.04});
  const int h = 8, w = 8, c = 1, t = 2;

  auto make_specs = [&](int n) {
    std::vector<DecodeClipSpec> specs;
    for (int i = 0; i < n; ++i) {
      DecodeClipSpec s;
      s.keyframe = random_latent({h, w, c}, 100 + static_cast<uint64_t>(i));
      s.motion = random_field(t, h, w, 200 + static_cast<uint64_t>(i));
      specs.push_back(std::move(s));
    }
    return specs;
  };

  SUBCASE("single clip matches a hand-rolled decode with the same draws") {
    const auto specs = make_specs(1);
    const auto out = decode_long(oracle, oracle, specs, sched, 10, 55);
    REQUIRE(out.size() == 1);
    REQUIRE(out[0].keyframe.shape == Shape{1, h, w, c});
    REQUIRE(out[0].frames.shape == Shape{t, h, w, c});

    Rng rng(55);
    const double top = sched.sigma_tilde(sched.num_steps());
    const ConditionPack pack_i = build_condition(specs[0].keyframe, MotionField(1, h, w, true), 1);
    const ConditionPack pack_v = build_condition(specs[0].keyframe, specs[0].motion, t);
    const Latent kf =
        ddim_sample(oracle, sched, noise_latent(rng, {1, h, w, c}, top), &pack_i, sched.num_steps());
    const Latent fr =
        ddim_sample(oracle, sched, noise_latent(rng, {t, h, w, c}, top), &pack_v, sched.num_steps());
    for (size_t i = 0; i < kf.v.size(); ++i) CHECK(out[0].keyframe.v[i] == kf.v[i]);
    for (size_t i = 0; i < fr.v.size(); ++i) CHECK(out[0].frames.v[i] == fr.v[i]);
  }

  SUBCASE("zero inversion depth copies the previous clip's last frame") {
    const auto specs = make_specs(3);
    const auto out = decode_long(oracle, oracle, specs, sched, 0, 9);
    REQUIRE(out.size() == 3);
    const size_t n = static_cast<size_t>(h) * w * c;
    for (size_t r = 1; r < out.size(); ++r) {
      const auto& prev = out[r - 1].frames.v;
      for (size_t i = 0; i < n; ++i) {
        CHECK(out[r].keyframe.v[i] == prev[prev.size() - n + i]);
      }
    }
  }

  SUBCASE("constrained keyframes stay near the previous clip across seeds") {
    int closer = 0;
    double worst_constrained = 0.0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
      const auto specs = make_specs(2);
      const auto con = decode_long(oracle, oracle, specs, sched, 10, seed, nullptr, true);
      const auto unc = decode_long(oracle, oracle, specs, sched, 10, seed, nullptr, false);
      const size_t n = static_cast<size_t>(h) * w * c;
      Latent prev_c(Shape{1, h, w, c}), prev_u(Shape{1, h, w, c});
      std::copy(con[0].frames.v.end() - static_cast<int64_t>(n), con[0].frames.v.end(),
                prev_c.v.begin());
      std::copy(unc[0].frames.v.end() - static_cast<int64_t>(n), unc[0].frames.v.end(),
                prev_u.v.begin());
      const double dc = l2_dist(con[1].keyframe, prev_c);
      const double du = l2_dist(unc[1].keyframe, prev_u);
      if (dc < du) ++closer;
      worst_constrained = std::max(worst_constrained, dc);
    }
    // The inversion-seeded keyframe reproduces the boundary frame almost
    // exactly; fresh noise lands wherever the posterior mean pulls it.
    CHECK(closer >= 19);
    CHECK(worst_constrained < 1e-6);
  }

  SUBCASE("input validation") {
    const auto specs = make_specs(1);
    CHECK_THROWS_AS(decode_long(oracle, oracle, {}, sched, 1, 0), std::invalid_argument);
    CHECK_THROWS_AS(decode_long(oracle, oracle, specs, sched, -1, 0), std::out_of_range);
    CHECK_THROWS_AS(decode_long(oracle, oracle, specs, sched, sched.num_steps() + 1, 0),
                    std::out_of_range);
  }
}

TEST_CASE("psnr and clamp helpers") {
  Latent a(Shape{2, 2}, 0.0);
  Latent b(Shape{2, 2}, 0.1);
  CHECK(std::isinf(psnr(a, a)));
  CHECK(psnr(a, b) == doctest::Approx(20.0));
  CHECK_THROWS_AS(psnr(a, Latent(Shape{4})), std::invalid_argument);

  Latent l(Shape{3});
  l.v = {-0.5, 0.3, 1.7};
  clamp01(l);
  CHECK(l.v[0] == 0.0);
  CHECK(l.v[1] == 0.3);
  CHECK(l.v[2] == 1.0);
}

TEST_CASE("trained detokenizer reconstructs its clips from noise") {
  const Trained& tr = trained();
  REQUIRE_FALSE(tr.stats.aborted);
  REQUIRE(tr.stats.losses.size() == 800);

  // Loss must have actually dropped.
  const double head = tr.stats.losses[0];
  double tail = 0.0;
  for (size_t i = tr.stats.losses.size() - 50; i < tr.stats.losses.size(); ++i) {
    tail += tr.stats.losses[i];
  }
  tail /= 50.0;
  MESSAGE("loss head " << head << " tail " << tail);
  CHECK(tail < 0.25 * head);

  for (size_t ci = 0; ci < tr.data.size(); ++ci) {
    const auto& item = tr.data[ci];
    const ConditionPack pack = with_features(item.pack, tr.enc);
    Rng rng(1000 + ci);
    const double top = tr.sched.sigma_tilde(tr.sched.num_steps());
    Latent start = noise_latent(rng, item.x0.shape, top);
    Latent rec = ddim_sample(tr.net, tr.sched, std::move(start), &pack, tr.sched.num_steps());
    clamp01(rec);
    const Latent target = to_latent(item.x0);
    double mse = 0.0;
    for (size_t i = 0; i < rec.v.size(); ++i) {
      const double d = rec.v[i] - target.v[i];
      mse += d * d;
    }
    mse /= static_cast<double>(rec.v.size());

    // A decode that ignored the motion could at best repeat the keyframe;
    // demand a clear win over that floor, plus a sane absolute level.
    double copy_mse = 0.0;
    for (int64_t i = 0; i < item.x0.numel(); ++i) {
      const double d = item.x0.at(i) - item.pack.keyframe.at(i);
      copy_mse += d * d;
    }
    copy_mse /= static_cast<double>(item.x0.numel());
    MESSAGE("clip " << ci << " reconstruction mse " << mse << " psnr " << psnr(rec, target)
                    << " copy baseline " << copy_mse);
    CHECK(mse < 0.6 * copy_mse);
    CHECK(mse < 0.05);
  }
}

TEST_CASE("trained denoiser inverts and resamples its own clips") {
  const Trained& tr = trained();
  const auto& item = tr.data[0];
  const ConditionPack pack = with_features(item.pack, tr.enc);
  const Latent x = to_latent(item.x0);
  for (int depth : {1, 5, 10}) {
    Latent up = ddim_invert(tr.net, tr.sched, x, &pack, depth);
    Latent back = ddim_sample(tr.net, tr.sched, std::move(up), &pack, depth);
    const double err = max_abs_diff(back, x);
    MESSAGE("depth " << depth << " round trip err " << err);
    CHECK(err < 1e-2);
  }
}

TEST_CASE("motion conditioning carries signal after training") {
  const Trained& tr = trained();
  // Held-out clips from a different seed.
  DetokDatasetConfig dc = tr.dc;
  dc.clips = 4;
  dc.seed = 99;
  const auto eval = make_detok_dataset(dc);

  // Average the weighted loss over fixed draws, true motion versus a
  // zeroed-out field. The trained model must do better with the truth.
  auto avg_loss = [&](const DetokTrainItem& item, const ConditionPack& pack) {
    double sum = 0.0;
    Rng r(4242);
    const int reps = 8;
    for (int k = 0; k < reps; ++k) {
      Tape tape(false);
      sum += edm_loss(tape, tr.net, tr.enc, tr.sched, item.x0, pack, r).at(0);
    }
    return sum / reps;
  };

  double delta = 0.0;
  for (const auto& item : eval) {
    ConditionPack truth = item.pack;
    ConditionPack blank = item.pack;
    blank.motion = Tensor(item.pack.motion.shape, 0.f);
    const double lt = avg_loss(item, truth);
    const double lb = avg_loss(item, blank);
    MESSAGE("true-motion loss " << lt << " zero-motion loss " << lb);
    delta += lb - lt;
  }
  delta /= static_cast<double>(eval.size());
  MESSAGE("mean ablation delta " << delta);
  CHECK(delta > 0.003);
}

TEST_CASE("checkpoint round trip preserves weights and behavior") {
  const Trained& tr = trained();
  const std::string path = "detok_ckpt_test.mtok";
  save_detokenizer(path, tr.net, tr.enc);
  auto loaded = load_detokenizer(path);
  std::remove(path.c_str());

  ToyUNet3D& net2 = loaded.first;
  MotionEncoder& enc2 = loaded.second;
  CHECK(net2.config().width == tr.net.config().width);
  CHECK(enc2.config().feat_dim == tr.enc.config().feat_dim);

  for (Parameter* p : const_cast<ToyUNet3D&>(tr.net).parameters()) {
    Parameter* q = net2.find(p->name);
    REQUIRE(q != nullptr);
    REQUIRE(q->value.shape == p->value.shape);
    CHECK(q->value.requires_grad);
    for (int64_t i = 0; i < p->value.numel(); ++i) CHECK(q->value.at(i) == p->value.at(i));
  }
  for (Parameter* p : const_cast<MotionEncoder&>(tr.enc).parameters()) {
    Parameter* q = enc2.find(p->name);
    REQUIRE(q != nullptr);
    CHECK(q->value.requires_grad);
    for (int64_t i = 0; i < p->value.numel(); ++i) CHECK(q->value.at(i) == p->value.at(i));
  }

  // Behavior matches bit for bit.
  const auto& item = tr.data[0];
  const ConditionPack pack = with_features(item.pack, tr.enc);
  const Latent x = to_latent(item.x0);
  const Latent a = tr.net.denoise(x, 0.8, &pack);
  const Latent b = net2.denoise(x, 0.8, &pack);
  for (size_t i = 0; i < a.v.size(); ++i) CHECK(a.v[i] == b.v[i]);

  CHECK_THROWS_AS(load_detokenizer("no_such_file.mtok"), std::runtime_error);
}
