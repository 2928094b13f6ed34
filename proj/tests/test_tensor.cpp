#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "motok/checkpoint.hpp"
#include "motok/optim.hpp"
#include "motok/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/ref_ops.hpp"

using namespace motok;
using motok::testing::fd_gradcheck;
using motok::testing::GradCheckOpts;

namespace {

Parameter make_param(const std::string& name, Shape shape, Rng& rng, double std = 0.5) {
  Tensor t(std::move(shape), 0.f);
  rng.fill_normal(t, 0.0, std);
  return Parameter(name, std::move(t));
}

std::string temp_path(const char* stem) {
  return std::string("motok_test_") + stem + "_" + std::to_string(::getpid());
}

std::string hex_of_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream hex;
  int c;
  while ((c = is.get()) != std::istream::traits_type::eof()) {
    char buf[3];
    std::snprintf(buf, sizeof buf, "%02X", static_cast<unsigned>(c) & 0xffu);
    hex << buf;
  }
  return hex.str();
}

}  // namespace

TEST_SUITE("tensor_core") {

TEST_CASE("tensor construction validates shape and payload") {
  Tensor a({2, 3}, 1.5f);
  CHECK(a.numel() == 6);
  CHECK(a.at(5) == 1.5f);
  Tensor b({2, 2}, std::vector<float>{1, 2, 3, 4});
  CHECK(b.at(3) == 4.f);
  CHECK_THROWS_AS(Tensor({2, 0}, 0.f), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({3}, std::vector<float>{1, 2}), std::invalid_argument);
}

TEST_CASE("rng is deterministic per seed and has sane moments") {
  Rng a(42), b(42), c(7);
  bool same = true, diff = false;
  for (int i = 0; i < 64; ++i) {
    double x = a.uniform();
    same = same && (x == b.uniform());
    diff = diff || (x != c.uniform());
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
  CHECK(same);
  CHECK(diff);

  Rng r(123);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double z = r.normal();
    sum += z;
    sq += z * z;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  CHECK(std::fabs(mean) < 0.03);
  CHECK(std::fabs(var - 1.0) < 0.05);

  bool saw_lo = false, saw_hi = false;
  for (int i = 0; i < 300; ++i) {
    int v = r.uniform_int(2, 4);
    CHECK(v >= 2);
    CHECK(v <= 4);
    saw_lo = saw_lo || v == 2;
    saw_hi = saw_hi || v == 4;
  }
  CHECK(saw_lo);
  CHECK(saw_hi);
}

TEST_CASE("gemm variants match a double-precision reference") {
  Rng rng(11);
  auto run = [&](int m, int n, int k) {
    std::vector<float> a(static_cast<size_t>(m) * k), b(static_cast<size_t>(k) * n);
    for (auto& v : a) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : b) v = static_cast<float>(rng.uniform(-1, 1));
    auto ref = motok::testing::ref_gemm(m, n, k, a.data(), b.data());

    std::vector<float> c(static_cast<size_t>(m) * n, 999.f);
    gemm(m, n, k, a.data(), b.data(), c.data(), false);
    for (size_t i = 0; i < c.size(); ++i) {
      CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-4));
    }

    // B^T variant: feed the transpose of b.
    std::vector<float> bt(static_cast<size_t>(n) * k);
    for (int j = 0; j < n; ++j) {
      for (int kk = 0; kk < k; ++kk) {
        bt[static_cast<size_t>(j) * k + kk] = b[static_cast<size_t>(kk) * n + j];
      }
    }
    std::vector<float> c2(static_cast<size_t>(m) * n, 0.f);
    gemm_nt(m, n, k, a.data(), bt.data(), c2.data(), false);
    for (size_t i = 0; i < c2.size(); ++i) {
      CHECK(c2[i] == doctest::Approx(ref[i]).epsilon(1e-4));
    }

    // A^T variant: feed the transpose of a.
    std::vector<float> at(static_cast<size_t>(k) * m);
    for (int i = 0; i < m; ++i) {
      for (int kk = 0; kk < k; ++kk) {
        at[static_cast<size_t>(kk) * m + i] = a[static_cast<size_t>(i) * k + kk];
      }
    }
    std::vector<float> c3(static_cast<size_t>(m) * n, 0.f);
    gemm_tn(m, n, k, at.data(), b.data(), c3.data(), false);
    for (size_t i = 0; i < c3.size(); ++i) {
      CHECK(c3[i] == doctest::Approx(ref[i]).epsilon(1e-4));
    }

    // accumulate=true adds on top of existing contents
    std::vector<float> c4(static_cast<size_t>(m) * n, 1.f);
    gemm(m, n, k, a.data(), b.data(), c4.data(), true);
    for (size_t i = 0; i < c4.size(); ++i) {
      CHECK(c4[i] == doctest::Approx(ref[i] + 1.0).epsilon(1e-4));
    }
  };
  run(7, 5, 9);
  run(33, 17, 129);
  run(64, 64, 64);
  run(1, 1, 1);
}

TEST_CASE("matmul hand examples") {
  Tape t;
  Tensor m({3, 3}, std::vector<float>{2, 3, 5, 7, 11, 13, 17, 19, 23});
  Tensor eye({3, 3}, std::vector<float>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor prod = t.matmul(t.constant(eye), t.constant(m));
  for (int64_t i = 0; i < 9; ++i) CHECK(prod.at(i) == m.at(i));

  Tensor a({2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor ones({2, 1}, std::vector<float>{1, 1});
  Tensor r = t.matmul(t.constant(a), t.constant(ones));
  CHECK(r.at(0) == 3.0f);
  CHECK(r.at(1) == 7.0f);
}

TEST_CASE("elementwise ops and their gradients") {
  Rng rng(5);
  Parameter a = make_param("a", {3, 4}, rng);
  Parameter b = make_param("b", {3, 4}, rng);
  Tensor w({3, 4}, 0.f);
  rng.fill_normal(w, 0.0, 1.0);

  SUBCASE("add/sub/mul/scale/add_scalar forward") {
    Tape t;
    Tensor ta = t.leaf(a), tb = t.leaf(b);
    Tensor s = t.add(ta, tb);
    Tensor d = t.sub(ta, tb);
    Tensor m = t.mul(ta, tb);
    Tensor sc = t.scale(ta, 2.5f);
    Tensor as = t.add_scalar(ta, -1.f);
    for (int64_t i = 0; i < 12; ++i) {
      CHECK(s.at(i) == doctest::Approx(a.value.at(i) + b.value.at(i)));
      CHECK(d.at(i) == doctest::Approx(a.value.at(i) - b.value.at(i)));
      CHECK(m.at(i) == doctest::Approx(a.value.at(i) * b.value.at(i)));
      CHECK(sc.at(i) == doctest::Approx(a.value.at(i) * 2.5f));
      CHECK(as.at(i) == doctest::Approx(a.value.at(i) - 1.f));
    }
    CHECK_THROWS_AS(t.add(ta, t.constant(Tensor({4, 3}, 0.f))), std::invalid_argument);
  }

  SUBCASE("gradients against finite differences") {
    auto loss = [&](Tape& t) {
      Tensor ta = t.leaf(a), tb = t.leaf(b);
      Tensor wc = t.constant(w);
      Tensor y = t.mul(t.add(ta, tb), t.sub(ta, tb));  // a^2 - b^2
      y = t.add(y, t.scale(t.mul(ta, tb), 0.5f));
      return t.sum_all(t.mul(y, wc));
    };
    auto res = fd_gradcheck(loss, {&a, &b});
    INFO(res.report());
    CHECK(res.ok());
    CHECK(res.checked == 24);
  }
}

TEST_CASE("linear matches gemm reference and differentiates") {
  Rng rng(9);
  Parameter x = make_param("x", {2, 3, 5}, rng);
  Parameter w = make_param("w", {5, 4}, rng);
  Parameter bias = make_param("bias", {4}, rng);

  Tape t;
  Tensor y = t.linear(t.leaf(x), t.leaf(w), t.leaf(bias));
  REQUIRE(y.shape == Shape{2, 3, 4});
  auto ref = motok::testing::ref_gemm(6, 4, 5, x.value.ptr(), w.value.ptr());
  for (int64_t i = 0; i < y.numel(); ++i) {
    CHECK(y.at(i) == doctest::Approx(ref[static_cast<size_t>(i)] + bias.value.at(i % 4))
                         .epsilon(1e-5));
  }

  Tensor tgt({2, 3, 4}, 0.25f);
  auto loss = [&](Tape& tp) {
    return tp.mse_mean(tp.linear(tp.leaf(x), tp.leaf(w), tp.leaf(bias)), tp.constant(tgt));
  };
  auto res = fd_gradcheck(loss, {&x, &w, &bias});
  INFO(res.report());
  CHECK(res.ok());

  SUBCASE("bias can be omitted") {
    Tape t2;
    Tensor y2 = t2.linear(t2.leaf(x), t2.leaf(w), Tensor{});
    for (int64_t i = 0; i < y2.numel(); ++i) {
      CHECK(y2.at(i) == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-5));
    }
  }
}

TEST_CASE("activations differentiate") {
  Rng rng(17);
  Parameter x = make_param("x", {40}, rng, 1.2);
  Tensor w({40}, 0.f);
  rng.fill_normal(w, 0.0, 1.0);
  for (auto op : {0, 1, 2}) {
    auto loss = [&](Tape& t) {
      Tensor h = t.leaf(x);
      if (op == 0) h = t.gelu(h);
      if (op == 1) h = t.silu(h);
      if (op == 2) h = t.tanh_op(h);
      return t.sum_all(t.mul(h, t.constant(w)));
    };
    auto res = fd_gradcheck(loss, {&x});
    INFO("op " << op << "\n" << res.report());
    CHECK(res.ok());
  }
  // spot values
  Tape t;
  Tensor g = t.gelu(t.constant(Tensor({3}, std::vector<float>{-1.f, 0.f, 2.f})));
  CHECK(g.at(0) == doctest::Approx(-0.158655).epsilon(1e-4));
  CHECK(g.at(1) == doctest::Approx(0.0));
  CHECK(g.at(2) == doctest::Approx(1.954500).epsilon(1e-4));
}

TEST_CASE("layer_norm normalizes rows and differentiates") {
  Rng rng(23);
  Parameter x = make_param("x", {4, 6}, rng, 2.0);
  Parameter gamma("gamma", Tensor({6}, 1.f));
  Parameter beta("beta", Tensor({6}, 0.f));

  Tape t;
  Tensor y = t.layer_norm(t.leaf(x), t.leaf(gamma), t.leaf(beta));
  for (int r = 0; r < 4; ++r) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 6; ++j) mean += y.at(r * 6 + j);
    mean /= 6;
    for (int j = 0; j < 6; ++j) {
      double c = y.at(r * 6 + j) - mean;
      var += c * c;
    }
    var /= 6;
    CHECK(std::fabs(mean) < 1e-6);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }

  rng.fill_normal(gamma.value, 1.0, 0.3);
  rng.fill_normal(beta.value, 0.0, 0.3);
  Tensor w({4, 6}, 0.f);
  rng.fill_normal(w, 0.0, 1.0);
  auto loss = [&](Tape& tp) {
    Tensor out = tp.layer_norm(tp.leaf(x), tp.leaf(gamma), tp.leaf(beta));
    return tp.sum_all(tp.mul(out, tp.constant(w)));
  };
  auto res = fd_gradcheck(loss, {&x, &gamma, &beta});
  INFO(res.report());
  CHECK(res.ok());
}

TEST_CASE("softmax_rows is shift-invariant and differentiates") {
  Tensor x({2, 4}, std::vector<float>{0.1f, -0.4f, 2.0f, 0.7f, 0.1f, -0.4f, 2.0f, 0.7f});
  for (int j = 0; j < 4; ++j) x.at(4 + j) += 1000.f;  // huge shift, same distribution
  Tape t;
  Tensor p = t.softmax_rows(t.constant(x));
  for (int r = 0; r < 2; ++r) {
    double sum = 0.0;
    for (int j = 0; j < 4; ++j) {
      CHECK(std::isfinite(p.at(r * 4 + j)));
      sum += p.at(r * 4 + j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
  for (int j = 0; j < 4; ++j) {
    CHECK(p.at(j) == doctest::Approx(p.at(4 + j)).epsilon(1e-5));
  }

  Rng rng(31);
  Parameter xs = make_param("xs", {3, 5}, rng);
  Tensor w({3, 5}, 0.f);
  rng.fill_normal(w, 0.0, 1.0);
  auto loss = [&](Tape& tp) {
    return tp.sum_all(tp.mul(tp.softmax_rows(tp.leaf(xs)), tp.constant(w)));
  };
  auto res = fd_gradcheck(loss, {&xs});
  INFO(res.report());
  CHECK(res.ok());
}

TEST_CASE("attention matches a per-head reference") {
  Rng rng(37);
  const int b = 2, nq = 5, nk = 5, d = 6, heads = 3;
  Parameter q = make_param("q", {b, nq, d}, rng);
  Parameter k = make_param("k", {b, nk, d}, rng);
  Parameter v = make_param("v", {b, nk, d}, rng);

  for (bool causal : {false, true}) {
    Tape t;
    Tensor out = t.attention(t.leaf(q), t.leaf(k), t.leaf(v), heads, causal);
    auto ref = motok::testing::ref_attention(*q.value.data, *k.value.data, *v.value.data, b, nq,
                                             nk, d, heads, causal);
    for (int64_t i = 0; i < out.numel(); ++i) {
      CHECK(out.at(i) == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-4));
    }
  }

  SUBCASE("cross attention with nq != nk") {
    Parameter q2 = make_param("q2", {1, 3, 4}, rng);
    Parameter k2 = make_param("k2", {1, 7, 4}, rng);
    Parameter v2 = make_param("v2", {1, 7, 4}, rng);
    Tape t;
    Tensor out = t.attention(t.leaf(q2), t.leaf(k2), t.leaf(v2), 2, false);
    auto ref = motok::testing::ref_attention(*q2.value.data, *k2.value.data, *v2.value.data, 1, 3,
                                             7, 4, 2, false);
    for (int64_t i = 0; i < out.numel(); ++i) {
      CHECK(out.at(i) == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-4));
    }
    CHECK_THROWS_AS(t.attention(t.leaf(q2), t.leaf(k2), t.leaf(v2), 2, true),
                    std::invalid_argument);
  }

  SUBCASE("causal masking blocks information from later positions") {
    Tape t;
    Tensor base = t.attention(t.leaf(q), t.leaf(k), t.leaf(v), heads, true);
    Tensor k_mod = k.value;  // shared storage; copy first
    Tensor k_copy(k.value.shape, *k.value.data);
    Tensor v_copy(v.value.shape, *v.value.data);
    for (int j = 0; j < d; ++j) {
      k_copy.at((nk - 1) * d + j) += 3.f;  // batch 0, last key
      v_copy.at((nk - 1) * d + j) -= 2.f;
    }
    Tape t2;
    Tensor mod = t2.attention(t2.leaf(q), t2.constant(k_copy), t2.constant(v_copy), heads, true);
    for (int i = 0; i < nq - 1; ++i) {  // all but the last query row unaffected
      for (int j = 0; j < d; ++j) {
        CHECK(mod.at(i * d + j) == base.at(i * d + j));
      }
    }
  }

  SUBCASE("gradients against finite differences") {
    Tensor w({b, nq, d}, 0.f);
    rng.fill_normal(w, 0.0, 1.0);
    for (bool causal : {false, true}) {
      auto loss = [&](Tape& tp) {
        Tensor out = tp.attention(tp.leaf(q), tp.leaf(k), tp.leaf(v), heads, causal);
        return tp.sum_all(tp.mul(out, tp.constant(w)));
      };
      auto res = fd_gradcheck(loss, {&q, &k, &v}, GradCheckOpts{.max_per_param = 16});
      INFO("causal " << causal << "\n" << res.report());
      CHECK(res.ok());
    }
  }
}

TEST_CASE("attention hand examples") {
  Tape t;
  SUBCASE("one key returns its value row") {
    Tensor q({1, 1, 4}, std::vector<float>{0.3f, -1.2f, 0.5f, 2.0f});
    Tensor v({1, 1, 4}, std::vector<float>{5, 6, 7, 8});
    Tensor out = t.attention(t.constant(q), t.constant(q), t.constant(v), 1, false);
    for (int64_t i = 0; i < 4; ++i) CHECK(out.at(i) == v.at(i));
  }
  SUBCASE("query orthogonal to every key averages the values") {
    Tensor q({1, 1, 4}, std::vector<float>{1, 0, 0, 0});
    Tensor k({1, 2, 4}, std::vector<float>{0, 1, 0, 0, 0, 0, 1, 0});
    Tensor v({1, 2, 4}, std::vector<float>{2, 4, 6, 8, 4, 8, 10, 12});
    Tensor out = t.attention(t.constant(q), t.constant(k), t.constant(v), 1, false);
    CHECK(out.at(0) == doctest::Approx(3.0).epsilon(1e-6));
    CHECK(out.at(1) == doctest::Approx(6.0).epsilon(1e-6));
    CHECK(out.at(2) == doctest::Approx(8.0).epsilon(1e-6));
    CHECK(out.at(3) == doctest::Approx(10.0).epsilon(1e-6));
  }
}

TEST_CASE("embedding gathers rows and scatter-adds gradients") {
  Tensor table({4, 3}, std::vector<float>{0, 1, 2, 10, 11, 12, 20, 21, 22, 30, 31, 32});
  Parameter tp("table", table);
  std::vector<int> ids{2, 0, 2, 3};
  Tape t;
  Tensor e = t.embedding(ids, t.leaf(tp));
  REQUIRE(e.shape == Shape{4, 3});
  CHECK(e.at(0) == 20.f);
  CHECK(e.at(3) == 0.f);
  CHECK(e.at(6) == 20.f);
  CHECK(e.at(11) == 32.f);

  Tensor l = t.sum_all(e);
  t.backward(l);
  const auto* g = t.grad_for(tp);
  REQUIRE(g != nullptr);
  // row 2 used twice, rows 0 and 3 once, row 1 never
  CHECK((*g)[0] == 1.f);
  CHECK((*g)[3] == 0.f);
  CHECK((*g)[6] == 2.f);
  CHECK((*g)[9] == 1.f);
  CHECK_THROWS_AS(t.embedding({4}, t.leaf(tp)), std::invalid_argument);
  CHECK_THROWS_AS(t.embedding({-1}, t.leaf(tp)), std::invalid_argument);
}

TEST_CASE("cross_entropy_mean matches closed form and differentiates") {
  Tensor logits({2, 3}, std::vector<float>{0, 0, 0, 1, 2, 3});
  Tape t;
  Tensor l = t.cross_entropy_mean(t.constant(logits), {1, 2}, -1);
  // row 0: ln 3. row 1: ln(1 + e^-1 + e^-2)
  const double expect = (std::log(3.0) + std::log(1.0 + std::exp(-1.0) + std::exp(-2.0))) / 2.0;
  CHECK(l.at(0) == doctest::Approx(expect).epsilon(1e-6));

  Tensor l2 = t.cross_entropy_mean(t.constant(logits), {1, -1}, -1);
  CHECK(l2.at(0) == doctest::Approx(std::log(3.0)).epsilon(1e-6));

  CHECK_THROWS_AS(t.cross_entropy_mean(t.constant(logits), {-1, -1}, -1), std::invalid_argument);
  CHECK_THROWS_AS(t.cross_entropy_mean(t.constant(logits), {0, 3}, -1), std::invalid_argument);

  Rng rng(41);
  Parameter x = make_param("logits", {5, 7}, rng);
  auto loss = [&](Tape& tp) {
    return tp.cross_entropy_mean(tp.leaf(x), {3, 0, -1, 6, 2}, -1);
  };
  auto res = fd_gradcheck(loss, {&x});
  INFO(res.report());
  CHECK(res.ok());
}

TEST_CASE("mse/sum/mean reductions") {
  Tensor a({2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor b({2, 2}, std::vector<float>{1, 1, 1, 1});
  Tape t;
  CHECK(t.mse_mean(t.constant(a), t.constant(b)).at(0) ==
        doctest::Approx((0 + 1 + 4 + 9) / 4.0));
  CHECK(t.sum_all(t.constant(a)).at(0) == doctest::Approx(10.0));
  CHECK(t.mean_all(t.constant(a)).at(0) == doctest::Approx(2.5));

  Rng rng(43);
  Parameter x = make_param("x", {3, 3}, rng);
  Parameter y = make_param("y", {3, 3}, rng);
  auto loss = [&](Tape& tp) { return tp.mse_mean(tp.leaf(x), tp.leaf(y)); };
  auto res = fd_gradcheck(loss, {&x, &y});
  INFO(res.report());
  CHECK(res.ok());
}

TEST_CASE("straight_through copies values and reroutes gradients") {
  Rng rng(47);
  Parameter carrier = make_param("carrier", {4}, rng);
  Tensor hard({4}, std::vector<float>{5, 6, 7, 8});
  Tape t;
  Tensor out = t.straight_through(t.constant(hard), t.leaf(carrier));
  for (int i = 0; i < 4; ++i) CHECK(out.at(i) == hard.at(i));
  Tensor l = t.sum_all(t.mul(out, t.constant(Tensor({4}, std::vector<float>{1, 2, 3, 4}))));
  t.backward(l);
  const auto* g = t.grad_for(carrier);
  REQUIRE(g != nullptr);
  for (int i = 0; i < 4; ++i) CHECK((*g)[static_cast<size_t>(i)] == doctest::Approx(i + 1.0));
}

TEST_CASE("shape ops move data faithfully") {
  Rng rng(53);
  Parameter x = make_param("x", {2, 3, 4}, rng);

  SUBCASE("reshape keeps order") {
    Tape t;
    Tensor y = t.reshape(t.leaf(x), {6, 4});
    for (int64_t i = 0; i < 24; ++i) CHECK(y.at(i) == x.value.at(i));
    CHECK_THROWS_AS(t.reshape(t.leaf(x), {5, 5}), std::invalid_argument);
  }

  SUBCASE("permute relocates elements and inverts") {
    Tape t;
    Tensor y = t.permute(t.leaf(x), {2, 0, 1});
    REQUIRE(y.shape == Shape{4, 2, 3});
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 3; ++j) {
        for (int k = 0; k < 4; ++k) {
          CHECK(y.at((k * 2 + i) * 3 + j) == x.value.at((i * 3 + j) * 4 + k));
        }
      }
    }
    Tensor back = t.permute(y, {1, 2, 0});
    for (int64_t i = 0; i < 24; ++i) CHECK(back.at(i) == x.value.at(i));
    CHECK_THROWS_AS(t.permute(y, {0, 0, 1}), std::invalid_argument);
  }

  SUBCASE("concat and slice on the last axis") {
    Parameter b = make_param("b", {2, 3, 2}, rng);
    Tape t;
    Tensor cat = t.concat_last(t.leaf(x), t.leaf(b));
    REQUIRE(cat.shape == Shape{2, 3, 6});
    Tensor left = t.slice_last(cat, 0, 4);
    Tensor right = t.slice_last(cat, 4, 2);
    for (int64_t i = 0; i < 24; ++i) CHECK(left.at(i) == x.value.at(i));
    for (int64_t i = 0; i < 12; ++i) CHECK(right.at(i) == b.value.at(i));
    CHECK_THROWS_AS(t.slice_last(cat, 5, 3), std::invalid_argument);
  }

  SUBCASE("gradients flow through shape ops") {
    Parameter b = make_param("b", {2, 3, 2}, rng);
    Tensor w({4, 6, 2}, 0.f);
    rng.fill_normal(w, 0.0, 1.0);
    auto loss = [&](Tape& tp) {
      Tensor cat = tp.concat_last(tp.leaf(x), tp.leaf(b));   // [2,3,6]
      Tensor p = tp.permute(cat, {2, 0, 1});                 // [6,2,3]
      Tensor r = tp.reshape(p, {4, 3, 3});
      Tensor s = tp.slice_last(r, 1, 2);                     // [4,3,2]
      return tp.sum_all(tp.mul(tp.reshape(s, {4, 6, 1}), tp.constant(Tensor({4, 6, 1}, 0.7f))));
    };
    auto res = fd_gradcheck(loss, {&x, &b});
    INFO(res.report());
    CHECK(res.ok());
  }
}

TEST_CASE("conv2d matches reference and differentiates") {
  Rng rng(59);
  const int b = 2, h = 4, w = 5, ci = 3, co = 2;
  Parameter x = make_param("x", {b, h, w, ci}, rng);
  Parameter kern = make_param("kern", {3, 3, ci, co}, rng);
  Parameter bias = make_param("bias", {co}, rng);

  Tape t;
  Tensor y = t.conv2d(t.leaf(x), t.leaf(kern), t.leaf(bias));
  REQUIRE(y.shape == Shape{b, h, w, co});
  auto ref = motok::testing::ref_conv2d(*x.value.data, *kern.value.data, *bias.value.data, b, h,
                                        w, ci, 3, 3, co);
  for (int64_t i = 0; i < y.numel(); ++i) {
    CHECK(y.at(i) == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-4));
  }

  SUBCASE("1x1 identity kernel passes channels through") {
    Tensor eye({1, 1, 2, 2}, std::vector<float>{1, 0, 0, 1});
    Parameter eyep("eye", eye);
    Parameter x2 = make_param("x2", {1, 3, 3, 2}, rng);
    Tape t2;
    Tensor y2 = t2.conv2d(t2.leaf(x2), t2.leaf(eyep), Tensor{});
    for (int64_t i = 0; i < y2.numel(); ++i) CHECK(y2.at(i) == doctest::Approx(x2.value.at(i)));
  }

  SUBCASE("gradients") {
    Tensor wgt({b, h, w, co}, 0.f);
    rng.fill_normal(wgt, 0.0, 1.0);
    auto loss = [&](Tape& tp) {
      Tensor out = tp.conv2d(tp.leaf(x), tp.leaf(kern), tp.leaf(bias));
      return tp.sum_all(tp.mul(out, tp.constant(wgt)));
    };
    auto res = fd_gradcheck(loss, {&x, &kern, &bias}, GradCheckOpts{.max_per_param = 16});
    INFO(res.report());
    CHECK(res.ok());
  }
  CHECK_THROWS_AS(t.conv2d(t.leaf(x), t.constant(Tensor({2, 2, ci, co}, 0.f)), Tensor{}),
                  std::invalid_argument);
}

TEST_CASE("pool_mean and repeat_nn are exact inverses for repeated data") {
  Rng rng(61);
  Parameter x = make_param("x", {2, 2, 4, 3}, rng);
  Tape t;
  Tensor up = t.repeat_nn(t.leaf(x), 2, 2, 1);
  REQUIRE(up.shape == Shape{4, 4, 4, 3});
  Tensor down = t.pool_mean(up, 2, 2, 1);
  for (int64_t i = 0; i < x.value.numel(); ++i) CHECK(down.at(i) == x.value.at(i));

  Tensor m({2, 1, 2, 1}, std::vector<float>{1, 3, 5, 7});
  Tensor pooled = t.pool_mean(t.constant(m), 2, 1, 2);
  CHECK(pooled.at(0) == doctest::Approx(4.0));  // mean of 1,3,5,7

  CHECK_THROWS_AS(t.pool_mean(t.leaf(x), 3, 1, 1), std::invalid_argument);

  Tensor w({4, 4, 4, 3}, 0.f);
  rng.fill_normal(w, 0.0, 1.0);
  auto loss = [&](Tape& tp) {
    Tensor u = tp.repeat_nn(tp.leaf(x), 2, 2, 1);
    return tp.sum_all(tp.mul(u, tp.constant(w)));
  };
  auto res = fd_gradcheck(loss, {&x});
  INFO(res.report());
  CHECK(res.ok());

  auto loss2 = [&](Tape& tp) {
    Tensor dn = tp.pool_mean(tp.leaf(x), 1, 2, 2);
    return tp.sum_all(dn);
  };
  auto res2 = fd_gradcheck(loss2, {&x});
  INFO(res2.report());
  CHECK(res2.ok());
}

TEST_CASE("parameters bind once per tape and accumulate over reuse") {
  Parameter p("p", Tensor({3}, std::vector<float>{1, 2, 3}));
  Tape t;
  Tensor a = t.leaf(p);
  Tensor b = t.leaf(p);
  CHECK(a.id == b.id);
  Tensor l = t.sum_all(t.add(a, t.scale(b, 2.f)));  // d/dp = 3 everywhere
  t.backward(l);
  const auto* g = t.grad_for(p);
  REQUIRE(g != nullptr);
  for (float v : *g) CHECK(v == doctest::Approx(3.0));
}

TEST_CASE("inference tapes record nothing") {
  Parameter p("p", Tensor({2, 2}, 1.f));
  Tape t(false);
  Tensor y = t.mul(t.leaf(p), t.leaf(p));
  CHECK(!y.requires_grad);
  CHECK(t.grad_for(p) == nullptr);
  Tape tg;
  Tensor s = tg.sum_all(tg.leaf(p));
  CHECK_THROWS_AS(tg.backward(tg.leaf(p)), std::invalid_argument);  // non-scalar
  tg.backward(s);
  CHECK(tg.grad_for(p) != nullptr);
}

}  // TEST_SUITE tensor_core

TEST_SUITE("optim") {

TEST_CASE("adamw first and second step match hand computation") {
  // th0 = 1, g = 1, lr = 0.1, wd = 0:
  //   m = 0.1, v = 0.01, mhat = vhat = 1,
  //   th1 = 1 - 0.1 / (1 + 1e-6) = 0.9000001
  // constant gradient keeps mhat/sqrt(vhat) = 1, so th2 = 0.8000002
  Parameter p("theta", Tensor({1}, 1.f));
  AdamW opt(AdamWConfig{.weight_decay = 0.f});
  auto run_step = [&] {
    Tape t;
    Tensor l = t.sum_all(t.leaf(p));  // dl/dp = 1
    t.backward(l);
    return opt.step(t, {&p}, 0.1f);
  };
  double n1 = run_step();
  CHECK(n1 == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(p.value.at(0) == doctest::Approx(0.9000001).epsilon(1e-6));
  run_step();
  CHECK(p.value.at(0) == doctest::Approx(0.8000002).epsilon(1e-6));
  CHECK(opt.steps_taken() == 2);
}

TEST_CASE("adamw applies decoupled weight decay") {
  // upd = mhat/(sqrt(vhat)+eps) + wd*th = ~1 + 0.5 => th = 1 - 0.1*1.4999990
  Parameter p("theta", Tensor({1}, 1.f));
  AdamW opt(AdamWConfig{.weight_decay = 0.5f});
  Tape t;
  Tensor l = t.sum_all(t.leaf(p));
  t.backward(l);
  opt.step(t, {&p}, 0.1f);
  CHECK(p.value.at(0) == doctest::Approx(0.8500001).epsilon(1e-6));
}

TEST_CASE("adamw clips by global norm") {
  Parameter p("theta", Tensor({2}, 1.f));
  AdamW opt(AdamWConfig{.weight_decay = 0.f, .max_grad_norm = 1.f});
  Tape t;
  Tensor c = t.constant(Tensor({2}, std::vector<float>{3.f, 4.f}));
  Tensor l = t.sum_all(t.mul(t.leaf(p), c));  // grad = (3,4), norm 5
  t.backward(l);
  double norm = opt.step(t, {&p}, 0.1f);
  CHECK(norm == doctest::Approx(5.0).epsilon(1e-9));
  // post-clip grads (0.6, 0.8); first step update is ~sign(g)
  CHECK(p.value.at(0) == doctest::Approx(0.9).epsilon(1e-5));
  CHECK(p.value.at(1) == doctest::Approx(0.9).epsilon(1e-5));
}

TEST_CASE("adamw rejects non-finite gradients without touching state") {
  Parameter p("w_embed", Tensor({2}, 1.f));
  AdamW opt;
  {
    Tape t;
    Tensor bad = t.constant(Tensor({2}, std::numeric_limits<float>::quiet_NaN()));
    Tensor l = t.sum_all(t.mul(t.leaf(p), bad));
    t.backward(l);
    bool threw = false;
    try {
      opt.step(t, {&p}, 0.1f);
    } catch (const std::runtime_error& e) {
      threw = true;
      CHECK(std::string(e.what()).find("w_embed") != std::string::npos);
    }
    CHECK(threw);
  }
  CHECK(opt.steps_taken() == 0);
  CHECK(p.value.at(0) == 1.f);
  CHECK(p.value.at(1) == 1.f);
  {
    // next clean step behaves like a first step
    Tape t;
    Tensor l = t.sum_all(t.leaf(p));
    t.backward(l);
    opt.step(t, {&p}, 0.1f);
    CHECK(p.value.at(0) == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-6) - 0.1 * 0.001).epsilon(1e-6));
  }
}

TEST_CASE("sgd applies plain descent") {
  Parameter p("theta", Tensor({2}, std::vector<float>{1.f, 2.f}));
  Tape t;
  Tensor c = t.constant(Tensor({2}, std::vector<float>{1.f, -2.f}));
  Tensor l = t.sum_all(t.mul(t.leaf(p), c));
  t.backward(l);
  sgd_step(t, {&p}, 0.5f);
  CHECK(p.value.at(0) == doctest::Approx(0.5));
  CHECK(p.value.at(1) == doctest::Approx(3.0));
}

TEST_CASE("cosine schedule ramps then decays to zero") {
  const double base = 2.0;
  // warmup is linear and ends at base
  CHECK(cosine_lr(0, 100, base, 10) == doctest::Approx(base * 0.1));
  CHECK(cosine_lr(4, 100, base, 10) == doctest::Approx(base * 0.5));
  CHECK(cosine_lr(9, 100, base, 10) == doctest::Approx(base));
  // halfway through decay sits at base/2
  CHECK(cosine_lr(55, 100, base, 10) == doctest::Approx(base * 0.5));
  CHECK(cosine_lr(100, 100, base, 10) == doctest::Approx(0.0).epsilon(1e-12));
  double prev = 1e9;
  for (int s = 10; s <= 100; s += 5) {
    double lr = cosine_lr(s, 100, base, 10);
    CHECK(lr <= prev + 1e-12);
    prev = lr;
  }
  CHECK_THROWS_AS(cosine_lr(0, 0, base, 0), std::invalid_argument);
}

}  // TEST_SUITE optim

TEST_SUITE("checkpoint") {

TEST_CASE("snapshot round trip preserves bits and config") {
  std::string path = temp_path("snap");
  Rng rng(71);
  Tensor a({3, 4}, 0.f);
  rng.fill_normal(a, 0.0, 2.0);
  Tensor b({7}, 0.f);
  rng.fill_uniform(b, -5.0, 5.0);
  save_snapshot(path, {{"enc/w", a}, {"enc/b", b}}, "{\"k\":3}");
  Snapshot s = load_snapshot(path);
  REQUIRE(s.tensors.count("enc/w") == 1);
  REQUIRE(s.tensors.count("enc/b") == 1);
  CHECK(s.config_json == "{\"k\":3}");
  CHECK(s.tensors.at("enc/w").shape == a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(s.tensors.at("enc/w").at(i) == a.at(i));
  for (int64_t i = 0; i < b.numel(); ++i) CHECK(s.tensors.at("enc/b").at(i) == b.at(i));
  std::remove(path.c_str());
}

TEST_CASE("snapshot golden byte layout") {
  std::string path = temp_path("golden");
  save_snapshot(path, {{"w", Tensor({2}, std::vector<float>{1.f, -2.f})}}, "{}");
  const std::string expect =
      "4D544F4B"                                   // magic
      "0100"                                       // version 1
      "02000000"                                   // two tensors
      "0100" "77"                                  // name "w"
      "01" "02000000"                              // rank 1, dim 2
      "0000803F" "000000C0"                        // 1.0f, -2.0f
      "1400" "5F5F6D6574615F5F2F636F6E6669675F6A736F6E"  // name "__meta__/config_json"
      "01" "02000000"                              // rank 1, dim 2
      "0000F642" "0000FA42";                       // '{'=123.0f, '}'=125.0f
  CHECK(hex_of_file(path) == expect);
  std::remove(path.c_str());
}

TEST_CASE("snapshot rejects malformed input") {
  std::string path = temp_path("bad");
  save_snapshot(path, {{"w", Tensor({2}, std::vector<float>{1.f, -2.f})}}, "{}");

  SUBCASE("corrupt magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
    f.close();
    CHECK_THROWS_AS(load_snapshot(path), std::runtime_error);
  }
  SUBCASE("truncation") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), 20);
    out.close();
    CHECK_THROWS_AS(load_snapshot(path), std::runtime_error);
  }
  SUBCASE("duplicate tensor name") {
    Tensor t({1}, 0.f);
    save_snapshot(path, {{"w", t}, {"w", t}});
    CHECK_THROWS_AS(load_snapshot(path), std::runtime_error);
  }
  SUBCASE("reserved name refused on save") {
    Tensor t({1}, 0.f);
    CHECK_THROWS_AS(save_snapshot(path, {{kSnapshotConfigKey, t}}), std::invalid_argument);
  }
  std::remove(path.c_str());
}

TEST_CASE("parameter save/load keeps storage identity and checks shape") {
  std::string path = temp_path("params");
  Parameter a("a", Tensor({2, 2}, 3.f));
  Parameter b("b", Tensor({3}, -1.f));
  save_parameters(path, {&a, &b}, "{\"dim\":2}");

  Parameter a2("a", Tensor({2, 2}, 0.f));
  Parameter b2("b", Tensor({3}, 0.f));
  const float* storage_before = a2.value.ptr();
  std::string cfg;
  load_parameters(path, {&a2, &b2}, &cfg);
  CHECK(cfg == "{\"dim\":2}");
  CHECK(a2.value.ptr() == storage_before);
  for (int64_t i = 0; i < 4; ++i) CHECK(a2.value.at(i) == 3.f);
  for (int64_t i = 0; i < 3; ++i) CHECK(b2.value.at(i) == -1.f);

  Parameter missing("c", Tensor({1}, 0.f));
  CHECK_THROWS_AS(load_parameters(path, {&missing}, nullptr), std::runtime_error);
  Parameter wrong("a", Tensor({4}, 0.f));
  CHECK_THROWS_AS(load_parameters(path, {&wrong}, nullptr), std::runtime_error);
  std::remove(path.c_str());
}

}  // TEST_SUITE checkpoint
