// Copyright (c) 2026 The hierflow Authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "hierflow/core/autodiff.hpp"
#include "hierflow/core/gradcheck.hpp"
#include "hierflow/core/layers.hpp"
#include "hierflow/core/optim.hpp"
#include "hierflow/core/serialize.hpp"

using namespace hierflow;
using namespace hierflow::nn;

namespace {

Tensor row(std::vector<double> v) {
  return Tensor::from_rows(1, v.size(), std::move(v));
}

}  // namespace

TEST_CASE("linear identity and zero-weight cases") {
  Rng rng(1);
  Linear lin("lin", 2, 2, rng);
  lin.w.value = Tensor::from_rows(2, 2, {1, 0, 0, 1});
  lin.b.value = Tensor::zeros(1, 2);
  Var out = lin.forward(Var::constant(row({1, 2})));
  CHECK(out.value()[0] == Catch::Approx(1.0));
  CHECK(out.value()[1] == Catch::Approx(2.0));

  lin.w.value.fill(0.0);
  lin.b.value = row({3, 3});
  Var out2 = lin.forward(Var::constant(Tensor::randn(4, 2, rng)));
  for (std::size_t t = 0; t < 4; ++t) {
    CHECK(out2.value()(t, 0) == Catch::Approx(3.0));
    CHECK(out2.value()(t, 1) == Catch::Approx(3.0));
  }
}

TEST_CASE("linear gradcheck on random 2x3 weights") {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    Linear lin("lin", 2, 3, rng);
    Parameter input("input", Tensor::randn(4, 2, rng));
    ParamList ps;
    lin.collect(ps);
    ps.push_back(&input);
    auto build = [&] { return sum_sq(lin.forward(input.leaf())); };
    auto rep = gradient_check(build, ps);
    INFO(rep.worst_param);
    CHECK(rep.max_rel_err < 1e-6);
  }
}

TEST_CASE("conv1d kernel 1 equals per-frame linear") {
  Rng rng(2);
  Conv1d conv("conv", 3, 2, 1, rng);
  Linear lin("lin", 3, 2, rng);
  lin.w.value = conv.w.value;  // K=1 layouts coincide
  lin.b.value = conv.b.value;
  Tensor x = Tensor::randn(5, 3, rng);
  Var a = conv.forward(Var::constant(x));
  Var b = lin.forward(Var::constant(x));
  for (std::size_t i = 0; i < a.value().size(); ++i)
    CHECK(a.value()[i] == Catch::Approx(b.value()[i]).margin(1e-15));
}

TEST_CASE("conv1d zero input gives bias-only output; even kernel rejected") {
  Rng rng(3);
  Conv1d conv("conv", 2, 3, 3, rng);
  Var out = conv.forward(Var::constant(Tensor::zeros(4, 2)));
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t c = 0; c < 3; ++c)
      CHECK(out.value()(t, c) == Catch::Approx(conv.b.value[c]));

  CHECK_THROWS_AS(Conv1d("bad", 2, 2, 4, rng), std::invalid_argument);
}

TEST_CASE("conv1d gradcheck on a 5-frame input") {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    Rng rng(seed);
    Conv1d conv("conv", 3, 2, 3, rng);
    Parameter input("input", Tensor::randn(5, 3, rng));
    ParamList ps;
    conv.collect(ps);
    ps.push_back(&input);
    auto rep = gradient_check(
        [&] { return sum_sq(conv.forward(input.leaf())); }, ps);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("transposed conv doubles length for every T >= 1") {
  Rng rng(4);
  UpsampleConv up("up", 3, 2, rng);
  for (std::size_t T : {1u, 2u, 3u, 4u, 7u}) {
    Var out = up.forward(Var::constant(Tensor::randn(T, 3, rng)));
    CHECK(out.rows() == 2 * T);
    CHECK(out.cols() == 2);
  }
}

TEST_CASE("transposed conv zero input broadcasts bias") {
  Rng rng(5);
  UpsampleConv up("up", 2, 3, rng);
  Var out = up.forward(Var::constant(Tensor::zeros(4, 2)));
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t c = 0; c < 3; ++c)
      CHECK(out.value()(t, c) == Catch::Approx(up.b.value[c]));
}

TEST_CASE("transposed conv gradcheck") {
  for (std::uint64_t seed : {31u, 32u, 33u}) {
    Rng rng(seed);
    UpsampleConv up("up", 2, 3, rng);
    Parameter input("input", Tensor::randn(4, 2, rng));
    ParamList ps;
    up.collect(ps);
    ps.push_back(&input);
    auto rep = gradient_check(
        [&] { return sum_sq(up.forward(input.leaf())); }, ps);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("attention on a single frame has weight exactly 1") {
  Rng rng(6);
  AttentionBlock blk("attn", 8, 4, rng);
  blk.forward(Var::constant(Tensor::randn(1, 8, rng)));
  REQUIRE(blk.last_attention.size() == 4);
  for (const Tensor& a : blk.last_attention) {
    REQUIRE(a.size() == 1);
    CHECK(a[0] == Catch::Approx(1.0).margin(1e-15));
  }
}

TEST_CASE("attention rows sum to one") {
  Rng rng(7);
  AttentionBlock blk("attn", 8, 2, rng);
  blk.forward(Var::constant(Tensor::randn(6, 8, rng)));
  for (const Tensor& a : blk.last_attention)
    for (std::size_t t = 0; t < a.rows(); ++t) {
      double s = 0.0;
      for (std::size_t j = 0; j < a.cols(); ++j) s += a(t, j);
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("attention block is permutation-equivariant") {
  Rng rng(8);
  AttentionBlock blk("attn", 8, 4, rng);
  Tensor x = Tensor::randn(5, 8, rng);
  Var out = blk.forward(Var::constant(x));

  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  Tensor xp(5, 8);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t d = 0; d < 8; ++d) xp(t, d) = x(perm[t], d);
  Var outp = blk.forward(Var::constant(xp));
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t d = 0; d < 8; ++d)
      CHECK(outp.value()(t, d) == Catch::Approx(out.value()(perm[t], d)).margin(1e-12));
}

TEST_CASE("attention dim must divide heads") {
  Rng rng(9);
  CHECK_THROWS_AS(AttentionBlock("bad", 9, 4, rng), std::invalid_argument);
}

TEST_CASE("attention gradcheck T=3 D=8") {
  for (std::uint64_t seed : {41u, 42u, 43u}) {
    Rng rng(seed);
    AttentionBlock blk("attn", 8, 4, rng);
    Parameter input("input", Tensor::randn(3, 8, rng));
    ParamList ps;
    blk.collect(ps);
    ps.push_back(&input);
    auto rep = gradient_check(
        [&] { return sum_sq(blk.forward(input.leaf())); }, ps);
    INFO(rep.worst_param);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("snake-beta closed-form values") {
  Rng rng(10);
  SnakeBeta sb("snake", 1);

  Var zero_out = sb.forward(Var::constant(Tensor::zeros(1, 1)));
  CHECK(zero_out.value()[0] == Catch::Approx(0.0).margin(1e-15));

  // alpha = beta = 1 (log 0), x = pi/2: x + sin^2(pi/2)/(1+1e-9)
  Var v = sb.forward(Var::constant(row({M_PI / 2})));
  CHECK(v.value()[0] == Catch::Approx(M_PI / 2 + 1.0 / (1.0 + 1e-9)).epsilon(1e-12));
}

TEST_CASE("snake-beta gradcheck in x, alpha, beta") {
  for (std::uint64_t seed : {51u, 52u, 53u}) {
    Rng rng(seed);
    SnakeBeta sb("snake", 3);
    sb.log_alpha.value = Tensor::randn(1, 3, rng, 0.3);
    sb.log_beta.value = Tensor::randn(1, 3, rng, 0.3);
    Parameter input("input", Tensor::randn(4, 3, rng));
    ParamList ps;
    sb.collect(ps);
    ps.push_back(&input);
    auto rep = gradient_check(
        [&] { return sum_sq(sb.forward(input.leaf())); }, ps);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("cross entropy with uniform logits equals log K") {
  Tensor logits = Tensor::zeros(3, 4);
  Tensor target = Tensor::zeros(3, 4);
  for (std::size_t t = 0; t < 3; ++t) target(t, t % 4) = 1.0;
  Var ce = cross_entropy_rows(Var::constant(logits), target);
  CHECK(ce.value().scalar() == Catch::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(ce.value().scalar() == Catch::Approx(1.3863).margin(5e-5));
}

TEST_CASE("cross entropy rejects non-distribution targets") {
  Tensor logits = Tensor::zeros(2, 3);
  Tensor target = Tensor::full(2, 3, 0.5);  // rows sum to 1.5
  CHECK_THROWS_AS(cross_entropy_rows(Var::constant(logits), target),
                  std::invalid_argument);
}

TEST_CASE("cross entropy gradcheck") {
  for (std::uint64_t seed : {61u, 62u, 63u}) {
    Rng rng(seed);
    Parameter logits("logits", Tensor::randn(4, 5, rng));
    Tensor target = Tensor::zeros(4, 5);
    for (std::size_t t = 0; t < 4; ++t) target(t, (t * 2) % 5) = 1.0;
    ParamList ps{&logits};
    auto rep = gradient_check(
        [&] { return cross_entropy_rows(logits.leaf(), target); }, ps);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("mae closed forms and tie subgradient") {
  Rng rng(11);
  Tensor target = Tensor::randn(3, 4, rng);

  Parameter pred("pred", target);
  Var loss = mae_to(pred.leaf(), target);
  CHECK(loss.value().scalar() == Catch::Approx(0.0).margin(1e-15));
  backward(loss);
  for (std::size_t i = 0; i < pred.grad.size(); ++i)
    CHECK(pred.grad[i] == 0.0);  // ties use subgradient 0

  Tensor shifted = target;
  for (auto& v : shifted.vec()) v += 1.0;
  Parameter pred2("pred2", shifted);
  CHECK(mae_to(pred2.leaf(), target).value().scalar() == Catch::Approx(1.0));
}

TEST_CASE("mae gradcheck away from ties") {
  for (std::uint64_t seed : {71u, 72u, 73u}) {
    Rng rng(seed);
    Parameter pred("pred", Tensor::randn(3, 4, rng));
    Tensor target = Tensor::randn(3, 4, rng);
    ParamList ps{&pred};
    auto rep = gradient_check([&] { return mae_to(pred.leaf(), target); }, ps);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("adamw zero gradient with zero weight decay is a no-op") {
  AdamW opt;
  Parameter p("p", row({1.0, -2.0, 3.0}));
  p.zero_grad();
  ParamList ps{&p};
  opt.step(ps);
  CHECK(p.value[0] == 1.0);
  CHECK(p.value[1] == -2.0);
  CHECK(p.value[2] == 3.0);
}

TEST_CASE("adamw single step matches hand-computed update") {
  AdamWConfig cfg;
  cfg.lr = 1e-4;
  AdamW opt(cfg);
  Parameter p("p", row({0.5}));
  const double g = 0.37;
  p.grad[0] = g;
  ParamList ps{&p};
  opt.step(ps);
  // Bias-corrected first step: mhat = g, vhat = g^2.
  const double expected = 0.5 - 1e-4 * (g / (std::abs(g) + 1e-9));
  CHECK(p.value[0] == Catch::Approx(expected).epsilon(1e-12));
  CHECK(p.grad[0] == 0.0);  // gradients zeroed by the step
}

TEST_CASE("adamw learning rate decays to 0.999x after 8 steps") {
  AdamW opt;
  Parameter p("p", row({1.0}));
  ParamList ps{&p};
  for (int i = 0; i < 8; ++i) {
    p.grad[0] = 0.1;
    opt.step(ps);
  }
  CHECK(opt.lr() == Catch::Approx(1e-4 * 0.999).epsilon(1e-12));
}

TEST_CASE("gradient_check flags a corrupted gradient") {
  Rng rng(12);
  Linear lin("lin", 3, 2, rng);
  Parameter input("input", Tensor::randn(2, 3, rng));
  ParamList ps;
  lin.collect(ps);
  ps.push_back(&input);

  auto rep_ok = gradient_check(
      [&] { return sum_sq(lin.forward(input.leaf())); }, ps);
  CHECK(rep_ok.max_rel_err < 1e-6);

  // Fault injection: analytic gradients from 2x the loss, numeric from 1x.
  for (Parameter* p : ps) p->zero_grad();
  Var root = scale(sum_sq(lin.forward(input.leaf())), 2.0);
  backward(root);
  std::vector<Tensor> analytic;
  for (Parameter* p : ps) analytic.push_back(p->grad);
  double max_rel = 0.0;
  const double h = 1e-5;
  for (std::size_t pi = 0; pi < ps.size(); ++pi) {
    Parameter* p = ps[pi];
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double fp = sum_sq(lin.forward(input.leaf())).value().scalar();
      p->value[i] = keep - h;
      const double fm = sum_sq(lin.forward(input.leaf())).value().scalar();
      p->value[i] = keep;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[pi][i];
      max_rel = std::max(max_rel, std::abs(a - numeric) /
                                      std::max({std::abs(a), std::abs(numeric), 1e-8}));
    }
  }
  CHECK(max_rel > 1e-3);   // harness must flag
  CHECK(max_rel == Catch::Approx(0.5).margin(0.05));  // |2g-g|/max(2g,g)
}

TEST_CASE("forward evaluation is deterministic") {
  Rng rng(13);
  AttentionBlock blk("attn", 8, 2, rng);
  Tensor x = Tensor::randn(4, 8, rng);
  Var a = blk.forward(Var::constant(x));
  Var b = blk.forward(Var::constant(x));
  for (std::size_t i = 0; i < a.value().size(); ++i)
    CHECK(a.value()[i] == b.value()[i]);
}

TEST_CASE("checkpoint round trip preserves names, shapes and bits") {
  Rng rng(14);
  NamedTensors entries;
  entries.emplace_back("a.w", Tensor::randn(3, 5, rng));
  entries.emplace_back("b.bias", Tensor::randn(1, 7, rng));
  const std::string path =
      (std::filesystem::temp_directory_path() / "hf_ckpt_test.bin").string();
  save_tensors(path, entries);
  auto loaded = load_tensors(path);
  REQUIRE(loaded.size() == 2);
  for (const auto& [name, t] : entries) {
    REQUIRE(loaded.count(name) == 1);
    const Tensor& l = loaded.at(name);
    REQUIRE(l.same_shape(t));
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(l[i] == t[i]);
  }
  std::filesystem::remove(path);
}

TEST_CASE("layer_norm gradcheck") {
  for (std::uint64_t seed : {81u, 82u, 83u}) {
    Rng rng(seed);
    LayerNorm ln("ln", 6);
    ln.gamma.value = Tensor::randn(1, 6, rng, 0.5);
    Parameter input("input", Tensor::randn(3, 6, rng));
    ParamList ps;
    ln.collect(ps);
    ps.push_back(&input);
    auto rep = gradient_check(
        [&] { return sum_sq(ln.forward(input.leaf())); }, ps);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("masked conv weight gradient is zero at the center tap") {
  Rng rng(15);
  Conv1d conv("mconv", 2, 2, 3, rng, /*masked=*/true);
  Parameter input("input", Tensor::randn(5, 2, rng));
  ParamList ps;
  conv.collect(ps);
  ps.push_back(&input);
  auto rep = gradient_check(
      [&] { return sum_sq(conv.forward(input.leaf())); }, ps);
  CHECK(rep.max_rel_err < 1e-4);
}
