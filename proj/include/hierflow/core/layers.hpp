// Copyright (c) 2026 The hierflow Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hierflow/core/autodiff.hpp"

namespace hierflow::nn {

// A named trainable tensor with a persistent gradient accumulator. The
// gradient is filled by backward() through leaf nodes and cleared by the
// optimizer after each step.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }

  // Fresh graph leaf; backward accumulates into this->grad.
  Var leaf() {
    auto node = std::make_shared<Node>();
    node->value = value;
    node->requires_grad = true;
    Parameter* self = this;
    node->backward = [self](Node& n) { self->grad += n.grad; };
    // Mark as its own consumer so backward() invokes the closure on leaves.
    return Var(std::move(node));
  }
};

using ParamList = std::vector<Parameter*>;

inline Tensor init_uniform_fanin(std::size_t rows, std::size_t cols,
                                 std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::rand_uniform(rows, cols, rng, -bound, bound);
}

struct Linear {
  Parameter w, b;  // w: Din x Dout, b: 1 x Dout

  Linear() = default;
  Linear(const std::string& name, std::size_t din, std::size_t dout, Rng& rng)
      : w(name + ".w", init_uniform_fanin(din, dout, din, rng)),
        b(name + ".b", init_uniform_fanin(1, dout, din, rng)) {}

  Var forward(const Var& x) {
    check(x.cols() == w.value.rows(),
          "linear: input width " + std::to_string(x.cols()) +
              " != " + std::to_string(w.value.rows()));
    check(x.value().all_finite(), "linear: non-finite input");
    return add_rowvec(matmul(x, w.leaf()), b.leaf());
  }

  void collect(ParamList& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct Conv1d {
  std::size_t kernel = 3;
  bool mask_center = false;
  Parameter w, b;  // w: (K*Cin) x Cout

  Conv1d() = default;
  Conv1d(const std::string& name, std::size_t cin, std::size_t cout,
         std::size_t k, Rng& rng, bool masked = false)
      : kernel(k), mask_center(masked),
        w(name + ".w", init_uniform_fanin(k * cin, cout, k * cin, rng)),
        b(name + ".b", init_uniform_fanin(1, cout, k * cin, rng)) {
    check(k % 2 == 1, "conv1d: kernel must be odd");
    if (masked) check(k >= 3, "masked conv1d: kernel must be >= 3");
  }

  Var forward(const Var& x) {
    check(x.value().all_finite(), "conv1d: non-finite input");
    return conv1d(x, w.leaf(), b.leaf(), kernel, mask_center);
  }

  void collect(ParamList& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// Doubles sequence length (stride-2 transposed conv, kernel 4, pad 1).
struct UpsampleConv {
  Parameter w, b;

  UpsampleConv() = default;
  UpsampleConv(const std::string& name, std::size_t cin, std::size_t cout,
               Rng& rng)
      : w(name + ".w", init_uniform_fanin(4 * cin, cout, 4 * cin, rng)),
        b(name + ".b", init_uniform_fanin(1, cout, 4 * cin, rng)) {}

  Var forward(const Var& x) {
    check(x.value().all_finite(), "upsample: non-finite input");
    return tconv1d_x2(x, w.leaf(), b.leaf());
  }

  void collect(ParamList& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct LayerNorm {
  Parameter gamma, beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim)
      : gamma(name + ".gamma", Tensor::full(1, dim, 1.0)),
        beta(name + ".beta", Tensor::zeros(1, dim)) {}

  Var forward(const Var& x) { return layer_norm(x, gamma.leaf(), beta.leaf()); }

  void collect(ParamList& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

// Per-channel snake-beta activation; alpha/beta are kept in log scale.
struct SnakeBeta {
  Parameter log_alpha, log_beta;

  SnakeBeta() = default;
  SnakeBeta(const std::string& name, std::size_t channels)
      : log_alpha(name + ".log_alpha", Tensor::zeros(1, channels)),
        log_beta(name + ".log_beta", Tensor::zeros(1, channels)) {}

  Var forward(const Var& x) {
    return snake(x, log_alpha.leaf(), log_beta.leaf());
  }

  void collect(ParamList& out) {
    out.push_back(&log_alpha);
    out.push_back(&log_beta);
  }
};

struct Embedding {
  Parameter table;  // K x D

  Embedding() = default;
  Embedding(const std::string& name, std::size_t count, std::size_t dim,
            Rng& rng)
      : table(name + ".table", Tensor::randn(count, dim, rng, 0.1)) {}

  Var forward(const std::vector<int>& ids) {
    return gather_rows(table.leaf(), ids);
  }

  void collect(ParamList& out) { out.push_back(&table); }
};

// Pre-norm Transformer sublayer pair: self-attention then feed-forward,
// both residual. No positional encoding here; stacks add it at their input.
struct AttentionBlock {
  std::size_t dim = 0, heads = 1;
  LayerNorm ln1, ln2;
  Linear wq, wk, wv, wo, ff1, ff2;
  // Softmax rows of the last forward, per head; kept for inspection in tests.
  mutable std::vector<Tensor> last_attention;

  AttentionBlock() = default;
  AttentionBlock(const std::string& name, std::size_t d, std::size_t n_heads,
                 Rng& rng, std::size_t ff_mult = 4)
      : dim(d), heads(n_heads),
        ln1(name + ".ln1", d), ln2(name + ".ln2", d),
        wq(name + ".wq", d, d, rng), wk(name + ".wk", d, d, rng),
        wv(name + ".wv", d, d, rng), wo(name + ".wo", d, d, rng),
        ff1(name + ".ff1", d, ff_mult * d, rng),
        ff2(name + ".ff2", ff_mult * d, d, rng) {
    check(d % n_heads == 0, "attention: dim must be divisible by heads");
  }

  Var forward(const Var& x) {
    check(x.cols() == dim, "attention: input width mismatch");
    check(x.value().all_finite(), "attention: non-finite input");
    const std::size_t dh = dim / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Var h = ln1.forward(x);
    Var q = wq.forward(h), k = wk.forward(h), v = wv.forward(h);
    last_attention.clear();
    Var heads_out;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      Var qh = slice_cols(q, hd * dh, (hd + 1) * dh);
      Var kh = slice_cols(k, hd * dh, (hd + 1) * dh);
      Var vh = slice_cols(v, hd * dh, (hd + 1) * dh);
      Var attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
      last_attention.push_back(attn.value());
      Var oh = matmul(attn, vh);
      heads_out = hd == 0 ? oh : concat_cols(heads_out, oh);
    }
    Var attended = add(x, wo.forward(heads_out));

    Var f = ln2.forward(attended);
    Var ff = ff2.forward(gelu(ff1.forward(f)));
    return add(attended, ff);
  }

  void collect(ParamList& out) {
    ln1.collect(out); ln2.collect(out);
    wq.collect(out); wk.collect(out); wv.collect(out); wo.collect(out);
    ff1.collect(out); ff2.collect(out);
  }
};

// Residual conv block: x + W2*gelu(W1*x); zeroing W2/b2 makes it an exact
// identity, which the fusion construction tests rely on.
struct ResidualConvBlock {
  Conv1d conv1, conv2;

  ResidualConvBlock() = default;
  ResidualConvBlock(const std::string& name, std::size_t dim, std::size_t k,
                    Rng& rng)
      : conv1(name + ".conv1", dim, dim, k, rng),
        conv2(name + ".conv2", dim, dim, k, rng) {}

  Var forward(const Var& x) {
    return add(x, conv2.forward(gelu(conv1.forward(x))));
  }

  void collect(ParamList& out) {
    conv1.collect(out);
    conv2.collect(out);
  }
};

// Standard sinusoidal position table, added once at a Transformer stack input.
inline Tensor sinusoidal_positions(std::size_t T, std::size_t D) {
  Tensor pe(T, D);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < D / 2; ++i) {
      const double rate =
          std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(D));
      pe(t, 2 * i) = std::sin(static_cast<double>(t) * rate);
      if (2 * i + 1 < D) pe(t, 2 * i + 1) = std::cos(static_cast<double>(t) * rate);
    }
  return pe;
}

// Sinusoidal features of a scalar (used for diffusion-style time embedding).
inline Tensor sinusoidal_scalar(double t, std::size_t D) {
  Tensor e(1, D);
  const std::size_t half = D / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double rate =
        std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    e[2 * i] = std::sin(t * 1000.0 * rate);
    if (2 * i + 1 < D) e[2 * i + 1] = std::cos(t * 1000.0 * rate);
  }
  return e;
}

}  // namespace hierflow::nn
