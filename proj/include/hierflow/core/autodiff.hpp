// Copyright (c) 2026 The hierflow Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "hierflow/core/tensor.hpp"

namespace hierflow::nn {

// Reverse-mode autodiff over Tensor values. Each op builds a Node whose
// backward closure scatters the node's gradient into its parents. Graphs are
// rebuilt per forward pass and freed when the last Var goes out of scope.

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return Var(std::move(n));
  }

  static Var leaf(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  const Tensor& value() const { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node>& node() const { return node_; }
  bool defined() const { return node_ != nullptr; }

  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_op(Tensor value, std::vector<Var> inputs,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents.reserve(inputs.size());
  bool req = false;
  for (auto& in : inputs) {
    req = req || in.requires_grad();
    n->parents.push_back(in.node());
  }
  n->requires_grad = req;
  if (req) n->backward = std::move(backward);
  return Var(n);
}

inline void accumulate(Node& parent, const Tensor& g) {
  if (!parent.requires_grad) return;
  parent.grad_buffer() += g;
}

}  // namespace detail

// Runs reverse-mode accumulation from a scalar root. Gradients land in the
// grad buffers of every node with requires_grad, including leaves.
inline void backward(const Var& root) {
  check(root.value().size() == 1, "backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative postorder topological sort.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  check(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor out = a.value();
  out += b.value();
  return detail::make_op(std::move(out), {a, b}, [](Node& n) {
    detail::accumulate(*n.parents[0], n.grad);
    detail::accumulate(*n.parents[1], n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  check(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& n) {
    detail::accumulate(*n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) {
      Tensor g = n.grad;
      for (auto& x : g.vec()) x = -x;
      detail::accumulate(*n.parents[1], g);
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  check(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= n.parents[1]->value[i];
      detail::accumulate(*n.parents[0], g);
    }
    if (n.parents[1]->requires_grad) {
      Tensor g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= n.parents[0]->value[i];
      detail::accumulate(*n.parents[1], g);
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& x : out.vec()) x *= s;
  return detail::make_op(std::move(out), {a}, [s](Node& n) {
    Tensor g = n.grad;
    for (auto& x : g.vec()) x *= s;
    detail::accumulate(*n.parents[0], g);
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& x : out.vec()) x += s;
  return detail::make_op(std::move(out), {a}, [](Node& n) {
    detail::accumulate(*n.parents[0], n.grad);
  });
}

// Adds a 1xD row vector across every row of a TxD tensor.
inline Var add_rowvec(const Var& a, const Var& row) {
  check(row.value().rows() == 1 && row.value().cols() == a.value().cols(),
        "add_rowvec: row must be 1 x cols(a)");
  const std::size_t T = a.rows(), D = a.cols();
  Tensor out = a.value();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < D; ++d) out(t, d) += row.value()[d];
  return detail::make_op(std::move(out), {a, row}, [T, D](Node& n) {
    detail::accumulate(*n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) {
      Tensor g(1, D);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < D; ++d) g[d] += n.grad(t, d);
      detail::accumulate(*n.parents[1], g);
    }
  });
}

// Broadcasts a 1xD row to T rows.
inline Var broadcast_row(const Var& row, std::size_t T) {
  check(row.value().rows() == 1, "broadcast_row: input must be a single row");
  const std::size_t D = row.cols();
  Tensor out(T, D);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < D; ++d) out(t, d) = row.value()[d];
  return detail::make_op(std::move(out), {row}, [T, D](Node& n) {
    Tensor g(1, D);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d) g[d] += n.grad(t, d);
    detail::accumulate(*n.parents[0], g);
  });
}

// ---------------------------------------------------------------------------
// Matrix products (row-major, j-innermost loops so the compiler vectorizes)
// ---------------------------------------------------------------------------

namespace detail {

inline void mm(const double* A, const double* B, double* C, std::size_t M,
               std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    const double* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = a[k];
      const double* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C(M x N) += A(M x K) * B(N x K)^T
inline void mm_nt(const double* A, const double* B, double* C, std::size_t M,
                  std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double acc = 0.0;
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

// C(K x N) += A(M x K)^T * B(M x N)
inline void mm_tn(const double* A, const double* B, double* C, std::size_t M,
                  std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    const double* b = B + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = a[k];
      double* c = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  const std::size_t M = a.rows(), K = a.cols(), N = b.cols();
  check(b.rows() == K, "matmul: inner dimensions disagree " + shape_str(a.value()) +
                           " x " + shape_str(b.value()));
  Tensor out(M, N);
  detail::mm(a.value().data(), b.value().data(), out.data(), M, K, N);
  return detail::make_op(std::move(out), {a, b}, [M, K, N](Node& n) {
    const Tensor& g = n.grad;
    if (n.parents[0]->requires_grad) {
      Tensor& ga = n.parents[0]->grad_buffer();
      detail::mm_nt(g.data(), n.parents[1]->value.data(), ga.data(), M, N, K);
    }
    if (n.parents[1]->requires_grad) {
      Tensor& gb = n.parents[1]->grad_buffer();
      detail::mm_tn(n.parents[0]->value.data(), g.data(), gb.data(), M, K, N);
    }
  });
}

// a * b^T; used for attention scores.
inline Var matmul_nt(const Var& a, const Var& b) {
  const std::size_t M = a.rows(), K = a.cols(), N = b.rows();
  check(b.cols() == K, "matmul_nt: inner dimensions disagree");
  Tensor out(M, N);
  detail::mm_nt(a.value().data(), b.value().data(), out.data(), M, K, N);
  return detail::make_op(std::move(out), {a, b}, [M, K, N](Node& n) {
    const Tensor& g = n.grad;
    if (n.parents[0]->requires_grad) {
      Tensor& ga = n.parents[0]->grad_buffer();
      detail::mm(g.data(), n.parents[1]->value.data(), ga.data(), M, N, K);
    }
    if (n.parents[1]->requires_grad) {
      Tensor& gb = n.parents[1]->grad_buffer();
      detail::mm_tn(g.data(), n.parents[0]->value.data(), gb.data(), N, M, K);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Var concat_cols(const Var& a, const Var& b) {
  check(a.rows() == b.rows(), "concat_cols: row counts disagree");
  const std::size_t T = a.rows(), Da = a.cols(), Db = b.cols();
  Tensor out(T, Da + Db);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t d = 0; d < Da; ++d) out(t, d) = a.value()(t, d);
    for (std::size_t d = 0; d < Db; ++d) out(t, Da + d) = b.value()(t, d);
  }
  return detail::make_op(std::move(out), {a, b}, [T, Da, Db](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor g(T, Da);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < Da; ++d) g(t, d) = n.grad(t, d);
      detail::accumulate(*n.parents[0], g);
    }
    if (n.parents[1]->requires_grad) {
      Tensor g(T, Db);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < Db; ++d) g(t, d) = n.grad(t, Da + d);
      detail::accumulate(*n.parents[1], g);
    }
  });
}

inline Var slice_cols(const Var& a, std::size_t c0, std::size_t c1) {
  check(c0 < c1 && c1 <= a.cols(), "slice_cols: bad column range");
  const std::size_t T = a.rows(), W = c1 - c0;
  Tensor out(T, W);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < W; ++d) out(t, d) = a.value()(t, c0 + d);
  return detail::make_op(std::move(out), {a}, [T, W, c0](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < W; ++d) g(t, c0 + d) += n.grad(t, d);
  });
}

inline Var mean_rows(const Var& a) {
  const std::size_t T = a.rows(), D = a.cols();
  check(T > 0, "mean_rows: empty input");
  Tensor out(1, D);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < D; ++d) out[d] += a.value()(t, d);
  for (std::size_t d = 0; d < D; ++d) out[d] /= static_cast<double>(T);
  return detail::make_op(std::move(out), {a}, [T, D](Node& n) {
    Tensor g(T, D);
    const double inv = 1.0 / static_cast<double>(T);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d) g(t, d) = n.grad[d] * inv;
    detail::accumulate(*n.parents[0], g);
  });
}

// Average-pool pairs of consecutive rows; T must be even.
inline Var avgpool_rows2(const Var& a) {
  const std::size_t T = a.rows(), D = a.cols();
  check(T % 2 == 0, "avgpool_rows2: row count must be even");
  Tensor out(T / 2, D);
  for (std::size_t t = 0; t < T / 2; ++t)
    for (std::size_t d = 0; d < D; ++d)
      out(t, d) = 0.5 * (a.value()(2 * t, d) + a.value()(2 * t + 1, d));
  return detail::make_op(std::move(out), {a}, [T, D](Node& n) {
    Tensor g(T, D);
    for (std::size_t t = 0; t < T / 2; ++t)
      for (std::size_t d = 0; d < D; ++d) {
        g(2 * t, d) = 0.5 * n.grad(t, d);
        g(2 * t + 1, d) = 0.5 * n.grad(t, d);
      }
    detail::accumulate(*n.parents[0], g);
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

namespace detail {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

inline Var gelu(const Var& a) {
  // tanh approximation; smooth everywhere, which keeps finite differences honest.
  constexpr double kC = detail::kGeluC;
  Tensor out = a.value();
  for (auto& x : out.vec()) {
    const double u = kC * (x + 0.044715 * x * x * x);
    x = 0.5 * x * (1.0 + std::tanh(u));
  }
  return detail::make_op(std::move(out), {a}, [](Node& n) {
    constexpr double kC = detail::kGeluC;
    Tensor g = n.grad;
    const Tensor& x = n.parents[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double xi = x[i];
      const double u = kC * (xi + 0.044715 * xi * xi * xi);
      const double th = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * 0.044715 * xi * xi);
      g[i] *= 0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * du;
    }
    detail::accumulate(*n.parents[0], g);
  });
}

// x + sin^2(alpha x) / (beta + 1e-9), with per-channel alpha/beta stored in
// log scale (rows of shape 1xC).
inline Var snake(const Var& x, const Var& log_alpha, const Var& log_beta) {
  const std::size_t T = x.rows(), C = x.cols();
  check(log_alpha.value().cols() == C && log_beta.value().cols() == C,
        "snake: per-channel parameter width mismatch");
  constexpr double kEps = 1e-9;
  Tensor out(T, C);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      const double a = std::exp(log_alpha.value()[c]);
      const double b = std::exp(log_beta.value()[c]);
      const double s = std::sin(a * x.value()(t, c));
      out(t, c) = x.value()(t, c) + s * s / (b + kEps);
    }
  return detail::make_op(std::move(out), {x, log_alpha, log_beta}, [T, C](Node& n) {
    const Tensor& xv = n.parents[0]->value;
    const Tensor& lav = n.parents[1]->value;
    const Tensor& lbv = n.parents[2]->value;
    Tensor gx(T, C), gla(1, C), glb(1, C);
    for (std::size_t c = 0; c < C; ++c) {
      const double a = std::exp(lav[c]);
      const double b = std::exp(lbv[c]);
      const double inv = 1.0 / (b + kEps);
      for (std::size_t t = 0; t < T; ++t) {
        const double xi = xv(t, c);
        const double g = n.grad(t, c);
        const double s2 = std::sin(2.0 * a * xi);
        const double ss = std::sin(a * xi);
        gx(t, c) = g * (1.0 + a * s2 * inv);
        // d/d(log a) = x * sin(2ax) / (b+eps) * a
        gla[c] += g * xi * s2 * inv * a;
        // d/d(log b) = -sin^2(ax) / (b+eps)^2 * b
        glb[c] += -g * ss * ss * inv * inv * b;
      }
    }
    detail::accumulate(*n.parents[0], gx);
    detail::accumulate(*n.parents[1], gla);
    detail::accumulate(*n.parents[2], glb);
  });
}

inline Var softmax_rows(const Var& a) {
  const std::size_t T = a.rows(), D = a.cols();
  Tensor out(T, D);
  for (std::size_t t = 0; t < T; ++t) {
    double mx = -1e300;
    for (std::size_t d = 0; d < D; ++d) mx = std::max(mx, a.value()(t, d));
    double sum = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      out(t, d) = std::exp(a.value()(t, d) - mx);
      sum += out(t, d);
    }
    for (std::size_t d = 0; d < D; ++d) out(t, d) /= sum;
  }
  return detail::make_op(std::move(out), {a}, [T, D](Node& n) {
    Tensor g(T, D);
    for (std::size_t t = 0; t < T; ++t) {
      double dot = 0.0;
      for (std::size_t d = 0; d < D; ++d) dot += n.grad(t, d) * n.value(t, d);
      for (std::size_t d = 0; d < D; ++d)
        g(t, d) = n.value(t, d) * (n.grad(t, d) - dot);
    }
    detail::accumulate(*n.parents[0], g);
  });
}

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
                      double eps = 1e-6) {
  const std::size_t T = x.rows(), D = x.cols();
  check(gamma.value().cols() == D && beta.value().cols() == D,
        "layer_norm: parameter width mismatch");
  Tensor out(T, D);
  Tensor mean(1, T), inv_std(1, T);
  for (std::size_t t = 0; t < T; ++t) {
    double m = 0.0;
    for (std::size_t d = 0; d < D; ++d) m += x.value()(t, d);
    m /= static_cast<double>(D);
    double v = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      const double c = x.value()(t, d) - m;
      v += c * c;
    }
    v /= static_cast<double>(D);
    mean[t] = m;
    inv_std[t] = 1.0 / std::sqrt(v + eps);
    for (std::size_t d = 0; d < D; ++d)
      out(t, d) = gamma.value()[d] * (x.value()(t, d) - m) * inv_std[t] +
                  beta.value()[d];
  }
  return detail::make_op(
      std::move(out), {x, gamma, beta},
      [T, D, mean, inv_std](Node& n) {
        const Tensor& xv = n.parents[0]->value;
        const Tensor& gv = n.parents[1]->value;
        Tensor gx(T, D), gg(1, D), gb(1, D);
        for (std::size_t t = 0; t < T; ++t) {
          const double is = inv_std[t];
          double sum_gy = 0.0, sum_gyx = 0.0;
          for (std::size_t d = 0; d < D; ++d) {
            const double xhat = (xv(t, d) - mean[t]) * is;
            const double gl = n.grad(t, d);
            gg[d] += gl * xhat;
            gb[d] += gl;
            const double gy = gl * gv[d];
            sum_gy += gy;
            sum_gyx += gy * xhat;
          }
          const double invD = 1.0 / static_cast<double>(D);
          for (std::size_t d = 0; d < D; ++d) {
            const double xhat = (xv(t, d) - mean[t]) * is;
            const double gy = n.grad(t, d) * gv[d];
            gx(t, d) = is * (gy - invD * sum_gy - xhat * invD * sum_gyx);
          }
        }
        detail::accumulate(*n.parents[0], gx);
        detail::accumulate(*n.parents[1], gg);
        detail::accumulate(*n.parents[2], gb);
      });
}

// ---------------------------------------------------------------------------
// Convolutions along the row (time) axis
// ---------------------------------------------------------------------------

// 1-D convolution, stride 1, zero same-padding; weights laid out as
// (K*Cin) x Cout so the inner product reuses the matmul kernels. When
// mask_center is set the center tap never contributes (structurally zero).
inline Var conv1d(const Var& x, const Var& w, const Var& b, std::size_t kernel,
                  bool mask_center = false) {
  check(kernel % 2 == 1, "conv1d: kernel must be odd");
  const std::size_t T = x.rows(), Cin = x.cols();
  check(w.rows() == kernel * Cin, "conv1d: weight rows must be K*Cin");
  const std::size_t Cout = w.cols();
  check(b.value().cols() == Cout && b.value().rows() == 1,
        "conv1d: bias must be 1 x Cout");
  const std::size_t K = kernel, H = K / 2, center = K / 2;

  // im2col: row t holds the K*Cin window centered at t (zeros off the ends,
  // and zeros at the masked center tap).
  Tensor cols(T, K * Cin);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < K; ++k) {
      if (mask_center && k == center) continue;
      const long src = static_cast<long>(t) + static_cast<long>(k) -
                       static_cast<long>(H);
      if (src < 0 || src >= static_cast<long>(T)) continue;
      for (std::size_t c = 0; c < Cin; ++c)
        cols(t, k * Cin + c) = x.value()(static_cast<std::size_t>(src), c);
    }

  Tensor out(T, Cout);
  detail::mm(cols.data(), w.value().data(), out.data(), T, K * Cin, Cout);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < Cout; ++c) out(t, c) += b.value()[c];

  return detail::make_op(
      std::move(out), {x, w, b},
      [T, Cin, Cout, K, H, center, mask_center, cols](Node& n) {
        const Tensor& g = n.grad;
        if (n.parents[1]->requires_grad) {
          // The im2col buffer zeroes the masked center tap, so its weight
          // gradient comes out exactly zero.
          Tensor& gw = n.parents[1]->grad_buffer();
          detail::mm_tn(cols.data(), g.data(), gw.data(), T, K * Cin, Cout);
        }
        if (n.parents[2]->requires_grad) {
          Tensor gb(1, Cout);
          for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < Cout; ++c) gb[c] += g(t, c);
          detail::accumulate(*n.parents[2], gb);
        }
        if (n.parents[0]->requires_grad) {
          Tensor gcols(T, K * Cin);
          detail::mm_nt(g.data(), n.parents[1]->value.data(), gcols.data(), T,
                        Cout, K * Cin);
          Tensor gx(T, Cin);
          for (std::size_t t = 0; t < T; ++t)
            for (std::size_t k = 0; k < K; ++k) {
              if (mask_center && k == center) continue;
              const long src = static_cast<long>(t) + static_cast<long>(k) -
                               static_cast<long>(H);
              if (src < 0 || src >= static_cast<long>(T)) continue;
              for (std::size_t c = 0; c < Cin; ++c)
                gx(static_cast<std::size_t>(src), c) += gcols(t, k * Cin + c);
            }
          detail::accumulate(*n.parents[0], gx);
        }
      });
}

// Transposed 1-D convolution with stride 2, kernel 4, padding 1:
// output length is exactly 2T. Weights are (K*Cin) x Cout.
inline Var tconv1d_x2(const Var& x, const Var& w, const Var& b) {
  constexpr std::size_t K = 4, PAD = 1, STRIDE = 2;
  const std::size_t T = x.rows(), Cin = x.cols();
  check(w.rows() == K * Cin, "tconv1d_x2: weight rows must be 4*Cin");
  const std::size_t Cout = w.cols(), To = 2 * T;
  check(b.value().cols() == Cout, "tconv1d_x2: bias width mismatch");

  Tensor out(To, Cout);
  for (std::size_t t = 0; t < To; ++t)
    for (std::size_t c = 0; c < Cout; ++c) out(t, c) = b.value()[c];
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < K; ++k) {
      const long j = static_cast<long>(t * STRIDE + k) - static_cast<long>(PAD);
      if (j < 0 || j >= static_cast<long>(To)) continue;
      const double* wr = w.value().data() + (k * Cin) * Cout;
      double* orow = out.data() + static_cast<std::size_t>(j) * Cout;
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double xv = x.value()(t, ci);
        const double* wc = wr + ci * Cout;
        for (std::size_t co = 0; co < Cout; ++co) orow[co] += xv * wc[co];
      }
    }

  return detail::make_op(std::move(out), {x, w, b}, [T, Cin, Cout, To](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& xv = n.parents[0]->value;
    const Tensor& wv = n.parents[1]->value;
    if (n.parents[2]->requires_grad) {
      Tensor gb(1, Cout);
      for (std::size_t t = 0; t < To; ++t)
        for (std::size_t c = 0; c < Cout; ++c) gb[c] += g(t, c);
      detail::accumulate(*n.parents[2], gb);
    }
    const bool need_x = n.parents[0]->requires_grad;
    const bool need_w = n.parents[1]->requires_grad;
    if (!need_x && !need_w) return;
    Tensor gx(T, Cin), gw(K * Cin, Cout);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < K; ++k) {
        const long j = static_cast<long>(t * STRIDE + k) - static_cast<long>(PAD);
        if (j < 0 || j >= static_cast<long>(To)) continue;
        const double* grow = g.data() + static_cast<std::size_t>(j) * Cout;
        for (std::size_t ci = 0; ci < Cin; ++ci) {
          const double* wc = wv.data() + (k * Cin + ci) * Cout;
          double* gwc = gw.data() + (k * Cin + ci) * Cout;
          double acc = 0.0;
          const double xval = xv(t, ci);
          for (std::size_t co = 0; co < Cout; ++co) {
            acc += grow[co] * wc[co];
            gwc[co] += grow[co] * xval;
          }
          gx(t, ci) += acc;
        }
      }
    if (need_x) detail::accumulate(*n.parents[0], gx);
    if (need_w) detail::accumulate(*n.parents[1], gw);
  });
}

// ---------------------------------------------------------------------------
// Gathers
// ---------------------------------------------------------------------------

inline Var gather_rows(const Var& table, const std::vector<int>& ids) {
  const std::size_t K = table.rows(), D = table.cols(), T = ids.size();
  for (int id : ids)
    check(id >= 0 && static_cast<std::size_t>(id) < K,
          "gather_rows: id out of range");
  Tensor out(T, D);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < D; ++d)
      out(t, d) = table.value()(static_cast<std::size_t>(ids[t]), d);
  return detail::make_op(std::move(out), {table}, [T, D, ids](Node& n) {
    Tensor& g = n.parents[0]->grad_buffer();
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d)
        g(static_cast<std::size_t>(ids[t]), d) += n.grad(t, d);
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  Tensor out(1, 1);
  for (double v : a.value().vec()) out[0] += v;
  return detail::make_op(std::move(out), {a}, [](Node& n) {
    Tensor g(n.parents[0]->value.shape());
    g.fill(n.grad[0]);
    detail::accumulate(*n.parents[0], g);
  });
}

inline Var mean_all(const Var& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

inline Var sum_sq(const Var& a) {
  Tensor out(1, 1);
  for (double v : a.value().vec()) out[0] += v * v;
  return detail::make_op(std::move(out), {a}, [](Node& n) {
    Tensor g = n.parents[0]->value;
    for (auto& x : g.vec()) x *= 2.0 * n.grad[0];
    detail::accumulate(*n.parents[0], g);
  });
}

// Mean absolute difference against a fixed target; subgradient 0 at ties.
inline Var mae_to(const Var& pred, const Tensor& target) {
  check(pred.value().same_shape(target), "mae_to: shape mismatch");
  const std::size_t Nf = pred.value().size();
  Tensor out(1, 1);
  for (std::size_t i = 0; i < Nf; ++i)
    out[0] += std::abs(pred.value()[i] - target[i]);
  out[0] /= static_cast<double>(Nf);
  return detail::make_op(std::move(out), {pred}, [target, Nf](Node& n) {
    Tensor g(n.parents[0]->value.shape());
    const double s = n.grad[0] / static_cast<double>(Nf);
    for (std::size_t i = 0; i < Nf; ++i) {
      const double d = n.parents[0]->value[i] - target[i];
      g[i] = d > 0.0 ? s : (d < 0.0 ? -s : 0.0);
    }
    detail::accumulate(*n.parents[0], g);
  });
}

// Mean squared difference against a fixed target.
inline Var mse_to(const Var& pred, const Tensor& target) {
  check(pred.value().same_shape(target), "mse_to: shape mismatch");
  const std::size_t Nf = pred.value().size();
  Tensor out(1, 1);
  for (std::size_t i = 0; i < Nf; ++i) {
    const double d = pred.value()[i] - target[i];
    out[0] += d * d;
  }
  out[0] /= static_cast<double>(Nf);
  return detail::make_op(std::move(out), {pred}, [target, Nf](Node& n) {
    Tensor g(n.parents[0]->value.shape());
    const double s = 2.0 * n.grad[0] / static_cast<double>(Nf);
    for (std::size_t i = 0; i < Nf; ++i)
      g[i] = s * (n.parents[0]->value[i] - target[i]);
    detail::accumulate(*n.parents[0], g);
  });
}

// Mean over rows of -sum_k target(t,k) * log softmax(logits)(t,k).
// Every target row must be a probability distribution.
inline Var cross_entropy_rows(const Var& logits, const Tensor& target) {
  check(logits.value().same_shape(target), "cross_entropy: shape mismatch");
  const std::size_t T = logits.rows(), K = logits.cols();
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += target(t, k);
    check(std::abs(s - 1.0) <= 1e-6,
          "cross_entropy: target row " + std::to_string(t) +
              " does not sum to 1");
  }
  Tensor probs(T, K);
  Tensor out(1, 1);
  for (std::size_t t = 0; t < T; ++t) {
    double mx = -1e300;
    for (std::size_t k = 0; k < K; ++k)
      mx = std::max(mx, logits.value()(t, k));
    double lse = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      lse += std::exp(logits.value()(t, k) - mx);
    lse = mx + std::log(lse);
    for (std::size_t k = 0; k < K; ++k) {
      const double lp = logits.value()(t, k) - lse;
      probs(t, k) = std::exp(lp);
      out[0] -= target(t, k) * lp;
    }
  }
  out[0] /= static_cast<double>(T);
  return detail::make_op(std::move(out), {logits}, [T, K, probs, target](Node& n) {
    Tensor g(T, K);
    const double s = n.grad[0] / static_cast<double>(T);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < K; ++k)
        g(t, k) = s * (probs(t, k) - target(t, k));
    detail::accumulate(*n.parents[0], g);
  });
}

}  // namespace hierflow::nn
