// Copyright (c) 2026 The hierflow Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "hierflow/core/layers.hpp"

namespace hierflow::nn {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.8;
  double beta2 = 0.99;
  double eps = 1e-9;
  double weight_decay = 0.0;
  // Learning-rate multiplier applied after every step.
  double lr_decay = std::pow(0.999, 1.0 / 8.0);
};

// Decoupled-weight-decay adaptive optimizer. Gradients are consumed and
// zeroed by step().
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg), lr_(cfg.lr) {}

  void step(const ParamList& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Parameter* p : params) {
      Moments& m = moments_[p->name];
      if (m.m.empty()) {
        m.m = Tensor(p->value.shape());
        m.v = Tensor(p->value.shape());
      }
      check(m.m.same_shape(p->value), "adamw: moment shape mismatch for " + p->name);
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i];
        m.m[i] = cfg_.beta1 * m.m[i] + (1.0 - cfg_.beta1) * g;
        m.v[i] = cfg_.beta2 * m.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m.m[i] / bc1;
        const double vhat = m.v[i] / bc2;
        p->value[i] -= lr_ * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                              cfg_.weight_decay * p->value[i]);
      }
      p->zero_grad();
    }
    lr_ *= cfg_.lr_decay;
  }

  double lr() const { return lr_; }
  std::uint64_t step_count() const { return t_; }

  // State export/import for checkpoint resume.
  std::vector<std::pair<std::string, Tensor>> state(const ParamList& params) const {
    std::vector<std::pair<std::string, Tensor>> out;
    Tensor meta(1, 2);
    meta[0] = static_cast<double>(t_);
    meta[1] = lr_;
    out.emplace_back("opt.meta", meta);
    for (const Parameter* p : params) {
      auto it = moments_.find(p->name);
      if (it == moments_.end()) continue;
      out.emplace_back("opt.m." + p->name, it->second.m);
      out.emplace_back("opt.v." + p->name, it->second.v);
    }
    return out;
  }

  void restore(const std::unordered_map<std::string, Tensor>& entries,
               const ParamList& params) {
    auto meta = entries.find("opt.meta");
    if (meta != entries.end()) {
      t_ = static_cast<std::uint64_t>(meta->second[0]);
      lr_ = meta->second[1];
    }
    for (Parameter* p : params) {
      auto im = entries.find("opt.m." + p->name);
      auto iv = entries.find("opt.v." + p->name);
      if (im == entries.end() || iv == entries.end()) continue;
      moments_[p->name] = Moments{im->second, iv->second};
    }
  }

 private:
  struct Moments {
    Tensor m, v;
  };
  AdamWConfig cfg_;
  double lr_;
  std::uint64_t t_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

}  // namespace hierflow::nn
