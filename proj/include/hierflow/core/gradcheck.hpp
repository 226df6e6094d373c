// Copyright (c) 2026 The hierflow Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hierflow/core/layers.hpp"

namespace hierflow::nn {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

// Central-difference verification of analytic gradients. `build` must
// construct a fresh graph and return the scalar loss; it is re-evaluated with
// each parameter element perturbed by +/-h. Inputs can be checked by wrapping
// them in Parameters.
inline GradCheckReport gradient_check(const std::function<Var()>& build,
                                      const ParamList& params,
                                      double h = 1e-5) {
  for (Parameter* p : params) p->zero_grad();
  Var root = build();
  backward(root);

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) {
    if (!p->grad.all_finite())
      throw std::runtime_error("gradient_check: non-finite analytic gradient in " +
                               p->name);
    analytic.push_back(p->grad);
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double fp = build().value().scalar();
      p->value[i] = keep - h;
      const double fm = build().value().scalar();
      p->value[i] = keep;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][i];
      const double rel =
          std::abs(a - numeric) /
          std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p->name;
        report.worst_index = i;
      }
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return report;
}

}  // namespace hierflow::nn
