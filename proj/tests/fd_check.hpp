#pragma once

// Central finite-difference gradient oracle. Lives in test code only; it
// evaluates the loss function with element-wise perturbations and never
// touches the reverse-mode path it is checking.

#include <cmath>
#include <functional>
#include <vector>

#include "ptdr/tensor.hpp"

namespace fd {

using DTensor = ptdr::TensorT<double>;

// Max relative error between reverse-mode gradients and central differences
// over every element of every parameter. loss_fn must recompute the loss
// from the current parameter values on each call.
inline double max_rel_err(std::vector<DTensor>& params,
                          const std::function<DTensor()>& loss_fn, double step = 1e-4) {
  for (auto& p : params) {
    p.set_param(true);
    p.zero_grad();  // a parameter may carry a stale gradient from an earlier pass
  }

  std::vector<std::vector<double>> analytic;
  {
    ptdr::TapeT<double> tape;
    DTensor loss = loss_fn();
    ptdr::backward(loss);
    for (auto& p : params) {
      if (p.has_grad())
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      else  // parameter unused by this loss: gradient is identically zero
        analytic.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    }
  }

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi].mutable_data();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double orig = vals[j];
      auto eval_at = [&](double v) {
        vals[j] = v;
        const double l = loss_fn().item();
        vals[j] = orig;
        return l;
      };
      // five-point stencil: truncation ~ step^4, so elements with tiny true
      // gradients still resolve well below the 1e-4 acceptance band
      const double p1 = eval_at(orig + step);
      const double p2 = eval_at(orig + 2.0 * step);
      const double m1 = eval_at(orig - step);
      const double m2 = eval_at(orig - 2.0 * step);
      const double numeric = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step);
      const double a = analytic[pi][j];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace fd
