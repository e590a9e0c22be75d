// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient checker over a named parameter set.
#pragma once

#include <cmath>
#include <string>

#include "spikebert/autodiff.hpp"
#include "spikebert/model.hpp"

namespace spikebert::testing {

struct GradCheck {
  double max_rel_err = 0;
  std::string worst;  // "name[row,col]"
  long checked = 0;
};

/// `loss_fn(const BoundParameters<double>&)` must return a 1x1 Var.
/// Relative error per entry is |autodiff - fd| / (|fd| + 1e-8).
template <typename LossFn>
GradCheck grad_check(Parameters<double> params, LossFn&& loss_fn, double h = 1e-5) {
  Parameters<double> analytic;
  {
    ad::Tape<double> tape;
    BoundParameters<double> bound(tape, params);
    ad::Var<double> loss = loss_fn(bound);
    tape.backward(loss);
    analytic = bound.gradients();
  }
  auto eval = [&]() {
    ad::Tape<double> tape;
    BoundParameters<double> bound(tape, params, false);
    return loss_fn(bound).value()(0, 0);
  };
  GradCheck out;
  for (auto& [name, value] : params) {
    const Matrix<double>& g = analytic.at(name);
    for (Eigen::Index c = 0; c < value.cols(); ++c) {
      for (Eigen::Index r = 0; r < value.rows(); ++r) {
        const double saved = value(r, c);
        value(r, c) = saved + h;
        const double up = eval();
        value(r, c) = saved - h;
        const double down = eval();
        value(r, c) = saved;
        const double fd = (up - down) / (2 * h);
        const double err = std::abs(g(r, c) - fd) / (std::abs(fd) + 1e-8);
        ++out.checked;
        if (err > out.max_rel_err) {
          out.max_rel_err = err;
          out.worst = name + "[" + std::to_string(r) + "," + std::to_string(c) + "] autodiff=" +
                      std::to_string(g(r, c)) + " fd=" + std::to_string(fd);
        }
      }
    }
  }
  return out;
}

}  // namespace spikebert::testing
