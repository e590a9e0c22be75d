// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <string>

#include "spikebert/model.hpp"

namespace spikebert {

/// Adam with decoupled weight decay (AdamW).
template <typename S>
class AdamW {
 public:
  struct Options {
    double lr = 5e-4;
    double weight_decay = 5e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  AdamW() = default;
  explicit AdamW(Options options) : options_(options) {}

  /// One update of every parameter that has a gradient entry.
  void step(Parameters<S>& params, const Parameters<S>& grads) {
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, double(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, double(steps_));
    const S lr = S(options_.lr), wd = S(options_.weight_decay);
    const S b1 = S(options_.beta1), b2 = S(options_.beta2), eps = S(options_.eps);
    for (auto& [name, value] : params) {
      const auto g = grads.find(name);
      if (g == grads.end()) continue;
      auto& m = first_moment_.try_emplace(name, Matrix<S>::Zero(value.rows(), value.cols())).first->second;
      auto& v = second_moment_.try_emplace(name, Matrix<S>::Zero(value.rows(), value.cols())).first->second;
      m = b1 * m + (S(1) - b1) * g->second;
      v = b2 * v + (S(1) - b2) * g->second.cwiseAbs2();
      value *= S(1) - lr * wd;
      value.array() -= lr * (m.array() / S(c1)) / ((v.array() / S(c2)).sqrt() + eps);
    }
  }

  Options& options() { return options_; }
  long steps() const { return steps_; }

 private:
  Options options_{};
  long steps_ = 0;
  std::map<std::string, Matrix<S>> first_moment_;
  std::map<std::string, Matrix<S>> second_moment_;
};

}  // namespace spikebert
