// SPDX-License-Identifier: Apache-2.0
//
// LIF layers unrolled on the tape, plus the closed-form recurrence used to
// check the unrolled gradients.
#pragma once

#include <Eigen/Core>
#include <vector>

#include "spikebert/autodiff.hpp"
#include "spikebert/lif.hpp"
#include "spikebert/ops.hpp"

namespace spikebert::ad {

/// How the reset term -S_{t-1} * threshold enters the backward pass.
/// kDetached treats it as a constant, so dU_t/dU_{t-1} = decay exactly.
/// kAttached differentiates through S_{t-1}; soft-forward gradient checks
/// need it because finite differences see that path.
enum class ResetGrad { kDetached, kAttached };

struct UnrollOptions {
  SpikeMode spike_mode = SpikeMode::kHard;
  ResetGrad reset_grad = ResetGrad::kDetached;
};

/// Runs a LIF population over a (T*R) x D stack of input currents, one
/// R-row block per time step, starting from zero potential. Returns the
/// stacked spikes with the same shape.
template <typename S>
Var<S> lif_layer(const Var<S>& currents, Eigen::Index time_steps, const LifParams<S>& params,
                 const UnrollOptions& options = {}) {
  SPIKEBERT_REQUIRE(time_steps > 0 && currents.rows() % time_steps == 0,
                    "lif_layer: rows not divisible by time steps");
  const Eigen::Index r = currents.rows() / time_steps;
  std::vector<Var<S>> spikes;
  spikes.reserve(static_cast<std::size_t>(time_steps));
  Var<S> potential;
  for (Eigen::Index t = 0; t < time_steps; ++t) {
    Var<S> current = slice_rows(currents, t * r, r);
    if (t == 0) {
      potential = current;
    } else {
      const Var<S>& prev = spikes.back();
      Var<S> reset = options.reset_grad == ResetGrad::kDetached
                         ? currents.tape().constant(prev.value() * params.threshold)
                         : scale(prev, params.threshold);
      potential = sub(add(current, scale(potential, params.decay)), reset);
    }
    spikes.push_back(spike(potential, params.threshold, params.surrogate_alpha, options.spike_mode));
  }
  return concat_rows(std::span<const Var<S>>(spikes));
}

/// dL/dw for a single neuron driven by I_t = x_t . w over T steps with
/// loss L = sum_t loss_coeffs[t] * S_t, computed by the explicit
/// recurrence G_i = x_i + decay * G_{i-1} (G_i = sum_{j<=i} dU_i/dW_j) and
/// dL/dw = sum_i (dL_i/dS_i)(dS_i/dU_i) G_i, with the reset held constant.
/// `inputs` is T x D; returns a D-vector. Independent of the tape.
template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, 1> bptt_reference_grad(const Eigen::Matrix<S, Eigen::Dynamic, 1>& weights,
                                                        const Matrix<S>& inputs,
                                                        const Eigen::Matrix<S, Eigen::Dynamic, 1>& loss_coeffs,
                                                        const LifParams<S>& params) {
  SPIKEBERT_REQUIRE(inputs.cols() == weights.size(), "bptt_reference_grad: input width != weight count");
  SPIKEBERT_REQUIRE(loss_coeffs.size() == inputs.rows(), "bptt_reference_grad: one coefficient per step");
  const Eigen::Index steps = inputs.rows();
  Eigen::Matrix<S, Eigen::Dynamic, 1> grad = Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(weights.size());
  Eigen::Matrix<S, Eigen::Dynamic, 1> du_dw = Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(weights.size());
  S potential = 0;
  S last_spike = 0;
  for (Eigen::Index i = 0; i < steps; ++i) {
    const S current = inputs.row(i).dot(weights.transpose());
    potential = current + (i == 0 ? S(0) : params.decay * potential - last_spike * params.threshold);
    du_dw = inputs.row(i).transpose() + (i == 0 ? S(0) : params.decay) * du_dw;
    Array<S> shifted(1, 1);
    shifted(0, 0) = potential - params.threshold;
    const S ds_du = surrogate_grad(shifted, params.surrogate_alpha)(0, 0);
    grad += loss_coeffs(i) * ds_du * du_dw;
    last_spike = potential >= params.threshold ? S(1) : S(0);
  }
  return grad;
}

}  // namespace spikebert::ad
