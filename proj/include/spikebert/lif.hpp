// SPDX-License-Identifier: Apache-2.0
//
// Leaky integrate-and-fire dynamics and the arctan surrogate.
//
// All functions are pure and operate elementwise on Eigen arrays; a
// batch x positions x dims membrane is stored as a (batch*positions) x dims
// array.
#pragma once

#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <utility>

#include "spikebert/error.hpp"

namespace spikebert {

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

enum class ResetMode { kSubtractThreshold };

template <typename Scalar>
struct LifParams {
  Scalar threshold{1};
  Scalar decay{Scalar(0.9)};
  Scalar surrogate_alpha{2};
  ResetMode reset_mode{ResetMode::kSubtractThreshold};

  void validate() const {
    SPIKEBERT_REQUIRE(threshold > 0, "LifParams: threshold must be > 0");
    SPIKEBERT_REQUIRE(decay > 0 && decay <= 1, "LifParams: decay must lie in (0, 1]");
    SPIKEBERT_REQUIRE(surrogate_alpha > 0, "LifParams: surrogate_alpha must be > 0");
  }
};

template <typename Scalar>
struct MembraneState {
  Array<Scalar> potential;
  Array<Scalar> last_spike;

  /// Resting state: zero potential, no previous spike.
  static MembraneState zeros(Eigen::Index rows, Eigen::Index cols) {
    return {Array<Scalar>::Zero(rows, cols), Array<Scalar>::Zero(rows, cols)};
  }
};

/// 1 where u >= threshold, else 0.
template <typename Derived>
Array<typename Derived::Scalar> heaviside(const Eigen::ArrayBase<Derived>& u,
                                          typename Derived::Scalar threshold) {
  using S = typename Derived::Scalar;
  return (u.derived() >= threshold).template cast<S>();
}

/// (alpha/2) / (1 + (pi*alpha*u/2)^2), evaluated at u = potential - threshold.
template <typename Derived>
Array<typename Derived::Scalar> surrogate_grad(const Eigen::ArrayBase<Derived>& u_minus_thr,
                                               typename Derived::Scalar alpha) {
  using S = typename Derived::Scalar;
  SPIKEBERT_REQUIRE(alpha > 0, "surrogate_grad: alpha must be > 0");
  const S k = std::numbers::pi_v<S> * alpha / S(2);
  return (alpha / S(2)) / (S(1) + (k * u_minus_thr.derived()).square());
}

/// arctan relaxation of the Heaviside step: atan(pi*alpha*u/2)/pi + 1/2.
template <typename Derived>
Array<typename Derived::Scalar> soft_spike(const Eigen::ArrayBase<Derived>& u_minus_thr,
                                           typename Derived::Scalar alpha) {
  using S = typename Derived::Scalar;
  SPIKEBERT_REQUIRE(alpha > 0, "soft_spike: alpha must be > 0");
  const S k = std::numbers::pi_v<S> * alpha / S(2);
  return (k * u_minus_thr.derived()).atan() / std::numbers::pi_v<S> + S(0.5);
}

/// One LIF update: U_t = I_t + decay*U_{t-1} - S_{t-1}*threshold, then S_t = H(U_t - threshold).
/// Returns the new state together with the emitted spikes.
template <typename Scalar>
std::pair<MembraneState<Scalar>, Array<Scalar>> lif_step(const MembraneState<Scalar>& state,
                                                         const Array<Scalar>& input_current,
                                                         const LifParams<Scalar>& params) {
  SPIKEBERT_REQUIRE(state.potential.rows() == state.last_spike.rows() &&
                        state.potential.cols() == state.last_spike.cols(),
                    "lif_step: potential and last_spike shapes differ");
  SPIKEBERT_REQUIRE(input_current.rows() == state.potential.rows() &&
                        input_current.cols() == state.potential.cols(),
                    "lif_step: input current shape differs from membrane shape");
  // select() keeps an infinite threshold from turning 0*inf into NaN.
  const Array<Scalar> reset = (state.last_spike > Scalar(0))
                                  .select(Array<Scalar>::Constant(state.last_spike.rows(),
                                                                  state.last_spike.cols(), params.threshold),
                                          Scalar(0));
  Array<Scalar> potential = input_current + params.decay * state.potential - reset;
  Array<Scalar> spikes = heaviside(potential, params.threshold);
  return {MembraneState<Scalar>{std::move(potential), spikes}, spikes};
}

}  // namespace spikebert
