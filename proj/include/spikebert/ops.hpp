// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives recorded on an ad::Tape.
//
// Every op takes and returns Var handles; local gradient rules live in the
// closures handed to Tape::record. Row-major conventions: a batch of vectors
// is a matrix with one vector per row.
#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "spikebert/autodiff.hpp"
#include "spikebert/lif.hpp"

namespace spikebert::ad {

/// Forward behaviour of spike nodes. kHard is the Heaviside step; kSoft is
/// the arctan relaxation, used for finite-difference gradient checks.
enum class SpikeMode { kHard, kSoft };

namespace detail {

template <typename S>
Tape<S>& common_tape(const Var<S>& a, const Var<S>& b) {
  SPIKEBERT_REQUIRE(&a.tape() == &b.tape(), "ad: operands recorded on different tapes");
  return a.tape();
}

template <typename S>
void require_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  SPIKEBERT_REQUIRE(a.rows() == b.rows() && a.cols() == b.cols(),
                    std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + ")");
}

}  // namespace detail

template <typename S>
Var<S> detach(const Var<S>& a) {
  return a.tape().constant(a.value());
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  Tape<S>& tape = detail::common_tape(a, b);
  SPIKEBERT_REQUIRE(a.cols() == b.rows(), "matmul: inner dimensions differ");
  const int ia = a.id(), ib = b.id();
  Matrix<S> out = a.value() * b.value();
  return tape.record(OpKind::kMatmul, {ia, ib}, std::move(out),
                     [ia, ib](Tape<S>& t, const Matrix<S>& g) {
                       if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                       if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                     });
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  Tape<S>& tape = detail::common_tape(a, b);
  detail::require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return tape.record(OpKind::kAdd, {ia, ib}, a.value() + b.value(),
                     [ia, ib](Tape<S>& t, const Matrix<S>& g) {
                       t.accumulate(ia, g);
                       t.accumulate(ib, g);
                     });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  Tape<S>& tape = detail::common_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return tape.record(OpKind::kSub, {ia, ib}, a.value() - b.value(),
                     [ia, ib](Tape<S>& t, const Matrix<S>& g) {
                       t.accumulate(ia, g);
                       if (t.requires_grad(ib)) t.accumulate(ib, -g);
                     });
}

/// Elementwise product.
template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  Tape<S>& tape = detail::common_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return tape.record(OpKind::kMul, {ia, ib}, a.value().cwiseProduct(b.value()),
                     [ia, ib](Tape<S>& t, const Matrix<S>& g) {
                       if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                       if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                     });
}

/// Elementwise product with a constant mask or weight matrix.
template <typename S>
Var<S> mul_const(const Var<S>& a, Matrix<S> c) {
  SPIKEBERT_REQUIRE(a.rows() == c.rows() && a.cols() == c.cols(), "mul_const: shape mismatch");
  const int ia = a.id();
  Matrix<S> out = a.value().cwiseProduct(c);
  return a.tape().record(OpKind::kMulConst, {ia}, std::move(out),
                         [ia, c = std::move(c)](Tape<S>& t, const Matrix<S>& g) {
                           t.accumulate(ia, g.cwiseProduct(c));
                         });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  const int ia = a.id();
  return a.tape().record(OpKind::kScale, {ia}, a.value() * factor,
                         [ia, factor](Tape<S>& t, const Matrix<S>& g) { t.accumulate(ia, g * factor); });
}

/// Adds a 1 x cols row vector to every row of `a`.
template <typename S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
  Tape<S>& tape = detail::common_tape(a, row);
  SPIKEBERT_REQUIRE(row.rows() == 1 && row.cols() == a.cols(), "add_row: expected a 1 x cols row");
  const int ia = a.id(), ir = row.id();
  Matrix<S> out = a.value().rowwise() + row.value().row(0);
  return tape.record(OpKind::kAddRow, {ia, ir}, std::move(out),
                     [ia, ir](Tape<S>& t, const Matrix<S>& g) {
                       t.accumulate(ia, g);
                       if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
                     });
}

/// axis 0 sums over rows (result 1 x cols); axis 1 sums over columns (rows x 1).
template <typename S>
Var<S> sum_axis(const Var<S>& a, int axis) {
  SPIKEBERT_REQUIRE(axis == 0 || axis == 1, "sum_axis: axis must be 0 or 1");
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  Matrix<S> out = axis == 0 ? Matrix<S>(a.value().colwise().sum()) : Matrix<S>(a.value().rowwise().sum());
  return a.tape().record(OpKind::kSumAxis, {ia}, std::move(out),
                         [ia, axis, rows, cols](Tape<S>& t, const Matrix<S>& g) {
                           if (axis == 0) {
                             t.accumulate(ia, g.replicate(rows, 1));
                           } else {
                             t.accumulate(ia, g.replicate(1, cols));
                           }
                         });
}

template <typename S>
Var<S> mean_axis(const Var<S>& a, int axis) {
  const S n = S(axis == 0 ? a.rows() : a.cols());
  Var<S> s = sum_axis(a, axis);
  return scale(s, S(1) / n);
}

template <typename S>
Var<S> sum_all(const Var<S>& a) {
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  Matrix<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(OpKind::kSumAll, {ia}, std::move(out),
                         [ia, rows, cols](Tape<S>& t, const Matrix<S>& g) {
                           t.accumulate(ia, Matrix<S>::Constant(rows, cols, g(0, 0)));
                         });
}

template <typename S>
Var<S> mean_all(const Var<S>& a) {
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  const S inv = S(1) / S(rows * cols);
  Matrix<S> out(1, 1);
  out(0, 0) = a.value().sum() * inv;
  return a.tape().record(OpKind::kMeanAll, {ia}, std::move(out),
                         [ia, rows, cols, inv](Tape<S>& t, const Matrix<S>& g) {
                           t.accumulate(ia, Matrix<S>::Constant(rows, cols, g(0, 0) * inv));
                         });
}

/// Row-wise layer normalization with learnable 1 x cols gain and bias.
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps = S(1e-5)) {
  Tape<S>& tape = detail::common_tape(x, gain);
  detail::common_tape(x, bias);
  const Eigen::Index cols = x.cols();
  SPIKEBERT_REQUIRE(gain.rows() == 1 && gain.cols() == cols && bias.rows() == 1 && bias.cols() == cols,
                    "layer_norm: gain/bias must be 1 x cols");
  const Matrix<S>& xv = x.value();
  const Eigen::Matrix<S, Eigen::Dynamic, 1> mean = xv.rowwise().mean();
  Matrix<S> centered = xv.colwise() - mean;
  const Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std =
      ((centered.array().square().rowwise().sum() / S(cols)) + eps).rsqrt().matrix();
  Matrix<S> xhat = inv_std.asDiagonal() * centered;
  Matrix<S> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix().rowwise() +
                  bias.value().row(0);
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape.record(
      OpKind::kLayerNorm, {ix, ig, ib}, std::move(out),
      [ix, ig, ib, xhat = std::move(xhat), inv_std](Tape<S>& t, const Matrix<S>& g) {
        if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (!t.requires_grad(ix)) return;
        const Matrix<S> dxhat = (g.array().rowwise() * t.value(ig).row(0).array()).matrix();
        const Eigen::Matrix<S, Eigen::Dynamic, 1> m1 = dxhat.rowwise().mean();
        const Eigen::Matrix<S, Eigen::Dynamic, 1> m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
        Matrix<S> dx = dxhat.colwise() - m1;
        dx -= m2.asDiagonal() * xhat;
        t.accumulate(ix, inv_std.asDiagonal() * dx);
      });
}

/// x * weight + bias (bias broadcast over rows).
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  return add_row(matmul(x, weight), bias);
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight) {
  return matmul(x, weight);
}

/// Gathers table rows; out-of-range ids raise InputError.
template <typename S>
Var<S> embedding(const Var<S>& table, std::vector<int> ids) {
  const Eigen::Index vocab = table.rows();
  Matrix<S> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= vocab) {
      throw InputError("embedding: id " + std::to_string(ids[r]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    out.row(static_cast<Eigen::Index>(r)) = table.value().row(ids[r]);
  }
  const int it = table.id();
  return table.tape().record(OpKind::kEmbedding, {it}, std::move(out),
                             [it, ids = std::move(ids)](Tape<S>& t, const Matrix<S>& g) {
                               Matrix<S> d = Matrix<S>::Zero(t.value(it).rows(), t.value(it).cols());
                               for (std::size_t r = 0; r < ids.size(); ++r) {
                                 d.row(ids[r]) += g.row(static_cast<Eigen::Index>(r));
                               }
                               t.accumulate(it, d);
                             });
}

/// Spiking nonlinearity. The forward pass is H(u - threshold) in kHard mode
/// or the arctan relaxation in kSoft mode; the backward pass always uses the
/// arctan surrogate derivative centred on the threshold.
template <typename S>
Var<S> spike(const Var<S>& u, S threshold, S alpha, SpikeMode mode = SpikeMode::kHard) {
  const int iu = u.id();
  Array<S> shifted = u.value().array() - threshold;
  Matrix<S> out = mode == SpikeMode::kHard ? heaviside(u.value().array(), threshold).matrix()
                                           : soft_spike(shifted, alpha).matrix();
  return u.tape().record(mode == SpikeMode::kHard ? OpKind::kSpike : OpKind::kSoftSpike, {iu},
                         std::move(out),
                         [iu, alpha, shifted = std::move(shifted)](Tape<S>& t, const Matrix<S>& g) {
                           t.accumulate(iu, (g.array() * surrogate_grad(shifted, alpha)).matrix());
                         });
}

/// arctan relaxation of the step at zero; derivative is surrogate_grad.
template <typename S>
Var<S> soft_spike(const Var<S>& u_minus_thr, S alpha) {
  return spike(u_minus_thr, S(0), alpha, SpikeMode::kSoft);
}

/// Row-wise softmax.
template <typename S>
Var<S> softmax(const Var<S>& a) {
  Matrix<S> out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    out.row(r).array() -= out.row(r).maxCoeff();
    out.row(r) = out.row(r).array().exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  const int ia = a.id();
  Matrix<S> y = out;
  return a.tape().record(OpKind::kSoftmax, {ia}, std::move(out),
                         [ia, y = std::move(y)](Tape<S>& t, const Matrix<S>& g) {
                           const Eigen::Matrix<S, Eigen::Dynamic, 1> dot = g.cwiseProduct(y).rowwise().sum();
                           t.accumulate(ia, y.cwiseProduct(g.colwise() - dot));
                         });
}

/// Batch mean of KL(p_r || q_r) over rows, with q floored at eps. Rows of p
/// and q must each sum to 1 within 1e-5.
template <typename S>
Var<S> kl_divergence(Matrix<S> p, const Var<S>& q, S eps = S(1e-8)) {
  SPIKEBERT_REQUIRE(p.rows() == q.rows() && p.cols() == q.cols(), "kl_divergence: shape mismatch");
  const Matrix<S>& qv = q.value();
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    SPIKEBERT_REQUIRE(std::abs(p.row(r).sum() - S(1)) <= S(1e-5) &&
                          std::abs(qv.row(r).sum() - S(1)) <= S(1e-5) && p.row(r).minCoeff() >= 0 &&
                          qv.row(r).minCoeff() >= 0,
                      "kl_divergence: rows must be probability distributions");
  }
  const S inv_rows = S(1) / S(p.rows());
  S total = 0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      if (p(r, c) > 0) total += p(r, c) * (std::log(p(r, c)) - std::log(std::max(qv(r, c), eps)));
    }
  }
  Matrix<S> out(1, 1);
  out(0, 0) = total * inv_rows;
  const int iq = q.id();
  return q.tape().record(OpKind::kKlDivergence, {iq}, std::move(out),
                         [iq, eps, inv_rows, p = std::move(p)](Tape<S>& t, const Matrix<S>& g) {
                           const Matrix<S>& qv = t.value(iq);
                           Matrix<S> d = Matrix<S>::Zero(qv.rows(), qv.cols());
                           for (Eigen::Index r = 0; r < qv.rows(); ++r) {
                             for (Eigen::Index c = 0; c < qv.cols(); ++c) {
                               if (qv(r, c) > eps) d(r, c) = -p(r, c) / qv(r, c);
                             }
                           }
                           t.accumulate(iq, d * (g(0, 0) * inv_rows));
                         });
}

/// Batch mean of -log q[label] with q floored at eps.
template <typename S>
Var<S> cross_entropy(const Var<S>& q, std::vector<int> labels, S eps = S(1e-8)) {
  SPIKEBERT_REQUIRE(static_cast<Eigen::Index>(labels.size()) == q.rows(),
                    "cross_entropy: one label per row required");
  const Matrix<S>& qv = q.value();
  S total = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || labels[r] >= qv.cols()) {
      throw InputError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " +
                       std::to_string(qv.cols()) + ")");
    }
    total -= std::log(std::max(qv(static_cast<Eigen::Index>(r), labels[r]), eps));
  }
  const S inv_rows = S(1) / S(labels.size());
  Matrix<S> out(1, 1);
  out(0, 0) = total * inv_rows;
  const int iq = q.id();
  return q.tape().record(OpKind::kCrossEntropy, {iq}, std::move(out),
                         [iq, eps, inv_rows, labels = std::move(labels)](Tape<S>& t, const Matrix<S>& g) {
                           const Matrix<S>& qv = t.value(iq);
                           Matrix<S> d = Matrix<S>::Zero(qv.rows(), qv.cols());
                           for (std::size_t r = 0; r < labels.size(); ++r) {
                             const S v = qv(static_cast<Eigen::Index>(r), labels[r]);
                             if (v > eps) d(static_cast<Eigen::Index>(r), labels[r]) = -g(0, 0) * inv_rows / v;
                           }
                           t.accumulate(iq, d);
                         });
}

/// Batch mean of the cross-entropy of softmax(logits) against integer labels.
template <typename S>
Var<S> softmax_cross_entropy(const Var<S>& logits, std::vector<int> labels) {
  SPIKEBERT_REQUIRE(static_cast<Eigen::Index>(labels.size()) == logits.rows(),
                    "softmax_cross_entropy: one label per row required");
  const Matrix<S>& z = logits.value();
  Matrix<S> prob(z.rows(), z.cols());
  S total = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= z.cols()) {
      throw InputError("softmax_cross_entropy: label " + std::to_string(label) + " out of range");
    }
    const S m = z.row(r).maxCoeff();
    prob.row(r) = (z.row(r).array() - m).exp().matrix();
    const S denom = prob.row(r).sum();
    prob.row(r) /= denom;
    total += m + std::log(denom) - z(r, label);
  }
  const S inv_rows = S(1) / S(z.rows());
  Matrix<S> out(1, 1);
  out(0, 0) = total * inv_rows;
  const int il = logits.id();
  return logits.tape().record(
      OpKind::kSoftmaxCrossEntropy, {il}, std::move(out),
      [il, inv_rows, labels = std::move(labels), prob = std::move(prob)](Tape<S>& t, const Matrix<S>& g) {
        Matrix<S> d = prob;
        for (std::size_t r = 0; r < labels.size(); ++r) d(static_cast<Eigen::Index>(r), labels[r]) -= S(1);
        t.accumulate(il, d * (g(0, 0) * inv_rows));
      });
}

/// Frobenius norm of each consecutive block of `rows_per_group` rows.
/// Returns a groups x 1 column. The gradient at a zero block is taken as 0.
template <typename S>
Var<S> group_l2_norm(const Var<S>& a, Eigen::Index rows_per_group) {
  SPIKEBERT_REQUIRE(rows_per_group > 0 && a.rows() % rows_per_group == 0,
                    "group_l2_norm: rows not divisible by group size");
  const Eigen::Index groups = a.rows() / rows_per_group;
  Matrix<S> out(groups, 1);
  for (Eigen::Index gi = 0; gi < groups; ++gi) {
    out(gi, 0) = a.value().middleRows(gi * rows_per_group, rows_per_group).norm();
  }
  const int ia = a.id();
  Matrix<S> norms = out;
  return a.tape().record(OpKind::kL2Norm, {ia}, std::move(out),
                         [ia, rows_per_group, norms = std::move(norms)](Tape<S>& t, const Matrix<S>& g) {
                           const Matrix<S>& x = t.value(ia);
                           Matrix<S> d = Matrix<S>::Zero(x.rows(), x.cols());
                           for (Eigen::Index gi = 0; gi < norms.rows(); ++gi) {
                             if (norms(gi, 0) > 0) {
                               d.middleRows(gi * rows_per_group, rows_per_group) =
                                   x.middleRows(gi * rows_per_group, rows_per_group) * (g(gi, 0) / norms(gi, 0));
                             }
                           }
                           t.accumulate(ia, d);
                         });
}

/// Frobenius norm of the whole matrix as a 1 x 1 value.
template <typename S>
Var<S> l2_norm(const Var<S>& a) {
  return group_l2_norm(a, a.rows());
}

template <typename S>
Var<S> slice_rows(const Var<S>& a, Eigen::Index start, Eigen::Index count) {
  SPIKEBERT_REQUIRE(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape().record(OpKind::kSliceRows, {ia}, a.value().middleRows(start, count),
                         [ia, start, count, rows, cols](Tape<S>& t, const Matrix<S>& g) {
                           Matrix<S> d = Matrix<S>::Zero(rows, cols);
                           d.middleRows(start, count) = g;
                           t.accumulate(ia, d);
                         });
}

template <typename S>
Var<S> concat_rows(std::span<const Var<S>> parts) {
  SPIKEBERT_REQUIRE(!parts.empty(), "concat_rows: nothing to concatenate");
  Tape<S>& tape = parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  for (const Var<S>& p : parts) {
    SPIKEBERT_REQUIRE(&p.tape() == &tape && p.cols() == cols, "concat_rows: incompatible part");
    ids.push_back(p.id());
    offsets.push_back(rows);
    rows += p.rows();
  }
  Matrix<S> out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) out.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
  std::vector<int> inputs = ids;
  return tape.record(OpKind::kConcatRows, std::move(inputs), std::move(out),
                     [ids, offsets](Tape<S>& t, const Matrix<S>& g) {
                       for (std::size_t i = 0; i < ids.size(); ++i) {
                         if (t.requires_grad(ids[i])) {
                           t.accumulate(ids[i], g.middleRows(offsets[i], t.value(ids[i]).rows()));
                         }
                       }
                     });
}

/// Geometry of a time-stacked activation: rows are ordered (t, sample, position).
struct SeqLayout {
  Eigen::Index time_steps;
  Eigen::Index batch;
  Eigen::Index positions;

  Eigen::Index rows_per_step() const { return batch * positions; }
  Eigen::Index rows() const { return time_steps * batch * positions; }
};

/// Receives each unscaled per-(step, sample, head) attention score matrix.
template <typename S>
using ScoreObserver = std::function<void(const Matrix<S>& scores)>;

/// N x N spiking self-attention over binary Q, K, V stacks of shape
/// (T*B*N) x D. For every step, sample and head the score map Q_h K_h^T has
/// columns of padded keys zeroed (key_mask is B x N, 1 = real token), and the
/// output block is scores * V_h * tau. No softmax.
template <typename S>
Var<S> spiking_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, const Matrix<S>& key_mask,
                         const SeqLayout& layout, Eigen::Index heads, S tau,
                         const ScoreObserver<S>* observer = nullptr) {
  Tape<S>& tape = detail::common_tape(q, k);
  detail::common_tape(q, v);
  detail::require_same_shape(q, k, "spiking_attention");
  detail::require_same_shape(q, v, "spiking_attention");
  const Eigen::Index dim = q.cols();
  SPIKEBERT_REQUIRE(heads > 0 && dim % heads == 0, "spiking_attention: dim not divisible by heads");
  SPIKEBERT_REQUIRE(q.rows() == layout.rows(), "spiking_attention: rows disagree with layout");
  SPIKEBERT_REQUIRE(key_mask.rows() == layout.batch && key_mask.cols() == layout.positions,
                    "spiking_attention: key mask must be batch x positions");
  const Eigen::Index hd = dim / heads, n = layout.positions;
  const Matrix<S>& qv = q.value();
  const Matrix<S>& kv = k.value();
  const Matrix<S>& vv = v.value();
  Matrix<S> out(qv.rows(), dim);
  Matrix<S> scores(n, n);
  for (Eigen::Index t = 0; t < layout.time_steps; ++t) {
    for (Eigen::Index b = 0; b < layout.batch; ++b) {
      const Eigen::Index r0 = (t * layout.batch + b) * n;
      for (Eigen::Index h = 0; h < heads; ++h) {
        scores.noalias() = qv.block(r0, h * hd, n, hd) * kv.block(r0, h * hd, n, hd).transpose();
        scores = scores * key_mask.row(b).asDiagonal();
        if (observer != nullptr) (*observer)(scores);
        out.block(r0, h * hd, n, hd).noalias() = (scores * vv.block(r0, h * hd, n, hd)) * tau;
      }
    }
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return tape.record(
      OpKind::kAttention, {iq, ik, iv}, std::move(out),
      [iq, ik, iv, key_mask, layout, heads, tau, hd, n](Tape<S>& t, const Matrix<S>& g) {
        const Matrix<S>& qv = t.value(iq);
        const Matrix<S>& kv = t.value(ik);
        const Matrix<S>& vv = t.value(iv);
        Matrix<S> dq = Matrix<S>::Zero(qv.rows(), qv.cols());
        Matrix<S> dk = dq, dv = dq;
        Matrix<S> scores(n, n), dscores(n, n);
        for (Eigen::Index ts = 0; ts < layout.time_steps; ++ts) {
          for (Eigen::Index b = 0; b < layout.batch; ++b) {
            const Eigen::Index r0 = (ts * layout.batch + b) * n;
            const auto mask = key_mask.row(b).asDiagonal();
            for (Eigen::Index h = 0; h < heads; ++h) {
              const auto qh = qv.block(r0, h * hd, n, hd);
              const auto kh = kv.block(r0, h * hd, n, hd);
              const auto gh = g.block(r0, h * hd, n, hd);
              scores.noalias() = qh * kh.transpose();
              scores = scores * mask;
              dv.block(r0, h * hd, n, hd).noalias() = scores.transpose() * gh * tau;
              dscores.noalias() = gh * vv.block(r0, h * hd, n, hd).transpose() * tau;
              dscores = dscores * mask;
              dq.block(r0, h * hd, n, hd).noalias() = dscores * kh;
              dk.block(r0, h * hd, n, hd).noalias() = dscores.transpose() * qh;
            }
          }
        }
        t.accumulate(iq, dq);
        t.accumulate(ik, dk);
        t.accumulate(iv, dv);
      });
}

/// Sum over the time axis of a (T*R) x D stack, giving R x D.
template <typename S>
Var<S> time_sum(const Var<S>& stack, Eigen::Index time_steps) {
  SPIKEBERT_REQUIRE(time_steps > 0 && stack.rows() % time_steps == 0, "time_sum: bad time axis");
  const Eigen::Index r = stack.rows() / time_steps;
  Var<S> acc = slice_rows(stack, 0, r);
  for (Eigen::Index t = 1; t < time_steps; ++t) acc = add(acc, slice_rows(stack, t * r, r));
  return acc;
}

}  // namespace spikebert::ad
