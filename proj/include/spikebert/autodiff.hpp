// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode differentiation over dense matrices.
//
// A Tape records every operation of one forward pass in execution order, so
// the node list is topologically sorted by construction. Unrolling T spiking
// time steps simply records T copies of the per-step graph; weights shared
// across steps are one leaf node whose gradient sums the contributions of all
// steps. Rebuild the tape for every forward pass.
#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "spikebert/error.hpp"

namespace spikebert::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

enum class OpKind {
  kLeaf,
  kConstant,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kMulConst,
  kScale,
  kAddRow,
  kSumAxis,
  kMeanAxis,
  kSumAll,
  kMeanAll,
  kLayerNorm,
  kLinear,
  kEmbedding,
  kSpike,
  kSoftSpike,
  kSoftmax,
  kKlDivergence,
  kCrossEntropy,
  kSoftmaxCrossEntropy,
  kL2Norm,
  kSliceRows,
  kConcatRows,
  kAttention,
};

template <typename Scalar>
class Tape;

/// Handle to one node of a Tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  Matrix<Scalar> grad() const { return tape_->grad(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  /// Receives the upstream gradient of the node and pushes contributions
  /// into its inputs via accumulate().
  using BackwardFn = std::function<void(Tape&, const Mat& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable input; receives a gradient.
  Var<Scalar> leaf(Mat value) { return push(OpKind::kLeaf, {}, std::move(value), {}, true); }

  /// Input that never receives a gradient.
  Var<Scalar> constant(Mat value) { return push(OpKind::kConstant, {}, std::move(value), {}, false); }

  /// Appends an operation whose inputs are already on this tape.
  Var<Scalar> record(OpKind kind, std::vector<int> inputs, Mat output, BackwardFn backward) {
    bool needs_grad = false;
    for (int in : inputs) {
      SPIKEBERT_REQUIRE(in >= 0 && in < static_cast<int>(nodes_.size()),
                        "Tape::record: input is not on this tape");
      needs_grad = needs_grad || nodes_[in].requires_grad;
    }
    return push(kind, std::move(inputs), std::move(output), std::move(backward), needs_grad);
  }

  /// Reverse sweep from a scalar loss. Gradients accumulate into every node
  /// that requires one; call once per tape.
  void backward(const Var<Scalar>& loss) {
    SPIKEBERT_REQUIRE(&loss.tape() == this, "Tape::backward: loss belongs to another tape");
    const Mat& v = value(loss.id());
    SPIKEBERT_REQUIRE(v.rows() == 1 && v.cols() == 1, "Tape::backward: loss must be a scalar");
    if (!nodes_[loss.id()].requires_grad) return;
    accumulate(loss.id(), Mat::Ones(1, 1));
    for (int id = loss.id(); id >= 0; --id) {
      Node& node = nodes_[id];
      if (!node.backward || node.grad.size() == 0) continue;
      node.backward(*this, node.grad);
    }
  }

  void accumulate(int id, const Mat& g) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
      node.grad = g;
    } else {
      node.grad += g;
    }
  }

  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const Mat& value(int id) const { return nodes_[id].value; }
  OpKind kind(int id) const { return nodes_[id].kind; }
  const std::vector<int>& inputs(int id) const { return nodes_[id].inputs; }

  /// Gradient of the last backward() with respect to node `id` (zeros when untouched).
  Mat grad(int id) const {
    const Node& node = nodes_[id];
    if (node.grad.size() == 0) return Mat::Zero(node.value.rows(), node.value.cols());
    return node.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    Mat value;
    Mat grad;
    BackwardFn backward;
    bool requires_grad;
  };

  Var<Scalar> push(OpKind kind, std::vector<int> inputs, Mat value, BackwardFn backward,
                   bool requires_grad) {
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value), Mat{},
                          requires_grad ? std::move(backward) : BackwardFn{}, requires_grad});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
};

}  // namespace spikebert::ad
