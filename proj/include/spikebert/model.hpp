// SPDX-License-Identifier: Apache-2.0
//
// Spiking transformer encoder for text: embedding + LIF layer, a stack of
// spike transformer blocks with N x N spiking self-attention, and a
// rate-coded classification head.
//
// Activations between layers are time-stacked matrices: (T*B*N) x D with rows
// ordered (time step, sample, position). Every block output is binary.
#pragma once

#include <Eigen/Core>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spikebert/autodiff.hpp"
#include "spikebert/bptt.hpp"
#include "spikebert/config.hpp"
#include "spikebert/ops.hpp"

namespace spikebert {

template <typename S>
using Matrix = ad::Matrix<S>;

/// Named parameter matrices. Ordered by name so iteration, checkpoints and
/// optimizer updates are deterministic.
template <typename S>
using Parameters = std::map<std::string, Matrix<S>>;

/// Names of the per-block parameters, e.g. block_param(0, "q.weight") == "block0.q.weight".
inline std::string block_param(int block, const std::string& name) {
  return "block" + std::to_string(block) + "." + name;
}

/// Token ids for a batch, row-major batch x positions, padded with kPadId.
struct TokenBatch {
  Eigen::Index batch = 0;
  Eigen::Index positions = 0;
  std::vector<int> ids;

  TokenBatch() = default;
  TokenBatch(Eigen::Index b, Eigen::Index n, std::vector<int> token_ids)
      : batch(b), positions(n), ids(std::move(token_ids)) {
    SPIKEBERT_REQUIRE(static_cast<Eigen::Index>(ids.size()) == b * n, "TokenBatch: ids size != batch*positions");
  }

  int at(Eigen::Index b, Eigen::Index n) const { return ids[static_cast<std::size_t>(b * positions + n)]; }

  /// batch x positions, 1 for real tokens and 0 for padding.
  template <typename S>
  Matrix<S> key_mask() const {
    Matrix<S> mask(batch, positions);
    for (Eigen::Index b = 0; b < batch; ++b)
      for (Eigen::Index n = 0; n < positions; ++n) mask(b, n) = at(b, n) == kPadId ? S(0) : S(1);
    return mask;
  }
};

/// Fresh parameters for `config`. Linear weights are U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// biases zero, norm gains one; token embeddings N(0, 1), positions N(0, 0.1).
template <typename S>
Parameters<S> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const Eigen::Index d = config.hidden_dim, f = static_cast<Eigen::Index>(config.hidden_dim) * config.ffn_mult;
  auto normal = [&](Eigen::Index rows, Eigen::Index cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = S(dist(rng));
    return m;
  };
  auto uniform = [&](Eigen::Index fan_in, Eigen::Index fan_out) {
    const double bound = 1.0 / std::sqrt(double(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix<S> m(fan_in, fan_out);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = S(dist(rng));
    return m;
  };
  auto zeros = [](Eigen::Index cols) { return Matrix<S>::Zero(1, cols).eval(); };
  auto ones = [](Eigen::Index cols) { return Matrix<S>::Ones(1, cols).eval(); };

  Parameters<S> p;
  p["embed.token"] = normal(config.vocab_size, d, 1.0);
  p["embed.position"] = normal(config.max_len, d, 0.1);
  for (int i = 0; i < config.depth; ++i) {
    for (const char* proj : {"q", "k", "v"}) {
      p[block_param(i, std::string(proj) + ".weight")] = uniform(d, d);
      p[block_param(i, std::string(proj) + "_norm.gain")] = ones(d);
      p[block_param(i, std::string(proj) + "_norm.bias")] = zeros(d);
    }
    p[block_param(i, "attn_out.weight")] = uniform(d, d);
    p[block_param(i, "attn_out.bias")] = zeros(d);
    p[block_param(i, "attn_norm.gain")] = ones(d);
    p[block_param(i, "attn_norm.bias")] = zeros(d);
    p[block_param(i, "ffn1.weight")] = uniform(d, f);
    p[block_param(i, "ffn1.bias")] = zeros(f);
    p[block_param(i, "ffn1_norm.gain")] = ones(f);
    p[block_param(i, "ffn1_norm.bias")] = zeros(f);
    p[block_param(i, "ffn2.weight")] = uniform(f, d);
    p[block_param(i, "ffn2.bias")] = zeros(d);
    p[block_param(i, "ffn2_norm.gain")] = ones(d);
    p[block_param(i, "ffn2_norm.bias")] = zeros(d);
  }
  p["head.weight"] = uniform(d, config.num_classes);
  p["head.bias"] = zeros(config.num_classes);
  return p;
}

/// Parameters placed on a tape, looked up by name.
template <typename S>
class BoundParameters {
 public:
  BoundParameters() = default;

  /// Every parameter becomes a leaf (trainable) or a constant.
  BoundParameters(ad::Tape<S>& tape, const Parameters<S>& params, bool trainable = true) {
    for (const auto& [name, value] : params) {
      vars_.emplace(name, trainable ? tape.leaf(value) : tape.constant(value));
    }
  }

  const ad::Var<S>& operator[](const std::string& name) const {
    const auto it = vars_.find(name);
    SPIKEBERT_REQUIRE(it != vars_.end(), "missing parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

  /// Gradients after Tape::backward, keyed like the parameters.
  Parameters<S> gradients() const {
    Parameters<S> g;
    for (const auto& [name, var] : vars_) g.emplace(name, var.grad());
    return g;
  }

  const std::map<std::string, ad::Var<S>>& vars() const { return vars_; }

 private:
  std::map<std::string, ad::Var<S>> vars_;
};

template <typename S>
struct ForwardOptions {
  ad::UnrollOptions unroll{};
  /// Sees every unscaled attention score map when set.
  const ad::ScoreObserver<S>* score_observer = nullptr;
};

template <typename S>
struct ForwardResult {
  ad::Var<S> logits;                     // B x num_classes
  std::vector<ad::Var<S>> layer_features;  // one (T*B*N) x D binary stack per block
  ad::Var<S> embedding;                  // (B*N) x D pre-spike embedding
  ad::Var<S> embedding_spikes;           // (T*B*N) x D
  /// Named input tensors of the compute layers, for firing-rate measurement.
  std::vector<std::pair<std::string, ad::Var<S>>> probes;
};

namespace detail {

template <typename S>
LifParams<S> lif(const ModelConfig& c, double threshold) {
  return LifParams<S>{S(threshold), S(c.decay), S(c.surrogate_alpha), ResetMode::kSubtractThreshold};
}

template <typename S>
ad::Var<S> repeat_rows(const ad::Var<S>& x, Eigen::Index times) {
  std::vector<ad::Var<S>> parts(static_cast<std::size_t>(times), x);
  return ad::concat_rows(std::span<const ad::Var<S>>(parts));
}

/// SN(LN(x W [+ b]))
template <typename S>
ad::Var<S> spiking_projection(const ad::Var<S>& x, const BoundParameters<S>& p, int block, const std::string& proj,
                              const std::string& norm, bool with_bias, double threshold, const ModelConfig& c,
                              const ForwardOptions<S>& opt) {
  ad::Var<S> z = with_bias ? ad::linear(x, p[block_param(block, proj + ".weight")], p[block_param(block, proj + ".bias")])
                           : ad::linear(x, p[block_param(block, proj + ".weight")]);
  z = ad::layer_norm(z, p[block_param(block, norm + ".gain")], p[block_param(block, norm + ".bias")]);
  return ad::lif_layer(z, c.time_steps, lif<S>(c, threshold), opt.unroll);
}

}  // namespace detail

/// Token + learned positional embedding (E_sm, no time axis), broadcast over
/// T steps and passed through a LIF layer. Returns (E_sm, spikes).
template <typename S>
std::pair<ad::Var<S>, ad::Var<S>> embed(const TokenBatch& tokens, const BoundParameters<S>& p,
                                        const ModelConfig& config, const ForwardOptions<S>& opt = {}) {
  SPIKEBERT_REQUIRE(tokens.positions <= config.max_len, "embed: sequence longer than max_len");
  std::vector<int> positions(tokens.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % tokens.positions);
  ad::Var<S> e = ad::add(ad::embedding(p["embed.token"], tokens.ids), ad::embedding(p["embed.position"], positions));
  ad::Var<S> currents = detail::repeat_rows(e, config.time_steps);
  ad::Var<S> spikes = ad::lif_layer(currents, config.time_steps, detail::lif<S>(config, config.thr_general), opt.unroll);
  return {e, spikes};
}

/// Q, K, V = SN(LN(x W)); output = SN(LN(Linear(Q K^T V * tau))).
template <typename S>
ad::Var<S> spiking_self_attention(const ad::Var<S>& x, const TokenBatch& tokens, const BoundParameters<S>& p,
                                  int block, const ModelConfig& config, const ForwardOptions<S>& opt = {},
                                  ForwardResult<S>* probes = nullptr) {
  const ad::SeqLayout layout{config.time_steps, tokens.batch, tokens.positions};
  ad::Var<S> q = detail::spiking_projection(x, p, block, "q", "q_norm", false, config.thr_ssa, config, opt);
  ad::Var<S> k = detail::spiking_projection(x, p, block, "k", "k_norm", false, config.thr_ssa, config, opt);
  ad::Var<S> v = detail::spiking_projection(x, p, block, "v", "v_norm", false, config.thr_ssa, config, opt);
  ad::Var<S> attn = ad::spiking_attention(q, k, v, tokens.key_mask<S>(), layout, config.heads, S(config.tau),
                                          opt.score_observer);
  if (probes != nullptr) {
    probes->probes.emplace_back(block_param(block, "q"), q);
    probes->probes.emplace_back(block_param(block, "v"), v);
    probes->probes.emplace_back(block_param(block, "attn_product"), attn);
  }
  return detail::spiking_projection(attn, p, block, "attn_out", "attn_norm", true, config.thr_ssa, config, opt);
}

/// y1 = x + SSA(x); y2 = y1 + SN(LN(Linear(SN(LN(Linear(y1)))))); output SN(y2).
template <typename S>
ad::Var<S> encoder_block(const ad::Var<S>& x, const TokenBatch& tokens, const BoundParameters<S>& p, int block,
                         const ModelConfig& config, const ForwardOptions<S>& opt = {},
                         ForwardResult<S>* probes = nullptr) {
  if (probes != nullptr) probes->probes.emplace_back(block_param(block, "input"), x);
  ad::Var<S> y1 = ad::add(x, spiking_self_attention(x, tokens, p, block, config, opt, probes));
  ad::Var<S> hidden = detail::spiking_projection(y1, p, block, "ffn1", "ffn1_norm", true, config.thr_general, config, opt);
  ad::Var<S> ffn = detail::spiking_projection(hidden, p, block, "ffn2", "ffn2_norm", true, config.thr_general, config, opt);
  if (probes != nullptr) {
    probes->probes.emplace_back(block_param(block, "residual"), y1);
    probes->probes.emplace_back(block_param(block, "ffn_hidden"), hidden);
  }
  ad::Var<S> y2 = ad::add(y1, ffn);
  return ad::lif_layer(y2, config.time_steps, detail::lif<S>(config, config.thr_general), opt.unroll);
}

/// B x (T*B*N) matrix averaging each sample's real (non-pad) positions over all steps.
template <typename S>
Matrix<S> pooling_matrix(const TokenBatch& tokens, Eigen::Index time_steps) {
  const Eigen::Index b = tokens.batch, n = tokens.positions;
  Matrix<S> pool = Matrix<S>::Zero(b, time_steps * b * n);
  for (Eigen::Index s = 0; s < b; ++s) {
    Eigen::Index real = 0;
    for (Eigen::Index i = 0; i < n; ++i) real += tokens.at(s, i) != kPadId;
    if (real == 0) continue;
    const S w = S(1) / S(real * time_steps);
    for (Eigen::Index t = 0; t < time_steps; ++t)
      for (Eigen::Index i = 0; i < n; ++i)
        if (tokens.at(s, i) != kPadId) pool(s, (t * b + s) * n + i) = w;
  }
  return pool;
}

/// Full pass: embed -> depth x encoder_block -> rate-pooled affine head.
template <typename S>
ForwardResult<S> forward(const TokenBatch& tokens, const BoundParameters<S>& p, const ModelConfig& config,
                         const ForwardOptions<S>& opt = {}) {
  config.validate();
  ForwardResult<S> out;
  auto [e, x] = embed(tokens, p, config, opt);
  out.embedding = e;
  out.embedding_spikes = x;
  for (int i = 0; i < config.depth; ++i) {
    x = encoder_block(x, tokens, p, i, config, opt, &out);
    out.layer_features.push_back(x);
  }
  out.probes.emplace_back("final", x);
  ad::Var<S> pooled = ad::matmul(x.tape().constant(pooling_matrix<S>(tokens, config.time_steps)), x);
  out.logits = ad::linear(pooled, p["head.weight"], p["head.bias"]);
  return out;
}

/// Inference-only convenience: logits for a batch with frozen parameters.
template <typename S>
Matrix<S> predict_logits(const TokenBatch& tokens, const Parameters<S>& params, const ModelConfig& config) {
  ad::Tape<S> tape;
  BoundParameters<S> bound(tape, params, false);
  return forward(tokens, bound, config).logits.value();
}

}  // namespace spikebert
