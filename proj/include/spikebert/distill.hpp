// SPDX-License-Identifier: Apache-2.0
//
// Two-stage distillation from a float teacher into the spiking student.
//
// Stage 1 aligns embeddings and time-summed hidden spikes with teacher
// features: L1 = sigma1 * sum_i L_fea^i + sigma2 * L_emb.
// Stage 2 adds logit KL and label cross-entropy:
// L2 = lambda1 * sum_i L_fea^i + lambda2 * L_emb + lambda3 * KL + lambda4 * CE.
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "spikebert/config.hpp"
#include "spikebert/model.hpp"
#include "spikebert/ops.hpp"
#include "spikebert/optim.hpp"
#include "spikebert/teacher_io.hpp"

namespace spikebert {

/// 1-based (student block, teacher block) pair.
struct LayerPair {
  int student;
  int teacher;
  bool operator==(const LayerPair&) const = default;
};
using LayerMap = std::vector<LayerPair>;

/// Student block i maps to teacher block i * ceil(B / M), clamped to B. A
/// pair whose teacher index collides with the previous pair's is dropped,
/// as are student blocks 1..skip_first_k.
LayerMap build_layer_map(int teacher_layers, int student_layers, int skip_first_k = 0);

struct LossWeights {
  double sigma1 = 1.0, sigma2 = 1.0;
  double lambda1 = 0.1, lambda2 = 0.1, lambda3 = 1.0, lambda4 = 0.1;

  static LossWeights from(const TrainConfig& c) {
    return {c.sigma1, c.sigma2, c.lambda1, c.lambda2, c.lambda3, c.lambda4};
  }
  void validate() const {
    for (double w : {sigma1, sigma2, lambda1, lambda2, lambda3, lambda4}) {
      SPIKEBERT_REQUIRE(w >= 0, "LossWeights: weights must be >= 0");
    }
  }
};

/// Per-term values of one objective evaluation (already weighted sums are in `total`).
struct LossBreakdown {
  double total = 0;
  double feature = 0;    // sum over aligned layers, unweighted
  double embedding = 0;  // unweighted
  double logits = 0;     // unweighted KL
  double ce = 0;         // unweighted
};

inline std::string aligner_param(int student_layer, const std::string& name) {
  return "align.feat" + std::to_string(student_layer) + "." + name;
}

/// Alignment MLPs: "align.emb.*" maps E_sm to D_t; "align.featI.*" (affine +
/// layer norm) for every mapped student layer I.
template <typename S>
Parameters<S> init_aligners(const ModelConfig& config, int teacher_hidden, const LayerMap& map, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xa11a11a11ULL);
  const Eigen::Index d = config.hidden_dim, dt = teacher_hidden;
  auto uniform = [&](Eigen::Index fan_in, Eigen::Index fan_out) {
    const double bound = 1.0 / std::sqrt(double(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix<S> m(fan_in, fan_out);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = S(dist(rng));
    return m;
  };
  Parameters<S> p;
  p["align.emb.weight"] = uniform(d, dt);
  p["align.emb.bias"] = Matrix<S>::Zero(1, dt);
  for (const auto& pair : map) {
    p[aligner_param(pair.student, "weight")] = uniform(d, dt);
    p[aligner_param(pair.student, "bias")] = Matrix<S>::Zero(1, dt);
    p[aligner_param(pair.student, "norm.gain")] = Matrix<S>::Ones(1, dt);
    p[aligner_param(pair.student, "norm.bias")] = Matrix<S>::Zero(1, dt);
  }
  return p;
}

/// LayerNorm(MLP(sum_t F^t)) for one block's (T*B*N) x D spike stack -> (B*N) x D_t.
template <typename S>
ad::Var<S> transform_student_feature(const ad::Var<S>& feature, Eigen::Index time_steps,
                                     const BoundParameters<S>& p, int student_layer) {
  ad::Var<S> summed = ad::time_sum(feature, time_steps);
  ad::Var<S> projected = ad::linear(summed, p[aligner_param(student_layer, "weight")],
                                    p[aligner_param(student_layer, "bias")]);
  return ad::layer_norm(projected, p[aligner_param(student_layer, "norm.gain")],
                        p[aligner_param(student_layer, "norm.bias")]);
}

/// Batch mean of per-sample ||teacher - student||_F over blocks of
/// `rows_per_sample` rows. `row_mask` (rows x cols, optional) zeroes padded
/// positions. `squared` switches to the squared norm.
template <typename S>
ad::Var<S> feature_alignment_loss(const ad::Var<S>& student, const ad::Var<S>& teacher, Eigen::Index rows_per_sample,
                                  const Matrix<S>* row_mask = nullptr, bool squared = false) {
  SPIKEBERT_REQUIRE(student.rows() == teacher.rows() && student.cols() == teacher.cols(),
                    "feature_alignment_loss: student and teacher shapes differ");
  ad::Var<S> diff = ad::sub(teacher, student);
  if (row_mask != nullptr) diff = ad::mul_const(diff, *row_mask);
  ad::Var<S> norms = ad::group_l2_norm(diff, rows_per_sample);
  if (squared) norms = ad::mul(norms, norms);
  return ad::mean_all(norms);
}

/// Batch mean of ||E_tm - MLP(E_sm)||_F.
template <typename S>
ad::Var<S> embedding_alignment_loss(const ad::Var<S>& teacher_embedding, const ad::Var<S>& student_embedding,
                                    const BoundParameters<S>& p, Eigen::Index rows_per_sample,
                                    const Matrix<S>* row_mask = nullptr, bool squared = false) {
  ad::Var<S> mapped = ad::linear(student_embedding, p["align.emb.weight"], p["align.emb.bias"]);
  SPIKEBERT_REQUIRE(mapped.rows() == teacher_embedding.rows() && mapped.cols() == teacher_embedding.cols(),
                    "embedding_alignment_loss: shape mismatch after MLP");
  return feature_alignment_loss(mapped, teacher_embedding, rows_per_sample, row_mask, squared);
}

/// KL(p_teacher || q_student), batch mean. Both are row-stochastic.
template <typename S>
ad::Var<S> logits_loss(Matrix<S> p_teacher, const ad::Var<S>& q_student) {
  return ad::kl_divergence(std::move(p_teacher), q_student);
}

/// -log q_student[label], batch mean.
template <typename S>
ad::Var<S> ce_loss(std::vector<int> labels, const ad::Var<S>& q_student) {
  return ad::cross_entropy(q_student, std::move(labels));
}

/// Row-wise softmax of a plain matrix (teacher temperature 1).
template <typename S>
Matrix<S> softmax_rows(const Matrix<S>& z) {
  Matrix<S> out(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    out.row(r) = (z.row(r).array() - z.row(r).maxCoeff()).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

/// Teacher tensors for a batch, stacked like the student's (B*N) x D_t rows.
template <typename S>
struct TeacherBatch {
  TokenBatch tokens;
  Matrix<S> embedding;
  std::vector<Matrix<S>> layers;  // teacher block b+1 at index b
  Matrix<S> probs;                // B x C, stage 2 only
  std::vector<int> labels;        // stage 2 only

  /// (B*N) x cols, 1 for real token rows.
  Matrix<S> row_mask(Eigen::Index cols) const {
    Matrix<S> m(tokens.batch * tokens.positions, cols);
    for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r).setConstant(tokens.ids[std::size_t(r)] == kPadId ? S(0) : S(1));
    return m;
  }
};

template <typename S>
TeacherBatch<S> gather_features(std::span<const TeacherFeatures* const> batch) {
  SPIKEBERT_REQUIRE(!batch.empty(), "gather_features: empty batch");
  const Eigen::Index n = static_cast<Eigen::Index>(batch.front()->token_ids.size());
  const Eigen::Index dt = batch.front()->embedding.cols();
  const std::size_t layers = batch.front()->layers.size();
  const Eigen::Index b = static_cast<Eigen::Index>(batch.size());
  TeacherBatch<S> out;
  std::vector<int> ids;
  out.embedding.resize(b * n, dt);
  out.layers.assign(layers, Matrix<S>(b * n, dt));
  for (Eigen::Index s = 0; s < b; ++s) {
    const TeacherFeatures& f = *batch[std::size_t(s)];
    if (static_cast<Eigen::Index>(f.token_ids.size()) != n || f.layers.size() != layers || f.embedding.cols() != dt) {
      throw DataError("teacher batch: records have inconsistent shapes");
    }
    ids.insert(ids.end(), f.token_ids.begin(), f.token_ids.end());
    out.embedding.middleRows(s * n, n) = f.embedding.template cast<S>();
    for (std::size_t l = 0; l < layers; ++l) out.layers[l].middleRows(s * n, n) = f.layers[l].template cast<S>();
  }
  out.tokens = TokenBatch(b, n, std::move(ids));
  return out;
}

template <typename S>
TeacherBatch<S> gather_labeled(std::span<const TeacherFeatures* const> batch,
                               std::span<const TeacherTargets* const> targets) {
  SPIKEBERT_REQUIRE(batch.size() == targets.size(), "gather_labeled: one target per record required");
  TeacherBatch<S> out = gather_features<S>(batch);
  const Eigen::Index c = targets.front()->logits.size();
  if (c == 0) throw DataError("teacher batch: missing logits");
  Matrix<S> logits(static_cast<Eigen::Index>(targets.size()), c);
  for (std::size_t s = 0; s < targets.size(); ++s) {
    if (targets[s]->logits.size() != c) throw DataError("teacher batch: missing or ragged logits");
    logits.row(static_cast<Eigen::Index>(s)) = targets[s]->logits.template cast<S>();
    out.labels.push_back(targets[s]->label);
  }
  out.probs = softmax_rows(logits);
  return out;
}

struct ObjectiveOptions {
  bool squared_norm = false;
  ad::UnrollOptions unroll{};
};

/// Weighted alignment terms shared by both stages.
template <typename S>
ad::Var<S> alignment_objective(const ForwardResult<S>& fwd, const TeacherBatch<S>& teacher,
                               const BoundParameters<S>& p, const LayerMap& map, const ModelConfig& config,
                               double feature_weight, double embedding_weight, const ObjectiveOptions& opt,
                               LossBreakdown& terms) {
  ad::Tape<S>& tape = fwd.logits.tape();
  const Eigen::Index n = teacher.tokens.positions;
  const Eigen::Index dt = teacher.embedding.cols();
  const Matrix<S> mask = teacher.row_mask(dt);
  ad::Var<S> emb = embedding_alignment_loss(tape.constant(teacher.embedding), fwd.embedding, p, n, &mask,
                                            opt.squared_norm);
  terms.embedding = double(emb.value()(0, 0));
  ad::Var<S> total = ad::scale(emb, S(embedding_weight));
  for (const auto& pair : map) {
    if (pair.teacher < 1 || pair.teacher > static_cast<int>(teacher.layers.size())) {
      throw DataError("teacher records lack layer " + std::to_string(pair.teacher));
    }
    if (pair.student < 1 || pair.student > config.depth) {
      throw DataError("student has no layer " + std::to_string(pair.student));
    }
    ad::Var<S> student = transform_student_feature(fwd.layer_features[std::size_t(pair.student - 1)],
                                                   config.time_steps, p, pair.student);
    ad::Var<S> fea = feature_alignment_loss(student, tape.constant(teacher.layers[std::size_t(pair.teacher - 1)]), n,
                                            &mask, opt.squared_norm);
    terms.feature += double(fea.value()(0, 0));
    total = ad::add(total, ad::scale(fea, S(feature_weight)));
  }
  return total;
}

/// L1 = sigma1 * sum_i L_fea^i + sigma2 * L_emb on one forward pass.
template <typename S>
ad::Var<S> stage1_objective(const ForwardResult<S>& fwd, const TeacherBatch<S>& teacher, const BoundParameters<S>& p,
                            const LayerMap& map, const ModelConfig& config, const LossWeights& w,
                            const ObjectiveOptions& opt, LossBreakdown& terms) {
  terms = {};
  ad::Var<S> total = alignment_objective(fwd, teacher, p, map, config, w.sigma1, w.sigma2, opt, terms);
  terms.total = double(total.value()(0, 0));
  return total;
}

/// L2 = lambda1 * sum_i L_fea^i + lambda2 * L_emb + lambda3 * KL(p || q) + lambda4 * CE(y, q).
template <typename S>
ad::Var<S> stage2_objective(const ForwardResult<S>& fwd, const TeacherBatch<S>& teacher, const BoundParameters<S>& p,
                            const LayerMap& map, const ModelConfig& config, const LossWeights& w,
                            const ObjectiveOptions& opt, LossBreakdown& terms) {
  terms = {};
  if (teacher.probs.rows() != teacher.tokens.batch) throw DataError("stage 2 requires teacher logits");
  ad::Var<S> total = alignment_objective(fwd, teacher, p, map, config, w.lambda1, w.lambda2, opt, terms);
  ad::Var<S> q = ad::softmax(fwd.logits);
  ad::Var<S> kl = logits_loss(teacher.probs, q);
  ad::Var<S> ce = ce_loss(teacher.labels, q);
  terms.logits = double(kl.value()(0, 0));
  terms.ce = double(ce.value()(0, 0));
  total = ad::add(total, ad::add(ad::scale(kl, S(w.lambda3)), ad::scale(ce, S(w.lambda4))));
  terms.total = double(total.value()(0, 0));
  return total;
}

/// Loss value and parameter gradients for one batch.
template <typename S>
struct GradientResult {
  LossBreakdown terms;
  Parameters<S> grads;
};

/// The spiking student plus its alignment MLPs and optimizer state.
template <typename S>
class Student {
 public:
  Student(const ModelConfig& config, int teacher_layers, int teacher_hidden, const TrainConfig& train)
      : config_(config),
        teacher_hidden_(teacher_hidden),
        map_(build_layer_map(teacher_layers, config.depth, train.skip_align_first_k)),
        params_(init_parameters<S>(config, train.seed)),
        optimizer_({train.stage1_lr, train.weight_decay}) {
    objective_.squared_norm = train.squared_norm;
    auto aligners = init_aligners<S>(config, teacher_hidden, map_, train.seed);
    params_.insert(aligners.begin(), aligners.end());
  }

  /// Resumes from saved parameters; alignment MLPs missing from `params` are initialized fresh.
  Student(const ModelConfig& config, int teacher_layers, int teacher_hidden, const TrainConfig& train,
          Parameters<S> params)
      : config_(config),
        teacher_hidden_(teacher_hidden),
        map_(build_layer_map(teacher_layers, config.depth, train.skip_align_first_k)),
        params_(std::move(params)),
        optimizer_({train.stage1_lr, train.weight_decay}) {
    objective_.squared_norm = train.squared_norm;
    const auto fresh = init_parameters<S>(config, train.seed);
    for (const auto& [name, value] : fresh) {
      const auto it = params_.find(name);
      if (it == params_.end() || it->second.rows() != value.rows() || it->second.cols() != value.cols()) {
        throw DataError("parameters do not match the model config at '" + name + "'");
      }
    }
    for (const auto& [name, value] : init_aligners<S>(config, teacher_hidden, map_, train.seed)) {
      const auto it = params_.find(name);
      if (it == params_.end() || it->second.rows() != value.rows() || it->second.cols() != value.cols()) {
        params_[name] = value;
      }
    }
  }

  const ModelConfig& config() const { return config_; }
  const LayerMap& layer_map() const { return map_; }
  int teacher_hidden() const { return teacher_hidden_; }
  Parameters<S>& params() { return params_; }
  const Parameters<S>& params() const { return params_; }
  AdamW<S>& optimizer() { return optimizer_; }
  ObjectiveOptions& objective_options() { return objective_; }

  /// Replaces the alignment MLPs with fresh ones (stage 2 reinit flag).
  void reinit_aligners(std::uint64_t seed) {
    for (auto it = params_.begin(); it != params_.end();) {
      it = it->first.rfind("align.", 0) == 0 ? params_.erase(it) : std::next(it);
    }
    auto aligners = init_aligners<S>(config_, teacher_hidden_, map_, seed);
    params_.insert(aligners.begin(), aligners.end());
  }

  /// Stage-1 loss and gradients. Splits the batch into `threads` contiguous
  /// chunks on independent tapes and sums their gradients in chunk order, so
  /// results depend only on the thread count.
  GradientResult<S> stage1_gradients(std::span<const TeacherFeatures* const> batch, const LossWeights& w,
                                     int threads = 1) const {
    return chunked(batch.size(), threads, [&](std::size_t begin, std::size_t end, LossBreakdown& terms,
                                             Parameters<S>& grads, S weight) {
      ad::Tape<S> tape;
      BoundParameters<S> bound(tape, params_);
      const TeacherBatch<S> teacher = gather_features<S>(batch.subspan(begin, end - begin));
      const ForwardResult<S> fwd = forward(teacher.tokens, bound, config_, {objective_.unroll, nullptr});
      ad::Var<S> loss = stage1_objective(fwd, teacher, bound, map_, config_, w, objective_, terms);
      tape.backward(ad::scale(loss, weight));
      grads = bound.gradients();
    });
  }

  GradientResult<S> stage2_gradients(std::span<const TeacherFeatures* const> batch,
                                     std::span<const TeacherTargets* const> targets, const LossWeights& w,
                                     int threads = 1) const {
    if (targets.size() != batch.size()) throw DataError("stage 2 requires teacher logits for every sample");
    return chunked(batch.size(), threads, [&](std::size_t begin, std::size_t end, LossBreakdown& terms,
                                             Parameters<S>& grads, S weight) {
      ad::Tape<S> tape;
      BoundParameters<S> bound(tape, params_);
      const TeacherBatch<S> teacher =
          gather_labeled<S>(batch.subspan(begin, end - begin), targets.subspan(begin, end - begin));
      const ForwardResult<S> fwd = forward(teacher.tokens, bound, config_, {objective_.unroll, nullptr});
      ad::Var<S> loss = stage2_objective(fwd, teacher, bound, map_, config_, w, objective_, terms);
      tape.backward(ad::scale(loss, weight));
      grads = bound.gradients();
    });
  }

  /// Computes L1, backpropagates through time and applies one optimizer update.
  LossBreakdown stage1_step(std::span<const TeacherFeatures* const> batch, const LossWeights& w, int threads = 1) {
    GradientResult<S> g = stage1_gradients(batch, w, threads);
    optimizer_.step(params_, g.grads);
    return g.terms;
  }

  LossBreakdown stage2_step(std::span<const TeacherFeatures* const> batch,
                            std::span<const TeacherTargets* const> targets, const LossWeights& w, int threads = 1) {
    GradientResult<S> g = stage2_gradients(batch, targets, w, threads);
    optimizer_.step(params_, g.grads);
    return g.terms;
  }

 private:
  template <typename Fn>
  GradientResult<S> chunked(std::size_t batch_size, int threads, Fn&& run) const {
    SPIKEBERT_REQUIRE(batch_size > 0, "distillation step: empty batch");
    const std::size_t chunks = std::clamp<std::size_t>(std::size_t(std::max(threads, 1)), 1, batch_size);
    std::vector<LossBreakdown> terms(chunks);
    std::vector<Parameters<S>> grads(chunks);
    std::vector<std::size_t> bounds(chunks + 1);
    for (std::size_t c = 0; c <= chunks; ++c) bounds[c] = batch_size * c / chunks;
    auto work = [&](std::size_t c) {
      const S weight = S(double(bounds[c + 1] - bounds[c]) / double(batch_size));
      run(bounds[c], bounds[c + 1], terms[c], grads[c], weight);
    };
    if (chunks == 1) {
      work(0);
    } else {
      std::vector<std::exception_ptr> errors(chunks);
      std::vector<std::thread> pool;
      for (std::size_t c = 0; c < chunks; ++c) {
        pool.emplace_back([&, c] {
          try {
            work(c);
          } catch (...) {
            errors[c] = std::current_exception();
          }
        });
      }
      for (auto& t : pool) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    GradientResult<S> out;
    out.grads = std::move(grads[0]);
    for (std::size_t c = 1; c < chunks; ++c)
      for (auto& [name, g] : out.grads) g += grads[c].at(name);
    for (std::size_t c = 0; c < chunks; ++c) {
      const double weight = double(bounds[c + 1] - bounds[c]) / double(batch_size);
      out.terms.total += weight * terms[c].total;
      out.terms.feature += weight * terms[c].feature;
      out.terms.embedding += weight * terms[c].embedding;
      out.terms.logits += weight * terms[c].logits;
      out.terms.ce += weight * terms[c].ce;
    }
    return out;
  }

  ModelConfig config_;
  int teacher_hidden_;
  LayerMap map_;
  Parameters<S> params_;
  AdamW<S> optimizer_;
  ObjectiveOptions objective_{};
};

}  // namespace spikebert
