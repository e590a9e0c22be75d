// SPDX-License-Identifier: Apache-2.0
#include "spikebert/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "spikebert/error.hpp"

namespace spikebert {

namespace {

/// Yields batches of indices; reshuffles at every epoch boundary.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, std::size_t batch, std::uint64_t seed)
      : order_(count), batch_(std::min(batch, count)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next() {
    if (cursor_ + batch_ > order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
    cursor_ += batch_;
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

void check_dump_fits(const Student<float>& student, const TeacherDump& dump) {
  if (dump.features.empty()) throw DataError("teacher dump has no samples");
  if (static_cast<int>(dump.header.max_len) > student.config().max_len) {
    throw DataError("teacher dump sequences are longer than the model's max_len");
  }
  if (static_cast<int>(dump.header.hidden) != student.teacher_hidden()) {
    throw DataError("teacher hidden size differs from the student's alignment MLPs");
  }
  for (const auto& pair : student.layer_map()) {
    if (pair.teacher > static_cast<int>(dump.header.layers)) {
      throw DataError("teacher dump lacks layer " + std::to_string(pair.teacher));
    }
  }
}

}  // namespace

std::vector<LossBreakdown> run_stage1(Student<float>& student, const TeacherDump& dump, const TrainConfig& train,
                                      int threads, const StepCallback& on_step) {
  check_dump_fits(student, dump);
  const LossWeights weights = LossWeights::from(train);
  student.optimizer().options().lr = train.stage1_lr;
  BatchSampler sampler(dump.features.size(), static_cast<std::size_t>(train.stage1_batch_size), train.seed);
  std::vector<LossBreakdown> log;
  std::vector<const TeacherFeatures*> batch;
  for (int step = 0; step < train.steps; ++step) {
    batch.clear();
    for (std::size_t i : sampler.next()) batch.push_back(&dump.features[i]);
    log.push_back(student.stage1_step(batch, weights, threads));
    if (on_step) on_step(step, log.back());
  }
  return log;
}

std::vector<LossBreakdown> run_stage2(Student<float>& student, const TeacherDump& dump, const TrainConfig& train,
                                      int threads, const StepCallback& on_step) {
  check_dump_fits(student, dump);
  if (!dump.has_targets()) throw DataError("stage 2 requires a dump with teacher logits and labels");
  if (static_cast<int>(dump.header.num_classes) != student.config().num_classes) {
    throw DataError("dump class count differs from the model's");
  }
  const LossWeights weights = LossWeights::from(train);
  student.optimizer().options().lr = train.stage2_lr;
  BatchSampler sampler(dump.features.size(), static_cast<std::size_t>(train.stage2_batch_size), train.seed + 1);
  std::vector<LossBreakdown> log;
  std::vector<const TeacherFeatures*> batch;
  std::vector<const TeacherTargets*> targets;
  for (int step = 0; step < train.steps; ++step) {
    batch.clear();
    targets.clear();
    for (std::size_t i : sampler.next()) {
      batch.push_back(&dump.features[i]);
      targets.push_back(&dump.targets[i]);
    }
    log.push_back(student.stage2_step(batch, targets, weights, threads));
    if (on_step) on_step(step, log.back());
  }
  return log;
}

TokenBatch make_token_batch(std::span<const Sample> samples) {
  SPIKEBERT_REQUIRE(!samples.empty(), "make_token_batch: no samples");
  const std::size_t n = samples.front().token_ids.size();
  SPIKEBERT_REQUIRE(n > 0, "make_token_batch: samples are not encoded");
  std::vector<int> ids;
  ids.reserve(n * samples.size());
  for (const auto& s : samples) {
    SPIKEBERT_REQUIRE(s.token_ids.size() == n, "make_token_batch: samples padded to different lengths");
    ids.insert(ids.end(), s.token_ids.begin(), s.token_ids.end());
  }
  return TokenBatch(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(n), std::move(ids));
}

EvalReport evaluate(const Parameters<float>& params, const ModelConfig& config, std::span<const Sample> samples,
                    std::size_t batch_size) {
  if (samples.empty()) throw InputError("evaluate: dataset is empty");
  EvalReport report;
  report.class_total.assign(static_cast<std::size_t>(config.num_classes), 0);
  report.class_correct.assign(static_cast<std::size_t>(config.num_classes), 0);
  for (std::size_t begin = 0; begin < samples.size(); begin += batch_size) {
    const auto chunk = samples.subspan(begin, std::min(batch_size, samples.size() - begin));
    const Matrix<float> logits = predict_logits(make_token_batch(chunk), params, config);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      if (!chunk[i].label) throw InputError("evaluate: sample without label");
      const int label = *chunk[i].label;
      if (label < 0 || label >= config.num_classes) {
        throw InputError("evaluate: label " + std::to_string(label) + " but the model has " +
                         std::to_string(config.num_classes) + " classes");
      }
      Eigen::Index pred = 0;
      logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&pred);
      ++report.total;
      ++report.class_total[std::size_t(label)];
      if (pred == label) {
        ++report.correct;
        ++report.class_correct[std::size_t(label)];
      }
    }
  }
  return report;
}

Checkpoint make_checkpoint(const Student<float>& student, std::uint64_t vocab_hash, int stage) {
  Checkpoint ckpt;
  ckpt.config = student.config();
  ckpt.params = student.params();
  ckpt.meta["stage"] = std::to_string(stage);
  ckpt.meta["teacher_hidden"] = std::to_string(student.teacher_hidden());
  ckpt.meta["vocab_hash"] = std::to_string(vocab_hash);
  return ckpt;
}

void write_loss_log(std::span<const LossBreakdown> rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write loss log " + path.string());
  out << "step\ttotal\tfeature\tembedding\tlogits\tce\n";
  char buf[256];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::snprintf(buf, sizeof(buf), "%zu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\n", i, r.total, r.feature, r.embedding,
                  r.logits, r.ce);
    out << buf;
  }
}

}  // namespace spikebert
