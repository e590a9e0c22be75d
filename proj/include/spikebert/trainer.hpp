// SPDX-License-Identifier: Apache-2.0
//
// Training and evaluation loops over teacher dumps; shared by the CLI and
// the acceptance suite.
#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "spikebert/checkpoint.hpp"
#include "spikebert/data.hpp"
#include "spikebert/distill.hpp"
#include "spikebert/teacher_io.hpp"

namespace spikebert {

using StepCallback = std::function<void(int step, const LossBreakdown& terms)>;

/// Runs `train.steps` stage-1 updates over epoch-shuffled mini-batches of
/// the dump's feature records. Returns the per-step losses.
std::vector<LossBreakdown> run_stage1(Student<float>& student, const TeacherDump& dump, const TrainConfig& train,
                                      int threads = 1, const StepCallback& on_step = {});

/// Stage-2 counterpart; the dump must carry logits and labels.
std::vector<LossBreakdown> run_stage2(Student<float>& student, const TeacherDump& dump, const TrainConfig& train,
                                      int threads = 1, const StepCallback& on_step = {});

struct EvalReport {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::size_t> class_total;
  std::vector<std::size_t> class_correct;

  double accuracy() const { return total == 0 ? 0.0 : double(correct) / double(total); }
};

/// Argmax accuracy over encoded, labeled samples. Throws InputError on an
/// empty set or a label the model has no class for.
EvalReport evaluate(const Parameters<float>& params, const ModelConfig& config, std::span<const Sample> samples,
                    std::size_t batch_size = 64);

/// Token batch of samples [begin, end); samples must be encoded.
TokenBatch make_token_batch(std::span<const Sample> samples);

Checkpoint make_checkpoint(const Student<float>& student, std::uint64_t vocab_hash, int stage);

/// TSV with a header row: step, total, feature, embedding, logits, ce.
void write_loss_log(std::span<const LossBreakdown> rows, const std::filesystem::path& path);

}  // namespace spikebert
