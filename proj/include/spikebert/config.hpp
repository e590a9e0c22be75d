// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace spikebert {

/// Reserved vocabulary ids shared by the tokenizer, the model and teacher dumps.
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kMaskId = 3;

/// Architecture and neuron hyperparameters. Defaults are the full-size
/// SpikeBERT settings; desk-scale runs override depth/width/length.
struct ModelConfig {
  int depth = 12;
  int hidden_dim = 768;
  int heads = 8;
  int time_steps = 4;
  int max_len = 256;
  int vocab_size = 30522;
  int num_classes = 2;
  int ffn_mult = 4;
  double tau = 0.125;
  double thr_general = 1.0;
  double thr_ssa = 0.25;
  double decay = 0.9;
  double surrogate_alpha = 2.0;

  /// Throws ContractViolation when an invariant does not hold.
  void validate() const;
};

/// Distillation and optimizer hyperparameters.
struct TrainConfig {
  double sigma1 = 1.0;
  double sigma2 = 1.0;
  double lambda1 = 0.1;
  double lambda2 = 0.1;
  double lambda3 = 1.0;
  double lambda4 = 0.1;
  double stage1_lr = 5e-4;
  double stage2_lr = 5e-5;
  double weight_decay = 5e-3;
  int stage1_batch_size = 128;
  int stage2_batch_size = 32;
  int steps = 1000;
  int skip_align_first_k = 0;
  std::uint64_t seed = 0;
  bool squared_norm = false;
  bool reinit_aligners = false;
  double p_mask = 0.1;
  double p_pos = 0.1;
  double p_ng = 0.25;
};

/// Flat "key = value" text with '#' comments.
using KeyValues = std::map<std::string, std::string>;

/// Parses key-value text; ParseError on lines without '=' or duplicate keys.
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);

/// Applies every recognised key to the two configs; unknown keys or
/// unparsable values raise ParseError (line 0).
void apply_config(const KeyValues& kv, ModelConfig& model, TrainConfig& train);

/// Key-value form of a ModelConfig, as written into checkpoints.
KeyValues to_key_values(const ModelConfig& config);
ModelConfig model_config_from(const KeyValues& kv);

}  // namespace spikebert
