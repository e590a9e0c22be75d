// SPDX-License-Identifier: Apache-2.0
//
// Text samples, whitespace tokenization, the synthetic two-class task and
// the three-rule augmentation (mask / same-POS swap / n-gram crop).
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace spikebert {

struct Sample {
  std::vector<std::string> tokens;
  std::vector<int> token_ids;  // [CLS] + tokens, truncated and padded to max_len
  std::optional<int> label;

  bool operator==(const Sample&) const = default;
};

/// Token <-> id table. Ids 0..3 are [PAD], [UNK], [CLS], [MASK].
class Vocab {
 public:
  Vocab();

  /// Specials followed by `words` in order; duplicates and specials are skipped.
  static Vocab from_words(std::span<const std::string> words);
  /// Specials followed by the sorted distinct tokens of `samples`.
  static Vocab build(std::span<const Sample> samples);
  /// One token per line; the line number (0-based) is the id.
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int id(const std::string& token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// 64-bit FNV-1a over the tokens joined by '\n'. Stored in teacher dumps
  /// to catch tokenization mismatches.
  std::uint64_t hash() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  void add(const std::string& token);
};

std::vector<std::string> split_whitespace(const std::string& text);

/// Reads "text<TAB>label" lines. Empty lines are skipped; a line without a
/// tab or with a non-integer label raises ParseError with its line number.
std::vector<Sample> load_tsv(const std::filesystem::path& path);
void write_tsv(std::span<const Sample> samples, const std::filesystem::path& path);

/// Fills token_ids: [CLS] then the vocab ids of the tokens, truncated to
/// max_len and padded with [PAD].
void encode(Sample& sample, const Vocab& vocab, int max_len);
void encode_all(std::span<Sample> samples, const Vocab& vocab, int max_len);

struct AugmentConfig {
  double p_mask = 0.1;
  double p_pos = 0.1;
  double p_ng = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
};

/// word -> POS tag, loaded from "word<TAB>tag" lines.
class PosLexicon {
 public:
  PosLexicon() = default;
  static PosLexicon load(const std::filesystem::path& path);
  void add(const std::string& word, const std::string& tag);

  const std::string* tag_of(const std::string& word) const;
  const std::vector<std::string>& words_with(const std::string& tag) const;
  bool empty() const { return tags_.empty(); }

 private:
  std::map<std::string, std::string> tags_;
  std::map<std::string, std::vector<std::string>> by_tag_;
};

/// Applies, in order: (3) with probability p_ng the sample is replaced by a
/// uniformly chosen n-gram of itself, n uniform in 1..5 (capped at the
/// length); then per word (1) [MASK] with probability p_mask, else (2) with
/// probability p_pos a uniformly chosen word sharing its POS tag, falling
/// back to a uniform non-special vocab word when the lexicon has no tag for
/// it. The label is kept; token_ids are cleared. Deterministic in
/// (cfg.seed, stream).
Sample augment(const Sample& sample, const AugmentConfig& cfg, const PosLexicon& lexicon, const Vocab& vocab,
               std::uint64_t stream = 0);

/// Words of the synthetic task: "w0" ... "w{vocab_size-1}". Ids below
/// vocab_size/4 form group A, the next quarter group B, the rest are neutral.
std::vector<std::string> synth_words(int vocab_size);

/// Balanced two-class sequences of 4..12 words. Label 1 iff group-A words
/// outnumber group-B words (never tied). Requires vocab_size >= 4.
std::vector<Sample> synth_dataset(int n_samples, int vocab_size, std::uint64_t seed);

}  // namespace spikebert
