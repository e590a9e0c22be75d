// SPDX-License-Identifier: Apache-2.0
#include "spikebert/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "spikebert/config.hpp"
#include "spikebert/error.hpp"
#include "seed_mix.hpp"

namespace spikebert {

namespace {

const std::vector<std::string>& specials() {
  static const std::vector<std::string> kSpecials = {"[PAD]", "[UNK]", "[CLS]", "[MASK]"};
  return kSpecials;
}

}  // namespace

Vocab::Vocab() {
  for (const auto& s : specials()) add(s);
}

void Vocab::add(const std::string& token) {
  if (index_.count(token) != 0) return;
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocab Vocab::from_words(std::span<const std::string> words) {
  Vocab v;
  for (const auto& w : words) v.add(w);
  return v;
}

Vocab Vocab::build(std::span<const Sample> samples) {
  std::set<std::string> distinct;
  for (const auto& s : samples) distinct.insert(s.tokens.begin(), s.tokens.end());
  const std::vector<std::string> words(distinct.begin(), distinct.end());
  return from_words(words);
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open vocab file " + path.string());
  Vocab v;
  v.tokens_.clear();
  v.index_.clear();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (v.index_.count(line) != 0) throw ParseError("vocab: duplicate token '" + line + "'", line_no);
    v.add(line);
  }
  for (std::size_t i = 0; i < specials().size(); ++i) {
    if (v.tokens_.size() <= i || v.tokens_[i] != specials()[i]) {
      throw ParseError("vocab: expected " + specials()[i] + " as token " + std::to_string(i), i + 1);
    }
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write vocab file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

int Vocab::id(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

std::uint64_t Vocab::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](unsigned char c) {
    h ^= c;
    h *= 0x100000001b3ULL;
  };
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (i != 0) feed('\n');
    for (unsigned char c : tokens_[i]) feed(c);
  }
  return h;
}

std::vector<std::string> split_whitespace(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::vector<Sample> load_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset " + path.string());
  std::vector<Sample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw ParseError("dataset: missing tab separator", line_no);
    const std::string label_text = line.substr(tab + 1);
    int label = 0;
    const auto res = std::from_chars(label_text.data(), label_text.data() + label_text.size(), label);
    if (res.ec != std::errc{} || res.ptr != label_text.data() + label_text.size() || label < 0) {
      throw ParseError("dataset: label '" + label_text + "' is not a class index", line_no);
    }
    samples.push_back(Sample{split_whitespace(line.substr(0, tab)), {}, label});
  }
  return samples;
}

void write_tsv(std::span<const Sample> samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write dataset " + path.string());
  for (const auto& s : samples) {
    for (std::size_t i = 0; i < s.tokens.size(); ++i) out << (i ? " " : "") << s.tokens[i];
    out << '\t' << s.label.value_or(0) << '\n';
  }
}

void encode(Sample& sample, const Vocab& vocab, int max_len) {
  SPIKEBERT_REQUIRE(max_len >= 1, "encode: max_len must be >= 1");
  sample.token_ids.assign(static_cast<std::size_t>(max_len), kPadId);
  sample.token_ids[0] = kClsId;
  const std::size_t n = std::min(sample.tokens.size(), static_cast<std::size_t>(max_len - 1));
  for (std::size_t i = 0; i < n; ++i) sample.token_ids[i + 1] = vocab.id(sample.tokens[i]);
}

void encode_all(std::span<Sample> samples, const Vocab& vocab, int max_len) {
  for (auto& s : samples) encode(s, vocab, max_len);
}

void AugmentConfig::validate() const {
  for (double p : {p_mask, p_pos, p_ng}) {
    SPIKEBERT_REQUIRE(p >= 0.0 && p <= 1.0, "AugmentConfig: probabilities must lie in [0, 1]");
  }
}

PosLexicon PosLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open POS lexicon " + path.string());
  PosLexicon lex;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("POS lexicon: missing tab separator", line_no);
    lex.add(line.substr(0, tab), line.substr(tab + 1));
  }
  return lex;
}

void PosLexicon::add(const std::string& word, const std::string& tag) {
  if (!tags_.emplace(word, tag).second) return;
  by_tag_[tag].push_back(word);
}

const std::string* PosLexicon::tag_of(const std::string& word) const {
  const auto it = tags_.find(word);
  return it == tags_.end() ? nullptr : &it->second;
}

const std::vector<std::string>& PosLexicon::words_with(const std::string& tag) const {
  static const std::vector<std::string> kNone;
  const auto it = by_tag_.find(tag);
  return it == by_tag_.end() ? kNone : it->second;
}

Sample augment(const Sample& sample, const AugmentConfig& cfg, const PosLexicon& lexicon, const Vocab& vocab,
               std::uint64_t stream) {
  cfg.validate();
  SPIKEBERT_REQUIRE(vocab.size() > static_cast<int>(specials().size()), "augment: vocab has no ordinary words");
  std::mt19937_64 rng(detail::mix(cfg.seed ^ detail::mix(stream)));
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  Sample out{sample.tokens, {}, sample.label};
  if (!out.tokens.empty() && coin(rng) < cfg.p_ng) {
    const std::size_t n = std::min<std::size_t>(std::uniform_int_distribution<std::size_t>(1, 5)(rng), out.tokens.size());
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, out.tokens.size() - n)(rng);
    out.tokens = std::vector<std::string>(out.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                                          out.tokens.begin() + static_cast<std::ptrdiff_t>(start + n));
  }
  std::uniform_int_distribution<int> any_word(static_cast<int>(specials().size()), vocab.size() - 1);
  for (auto& word : out.tokens) {
    const double mask_draw = coin(rng);
    const double pos_draw = coin(rng);
    if (mask_draw < cfg.p_mask) {
      word = "[MASK]";
    } else if (pos_draw < cfg.p_pos) {
      const std::string* tag = lexicon.tag_of(word);
      if (tag != nullptr) {
        const auto& pool = lexicon.words_with(*tag);
        word = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      } else {
        word = vocab.token(any_word(rng));
      }
    }
  }
  return out;
}

std::vector<std::string> synth_words(int vocab_size) {
  std::vector<std::string> words;
  words.reserve(static_cast<std::size_t>(vocab_size));
  for (int i = 0; i < vocab_size; ++i) words.push_back("w" + std::to_string(i));
  return words;
}

std::vector<Sample> synth_dataset(int n_samples, int vocab_size, std::uint64_t seed) {
  SPIKEBERT_REQUIRE(vocab_size >= 4, "synth_dataset: vocab_size must be >= 4");
  SPIKEBERT_REQUIRE(n_samples >= 0, "synth_dataset: n_samples must be >= 0");
  constexpr int kMinLen = 4, kMaxLen = 12;
  const int group = vocab_size / 4;
  const int neutral_begin = 2 * group;
  std::mt19937_64 rng(seed);
  std::vector<int> labels(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) labels[static_cast<std::size_t>(i)] = i % 2;
  std::shuffle(labels.begin(), labels.end(), rng);

  const std::vector<std::string> words = synth_words(vocab_size);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n_samples));
  for (int label : labels) {
    const int len = std::uniform_int_distribution<int>(kMinLen, kMaxLen)(rng);
    const int grouped = std::uniform_int_distribution<int>(1, len)(rng);
    const int majority = std::uniform_int_distribution<int>(grouped / 2 + 1, grouped)(rng);
    const int minority = grouped - majority;
    const int major_base = label == 1 ? 0 : group;
    const int minor_base = label == 1 ? group : 0;
    std::vector<int> ids;
    for (int j = 0; j < majority; ++j) ids.push_back(major_base + std::uniform_int_distribution<int>(0, group - 1)(rng));
    for (int j = 0; j < minority; ++j) ids.push_back(minor_base + std::uniform_int_distribution<int>(0, group - 1)(rng));
    for (int j = grouped; j < len; ++j)
      ids.push_back(std::uniform_int_distribution<int>(neutral_begin, vocab_size - 1)(rng));
    std::shuffle(ids.begin(), ids.end(), rng);
    Sample s;
    for (int id : ids) s.tokens.push_back(words[static_cast<std::size_t>(id)]);
    s.label = label;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace spikebert
