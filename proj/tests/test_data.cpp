// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "spikebert/config.hpp"
#include "spikebert/data.hpp"
#include "spikebert/error.hpp"

using namespace spikebert;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name, const std::string& content) {
  const fs::path dir = fs::temp_directory_path() / "spikebert_test_data";
  fs::create_directories(dir);
  const fs::path p = dir / name;
  std::ofstream(p, std::ios::binary) << content;
  return p;
}

Vocab word_vocab(int n) { return Vocab::from_words(synth_words(n)); }

}  // namespace

TEST_CASE("load_tsv") {
  const auto one = load_tsv(scratch("one.tsv", "good movie\t1\n"));
  REQUIRE(one.size() == 1);
  CHECK(one[0].tokens == std::vector<std::string>{"good", "movie"});
  CHECK(one[0].label == 1);

  CHECK(load_tsv(scratch("empty.tsv", "")).empty());

  try {
    load_tsv(scratch("bad.tsv", "a b\t0\nno tab here\nc\t1\n"));
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(load_tsv(scratch("badlabel.tsv", "x\tpositive\n")), ParseError);

  std::vector<Sample> samples{{{"a", "b"}, {}, 0}, {{"c"}, {}, 1}};
  const fs::path out = scratch("roundtrip.tsv", "");
  write_tsv(samples, out);
  CHECK(load_tsv(out) == samples);
}

TEST_CASE("vocab and encoding") {
  const Vocab v = Vocab::from_words(std::vector<std::string>{"b", "a", "b", "[PAD]"});
  CHECK(v.size() == 6);
  CHECK(v.token(kPadId) == "[PAD]");
  CHECK(v.token(kUnkId) == "[UNK]");
  CHECK(v.token(kClsId) == "[CLS]");
  CHECK(v.token(kMaskId) == "[MASK]");
  CHECK(v.id("b") == 4);
  CHECK(v.id("zzz") == kUnkId);

  Sample s{{"a", "b", "c", "a"}, {}, 0};
  encode(s, v, 4);
  CHECK(s.token_ids == std::vector<int>{kClsId, 5, 4, kUnkId});
  encode(s, v, 7);
  CHECK(s.token_ids == std::vector<int>{kClsId, 5, 4, kUnkId, 5, kPadId, kPadId});

  const fs::path p = scratch("vocab.txt", "");
  v.save(p);
  const Vocab back = Vocab::load(p);
  CHECK(back.tokens() == v.tokens());
  CHECK(back.hash() == v.hash());
  CHECK(Vocab::from_words(std::vector<std::string>{"a", "b"}).hash() != v.hash());
  CHECK_THROWS(Vocab::load(scratch("novocab.txt", "x\ny\n")));
}

TEST_CASE("augment: trivial settings") {
  const Vocab v = word_vocab(40);
  const Sample s{{"w1", "w2", "w3", "w4", "w5", "w6"}, {}, 1};
  PosLexicon none;
  CHECK(augment(s, {0, 0, 0, 9}, none, v).tokens == s.tokens);
  const Sample masked = augment(s, {1, 0, 0, 9}, none, v);
  for (const auto& w : masked.tokens) CHECK(w == "[MASK]");
  CHECK(masked.tokens.size() == s.tokens.size());
  CHECK(augment(s, {0.3, 0.3, 0.5, 4}, none, v, 17) == augment(s, {0.3, 0.3, 0.5, 4}, none, v, 17));
  CHECK_THROWS_AS(augment(s, {1.5, 0, 0, 0}, none, v), ContractViolation);
}

TEST_CASE("augment: label and length invariants") {
  const Vocab v = word_vocab(40);
  const auto data = synth_dataset(300, 40, 2);
  PosLexicon lex;
  for (int i = 0; i < 40; ++i) lex.add("w" + std::to_string(i), i % 3 == 0 ? "NOUN" : "VERB");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample out = augment(data[i], {0.2, 0.3, 0.4, 1}, lex, v, i);
    CHECK(out.label == data[i].label);
    CHECK(out.tokens.size() <= data[i].tokens.size());
    CHECK(!out.tokens.empty());
  }
}

TEST_CASE("augment: rates match the configured probabilities") {
  const int words = 100000;
  const Vocab v = word_vocab(40);
  PosLexicon lex;
  for (int i = 0; i < 40; ++i) lex.add("w" + std::to_string(i), i % 2 == 0 ? "NOUN" : "VERB");
  Sample s;
  for (int i = 0; i < 50; ++i) s.tokens.push_back("w" + std::to_string(i % 40));
  long total = 0, masked = 0, changed_tag = 0;
  for (int stream = 0; total < words; ++stream) {
    const Sample out = augment(s, {0.1, 0.1, 0.0, 77}, lex, v, std::uint64_t(stream));
    for (std::size_t k = 0; k < out.tokens.size(); ++k) {
      ++total;
      if (out.tokens[k] == "[MASK]") {
        ++masked;
      } else {
        REQUIRE(lex.tag_of(out.tokens[k]) != nullptr);
        CHECK(*lex.tag_of(out.tokens[k]) == *lex.tag_of(s.tokens[k]));
        changed_tag += out.tokens[k] != s.tokens[k];
      }
    }
  }
  const double n = double(total);
  const double sigma_mask = std::sqrt(0.1 * 0.9 / n);
  CHECK(std::abs(double(masked) / n - 0.1) <= 3 * sigma_mask);
  // A swap is drawn with probability 0.9 * 0.1 and lands on a different word 19 times in 20.
  const double p_swap = 0.9 * 0.1 * (19.0 / 20.0);
  CHECK(std::abs(double(changed_tag) / n - p_swap) <= 3 * std::sqrt(p_swap * (1 - p_swap) / n));

  // n-gram crops: a contiguous window of 1..5 words, taken with probability p_ng.
  int cropped = 0;
  const int trials = 20000;
  for (int stream = 0; stream < trials; ++stream) {
    const Sample out = augment(s, {0, 0, 0.25, 5}, lex, v, std::uint64_t(stream));
    if (out.tokens.size() == s.tokens.size()) continue;
    ++cropped;
    CHECK(out.tokens.size() <= 5);
    CHECK(std::search(s.tokens.begin(), s.tokens.end(), out.tokens.begin(), out.tokens.end()) != s.tokens.end());
  }
  CHECK(std::abs(cropped / double(trials) - 0.25) <= 3 * std::sqrt(0.25 * 0.75 / trials));
}

TEST_CASE("synthetic dataset") {
  const auto a = synth_dataset(100, 32, 7);
  CHECK(a == synth_dataset(100, 32, 7));
  CHECK(a != synth_dataset(100, 32, 8));
  int ones = 0;
  for (const auto& s : a) ones += s.label.value() == 1;
  CHECK(ones == 50);

  // Bag-of-words probe: +1 per group-A word, -1 per group-B word, predict label 1 when positive.
  const auto big = synth_dataset(2000, 64, 3);
  int correct = 0;
  for (const auto& s : big) {
    int score = 0;
    for (const auto& w : s.tokens) {
      const int id = std::stoi(w.substr(1));
      score += id < 16 ? 1 : id < 32 ? -1 : 0;
    }
    CHECK(score != 0);
    correct += (score > 0 ? 1 : 0) == s.label.value();
    CHECK(s.tokens.size() >= 4);
    CHECK(s.tokens.size() <= 12);
  }
  CHECK(correct == 2000);
  CHECK_THROWS(synth_dataset(10, 3, 1));
}

TEST_CASE("config files") {
  const auto kv = parse_key_values("# comment\ndepth = 2\n\nlr=1e-3\n");
  CHECK(kv.at("depth") == "2");
  CHECK(kv.at("lr") == "1e-3");
  try {
    parse_key_values("depth = 2\nbroken\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(parse_key_values("a = 1\na = 2\n"), ParseError);

  ModelConfig m;
  TrainConfig t;
  apply_config(parse_key_values("hidden_dim = 32\nheads = 2\nlr = 0.01\nstage2_lr = 0.002\nalpha = 3\n"), m, t);
  CHECK(m.hidden_dim == 32);
  CHECK(m.surrogate_alpha == 3.0);
  CHECK(t.stage1_lr == 0.01);
  CHECK(t.stage2_lr == 0.002);
  CHECK_THROWS_AS(apply_config(parse_key_values("bogus = 1\n"), m, t), ParseError);
  CHECK_THROWS_AS(apply_config(parse_key_values("depth = two\n"), m, t), ParseError);
  CHECK_THROWS_AS(apply_config(parse_key_values("lambda3 = -1\n"), m, t), ParseError);

  m.tau = 0.1;
  const ModelConfig back = model_config_from(to_key_values(m));
  CHECK(back.hidden_dim == m.hidden_dim);
  CHECK(back.tau == m.tau);
  CHECK(back.thr_ssa == m.thr_ssa);
}

TEST_CASE("full-size default hyperparameters") {
  const ModelConfig m;
  const TrainConfig t;
  CHECK(m.thr_general == 1.0);
  CHECK(m.thr_ssa == 0.25);
  CHECK(m.decay == 0.9);
  CHECK(m.tau == 0.125);
  CHECK(m.time_steps == 4);
  CHECK(m.surrogate_alpha == 2.0);
  CHECK(m.depth == 12);
  CHECK(m.max_len == 256);
  CHECK(t.stage1_batch_size == 128);
  CHECK(t.stage2_batch_size == 32);
  CHECK(t.stage1_lr == 5e-4);
  CHECK(t.stage2_lr == 5e-5);
  CHECK(t.weight_decay == 5e-3);
  CHECK(t.sigma1 == 1.0);
  CHECK(t.sigma2 == 1.0);
  CHECK(t.lambda1 == 0.1);
  CHECK(t.lambda2 == 0.1);
  CHECK(t.lambda3 == 1.0);
  CHECK(t.lambda4 == 0.1);
  CHECK(t.p_mask == 0.1);
  CHECK(t.p_pos == 0.1);
  CHECK(t.p_ng == 0.25);
}
