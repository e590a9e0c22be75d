// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "spikebert/checkpoint.hpp"
#include "spikebert/data.hpp"
#include "spikebert/teacher_io.hpp"

using namespace spikebert;
namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path d = [] {
    fs::path p = fs::temp_directory_path() / "spikebert_test_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

int run(const std::string& args, std::string* out = nullptr) {
  const fs::path log = work() / "last_output.txt";
  const std::string cmd = "cd '" + work().string() + "' && '" SPIKEBERT_CLI "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  if (out != nullptr) {
    std::ifstream in(log);
    *out = {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int line_count(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

// Tiny synthetic setup shared by the cases below.
void ensure_setup() {
  static bool done = false;
  if (done) return;
  REQUIRE(run("gen-synth --train 120 --test 2000 --vocab-size 40 --seed 3 --out-dir synth") == 0);
  std::ofstream(work() / "tiny.conf") << "depth = 1\nhidden_dim = 16\nheads = 2\ntime_steps = 2\nmax_len = 12\n"
                                         "batch_size = 16\nlr = 3e-3\n";
  REQUIRE(run("gen-teacher --stage 2 --data synth/train.tsv --vocab synth/vocab.txt --layers 2 --hidden 8 "
              "--config tiny.conf --seed 7 --out t2.sbtd") == 0);
  REQUIRE(run("gen-teacher --stage 1 --data synth/train.tsv --vocab synth/vocab.txt --layers 2 --hidden 8 "
              "--config tiny.conf --seed 7 --out t1.sbtd") == 0);
  done = true;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  ensure_setup();
  CHECK(run("") == 2);
  CHECK(run("no-such-command") == 2);
  CHECK(run("gen-teacher --data missing.tsv --out x.sbtd") == 2);
  CHECK(run("train-stage2 --dump t2.sbtd --vocab synth/vocab.txt --config tiny.conf") == 2);
  CHECK(run("train-stage1 --dump t1.sbtd --vocab synth/vocab.txt --config missing.conf") == 2);
  std::ofstream(work() / "bad.conf") << "depthh = 2\n";
  CHECK(run("train-stage1 --dump t1.sbtd --vocab synth/vocab.txt --config bad.conf") == 2);
  std::ofstream(work() / "bad2.conf") << "hidden_dim = 10\nheads = 3\n";
  CHECK(run("train-stage1 --dump t1.sbtd --vocab synth/vocab.txt --config bad2.conf") == 2);
}

TEST_CASE("gen-teacher is deterministic and honours the stage flag") {
  ensure_setup();
  REQUIRE(run("gen-teacher --stage 2 --data synth/train.tsv --vocab synth/vocab.txt --layers 2 --hidden 8 "
              "--config tiny.conf --seed 7 --out again.sbtd") == 0);
  CHECK(slurp(work() / "t2.sbtd") == slurp(work() / "again.sbtd"));
  const TeacherDump d1 = read_dump(work() / "t1.sbtd");
  CHECK(!d1.has_targets());
  CHECK(d1.targets.empty());
  const TeacherDump d2 = read_dump(work() / "t2.sbtd");
  CHECK(d2.has_targets());
  CHECK(d2.header.vocab_hash == Vocab::load(work() / "synth/vocab.txt").hash());
}

TEST_CASE("stage-1 smoke run writes one log row per step and is reproducible") {
  ensure_setup();
  REQUIRE(run("train-stage1 --dump t1.sbtd --vocab synth/vocab.txt --config tiny.conf --steps 50 "
              "--deterministic --seed 7 --out s1.ckpt --log s1.tsv") == 0);
  CHECK(line_count(work() / "s1.tsv") == 51);
  REQUIRE(run("train-stage1 --dump t1.sbtd --vocab synth/vocab.txt --config tiny.conf --steps 50 "
              "--deterministic --seed 7 --out s1b.ckpt --log s1b.tsv") == 0);
  CHECK(slurp(work() / "s1.tsv") == slurp(work() / "s1b.tsv"));
  CHECK(slurp(work() / "s1.ckpt") == slurp(work() / "s1b.ckpt"));
  const Checkpoint ck = read_checkpoint(work() / "s1.ckpt");
  CHECK(ck.meta.at("stage") == "1");
}

TEST_CASE("vocabulary mismatch is a hard error") {
  ensure_setup();
  std::ofstream(work() / "other_vocab.txt") << "[PAD]\n[UNK]\n[CLS]\n[MASK]\nfoo\n";
  CHECK(run("train-stage1 --dump t1.sbtd --vocab other_vocab.txt --config tiny.conf --steps 1") == 1);
}

TEST_CASE("eval: random weights, memorization and bad inputs") {
  ensure_setup();
  REQUIRE(run("train-stage2 --dump t2.sbtd --vocab synth/vocab.txt --config tiny.conf --from-scratch --steps 0 "
              "--out random.ckpt --log random.tsv") == 0);
  std::string out;
  REQUIRE(run("eval --checkpoint random.ckpt --data synth/test.tsv --vocab synth/vocab.txt", &out) == 0);
  double acc = -1;
  std::istringstream(out.substr(out.find("accuracy") + 8)) >> acc;
  CHECK(std::abs(acc - 0.5) <= 0.05);

  std::ofstream(work() / "memo.tsv") << "w1 w2 w3 w30\t1\nw12 w13 w33\t0\nw4 w5 w31 w32\t1\nw11 w14 w35\t0\n";
  REQUIRE(run("gen-teacher --stage 2 --data memo.tsv --vocab synth/vocab.txt --layers 2 --hidden 8 "
              "--config tiny.conf --seed 1 --out memo.sbtd") == 0);
  std::ofstream(work() / "memo.conf") << "depth = 1\nhidden_dim = 16\nheads = 2\ntime_steps = 2\nmax_len = 12\n"
                                         "batch_size = 4\nlr = 5e-3\n";
  REQUIRE(run("train-stage2 --dump memo.sbtd --vocab synth/vocab.txt --config memo.conf --from-scratch --steps 150 "
              "--out memo.ckpt --log memo_log.tsv") == 0);
  REQUIRE(run("eval --checkpoint memo.ckpt --data memo.tsv --vocab synth/vocab.txt", &out) == 0);
  CHECK(out.find("accuracy 1 ") != std::string::npos);

  std::ofstream(work() / "empty.tsv") << "";
  CHECK(run("eval --checkpoint random.ckpt --data empty.tsv --vocab synth/vocab.txt") == 1);
  std::ofstream(work() / "three.tsv") << "w1 w2\t2\n";
  CHECK(run("eval --checkpoint random.ckpt --data three.tsv --vocab synth/vocab.txt") == 1);
  CHECK(run("eval --checkpoint nope.ckpt --data synth/test.tsv --vocab synth/vocab.txt") == 2);
}

TEST_CASE("energy report") {
  ensure_setup();
  REQUIRE(run("train-stage2 --dump t2.sbtd --vocab synth/vocab.txt --config tiny.conf --from-scratch --steps 0 "
              "--out e.ckpt --log e.tsv") == 0);
  REQUIRE(run("energy --checkpoint e.ckpt --data synth/train.tsv --vocab synth/vocab.txt --out-dir energy") == 0);
  const std::string kv = slurp(work() / "energy/energy_report.kv");
  CHECK(kv.find("total_mj ") != std::string::npos);
  CHECK(kv.find("layer.block0.attn_scores.sops ") != std::string::npos);
  CHECK(fs::exists(work() / "energy/energy_report.txt"));
}
