// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "fixtures.hpp"
#include "spikebert/checkpoint.hpp"
#include "spikebert/error.hpp"

using namespace spikebert;
using namespace spikebert::testing;
namespace fs = std::filesystem;

namespace {

fs::path dir() {
  const fs::path d = fs::temp_directory_path() / "spikebert_test_ckpt";
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Checkpoint sample_checkpoint() {
  ModelConfig c = tiny_config(2, 8, 2, 3, 5, 17, 3);
  c.tau = 0.3;
  c.decay = 0.75;
  return Checkpoint{c, {{"stage", "1"}, {"vocab_hash", "12345"}}, init_parameters<float>(c, 4)};
}

}  // namespace

TEST_CASE("checkpoint round trip") {
  const Checkpoint ck = sample_checkpoint();
  const fs::path p = dir() / "a.ckpt";
  write_checkpoint(ck, p);
  const Checkpoint back = read_checkpoint(p);
  CHECK(back.meta == ck.meta);
  CHECK(back.params == ck.params);
  CHECK(back.config.depth == 2);
  CHECK(back.config.num_classes == 3);
  CHECK(back.config.tau == ck.config.tau);
  CHECK(back.config.decay == ck.config.decay);
  const fs::path q = dir() / "b.ckpt";
  write_checkpoint(back, q);
  CHECK(slurp(p) == slurp(q));
}

TEST_CASE("corrupt checkpoints are rejected") {
  const fs::path p = dir() / "c.ckpt";
  write_checkpoint(sample_checkpoint(), p);
  const std::string bytes = slurp(p);

  auto write = [](const fs::path& path, const std::string& s) { std::ofstream(path, std::ios::binary) << s; };
  const fs::path bad = dir() / "bad.ckpt";

  write(bad, "XXXX" + bytes.substr(4));
  CHECK_THROWS_AS(read_checkpoint(bad), FormatError);
  write(bad, bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_checkpoint(bad), FormatError);
  write(bad, bytes + "x");
  CHECK_THROWS_AS(read_checkpoint(bad), FormatError);
  write(bad, bytes.substr(0, 30));
  CHECK_THROWS_AS(read_checkpoint(bad), FormatError);
  CHECK_THROWS(read_checkpoint(dir() / "missing.ckpt"));
}
