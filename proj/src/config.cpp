// SPDX-License-Identifier: Apache-2.0
#include "spikebert/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "spikebert/error.hpp"

namespace spikebert {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* begin = value.data();
  const char* end = begin + value.size();
  const auto res = std::from_chars(begin, end, out);
  if (res.ec != std::errc{} || res.ptr != end) {
    throw ParseError("config: bad value '" + value + "' for key '" + key + "'", 0);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw ParseError("config: bad boolean '" + value + "' for key '" + key + "'", 0);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void ModelConfig::validate() const {
  SPIKEBERT_REQUIRE(depth >= 1, "ModelConfig: depth must be >= 1");
  SPIKEBERT_REQUIRE(time_steps >= 1, "ModelConfig: time_steps must be >= 1");
  SPIKEBERT_REQUIRE(hidden_dim >= 1 && heads >= 1 && hidden_dim % heads == 0,
                    "ModelConfig: hidden_dim must be divisible by heads");
  SPIKEBERT_REQUIRE(max_len >= 1 && vocab_size >= 1 && num_classes >= 1 && ffn_mult >= 1,
                    "ModelConfig: sizes must be positive");
  SPIKEBERT_REQUIRE(thr_general > 0 && thr_ssa > 0, "ModelConfig: thresholds must be > 0");
  SPIKEBERT_REQUIRE(decay >= 0 && decay <= 1, "ModelConfig: decay must lie in [0, 1]");
  SPIKEBERT_REQUIRE(surrogate_alpha > 0, "ModelConfig: surrogate_alpha must be > 0");
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("config: expected 'key = value'", line_no);
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError("config: empty key", line_no);
    if (!kv.emplace(key, value).second) throw ParseError("config: duplicate key '" + key + "'", line_no);
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

void apply_config(const KeyValues& kv, ModelConfig& model, TrainConfig& train) {
  for (const auto& [key, value] : kv) {
    if (key == "depth") model.depth = parse_number<int>(key, value);
    else if (key == "hidden_dim") model.hidden_dim = parse_number<int>(key, value);
    else if (key == "heads") model.heads = parse_number<int>(key, value);
    else if (key == "time_steps") model.time_steps = parse_number<int>(key, value);
    else if (key == "max_len") model.max_len = parse_number<int>(key, value);
    else if (key == "ffn_mult") model.ffn_mult = parse_number<int>(key, value);
    else if (key == "tau") model.tau = parse_number<double>(key, value);
    else if (key == "thr_general") model.thr_general = parse_number<double>(key, value);
    else if (key == "thr_ssa") model.thr_ssa = parse_number<double>(key, value);
    else if (key == "decay") model.decay = parse_number<double>(key, value);
    else if (key == "alpha") model.surrogate_alpha = parse_number<double>(key, value);
    else if (key == "sigma1") train.sigma1 = parse_number<double>(key, value);
    else if (key == "sigma2") train.sigma2 = parse_number<double>(key, value);
    else if (key == "lambda1") train.lambda1 = parse_number<double>(key, value);
    else if (key == "lambda2") train.lambda2 = parse_number<double>(key, value);
    else if (key == "lambda3") train.lambda3 = parse_number<double>(key, value);
    else if (key == "lambda4") train.lambda4 = parse_number<double>(key, value);
    else if (key == "lr") train.stage1_lr = train.stage2_lr = parse_number<double>(key, value);
    else if (key == "stage1_lr") train.stage1_lr = parse_number<double>(key, value);
    else if (key == "stage2_lr") train.stage2_lr = parse_number<double>(key, value);
    else if (key == "weight_decay") train.weight_decay = parse_number<double>(key, value);
    else if (key == "batch_size") train.stage1_batch_size = train.stage2_batch_size = parse_number<int>(key, value);
    else if (key == "stage1_batch_size") train.stage1_batch_size = parse_number<int>(key, value);
    else if (key == "stage2_batch_size") train.stage2_batch_size = parse_number<int>(key, value);
    else if (key == "steps") train.steps = parse_number<int>(key, value);
    else if (key == "skip_align_first_k") train.skip_align_first_k = parse_number<int>(key, value);
    else if (key == "seed") train.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "squared_norm") train.squared_norm = parse_bool(key, value);
    else if (key == "reinit_aligners") train.reinit_aligners = parse_bool(key, value);
    else if (key == "p_mask") train.p_mask = parse_number<double>(key, value);
    else if (key == "p_pos") train.p_pos = parse_number<double>(key, value);
    else if (key == "p_ng") train.p_ng = parse_number<double>(key, value);
    else throw ParseError("config: unknown key '" + key + "'", 0);
  }
  if (train.stage1_batch_size < 1 || train.stage2_batch_size < 1 || train.steps < 0 || train.skip_align_first_k < 0) {
    throw ParseError("config: batch sizes must be >= 1; steps and skip_align_first_k must be non-negative", 0);
  }
  for (double w : {train.sigma1, train.sigma2, train.lambda1, train.lambda2, train.lambda3, train.lambda4}) {
    if (w < 0) throw ParseError("config: loss weights must be >= 0", 0);
  }
}

KeyValues to_key_values(const ModelConfig& c) {
  return {
      {"depth", std::to_string(c.depth)},
      {"hidden_dim", std::to_string(c.hidden_dim)},
      {"heads", std::to_string(c.heads)},
      {"time_steps", std::to_string(c.time_steps)},
      {"max_len", std::to_string(c.max_len)},
      {"vocab_size", std::to_string(c.vocab_size)},
      {"num_classes", std::to_string(c.num_classes)},
      {"ffn_mult", std::to_string(c.ffn_mult)},
      {"tau", format_double(c.tau)},
      {"thr_general", format_double(c.thr_general)},
      {"thr_ssa", format_double(c.thr_ssa)},
      {"decay", format_double(c.decay)},
      {"alpha", format_double(c.surrogate_alpha)},
  };
}

ModelConfig model_config_from(const KeyValues& kv) {
  ModelConfig c;
  auto get = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw ParseError("model config: missing key '" + key + "'", 0);
    return it->second;
  };
  c.depth = parse_number<int>("depth", get("depth"));
  c.hidden_dim = parse_number<int>("hidden_dim", get("hidden_dim"));
  c.heads = parse_number<int>("heads", get("heads"));
  c.time_steps = parse_number<int>("time_steps", get("time_steps"));
  c.max_len = parse_number<int>("max_len", get("max_len"));
  c.vocab_size = parse_number<int>("vocab_size", get("vocab_size"));
  c.num_classes = parse_number<int>("num_classes", get("num_classes"));
  c.ffn_mult = parse_number<int>("ffn_mult", get("ffn_mult"));
  c.tau = parse_number<double>("tau", get("tau"));
  c.thr_general = parse_number<double>("thr_general", get("thr_general"));
  c.thr_ssa = parse_number<double>("thr_ssa", get("thr_ssa"));
  c.decay = parse_number<double>("decay", get("decay"));
  c.surrogate_alpha = parse_number<double>("alpha", get("alpha"));
  c.validate();
  return c;
}

}  // namespace spikebert
