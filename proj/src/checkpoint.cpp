// SPDX-License-Identifier: Apache-2.0
#include "spikebert/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <vector>

#include "spikebert/error.hpp"

namespace spikebert {

namespace {

constexpr const char* kMagicLine = "SBCK 1";

void put_f32(std::string& out, float v) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffU));
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

bool valid_token(const std::string& s) {
  return !s.empty() && s.find_first_of(" \t\n\r") == std::string::npos;
}

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  ckpt.config.validate();
  std::ostringstream header;
  header << kMagicLine << '\n';
  for (const auto& [k, v] : to_key_values(ckpt.config)) header << "config " << k << ' ' << v << '\n';
  for (const auto& [k, v] : ckpt.meta) {
    SPIKEBERT_REQUIRE(valid_token(k) && valid_token(v), "checkpoint: metadata must be single words");
    header << "meta " << k << ' ' << v << '\n';
  }
  std::string blob;
  for (const auto& [name, m] : ckpt.params) {
    SPIKEBERT_REQUIRE(valid_token(name), "checkpoint: tensor names must be single words");
    header << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << ' ' << blob.size() << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) put_f32(blob, m(r, c));
  }
  header << "end " << blob.size() << '\n';
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMagicLine) throw FormatError("checkpoint: bad magic line", 0);
  KeyValues config;
  Checkpoint ckpt;
  struct Entry {
    std::string name;
    Eigen::Index rows, cols;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  std::size_t blob_size = 0;
  bool ended = false;
  while (!ended && std::getline(in, line)) {
    const std::size_t at = static_cast<std::size_t>(in.tellg()) - line.size() - 1;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "config" || kind == "meta") {
      std::string k, v;
      if (!(ls >> k >> v)) throw FormatError("checkpoint: malformed " + kind + " line", at);
      (kind == "config" ? config : ckpt.meta)[k] = v;
    } else if (kind == "tensor") {
      Entry e;
      if (!(ls >> e.name >> e.rows >> e.cols >> e.offset) || e.rows < 0 || e.cols < 0) {
        throw FormatError("checkpoint: malformed tensor line", at);
      }
      entries.push_back(e);
    } else if (kind == "end") {
      if (!(ls >> blob_size)) throw FormatError("checkpoint: malformed end line", at);
      ended = true;
    } else {
      throw FormatError("checkpoint: unknown header line '" + kind + "'", at);
    }
  }
  if (!ended) throw FormatError("checkpoint: header has no end line", 0);
  const std::size_t blob_start = static_cast<std::size_t>(in.tellg());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() != blob_size) {
    throw FormatError("checkpoint: blob holds " + std::to_string(blob.size()) + " bytes, header declares " +
                          std::to_string(blob_size),
                      blob_start);
  }
  try {
    ckpt.config = model_config_from(config);
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint: ") + e.what(), 0);
  }
  for (const auto& e : entries) {
    const std::size_t bytes = static_cast<std::size_t>(e.rows * e.cols) * 4;
    if (e.offset > blob.size() || bytes > blob.size() - e.offset) {
      throw FormatError("checkpoint: tensor " + e.name + " exceeds blob", blob_start + e.offset);
    }
    Matrix<float> m(e.rows, e.cols);
    const unsigned char* p = blob.data() + e.offset;
    for (Eigen::Index r = 0; r < e.rows; ++r)
      for (Eigen::Index c = 0; c < e.cols; ++c, p += 4) m(r, c) = get_f32(p);
    ckpt.params.emplace(e.name, std::move(m));
  }
  return ckpt;
}

}  // namespace spikebert
