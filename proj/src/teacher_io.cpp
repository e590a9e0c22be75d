// SPDX-License-Identifier: Apache-2.0
#include "spikebert/teacher_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "spikebert/config.hpp"
#include "spikebert/data.hpp"
#include "spikebert/error.hpp"
#include "seed_mix.hpp"

namespace spikebert {

namespace {

class Writer {
 public:
  explicit Writer(std::vector<std::byte>& out) : out_(out) {}

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffU));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffU));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void floats(const float* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) f32(data[i]);
  }

 private:
  std::vector<std::byte>& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> in) : in_(in) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::to_integer<unsigned>(in_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::to_integer<unsigned>(in_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  void floats(float* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) data[i] = f32();
  }
  std::size_t offset() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw FormatError("SBTD: unexpected end of data", pos_);
  }
  std::span<const std::byte> in_;
  std::size_t pos_ = 0;
};

unsigned __int128 record_bytes(const DumpHeader& h) {
  using U = unsigned __int128;
  const U n = h.max_len, d = h.hidden, b = h.layers;
  U bytes = 4 * n + 4 * n * d + 4 * b * n * d;
  if (h.stage == 2) bytes += 4 * U(h.num_classes) + 4;
  return bytes;
}

}  // namespace

void TeacherDump::validate() const {
  const auto& h = header;
  if (h.version != kDumpVersion) throw FormatError("SBTD: unsupported version " + std::to_string(h.version), 4);
  if (h.stage != 1 && h.stage != 2) throw FormatError("SBTD: stage must be 1 or 2", 8);
  if (h.stage == 2 && h.num_classes == 0) throw FormatError("SBTD: stage-2 dump needs num_classes >= 1", 20);
  if (features.size() != h.sample_count) throw FormatError("SBTD: sample count disagrees with header", 32);
  if (has_targets() ? targets.size() != h.sample_count : !targets.empty()) {
    throw FormatError("SBTD: stage-1 dumps carry no targets; stage-2 dumps carry one per sample", 8);
  }
  const Eigen::Index n = h.max_len, d = h.hidden;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto& f = features[i];
    bool ok = f.token_ids.size() == h.max_len && f.embedding.rows() == n && f.embedding.cols() == d &&
              f.layers.size() == h.layers;
    for (const auto& l : f.layers) ok = ok && l.rows() == n && l.cols() == d;
    for (auto id : f.token_ids) ok = ok && id >= 0;
    if (!ok) throw FormatError("SBTD: sample " + std::to_string(i) + " disagrees with header dims", 0);
    if (has_targets()) {
      const auto& t = targets[i];
      if (t.logits.size() != static_cast<Eigen::Index>(h.num_classes) || t.label < 0 ||
          t.label >= static_cast<std::int32_t>(h.num_classes)) {
        throw FormatError("SBTD: sample " + std::to_string(i) + " has bad logits or label", 0);
      }
    }
  }
}

std::vector<std::byte> encode_dump(const TeacherDump& dump) {
  dump.validate();
  const auto& h = dump.header;
  std::vector<std::byte> out;
  out.reserve(static_cast<std::size_t>(kDumpHeaderBytes + record_bytes(h) * h.sample_count));
  for (char c : kDumpMagic) out.push_back(static_cast<std::byte>(c));
  Writer w(out);
  w.u32(h.version);
  w.u32(h.stage);
  w.u32(h.layers);
  w.u32(h.hidden);
  w.u32(h.num_classes);
  w.u64(h.vocab_hash);
  w.u32(h.sample_count);
  w.u32(h.max_len);
  for (std::size_t i = 0; i < dump.features.size(); ++i) {
    const auto& f = dump.features[i];
    for (auto id : f.token_ids) w.i32(id);
    w.floats(f.embedding.data(), static_cast<std::size_t>(f.embedding.size()));
    for (const auto& l : f.layers) w.floats(l.data(), static_cast<std::size_t>(l.size()));
    if (dump.has_targets()) {
      w.floats(dump.targets[i].logits.data(), static_cast<std::size_t>(dump.targets[i].logits.size()));
      w.i32(dump.targets[i].label);
    }
  }
  return out;
}

TeacherDump decode_dump(std::span<const std::byte> bytes) {
  if (bytes.size() < kDumpHeaderBytes) throw FormatError("SBTD: file shorter than header", bytes.size());
  if (std::memcmp(bytes.data(), kDumpMagic, 4) != 0) throw FormatError("SBTD: bad magic", 0);
  Reader r(bytes.subspan(4));
  TeacherDump dump;
  auto& h = dump.header;
  h.version = r.u32();
  h.stage = r.u32();
  h.layers = r.u32();
  h.hidden = r.u32();
  h.num_classes = r.u32();
  h.vocab_hash = r.u64();
  h.sample_count = r.u32();
  h.max_len = r.u32();
  if (h.version != kDumpVersion) throw FormatError("SBTD: unsupported version " + std::to_string(h.version), 4);
  if (h.stage != 1 && h.stage != 2) throw FormatError("SBTD: stage must be 1 or 2", 8);
  const unsigned __int128 expected = kDumpHeaderBytes + record_bytes(h) * h.sample_count;
  if (expected != bytes.size()) {
    throw FormatError("SBTD: declared sizes need " + std::to_string(static_cast<unsigned long long>(expected)) +
                          " bytes but file has " + std::to_string(bytes.size()),
                      std::min<std::size_t>(bytes.size(), static_cast<std::size_t>(std::min<unsigned __int128>(expected, SIZE_MAX))));
  }
  const Eigen::Index n = h.max_len, d = h.hidden;
  dump.features.resize(h.sample_count);
  if (h.stage == 2) dump.targets.resize(h.sample_count);
  for (std::uint32_t i = 0; i < h.sample_count; ++i) {
    auto& f = dump.features[i];
    f.token_ids.resize(h.max_len);
    for (auto& id : f.token_ids) {
      const std::size_t at = r.offset() + 4;
      id = r.i32();
      if (id < 0) throw FormatError("SBTD: negative token id", at);
    }
    f.embedding.resize(n, d);
    r.floats(f.embedding.data(), static_cast<std::size_t>(f.embedding.size()));
    f.layers.resize(h.layers);
    for (auto& l : f.layers) {
      l.resize(n, d);
      r.floats(l.data(), static_cast<std::size_t>(l.size()));
    }
    if (h.stage == 2) {
      auto& t = dump.targets[i];
      t.logits.resize(h.num_classes);
      r.floats(t.logits.data(), h.num_classes);
      const std::size_t at = r.offset() + 4;
      t.label = r.i32();
      if (t.label < 0 || t.label >= static_cast<std::int32_t>(h.num_classes)) {
        throw FormatError("SBTD: label out of range", at);
      }
    }
  }
  return dump;
}

void write_dump(const TeacherDump& dump, const std::filesystem::path& path) {
  const auto bytes = encode_dump(dump);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dump " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

TeacherDump read_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open dump " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_dump(std::as_bytes(std::span<const char>(raw)));
}

TeacherDump gen_synthetic_dump(std::span<const Sample> dataset, int layers, int hidden, int num_classes,
                               std::uint64_t seed, int stage, std::uint64_t vocab_hash) {
  SPIKEBERT_REQUIRE(!dataset.empty(), "gen_synthetic_dump: dataset is empty");
  SPIKEBERT_REQUIRE(layers >= 1 && hidden >= 1 && num_classes >= 1, "gen_synthetic_dump: bad dims");
  SPIKEBERT_REQUIRE(stage == 1 || stage == 2, "gen_synthetic_dump: stage must be 1 or 2");
  const std::size_t max_len = dataset.front().token_ids.size();
  SPIKEBERT_REQUIRE(max_len > 0, "gen_synthetic_dump: samples must be encoded first");

  TeacherDump dump;
  dump.header = DumpHeader{kDumpVersion, static_cast<std::uint32_t>(stage), static_cast<std::uint32_t>(layers),
                           static_cast<std::uint32_t>(hidden), static_cast<std::uint32_t>(num_classes), vocab_hash,
                           static_cast<std::uint32_t>(dataset.size()), static_cast<std::uint32_t>(max_len)};

  std::vector<RowMatrixF> maps;
  for (int b = 0; b < layers; ++b) {
    std::mt19937_64 rng(detail::mix(seed ^ detail::mix(0x4c41594552ULL + std::uint64_t(b))));
    std::normal_distribution<float> dist(0.0f, 1.0f / std::sqrt(float(hidden)));
    RowMatrixF a(hidden, hidden);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = dist(rng);
    maps.push_back(std::move(a));
  }
  auto token_vector = [&](int id) {
    std::mt19937_64 rng(detail::mix(seed ^ detail::mix(0x544f4b454eULL + std::uint64_t(id))));
    std::normal_distribution<float> dist(0.0f, 1.0f);
    Eigen::RowVectorXf v(hidden);
    for (Eigen::Index i = 0; i < hidden; ++i) v(i) = dist(rng);
    return v;
  };

  const Eigen::Index n = static_cast<Eigen::Index>(max_len);
  for (const Sample& s : dataset) {
    SPIKEBERT_REQUIRE(s.token_ids.size() == max_len, "gen_synthetic_dump: samples padded to different lengths");
    TeacherFeatures f;
    f.token_ids.assign(s.token_ids.begin(), s.token_ids.end());
    f.embedding.resize(n, hidden);
    Eigen::RowVectorXf context = Eigen::RowVectorXf::Zero(hidden);
    int real = 0;
    for (Eigen::Index pos = 0; pos < n; ++pos) {
      f.embedding.row(pos) = token_vector(f.token_ids[static_cast<std::size_t>(pos)]);
      for (Eigen::Index i = 0; i < hidden; ++i) {
        f.embedding(pos, i) += 0.1f * std::sin(float(pos) / std::pow(100.0f, float(i) / float(hidden)));
      }
      if (f.token_ids[static_cast<std::size_t>(pos)] != kPadId) {
        context += f.embedding.row(pos);
        ++real;
      }
    }
    if (real > 0) context /= float(real);
    for (int b = 0; b < layers; ++b) {
      const float ctx_weight = float(b + 1) / float(layers);
      RowMatrixF pre = f.embedding * maps[static_cast<std::size_t>(b)].transpose();
      pre.rowwise() += ctx_weight * context;
      f.layers.push_back(pre.array().tanh().matrix());
    }
    dump.features.push_back(std::move(f));
    if (stage == 2) {
      SPIKEBERT_REQUIRE(s.label.has_value() && *s.label >= 0 && *s.label < num_classes,
                        "gen_synthetic_dump: stage-2 samples need a label below num_classes");
      TeacherTargets t;
      t.logits = Eigen::RowVectorXf::Zero(num_classes);
      t.logits(*s.label) = 4.0f;
      t.label = *s.label;
      dump.targets.push_back(std::move(t));
    }
  }
  return dump;
}

}  // namespace spikebert
