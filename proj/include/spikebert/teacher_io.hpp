// SPDX-License-Identifier: Apache-2.0
//
// SBTD v1: binary dump of teacher token ids, embeddings, per-block hidden
// states and (stage 2) logits + labels. Little-endian, fixed layout; see
// docs/formats.md for the byte-level description.
#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace spikebert {

struct Sample;

inline constexpr char kDumpMagic[4] = {'S', 'B', 'T', 'D'};
inline constexpr std::uint32_t kDumpVersion = 1;
inline constexpr std::size_t kDumpHeaderBytes = 40;

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct DumpHeader {
  std::uint32_t version = kDumpVersion;
  std::uint32_t stage = 1;  // 1: features only; 2: features + logits + labels
  std::uint32_t layers = 0;  // B, teacher transformer blocks
  std::uint32_t hidden = 0;  // D_t
  std::uint32_t num_classes = 0;
  std::uint64_t vocab_hash = 0;
  std::uint32_t sample_count = 0;
  std::uint32_t max_len = 0;  // N; token ids are padded to this length

  bool operator==(const DumpHeader&) const = default;
};

/// Teacher outputs usable in both stages. Stage-1 training only ever sees this type.
struct TeacherFeatures {
  std::vector<std::int32_t> token_ids;  // N, padded with kPadId
  RowMatrixF embedding;                 // N x D_t
  std::vector<RowMatrixF> layers;       // B entries, each N x D_t (layer b+1 at index b)
};

/// Stage-2 supervision for one sample.
struct TeacherTargets {
  Eigen::RowVectorXf logits;  // num_classes
  std::int32_t label = 0;
};

struct TeacherDump {
  DumpHeader header;
  std::vector<TeacherFeatures> features;
  std::vector<TeacherTargets> targets;  // empty for stage-1 dumps

  bool has_targets() const { return header.stage == 2; }

  /// Throws FormatError(offset 0) when records disagree with the header.
  void validate() const;
};

std::vector<std::byte> encode_dump(const TeacherDump& dump);

/// Throws FormatError naming the byte offset of the first inconsistency.
TeacherDump decode_dump(std::span<const std::byte> bytes);

void write_dump(const TeacherDump& dump, const std::filesystem::path& path);
TeacherDump read_dump(const std::filesystem::path& path);

/// Deterministic stand-in teacher. Embeddings are a seeded random projection
/// of token ids plus a small positional signal; layer b features are
/// tanh(A_b e + c_b * context) with per-layer random maps A_b and the
/// sentence-mean embedding as context; stage-2 logits put a margin of 4 on
/// the gold label.
TeacherDump gen_synthetic_dump(std::span<const Sample> dataset, int layers, int hidden, int num_classes,
                               std::uint64_t seed, int stage, std::uint64_t vocab_hash);

}  // namespace spikebert
