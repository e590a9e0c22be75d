// SPDX-License-Identifier: Apache-2.0
//
// Weight checkpoints: a short text header (config, metadata, one line per
// tensor with shape and byte offset) followed by a blob of little-endian
// float32 values, each tensor row-major. Layout in docs/formats.md.
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "spikebert/config.hpp"
#include "spikebert/model.hpp"

namespace spikebert {

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, std::string> meta;
  Parameters<float> params;
};

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Throws FormatError on a malformed header or a blob of the wrong size.
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace spikebert
