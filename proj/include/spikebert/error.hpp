// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace spikebert {

/// Violated precondition or shape contract. Indicates a programming error.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Bad user-supplied input (token id out of range, label out of range, ...).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text file; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Malformed binary file; carries the byte offset where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Training data is inconsistent with what the loss needs (missing teacher layer, logits, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SPIKEBERT_REQUIRE(cond, msg)                  \
  do {                                                \
    if (!(cond)) throw ::spikebert::ContractViolation(msg); \
  } while (0)

}  // namespace spikebert
