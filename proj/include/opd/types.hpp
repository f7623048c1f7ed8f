#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace opd {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// Malformed data handed to an operation (bad token ids, EOS in the wrong place, ...).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An operation called in a way its contract forbids (empty batch, gradient of a frozen policy, ...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Configuration that cannot be realized.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A prompt plus the tokens generated so far. Views only; the owner keeps the storage alive.
struct PrefixState {
  std::span<const TokenId> prompt;
  std::span<const TokenId> generated;
};

}  // namespace opd
