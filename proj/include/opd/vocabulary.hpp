#pragma once

#include <string>
#include <vector>

#include "opd/types.hpp"

namespace opd {

// The action space shared by student, teacher and reference policies.
//
// Every token carries a printable glyph; rendering a sequence concatenates glyphs,
// which is the byte string the repetition metrics operate on.
class Vocabulary {
 public:
  // Glyphs default to default_glyph(id) when `glyphs` is empty.
  Vocabulary(int size, TokenId eos_id, std::vector<std::string> glyphs = {});

  int size() const { return size_; }
  TokenId eos() const { return eos_; }
  const std::string& glyph(TokenId id) const;
  const std::vector<std::string>& glyphs() const { return glyphs_; }

  bool contains(TokenId id) const { return id >= 0 && id < size_; }

  // Throws InvalidInput unless every id is in range and EOS, if present, is last.
  void validate_sequence(std::span<const TokenId> seq) const;
  // Throws InvalidInput unless the state is well formed (no EOS anywhere).
  void validate_state(const PrefixState& state) const;

  std::string render(std::span<const TokenId> seq) const;

  // "t07 " style fixed-width glyph; depends only on the id.
  static std::string default_glyph(TokenId id);

  bool operator==(const Vocabulary&) const = default;

 private:
  int size_;
  TokenId eos_;
  std::vector<std::string> glyphs_;
};

}  // namespace opd
