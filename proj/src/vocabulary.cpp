#include "opd/vocabulary.hpp"

#include <fmt/format.h>

#include <set>

namespace opd {

Vocabulary::Vocabulary(int size, TokenId eos_id, std::vector<std::string> glyphs)
    : size_(size), eos_(eos_id), glyphs_(std::move(glyphs)) {
  if (size_ < 2) throw ConfigError(fmt::format("vocabulary size must be >= 2, got {}", size_));
  if (eos_ < 0 || eos_ >= size_) throw ConfigError(fmt::format("eos id {} outside [0, {})", eos_, size_));
  if (glyphs_.empty()) {
    glyphs_.reserve(size_);
    for (TokenId id = 0; id < size_; ++id) glyphs_.push_back(default_glyph(id));
  }
  if (static_cast<int>(glyphs_.size()) != size_)
    throw ConfigError(fmt::format("expected {} glyphs, got {}", size_, glyphs_.size()));
  std::set<std::string> seen;
  for (const auto& g : glyphs_) {
    if (g.empty()) throw ConfigError("empty token glyph");
    if (!seen.insert(g).second) throw ConfigError(fmt::format("duplicate token glyph '{}'", g));
  }
}

const std::string& Vocabulary::glyph(TokenId id) const {
  if (!contains(id)) throw InvalidInput(fmt::format("token id {} outside vocabulary of size {}", id, size_));
  return glyphs_[static_cast<std::size_t>(id)];
}

void Vocabulary::validate_sequence(std::span<const TokenId> seq) const {
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!contains(seq[i]))
      throw InvalidInput(fmt::format("token id {} at position {} outside vocabulary of size {}", seq[i], i, size_));
    if (seq[i] == eos_ && i + 1 != seq.size())
      throw InvalidInput(fmt::format("EOS at position {} is not the final token", i));
  }
}

void Vocabulary::validate_state(const PrefixState& state) const {
  for (auto part : {state.prompt, state.generated}) {
    for (TokenId t : part) {
      if (!contains(t)) throw InvalidInput(fmt::format("token id {} outside vocabulary of size {}", t, size_));
      if (t == eos_) throw InvalidInput("prefix state contains EOS");
    }
  }
}

std::string Vocabulary::render(std::span<const TokenId> seq) const {
  std::string out;
  for (TokenId t : seq) out += glyph(t);
  return out;
}

std::string Vocabulary::default_glyph(TokenId id) { return fmt::format("t{:02d} ", id); }

}  // namespace opd
