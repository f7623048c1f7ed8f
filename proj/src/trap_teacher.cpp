#include "opd/trap_teacher.hpp"

#include <fmt/format.h>

namespace opd {

std::optional<EstablishedRepeat> established_repeat(std::span<const TokenId> generated, int max_period) {
  const auto n = generated.size();
  for (int p = 1; p <= max_period; ++p) {
    const auto up = static_cast<std::size_t>(p);
    if (n < 2 * up) break;
    bool two_copies = true;
    for (std::size_t j = n - up; j < n; ++j) {
      if (generated[j] != generated[j - up]) {
        two_copies = false;
        break;
      }
    }
    if (two_copies) return EstablishedRepeat{p, generated[n - up]};
  }
  return std::nullopt;
}

TrapTeacher::TrapTeacher(std::unique_ptr<Policy> base, TrapParams params)
    : Policy(base->vocab(), PolicyRole::teacher), base_(std::move(base)), params_(params) {
  if (params_.repeat_boost < 0.0) throw ConfigError("repeat_boost must be >= 0");
  if (params_.eos_damp < 0.0) throw ConfigError("eos_damp must be >= 0");
  if (params_.max_period < 1) throw ConfigError("max_period must be >= 1");
  if (params_.long_context < 1) throw ConfigError("long_context must be >= 1");
  base_->set_role(PolicyRole::teacher);
}

TrapTeacher::TrapTeacher(const TrapTeacher& other)
    : Policy(other), base_(other.base_->clone()), params_(other.params_) {}

void TrapTeacher::logits(const PrefixState& state, std::span<double> out) const {
  base_->logits(state, out);
  if (params_.repeat_boost != 0.0) {
    if (auto rep = established_repeat(state.generated, params_.max_period))
      out[static_cast<std::size_t>(rep->continuation)] += params_.repeat_boost;
  }
  if (params_.eos_damp != 0.0 && state.generated.size() >= static_cast<std::size_t>(params_.long_context))
    out[static_cast<std::size_t>(vocab().eos())] -= params_.eos_damp;
}

void TrapTeacher::backprop_logits(const PrefixState&, std::span<const double>, std::span<double>) const {
  require_trainable();
  throw UsageError("trap teacher is not differentiable");
}

std::span<double> TrapTeacher::mutable_params() { throw UsageError("trap teacher parameters are frozen"); }

}  // namespace opd
