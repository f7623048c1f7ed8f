#pragma once

#include <memory>
#include <optional>

#include "opd/policy.hpp"

namespace opd {

// A repeat is "established" when the generated prefix ends in two full copies of some
// n-gram with n <= max_period. The smallest such period wins.
struct EstablishedRepeat {
  int period = 0;
  TokenId continuation = 0;  // token that extends the repeat by one step
};
std::optional<EstablishedRepeat> established_repeat(std::span<const TokenId> generated, int max_period);

struct TrapParams {
  double repeat_boost = 0.0;  // logit bonus for continuing an established repeat
  double eos_damp = 0.0;      // logit penalty on EOS once the generated prefix is long
  int long_context = 12;      // generated length at which eos_damp starts to apply
  int max_period = 3;
};

// Frozen teacher: a base policy whose logits are shifted toward continuing
// repeats and away from EOS in long prefixes. With zero boost and damp it is
// exactly the base policy.
class TrapTeacher final : public Policy {
 public:
  TrapTeacher(std::unique_ptr<Policy> base, TrapParams params);
  TrapTeacher(const TrapTeacher& other);

  PolicyKind kind() const override { return PolicyKind::trap; }
  std::unique_ptr<Policy> clone() const override { return std::make_unique<TrapTeacher>(*this); }
  void logits(const PrefixState& state, std::span<double> out) const override;
  void backprop_logits(const PrefixState&, std::span<const double>, std::span<double>) const override;
  std::span<const double> params() const override { return base_->params(); }
  std::span<double> mutable_params() override;

  const Policy& base() const { return *base_; }
  const TrapParams& trap_params() const { return params_; }

 private:
  std::unique_ptr<Policy> base_;
  TrapParams params_;
};

}  // namespace opd
