#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "opd/rollout.hpp"

namespace opd {

enum class AdvantageKind { reverse_kl, group_normalized };
enum class LengthNorm { per_token_mean, none };

std::string_view to_string(LengthNorm n);
LengthNorm length_norm_from_string(std::string_view s);

// Per-token advantages for a rollout batch, one vector per rollout in flatten() order.
struct AdvantageTable {
  std::vector<std::vector<double>> per_token;
  AdvantageKind kind = AdvantageKind::reverse_kl;
};

struct LossReport {
  double value = 0.0;
  std::vector<double> grad;
  std::map<std::string, double> components;  // "opd", "sft", "kl_penalty"
};

struct ObjectiveConfig {
  double clip_eps = 0.2;
  double lambda_gold = 1.0;
  double beta_kl = 0.1;
  LengthNorm length_norm = LengthNorm::per_token_mean;

  void validate() const;
};

struct GoldenExample {
  TokenSequence prompt;
  TokenSequence target;  // ends in EOS
};

// log pi_T(y_t | s_t) - log pi_theta(y_t | s_t) under the current student.
std::vector<double> reverse_kl_advantage(const Rollout& rollout, const Policy& student_current);
AdvantageTable reverse_kl_advantages(const std::vector<RolloutGroup>& batch, const Policy& student_current);

// (r - mean) / (std + 1e-8), population std.
std::vector<double> group_normalized_advantage(std::span<const double> rewards);
// Broadcasts each rollout's group-normalized reward to all of its tokens.
// rewards: one per rollout in flatten() order.
AdvantageTable group_normalized_advantages(const std::vector<RolloutGroup>& batch, std::span<const double> rewards);

// min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)
double clipped_term(double ratio, double advantage, double eps);

// Negated clipped surrogate over the batch with the given (constant) advantages:
//   -(1/N) sum_i w_i sum_t min(rho_it A_it, clip(rho_it) A_it),  w_i = 1/|o_i| or 1,
// N = number of rollouts across all groups, rho_it = exp(log pi_theta - student_logps_old).
LossReport surrogate_loss(const std::vector<RolloutGroup>& batch, const AdvantageTable& advantages,
                          const Policy& student_current, const ObjectiveConfig& cfg);

// surrogate_loss with reverse-KL advantages from the current student.
LossReport opd_loss(const std::vector<RolloutGroup>& batch, const Policy& student_current,
                    const ObjectiveConfig& cfg);

// Mean per-token NLL of the target, teacher-forced on the golden prefix.
LossReport sft_loss(const GoldenExample& example, const Policy& student_current);

// Mean over positions of KL(pi_T || pi_theta) along a fixed sequence.
double offline_distill_loss(std::span<const TokenId> prompt, std::span<const TokenId> sequence,
                            const Policy& teacher, const Policy& student_current);
LossReport offline_distill_loss_report(std::span<const TokenId> prompt, std::span<const TokenId> sequence,
                                       const Policy& teacher, const Policy& student_current);

// Mean over prefixes of the exact KL(pi_theta(.|s) || pi_ref(.|s)).
double reference_kl_penalty(std::span<const PrefixState> prefixes, const Policy& student_current,
                            const Policy& reference);
LossReport reference_kl_report(std::span<const PrefixState> prefixes, const Policy& student_current,
                               const Policy& reference);

// Every sampling state of every rollout in the batch (on-policy prefixes).
std::vector<PrefixState> rollout_prefixes(const std::vector<RolloutGroup>& batch);

// opd + lambda_gold * mean(sft over golden) + beta_kl * reference_kl(on-policy prefixes).
// With `advantages` null the reverse-KL table is computed from the current student.
LossReport stable_opd_loss(const std::vector<RolloutGroup>& batch, const std::vector<GoldenExample>& golden_batch,
                           const Policy& student_current, const Policy& reference, const ObjectiveConfig& cfg,
                           const AdvantageTable* advantages = nullptr);

struct GradientSplit {
  std::vector<double> regular;
  std::vector<double> repetitive;
};

// Splits the unclipped policy-gradient estimate
//   g = (1/N) sum_i w_i sum_t A_it grad log pi_theta(y_it | s_it)
// by mask membership; regular + repetitive == g. Masks in flatten() order.
GradientSplit gradient_decomposition(const std::vector<RolloutGroup>& batch, const Policy& student_current,
                                     const std::vector<std::vector<bool>>& repetitive_mask,
                                     const ObjectiveConfig& cfg, const AdvantageTable* advantages = nullptr);

}  // namespace opd
