#include "opd/objectives.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace opd {

std::string_view to_string(LengthNorm n) { return n == LengthNorm::per_token_mean ? "per_token_mean" : "none"; }

LengthNorm length_norm_from_string(std::string_view s) {
  if (s == "per_token_mean") return LengthNorm::per_token_mean;
  if (s == "none") return LengthNorm::none;
  throw ConfigError(fmt::format("unknown length_norm '{}'", s));
}

void ObjectiveConfig::validate() const {
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError(fmt::format("clip_eps must be in (0, 1), got {}", clip_eps));
  if (!(lambda_gold >= 0.0)) throw ConfigError(fmt::format("lambda_gold must be >= 0, got {}", lambda_gold));
  if (!(beta_kl >= 0.0)) throw ConfigError(fmt::format("beta_kl must be >= 0, got {}", beta_kl));
}

// ---------------------------------------------------------------------------
// Advantages

std::vector<double> reverse_kl_advantage(const Rollout& rollout, const Policy& student_current) {
  std::vector<double> adv(rollout.generated.size());
  std::vector<double> lp(static_cast<std::size_t>(student_current.vocab().size()));
  for (std::size_t t = 0; t < adv.size(); ++t) {
    student_current.log_probs(rollout.state_at(t), lp);
    adv[t] = rollout.teacher_logps[t] - lp[static_cast<std::size_t>(rollout.generated[t])];
  }
  return adv;
}

AdvantageTable reverse_kl_advantages(const std::vector<RolloutGroup>& batch, const Policy& student_current) {
  AdvantageTable table;
  table.kind = AdvantageKind::reverse_kl;
  for (const Rollout* r : flatten(batch)) table.per_token.push_back(reverse_kl_advantage(*r, student_current));
  return table;
}

std::vector<double> group_normalized_advantage(std::span<const double> rewards) {
  if (rewards.empty()) throw UsageError("group_normalized_advantage needs at least one reward");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(rewards.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (rewards[i] - mean) / (sd + 1e-8);
  return out;
}

AdvantageTable group_normalized_advantages(const std::vector<RolloutGroup>& batch, std::span<const double> rewards) {
  if (rewards.size() != count_rollouts(batch))
    throw UsageError(fmt::format("{} rewards for {} rollouts", rewards.size(), count_rollouts(batch)));
  AdvantageTable table;
  table.kind = AdvantageKind::group_normalized;
  std::size_t offset = 0;
  for (const auto& g : batch) {
    const auto adv = group_normalized_advantage(rewards.subspan(offset, g.rollouts.size()));
    for (std::size_t i = 0; i < g.rollouts.size(); ++i)
      table.per_token.emplace_back(g.rollouts[i].generated.size(), adv[i]);
    offset += g.rollouts.size();
  }
  return table;
}

double clipped_term(double ratio, double advantage, double eps) {
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  return std::min(ratio * advantage, clipped * advantage);
}

// ---------------------------------------------------------------------------
// Surrogate

namespace {

void check_table_shape(const std::vector<const Rollout*>& rollouts, const AdvantageTable& adv) {
  if (adv.per_token.size() != rollouts.size())
    throw UsageError(fmt::format("advantage table has {} rows for {} rollouts", adv.per_token.size(), rollouts.size()));
  for (std::size_t i = 0; i < rollouts.size(); ++i)
    if (adv.per_token[i].size() != rollouts[i]->generated.size())
      throw UsageError(fmt::format("advantage row {} has {} entries for {} tokens", i, adv.per_token[i].size(),
                                   rollouts[i]->generated.size()));
}

double rollout_weight(const Rollout& r, LengthNorm norm) {
  return norm == LengthNorm::per_token_mean ? 1.0 / static_cast<double>(r.generated.size()) : 1.0;
}

}  // namespace

LossReport surrogate_loss(const std::vector<RolloutGroup>& batch, const AdvantageTable& advantages,
                          const Policy& student_current, const ObjectiveConfig& cfg) {
  cfg.validate();
  const auto rollouts = flatten(batch);
  if (rollouts.empty()) throw UsageError("surrogate loss over an empty batch");
  check_table_shape(rollouts, advantages);

  LossReport report;
  report.grad.assign(student_current.num_params(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(rollouts.size());
  std::vector<double> lp(static_cast<std::size_t>(student_current.vocab().size()));
  double objective = 0.0;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const Rollout& r = *rollouts[i];
    if (r.student_logps_old.size() != r.generated.size()) throw UsageError("rollout lacks sampling-time log-probs");
    const double w = rollout_weight(r, cfg.length_norm);
    double rollout_sum = 0.0;
    for (std::size_t t = 0; t < r.generated.size(); ++t) {
      const auto state = r.state_at(t);
      student_current.log_probs(state, lp);
      const TokenId y = r.generated[t];
      const double ratio = std::exp(lp[static_cast<std::size_t>(y)] - r.student_logps_old[t]);
      const double a = advantages.per_token[i][t];
      const double unclipped = ratio * a;
      const double term = clipped_term(ratio, a, cfg.clip_eps);
      rollout_sum += term;
      // The clipped branch is constant in theta; only the unclipped branch carries gradient.
      if (unclipped <= term && a != 0.0)
        student_current.accumulate_log_prob_grad(state, lp, y, -inv_n * w * a * ratio, report.grad);
    }
    objective += w * rollout_sum;
  }
  report.value = -objective * inv_n;
  report.components["opd"] = report.value;
  return report;
}

LossReport opd_loss(const std::vector<RolloutGroup>& batch, const Policy& student_current,
                    const ObjectiveConfig& cfg) {
  if (batch.empty() || count_rollouts(batch) == 0) throw UsageError("opd_loss over an empty batch");
  return surrogate_loss(batch, reverse_kl_advantages(batch, student_current), student_current, cfg);
}

// ---------------------------------------------------------------------------
// Supervised and distillation terms

LossReport sft_loss(const GoldenExample& example, const Policy& student_current) {
  const Vocabulary& vocab = student_current.vocab();
  if (example.target.empty() || example.target.back() != vocab.eos())
    throw InvalidInput("golden target must end in EOS");
  vocab.validate_sequence(example.target);

  LossReport report;
  report.grad.assign(student_current.num_params(), 0.0);
  const double inv_len = 1.0 / static_cast<double>(example.target.size());
  std::vector<double> lp(static_cast<std::size_t>(vocab.size()));
  double nll = 0.0;
  for (std::size_t t = 0; t < example.target.size(); ++t) {
    const PrefixState state{example.prompt, std::span<const TokenId>(example.target).first(t)};
    student_current.log_probs(state, lp);
    const TokenId y = example.target[t];
    nll -= lp[static_cast<std::size_t>(y)];
    if (student_current.trainable()) student_current.accumulate_log_prob_grad(state, lp, y, -inv_len, report.grad);
  }
  report.value = nll * inv_len;
  report.components["sft"] = report.value;
  return report;
}

LossReport offline_distill_loss_report(std::span<const TokenId> prompt, std::span<const TokenId> sequence,
                                       const Policy& teacher, const Policy& student_current) {
  const Vocabulary& vocab = student_current.vocab();
  vocab.validate_sequence(sequence);
  if (sequence.empty()) throw InvalidInput("offline distillation needs a non-empty sequence");

  LossReport report;
  report.grad.assign(student_current.num_params(), 0.0);
  const auto V = static_cast<std::size_t>(vocab.size());
  const double inv_len = 1.0 / static_cast<double>(sequence.size());
  std::vector<double> slp(V), tlp(V), dz(V);
  double total = 0.0;
  for (std::size_t t = 0; t < sequence.size(); ++t) {
    const PrefixState state{prompt, sequence.first(t)};
    student_current.log_probs(state, slp);
    teacher.log_probs(state, tlp);
    double kl = 0.0;
    for (std::size_t k = 0; k < V; ++k) {
      const double pt = std::exp(tlp[k]);
      if (pt > 0.0) kl += pt * (tlp[k] - slp[k]);
      dz[k] = inv_len * (std::exp(slp[k]) - pt);
    }
    total += kl;
    if (student_current.trainable()) student_current.backprop_logits(state, dz, report.grad);
  }
  report.value = total * inv_len;
  report.components["offline_distill"] = report.value;
  return report;
}

double offline_distill_loss(std::span<const TokenId> prompt, std::span<const TokenId> sequence,
                            const Policy& teacher, const Policy& student_current) {
  const Vocabulary& vocab = student_current.vocab();
  vocab.validate_sequence(sequence);
  if (sequence.empty()) throw InvalidInput("offline distillation needs a non-empty sequence");
  const auto V = static_cast<std::size_t>(vocab.size());
  std::vector<double> slp(V), tlp(V);
  double total = 0.0;
  for (std::size_t t = 0; t < sequence.size(); ++t) {
    const PrefixState state{prompt, sequence.first(t)};
    student_current.log_probs(state, slp);
    teacher.log_probs(state, tlp);
    for (std::size_t k = 0; k < V; ++k) {
      const double pt = std::exp(tlp[k]);
      if (pt > 0.0) total += pt * (tlp[k] - slp[k]);
    }
  }
  return total / static_cast<double>(sequence.size());
}

LossReport reference_kl_report(std::span<const PrefixState> prefixes, const Policy& student_current,
                               const Policy& reference) {
  LossReport report;
  report.grad.assign(student_current.num_params(), 0.0);
  if (prefixes.empty()) {
    report.components["kl_penalty"] = 0.0;
    return report;
  }
  const auto V = static_cast<std::size_t>(student_current.vocab().size());
  const double inv_n = 1.0 / static_cast<double>(prefixes.size());
  std::vector<double> slp(V), rlp(V), dz(V);
  double total = 0.0;
  for (const auto& state : prefixes) {
    student_current.log_probs(state, slp);
    reference.log_probs(state, rlp);
    double kl = 0.0;
    for (std::size_t k = 0; k < V; ++k) {
      const double ps = std::exp(slp[k]);
      if (ps > 0.0) kl += ps * (slp[k] - rlp[k]);
    }
    // d KL / d z_k = p_k (log p_k - log r_k - KL)
    for (std::size_t k = 0; k < V; ++k) {
      const double ps = std::exp(slp[k]);
      dz[k] = ps > 0.0 ? inv_n * ps * (slp[k] - rlp[k] - kl) : 0.0;
    }
    total += kl;
    if (student_current.trainable()) student_current.backprop_logits(state, dz, report.grad);
  }
  report.value = total * inv_n;
  report.components["kl_penalty"] = report.value;
  return report;
}

double reference_kl_penalty(std::span<const PrefixState> prefixes, const Policy& student_current,
                            const Policy& reference) {
  if (prefixes.empty()) return 0.0;
  const auto V = static_cast<std::size_t>(student_current.vocab().size());
  std::vector<double> slp(V), rlp(V);
  double total = 0.0;
  for (const auto& state : prefixes) {
    student_current.log_probs(state, slp);
    reference.log_probs(state, rlp);
    for (std::size_t k = 0; k < V; ++k) {
      const double ps = std::exp(slp[k]);
      if (ps > 0.0) total += ps * (slp[k] - rlp[k]);
    }
  }
  return total / static_cast<double>(prefixes.size());
}

std::vector<PrefixState> rollout_prefixes(const std::vector<RolloutGroup>& batch) {
  std::vector<PrefixState> out;
  for (const auto& g : batch)
    for (const auto& r : g.rollouts)
      for (std::size_t t = 0; t < r.generated.size(); ++t) out.push_back(r.state_at(t));
  return out;
}

// ---------------------------------------------------------------------------
// Stable-OPD mixture

LossReport stable_opd_loss(const std::vector<RolloutGroup>& batch, const std::vector<GoldenExample>& golden_batch,
                           const Policy& student_current, const Policy& reference, const ObjectiveConfig& cfg,
                           const AdvantageTable* advantages) {
  cfg.validate();
  if (batch.empty() || count_rollouts(batch) == 0) throw UsageError("stable_opd_loss over an empty batch");
  if (cfg.lambda_gold > 0.0 && golden_batch.empty())
    throw UsageError("lambda_gold > 0 requires a non-empty golden batch");

  LossReport report = advantages ? surrogate_loss(batch, *advantages, student_current, cfg)
                                 : opd_loss(batch, student_current, cfg);
  report.components["sft"] = 0.0;
  report.components["kl_penalty"] = 0.0;

  if (!golden_batch.empty()) {
    const double inv_g = 1.0 / static_cast<double>(golden_batch.size());
    double sft_mean = 0.0;
    std::vector<double> sft_grad(report.grad.size(), 0.0);
    for (const auto& ex : golden_batch) {
      const auto s = sft_loss(ex, student_current);
      sft_mean += s.value * inv_g;
      for (std::size_t k = 0; k < sft_grad.size(); ++k) sft_grad[k] += s.grad[k] * inv_g;
    }
    report.components["sft"] = sft_mean;
    if (cfg.lambda_gold > 0.0) {
      report.value += cfg.lambda_gold * sft_mean;
      for (std::size_t k = 0; k < sft_grad.size(); ++k) report.grad[k] += cfg.lambda_gold * sft_grad[k];
    }
  }

  if (cfg.beta_kl > 0.0) {
    const auto prefixes = rollout_prefixes(batch);
    const auto kl = reference_kl_report(prefixes, student_current, reference);
    report.components["kl_penalty"] = kl.value;
    report.value += cfg.beta_kl * kl.value;
    for (std::size_t k = 0; k < kl.grad.size(); ++k) report.grad[k] += cfg.beta_kl * kl.grad[k];
  }
  return report;
}

// ---------------------------------------------------------------------------
// Diagnostic

GradientSplit gradient_decomposition(const std::vector<RolloutGroup>& batch, const Policy& student_current,
                                     const std::vector<std::vector<bool>>& repetitive_mask,
                                     const ObjectiveConfig& cfg, const AdvantageTable* advantages) {
  const auto rollouts = flatten(batch);
  if (repetitive_mask.size() != rollouts.size())
    throw UsageError(fmt::format("mask has {} rows for {} rollouts", repetitive_mask.size(), rollouts.size()));
  for (std::size_t i = 0; i < rollouts.size(); ++i)
    if (repetitive_mask[i].size() != rollouts[i]->generated.size())
      throw UsageError(fmt::format("mask row {} has {} entries for {} tokens", i, repetitive_mask[i].size(),
                                   rollouts[i]->generated.size()));
  if (rollouts.empty()) throw UsageError("gradient decomposition over an empty batch");

  AdvantageTable computed;
  if (!advantages) {
    computed = reverse_kl_advantages(batch, student_current);
    advantages = &computed;
  }
  check_table_shape(rollouts, *advantages);

  GradientSplit split;
  split.regular.assign(student_current.num_params(), 0.0);
  split.repetitive.assign(student_current.num_params(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(rollouts.size());
  std::vector<double> lp(static_cast<std::size_t>(student_current.vocab().size()));
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const Rollout& r = *rollouts[i];
    const double w = rollout_weight(r, cfg.length_norm);
    for (std::size_t t = 0; t < r.generated.size(); ++t) {
      const auto state = r.state_at(t);
      student_current.log_probs(state, lp);
      auto& target = repetitive_mask[i][t] ? split.repetitive : split.regular;
      student_current.accumulate_log_prob_grad(state, lp, r.generated[t], inv_n * w * advantages->per_token[i][t],
                                               target);
    }
  }
  return split;
}

}  // namespace opd
