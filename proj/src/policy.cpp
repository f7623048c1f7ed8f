#include "opd/policy.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "opd/rng.hpp"

namespace opd {

std::string_view to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::tabular_ngram: return "tabular-ngram";
    case PolicyKind::tiny_mlp: return "tiny-mlp";
    case PolicyKind::trap: return "trap";
  }
  return "?";
}

std::string_view to_string(PolicyRole role) {
  switch (role) {
    case PolicyRole::student: return "student";
    case PolicyRole::teacher: return "teacher";
    case PolicyRole::reference: return "reference";
  }
  return "?";
}

PolicyKind policy_kind_from_string(std::string_view s) {
  if (s == "tabular-ngram") return PolicyKind::tabular_ngram;
  if (s == "tiny-mlp") return PolicyKind::tiny_mlp;
  if (s == "trap") return PolicyKind::trap;
  throw InvalidInput(fmt::format("unknown policy kind '{}'", s));
}

PolicyRole policy_role_from_string(std::string_view s) {
  if (s == "student") return PolicyRole::student;
  if (s == "teacher") return PolicyRole::teacher;
  if (s == "reference") return PolicyRole::reference;
  throw InvalidInput(fmt::format("unknown policy role '{}'", s));
}

void log_softmax(std::span<double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  for (double& z : logits) z -= lse;
}

TokenId token_from_end(const PrefixState& state, std::size_t back) {
  if (back < state.generated.size()) return state.generated[state.generated.size() - 1 - back];
  back -= state.generated.size();
  if (back < state.prompt.size()) return state.prompt[state.prompt.size() - 1 - back];
  return TabularPolicy::kPad;
}

// ---------------------------------------------------------------------------
// Policy

void Policy::log_probs(const PrefixState& state, std::span<double> out) const {
  vocab_.validate_state(state);
  logits(state, out);
  log_softmax(out);
}

std::vector<double> Policy::log_probs(const PrefixState& state) const {
  std::vector<double> out(static_cast<std::size_t>(vocab_.size()));
  log_probs(state, out);
  return out;
}

std::vector<double> Policy::next_token_distribution(const PrefixState& state) const {
  auto p = log_probs(state);
  for (double& x : p) x = std::exp(x);
  return p;
}

double Policy::log_prob(const PrefixState& state, TokenId token) const {
  if (!vocab_.contains(token)) throw InvalidInput(fmt::format("token id {} outside vocabulary", token));
  return log_probs(state)[static_cast<std::size_t>(token)];
}

void Policy::require_trainable() const {
  if (!trainable())
    throw UsageError(fmt::format("gradient requested on a frozen {} policy", to_string(role_)));
}

std::vector<double> Policy::log_prob_grad(const PrefixState& state, TokenId token) const {
  require_trainable();
  if (!vocab_.contains(token)) throw InvalidInput(fmt::format("token id {} outside vocabulary", token));
  const auto lp = log_probs(state);
  std::vector<double> grad(num_params(), 0.0);
  accumulate_log_prob_grad(state, lp, token, 1.0, grad);
  return grad;
}

void Policy::accumulate_log_prob_grad(const PrefixState& state, std::span<const double> state_log_probs,
                                      TokenId token, double scale, std::span<double> grad) const {
  require_trainable();
  // d log p_y / d z_k = [k == y] - p_k
  std::vector<double> dz(state_log_probs.size());
  for (std::size_t k = 0; k < dz.size(); ++k) dz[k] = -scale * std::exp(state_log_probs[k]);
  dz[static_cast<std::size_t>(token)] += scale;
  backprop_logits(state, dz, grad);
}

// ---------------------------------------------------------------------------
// TabularPolicy

namespace {

std::size_t checked_rows(const Vocabulary& vocab, int order) {
  if (order < 1 || order > 4) throw ConfigError(fmt::format("tabular order must be in [1, 4], got {}", order));
  std::size_t rows = 1;
  for (int i = 0; i < order; ++i) rows *= static_cast<std::size_t>(vocab.size() + 1);
  return rows;
}

}  // namespace

TabularPolicy::TabularPolicy(Vocabulary vocab, int order, PolicyRole role)
    : Policy(std::move(vocab), role), order_(order), num_rows_(checked_rows(this->vocab(), order)) {
  params_.assign(num_rows_ * static_cast<std::size_t>(this->vocab().size()), 0.0);
}

TabularPolicy::TabularPolicy(Vocabulary vocab, int order, std::vector<double> params, PolicyRole role)
    : Policy(std::move(vocab), role), order_(order), num_rows_(checked_rows(this->vocab(), order)),
      params_(std::move(params)) {
  if (params_.size() != num_rows_ * static_cast<std::size_t>(this->vocab().size()))
    throw ConfigError(fmt::format("tabular policy expects {} params, got {}",
                                  num_rows_ * static_cast<std::size_t>(this->vocab().size()), params_.size()));
}

std::size_t TabularPolicy::row_index(const PrefixState& state) const {
  const auto base = static_cast<std::size_t>(vocab().size() + 1);
  std::size_t row = 0, mult = 1;
  for (int j = 0; j < order_; ++j) {
    const TokenId t = token_from_end(state, static_cast<std::size_t>(j));
    const std::size_t sym = t == kPad ? base - 1 : static_cast<std::size_t>(t);
    row += sym * mult;
    mult *= base;
  }
  return row;
}

std::size_t TabularPolicy::row_index(std::span<const TokenId> context_oldest_first) const {
  if (context_oldest_first.size() != static_cast<std::size_t>(order_))
    throw InvalidInput(fmt::format("context has {} tokens, order is {}", context_oldest_first.size(), order_));
  const auto base = static_cast<std::size_t>(vocab().size() + 1);
  std::size_t row = 0, mult = 1;
  for (int j = 0; j < order_; ++j) {
    const TokenId t = context_oldest_first[context_oldest_first.size() - 1 - static_cast<std::size_t>(j)];
    if (t != kPad && !vocab().contains(t)) throw InvalidInput(fmt::format("token id {} outside vocabulary", t));
    row += (t == kPad ? base - 1 : static_cast<std::size_t>(t)) * mult;
    mult *= base;
  }
  return row;
}

void TabularPolicy::logits(const PrefixState& state, std::span<double> out) const {
  const auto r = row(row_index(state));
  std::copy(r.begin(), r.end(), out.begin());
}

void TabularPolicy::backprop_logits(const PrefixState& state, std::span<const double> dlogits,
                                    std::span<double> grad) const {
  require_trainable();
  const std::size_t offset = row_index(state) * static_cast<std::size_t>(vocab().size());
  for (std::size_t k = 0; k < dlogits.size(); ++k) grad[offset + k] += dlogits[k];
}

// ---------------------------------------------------------------------------
// MlpPolicy

namespace {

std::size_t mlp_param_count(const Vocabulary& vocab, int window, int hidden) {
  if (window < 1) throw ConfigError(fmt::format("mlp window must be >= 1, got {}", window));
  if (hidden < 1) throw ConfigError(fmt::format("mlp hidden width must be >= 1, got {}", hidden));
  const auto V = static_cast<std::size_t>(vocab.size());
  const auto H = static_cast<std::size_t>(hidden);
  const auto in = static_cast<std::size_t>(window) * (V + 1);
  return H * in + H + V * H + V;
}

}  // namespace

MlpPolicy::MlpPolicy(Vocabulary vocab, int window, int hidden, std::uint64_t seed, double init_scale,
                     PolicyRole role)
    : Policy(std::move(vocab), role), window_(window), hidden_(hidden) {
  params_.resize(mlp_param_count(this->vocab(), window, hidden));
  const CounterRng rng(seed, 0x6d6c70ull);
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i] = init_scale * (2.0 * rng.uniform(i) - 1.0);
}

MlpPolicy::MlpPolicy(Vocabulary vocab, int window, int hidden, std::vector<double> params, PolicyRole role)
    : Policy(std::move(vocab), role), window_(window), hidden_(hidden), params_(std::move(params)) {
  if (params_.size() != mlp_param_count(this->vocab(), window, hidden))
    throw ConfigError(fmt::format("mlp policy expects {} params, got {}",
                                  mlp_param_count(this->vocab(), window, hidden), params_.size()));
}

void MlpPolicy::active_inputs(const PrefixState& state, std::vector<std::size_t>& out) const {
  const auto base = static_cast<std::size_t>(vocab().size() + 1);
  out.resize(static_cast<std::size_t>(window_));
  for (int j = 0; j < window_; ++j) {
    const TokenId t = token_from_end(state, static_cast<std::size_t>(j));
    const std::size_t sym = t == TabularPolicy::kPad ? base - 1 : static_cast<std::size_t>(t);
    out[static_cast<std::size_t>(j)] = static_cast<std::size_t>(j) * base + sym;
  }
}

void MlpPolicy::hidden_activations(std::span<const std::size_t> inputs, std::span<double> h) const {
  const std::size_t in_w = input_width();
  const auto H = static_cast<std::size_t>(hidden_);
  const double* w1 = params_.data();
  const double* b1 = w1 + H * in_w;
  for (std::size_t u = 0; u < H; ++u) {
    double pre = b1[u];
    for (std::size_t idx : inputs) pre += w1[u * in_w + idx];
    h[u] = std::tanh(pre);
  }
}

void MlpPolicy::logits(const PrefixState& state, std::span<double> out) const {
  std::vector<std::size_t> inputs;
  active_inputs(state, inputs);
  const auto H = static_cast<std::size_t>(hidden_);
  const auto V = static_cast<std::size_t>(vocab().size());
  std::vector<double> h(H);
  hidden_activations(inputs, h);
  const double* w2 = params_.data() + H * input_width() + H;
  const double* b2 = w2 + V * H;
  for (std::size_t k = 0; k < V; ++k) {
    double z = b2[k];
    for (std::size_t u = 0; u < H; ++u) z += w2[k * H + u] * h[u];
    out[k] = z;
  }
}

void MlpPolicy::backprop_logits(const PrefixState& state, std::span<const double> dlogits,
                                std::span<double> grad) const {
  require_trainable();
  std::vector<std::size_t> inputs;
  active_inputs(state, inputs);
  const auto H = static_cast<std::size_t>(hidden_);
  const auto V = static_cast<std::size_t>(vocab().size());
  const std::size_t in_w = input_width();
  std::vector<double> h(H);
  hidden_activations(inputs, h);

  const std::size_t off_b1 = H * in_w;
  const std::size_t off_w2 = off_b1 + H;
  const std::size_t off_b2 = off_w2 + V * H;
  const double* w2 = params_.data() + off_w2;

  std::vector<double> dh(H, 0.0);
  for (std::size_t k = 0; k < V; ++k) {
    const double d = dlogits[k];
    grad[off_b2 + k] += d;
    for (std::size_t u = 0; u < H; ++u) {
      grad[off_w2 + k * H + u] += d * h[u];
      dh[u] += d * w2[k * H + u];
    }
  }
  for (std::size_t u = 0; u < H; ++u) {
    const double dpre = dh[u] * (1.0 - h[u] * h[u]);
    grad[off_b1 + u] += dpre;
    for (std::size_t idx : inputs) grad[u * in_w + idx] += dpre;
  }
}

}  // namespace opd
