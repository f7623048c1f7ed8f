#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "opd/types.hpp"
#include "opd/vocabulary.hpp"

namespace opd {

enum class PolicyKind { tabular_ngram, tiny_mlp, trap };
enum class PolicyRole { student, teacher, reference };

std::string_view to_string(PolicyKind kind);
std::string_view to_string(PolicyRole role);
PolicyKind policy_kind_from_string(std::string_view s);
PolicyRole policy_role_from_string(std::string_view s);

// Autoregressive next-token distribution pi(. | prompt, generated prefix).
//
// Concrete families only provide raw logits and the vector-Jacobian product of those
// logits with respect to the flat parameter vector; normalization, sampling-facing
// log-probabilities and score gradients are derived here with a max-shifted softmax.
// Only the student role may be differentiated.
class Policy {
 public:
  Policy(Vocabulary vocab, PolicyRole role) : vocab_(std::move(vocab)), role_(role) {}
  virtual ~Policy() = default;

  virtual PolicyKind kind() const = 0;
  virtual std::unique_ptr<Policy> clone() const = 0;

  // Raw logits for `state` into `out` (size V). No validation.
  virtual void logits(const PrefixState& state, std::span<double> out) const = 0;

  // grad += J^T * dlogits where J = d logits(state) / d params.
  virtual void backprop_logits(const PrefixState& state, std::span<const double> dlogits,
                               std::span<double> grad) const = 0;

  virtual std::span<const double> params() const = 0;
  virtual std::span<double> mutable_params() = 0;
  std::size_t num_params() const { return params().size(); }

  const Vocabulary& vocab() const { return vocab_; }
  PolicyRole role() const { return role_; }
  void set_role(PolicyRole role) { role_ = role; }
  bool trainable() const { return role_ == PolicyRole::student; }

  // Log-softmax of the logits. Validates the state.
  void log_probs(const PrefixState& state, std::span<double> out) const;
  std::vector<double> log_probs(const PrefixState& state) const;
  std::vector<double> next_token_distribution(const PrefixState& state) const;
  double log_prob(const PrefixState& state, TokenId token) const;

  // grad_theta log pi(token | state), parameter shaped.
  std::vector<double> log_prob_grad(const PrefixState& state, TokenId token) const;
  // grad += scale * grad_theta log pi(token | state); uses the supplied log-probs of the state.
  void accumulate_log_prob_grad(const PrefixState& state, std::span<const double> state_log_probs,
                                TokenId token, double scale, std::span<double> grad) const;

  void require_trainable() const;

 protected:
  Policy(const Policy&) = default;

 private:
  Vocabulary vocab_;
  PolicyRole role_;
};

// Stable log-softmax in place.
void log_softmax(std::span<double> logits);

// Softmax over a table of per-context logit rows, context = last n tokens of
// prompt ++ generated, left-padded with a pad symbol (index V).
class TabularPolicy final : public Policy {
 public:
  // Zero logits: the uniform policy.
  TabularPolicy(Vocabulary vocab, int order, PolicyRole role = PolicyRole::student);
  TabularPolicy(Vocabulary vocab, int order, std::vector<double> params, PolicyRole role);

  PolicyKind kind() const override { return PolicyKind::tabular_ngram; }
  std::unique_ptr<Policy> clone() const override { return std::make_unique<TabularPolicy>(*this); }
  void logits(const PrefixState& state, std::span<double> out) const override;
  void backprop_logits(const PrefixState& state, std::span<const double> dlogits,
                       std::span<double> grad) const override;
  std::span<const double> params() const override { return params_; }
  std::span<double> mutable_params() override { return params_; }

  int order() const { return order_; }
  std::size_t num_rows() const { return num_rows_; }
  // Row index of the context that `state` maps to.
  std::size_t row_index(const PrefixState& state) const;
  // Row index for explicit context tokens, oldest first; kPad marks missing history.
  std::size_t row_index(std::span<const TokenId> context_oldest_first) const;
  std::span<double> row(std::size_t r) { return std::span(params_).subspan(r * vocab().size(), vocab().size()); }
  std::span<const double> row(std::size_t r) const {
    return std::span(params_).subspan(r * vocab().size(), vocab().size());
  }

  TabularPolicy(const TabularPolicy&) = default;

  static constexpr TokenId kPad = -1;

 private:
  int order_;
  std::size_t num_rows_;
  std::vector<double> params_;
};

// One hidden tanh layer over one-hot encodings of the last `window` tokens (pad-aware).
//
// Parameter layout: W1 [hidden x window*(V+1)], b1 [hidden], W2 [V x hidden], b2 [V].
class MlpPolicy final : public Policy {
 public:
  // Weights uniform in [-init_scale, init_scale] from `seed`.
  MlpPolicy(Vocabulary vocab, int window, int hidden, std::uint64_t seed, double init_scale = 0.1,
            PolicyRole role = PolicyRole::student);
  MlpPolicy(Vocabulary vocab, int window, int hidden, std::vector<double> params, PolicyRole role);

  PolicyKind kind() const override { return PolicyKind::tiny_mlp; }
  std::unique_ptr<Policy> clone() const override { return std::make_unique<MlpPolicy>(*this); }
  void logits(const PrefixState& state, std::span<double> out) const override;
  void backprop_logits(const PrefixState& state, std::span<const double> dlogits,
                       std::span<double> grad) const override;
  std::span<const double> params() const override { return params_; }
  std::span<double> mutable_params() override { return params_; }

  int window() const { return window_; }
  int hidden() const { return hidden_; }

  MlpPolicy(const MlpPolicy&) = default;

 private:
  std::size_t input_width() const { return static_cast<std::size_t>(window_) * (vocab().size() + 1); }
  void active_inputs(const PrefixState& state, std::vector<std::size_t>& out) const;
  void hidden_activations(std::span<const std::size_t> inputs, std::span<double> h) const;

  int window_;
  int hidden_;
  std::vector<double> params_;
};

// Token `back` positions before the end of prompt ++ generated (0 = most recent), or nullopt-like -1.
TokenId token_from_end(const PrefixState& state, std::size_t back);

}  // namespace opd
