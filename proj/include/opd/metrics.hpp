#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "opd/objectives.hpp"
#include "opd/rollout.hpp"

namespace opd {

struct RepetitionConfig {
  int tail_chars = 10000;  // L
  double tau = 10.0;       // compression-ratio threshold
  int compression_level = 6;
  int mask_max_period = 8;  // p_max for classify_repetitive_tokens
  int mask_min_repeats = 4; // k

  void validate() const;
  // Toy-scale values for short glyph renderings.
  static RepetitionConfig toy() { return {200, 5.0, 6, 8, 4}; }
};

double trunc_rate(std::span<const Rollout* const> rollouts);
double trunc_rate(const std::vector<RolloutGroup>& batch);

// |tail| / |deflate(tail)| with tail = last L bytes of `text`.
double comp_ratio(std::string_view text, const RepetitionConfig& cfg);

// Rendered response longer than L and its tail compresses by more than tau.
bool rep_indicator(const Rollout& rollout, const Vocabulary& vocab, const RepetitionConfig& cfg);
bool rep_indicator_text(std::string_view rendered, const RepetitionConfig& cfg);

double rep_rate(std::span<const Rollout* const> rollouts, const Vocabulary& vocab, const RepetitionConfig& cfg);
double rep_rate(const std::vector<RolloutGroup>& batch, const Vocabulary& vocab, const RepetitionConfig& cfg);

// Marks the longest suffix of `generated` made of >= k full copies of one n-gram, n <= p_max.
// Longest coverage wins, ties go to the shorter period. A trailing EOS is never marked
// and is ignored when looking for the period.
std::vector<bool> classify_repetitive_tokens(std::span<const TokenId> generated, TokenId eos, int p_max, int k);
std::vector<std::vector<bool>> repetitive_masks(const std::vector<RolloutGroup>& batch, TokenId eos, int p_max,
                                                int k);

// Token-weighted means over the batch. Class means are NaN when the class is empty.
struct RolloutStats {
  double mean_student_lp = 0.0;
  double mean_teacher_lp = 0.0;
  double mean_advantage = 0.0;
  double mean_length = 0.0;  // generated tokens per rollout, EOS included
  double adv_mean_repetitive = 0.0;
  double adv_mean_regular = 0.0;
  std::size_t repetitive_tokens = 0;
  std::size_t regular_tokens = 0;
};

// Log-probs are the stored sampling-time values; advantages come from the table.
RolloutStats rollout_statistics(const std::vector<RolloutGroup>& batch, const AdvantageTable& advantages,
                                const std::vector<std::vector<bool>>& masks);
// Same with reverse-KL advantages under `student_current`.
RolloutStats rollout_statistics(const std::vector<RolloutGroup>& batch, const Policy& student_current,
                                const std::vector<std::vector<bool>>& masks);

struct MetricsRecord {
  long step = 0;
  double trunc_rate_rollout = 0.0;
  double rep_rate_rollout = 0.0;
  double trunc_rate_eval = 0.0;  // NaN on steps without evaluation
  double rep_rate_eval = 0.0;
  double mean_student_lp = 0.0;
  double mean_teacher_lp = 0.0;
  double mean_advantage = 0.0;
  double mean_length = 0.0;
  double adv_mean_repetitive = 0.0;
  double adv_mean_regular = 0.0;
  double loss_opd = 0.0;
  double loss_sft = 0.0;
  double loss_kl = 0.0;
  double loss_total = 0.0;
};

extern const char* const kMetricsHeader;

// Numbers use 12 significant digits; NaN prints as "nan".
std::string format_metrics_row(const MetricsRecord& r);
void write_metrics_header(std::ostream& out);
// Parses a metrics CSV; throws InvalidInput with the line number on malformed rows.
std::vector<MetricsRecord> read_metrics_csv(std::istream& in);

// Summary over an external rollout corpus.
struct CorpusSummary {
  std::size_t rollouts = 0;
  double trunc_rate = 0.0;
  double rep_rate = 0.0;
  double mean_comp_ratio = 0.0;
  double max_comp_ratio = 0.0;
  double mean_length = 0.0;
};
CorpusSummary summarize_corpus(std::span<const Rollout* const> rollouts, const Vocabulary& vocab,
                               const RepetitionConfig& cfg);

}  // namespace opd
