#include "opd/metrics.hpp"

#include <fmt/format.h>
#include <zlib.h>

#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace opd {

void RepetitionConfig::validate() const {
  if (tail_chars < 1) throw ConfigError(fmt::format("tail_chars must be >= 1, got {}", tail_chars));
  if (!(tau > 1.0) || !std::isfinite(tau)) throw ConfigError(fmt::format("tau must be > 1, got {}", tau));
  if (compression_level < 0 || compression_level > 9)
    throw ConfigError(fmt::format("compression_level must be in [0, 9], got {}", compression_level));
  if (mask_max_period < 1) throw ConfigError("mask_max_period must be >= 1");
  if (mask_min_repeats < 2) throw ConfigError("mask_min_repeats must be >= 2");
}

double trunc_rate(std::span<const Rollout* const> rollouts) {
  if (rollouts.empty()) throw UsageError("trunc_rate of an empty rollout list");
  std::size_t n = 0;
  for (const Rollout* r : rollouts) n += r->truncated() ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(rollouts.size());
}

double trunc_rate(const std::vector<RolloutGroup>& batch) { return trunc_rate(flatten(batch)); }

double comp_ratio(std::string_view text, const RepetitionConfig& cfg) {
  cfg.validate();
  if (text.empty()) throw UsageError("comp_ratio of empty text");
  const std::string_view tail =
      text.size() > static_cast<std::size_t>(cfg.tail_chars) ? text.substr(text.size() - cfg.tail_chars) : text;
  uLongf dest_len = compressBound(static_cast<uLong>(tail.size()));
  std::vector<Bytef> dest(dest_len);
  const int rc = compress2(dest.data(), &dest_len, reinterpret_cast<const Bytef*>(tail.data()),
                           static_cast<uLong>(tail.size()), cfg.compression_level);
  if (rc != Z_OK) throw std::runtime_error(fmt::format("zlib compress2 failed ({})", rc));
  return static_cast<double>(tail.size()) / static_cast<double>(dest_len);
}

bool rep_indicator_text(std::string_view rendered, const RepetitionConfig& cfg) {
  if (rendered.size() <= static_cast<std::size_t>(cfg.tail_chars)) return false;
  return comp_ratio(rendered, cfg) > cfg.tau;
}

bool rep_indicator(const Rollout& rollout, const Vocabulary& vocab, const RepetitionConfig& cfg) {
  return rep_indicator_text(vocab.render(rollout.generated), cfg);
}

double rep_rate(std::span<const Rollout* const> rollouts, const Vocabulary& vocab, const RepetitionConfig& cfg) {
  if (rollouts.empty()) throw UsageError("rep_rate of an empty rollout list");
  std::size_t n = 0;
  for (const Rollout* r : rollouts) n += rep_indicator(*r, vocab, cfg) ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(rollouts.size());
}

double rep_rate(const std::vector<RolloutGroup>& batch, const Vocabulary& vocab, const RepetitionConfig& cfg) {
  return rep_rate(flatten(batch), vocab, cfg);
}

std::vector<bool> classify_repetitive_tokens(std::span<const TokenId> generated, TokenId eos, int p_max, int k) {
  std::vector<bool> mask(generated.size(), false);
  std::size_t len = generated.size();
  if (len > 0 && generated[len - 1] == eos) --len;
  const auto s = generated.first(len);

  std::size_t best_cover = 0;
  for (int n = 1; n <= p_max; ++n) {
    const auto un = static_cast<std::size_t>(n);
    if (len < un) break;
    std::size_t run = 0;  // positions from the end that match the token n earlier
    while (run + un < len && s[len - 1 - run] == s[len - 1 - run - un]) ++run;
    const std::size_t copies = (run + un) / un;
    if (copies < static_cast<std::size_t>(k)) continue;
    const std::size_t cover = copies * un;
    if (cover > best_cover) best_cover = cover;
  }
  for (std::size_t i = len - best_cover; i < len; ++i) mask[i] = true;
  return mask;
}

std::vector<std::vector<bool>> repetitive_masks(const std::vector<RolloutGroup>& batch, TokenId eos, int p_max,
                                                int k) {
  std::vector<std::vector<bool>> out;
  for (const Rollout* r : flatten(batch)) out.push_back(classify_repetitive_tokens(r->generated, eos, p_max, k));
  return out;
}

RolloutStats rollout_statistics(const std::vector<RolloutGroup>& batch, const AdvantageTable& advantages,
                                const std::vector<std::vector<bool>>& masks) {
  const auto rollouts = flatten(batch);
  if (rollouts.empty()) throw UsageError("rollout statistics of an empty batch");
  if (advantages.per_token.size() != rollouts.size() || masks.size() != rollouts.size())
    throw UsageError("advantage table, masks and batch disagree in shape");

  RolloutStats st;
  double slp = 0.0, tlp = 0.0, adv = 0.0, adv_rep = 0.0, adv_reg = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const Rollout& r = *rollouts[i];
    if (advantages.per_token[i].size() != r.generated.size() || masks[i].size() != r.generated.size())
      throw UsageError(fmt::format("row {} shape mismatch", i));
    for (std::size_t t = 0; t < r.generated.size(); ++t) {
      slp += r.student_logps_old[t];
      tlp += r.teacher_logps[t];
      const double a = advantages.per_token[i][t];
      adv += a;
      if (masks[i][t]) {
        adv_rep += a;
        ++st.repetitive_tokens;
      } else {
        adv_reg += a;
        ++st.regular_tokens;
      }
    }
    tokens += r.generated.size();
  }
  const double nt = static_cast<double>(tokens);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  st.mean_student_lp = tokens ? slp / nt : nan;
  st.mean_teacher_lp = tokens ? tlp / nt : nan;
  st.mean_advantage = tokens ? adv / nt : nan;
  st.mean_length = nt / static_cast<double>(rollouts.size());
  st.adv_mean_repetitive = st.repetitive_tokens ? adv_rep / static_cast<double>(st.repetitive_tokens) : nan;
  st.adv_mean_regular = st.regular_tokens ? adv_reg / static_cast<double>(st.regular_tokens) : nan;
  return st;
}

RolloutStats rollout_statistics(const std::vector<RolloutGroup>& batch, const Policy& student_current,
                                const std::vector<std::vector<bool>>& masks) {
  return rollout_statistics(batch, reverse_kl_advantages(batch, student_current), masks);
}

const char* const kMetricsHeader =
    "step,trunc_rate_rollout,rep_rate_rollout,trunc_rate_eval,rep_rate_eval,mean_student_lp,mean_teacher_lp,"
    "mean_advantage,mean_length,adv_mean_repetitive,adv_mean_regular,loss_opd,loss_sft,loss_kl,loss_total";

std::string format_metrics_row(const MetricsRecord& r) {
  return fmt::format("{},{:.12g},{:.12g},{:.12g},{:.12g},{:.12g},{:.12g},{:.12g},{:.12g},{:.12g},{:.12g},{:.12g},"
                     "{:.12g},{:.12g},{:.12g}",
                     r.step, r.trunc_rate_rollout, r.rep_rate_rollout, r.trunc_rate_eval, r.rep_rate_eval,
                     r.mean_student_lp, r.mean_teacher_lp, r.mean_advantage, r.mean_length, r.adv_mean_repetitive,
                     r.adv_mean_regular, r.loss_opd, r.loss_sft, r.loss_kl, r.loss_total);
}

void write_metrics_header(std::ostream& out) { out << kMetricsHeader << '\n'; }

namespace {

double parse_field(const std::string& s, std::size_t line) {
  if (s == "nan" || s == "NaN" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InvalidInput(fmt::format("line {}: bad number '{}'", line, s));
  }
}

}  // namespace

std::vector<MetricsRecord> read_metrics_csv(std::istream& in) {
  std::string text;
  std::size_t line = 0;
  if (!std::getline(in, text)) throw InvalidInput("metrics CSV is empty");
  ++line;
  if (!text.empty() && text.back() == '\r') text.pop_back();
  if (text != kMetricsHeader) throw InvalidInput("line 1: unexpected metrics header");
  std::vector<MetricsRecord> out;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 15) throw InvalidInput(fmt::format("line {}: expected 15 fields, got {}", line, f.size()));
    MetricsRecord r;
    const double step = parse_field(f[0], line);
    r.step = static_cast<long>(step);
    double* dst[] = {&r.trunc_rate_rollout, &r.rep_rate_rollout, &r.trunc_rate_eval,     &r.rep_rate_eval,
                     &r.mean_student_lp,    &r.mean_teacher_lp,  &r.mean_advantage,      &r.mean_length,
                     &r.adv_mean_repetitive, &r.adv_mean_regular, &r.loss_opd,           &r.loss_sft,
                     &r.loss_kl,            &r.loss_total};
    for (std::size_t k = 0; k < 14; ++k) *dst[k] = parse_field(f[k + 1], line);
    out.push_back(r);
  }
  return out;
}

CorpusSummary summarize_corpus(std::span<const Rollout* const> rollouts, const Vocabulary& vocab,
                               const RepetitionConfig& cfg) {
  cfg.validate();
  if (rollouts.empty()) throw UsageError("empty rollout corpus");
  CorpusSummary s;
  s.rollouts = rollouts.size();
  s.trunc_rate = trunc_rate(rollouts);
  std::size_t rep = 0, counted = 0;
  double ratio_sum = 0.0, len_sum = 0.0;
  for (const Rollout* r : rollouts) {
    const std::string text = vocab.render(r->generated);
    len_sum += static_cast<double>(r->generated.size());
    if (rep_indicator_text(text, cfg)) ++rep;
    if (text.empty()) continue;
    const double c = comp_ratio(text, cfg);
    ratio_sum += c;
    s.max_comp_ratio = std::max(s.max_comp_ratio, c);
    ++counted;
  }
  const double n = static_cast<double>(rollouts.size());
  s.rep_rate = static_cast<double>(rep) / n;
  s.mean_comp_ratio = counted ? ratio_sum / static_cast<double>(counted) : 0.0;
  s.mean_length = len_sum / n;
  return s;
}

}  // namespace opd
