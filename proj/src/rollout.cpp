#include "opd/rollout.hpp"

#include <fmt/format.h>

#include <cmath>
#include <istream>
#include <ostream>

#include "opd/parallel.hpp"
#include "opd/rng.hpp"

namespace opd {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(Termination t) { return t == Termination::eos ? "eos" : "budget"; }

void GenerationConfig::validate() const {
  if (max_len < 1) throw ConfigError(fmt::format("max_len must be >= 1, got {}", max_len));
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw ConfigError(fmt::format("temperature must be > 0, got {}", temperature));
  if (group_size < 1) throw ConfigError(fmt::format("group size must be >= 1, got {}", group_size));
}

namespace {

TokenId sample_index(std::span<const double> log_probs, double temperature, double u) {
  // softmax(log p / T); at T = 1 this reduces to p itself.
  double mx = -INFINITY;
  for (double lp : log_probs) mx = std::max(mx, lp / temperature);
  double total = 0.0;
  std::vector<double> w(log_probs.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    w[k] = std::exp(log_probs[k] / temperature - mx);
    total += w[k];
  }
  const double target = u * total;
  double acc = 0.0;
  TokenId last_positive = 0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (w[k] <= 0.0) continue;
    acc += w[k];
    last_positive = static_cast<TokenId>(k);
    if (target < acc) return last_positive;
  }
  return last_positive;
}

}  // namespace

Rollout generate_rollout(const Policy& student, const Policy& teacher, std::span<const TokenId> prompt,
                         const GenerationConfig& cfg, std::uint64_t stream_id) {
  cfg.validate();
  if (!(student.vocab() == teacher.vocab())) throw InvalidInput("student and teacher vocabularies differ");
  const Vocabulary& vocab = student.vocab();
  student.vocab().validate_state({prompt, {}});

  Rollout r;
  r.prompt.assign(prompt.begin(), prompt.end());
  r.generated.reserve(static_cast<std::size_t>(cfg.max_len));
  r.terminated_by = Termination::budget;
  const CounterRng rng(cfg.seed, stream_id);
  std::vector<double> slp(static_cast<std::size_t>(vocab.size()));
  std::vector<double> tlp(slp.size());

  for (int t = 0; t < cfg.max_len; ++t) {
    const PrefixState state{r.prompt, r.generated};
    student.logits(state, slp);
    log_softmax(slp);
    teacher.logits(state, tlp);
    log_softmax(tlp);
    const TokenId tok = sample_index(slp, cfg.temperature, rng.uniform(static_cast<std::uint64_t>(t)));
    r.generated.push_back(tok);
    r.student_logps_old.push_back(slp[static_cast<std::size_t>(tok)]);
    r.teacher_logps.push_back(tlp[static_cast<std::size_t>(tok)]);
    if (tok == vocab.eos()) {
      r.terminated_by = Termination::eos;
      break;
    }
  }
  return r;
}

RolloutGroup generate_group(const Policy& student, const Policy& teacher, std::span<const TokenId> prompt,
                            const GenerationConfig& cfg, int threads) {
  cfg.validate();
  RolloutGroup g;
  g.prompt.assign(prompt.begin(), prompt.end());
  g.rollouts.resize(static_cast<std::size_t>(cfg.group_size));
  parallel_for(g.rollouts.size(), threads,
               [&](std::size_t i) { g.rollouts[i] = generate_rollout(student, teacher, prompt, cfg, i); });
  return g;
}

std::vector<RolloutGroup> generate_groups(const Policy& student, const Policy& teacher,
                                          const std::vector<TokenSequence>& prompts,
                                          const std::vector<std::uint64_t>& seeds, const GenerationConfig& cfg,
                                          int threads) {
  cfg.validate();
  if (prompts.size() != seeds.size()) throw UsageError("one seed per prompt required");
  const auto G = static_cast<std::size_t>(cfg.group_size);
  std::vector<RolloutGroup> batch(prompts.size());
  for (std::size_t j = 0; j < prompts.size(); ++j) {
    batch[j].prompt = prompts[j];
    batch[j].rollouts.resize(G);
  }
  parallel_for(prompts.size() * G, threads, [&](std::size_t idx) {
    const std::size_t j = idx / G, i = idx % G;
    GenerationConfig local = cfg;
    local.seed = seeds[j];
    batch[j].rollouts[i] = generate_rollout(student, teacher, prompts[j], local, i);
  });
  return batch;
}

std::size_t count_rollouts(const std::vector<RolloutGroup>& batch) {
  std::size_t n = 0;
  for (const auto& g : batch) n += g.rollouts.size();
  return n;
}

std::vector<const Rollout*> flatten(const std::vector<RolloutGroup>& batch) {
  std::vector<const Rollout*> out;
  out.reserve(count_rollouts(batch));
  for (const auto& g : batch)
    for (const auto& r : g.rollouts) out.push_back(&r);
  return out;
}

ordered_json rollout_to_json(const Rollout& r, long step) {
  ordered_json j;
  j["step"] = step;
  j["prompt"] = r.prompt;
  j["generated"] = r.generated;
  j["terminated_by"] = std::string(to_string(r.terminated_by));
  j["student_logps_old"] = r.student_logps_old;
  j["teacher_logps"] = r.teacher_logps;
  return j;
}

void write_rollout_dump(std::ostream& out, const std::vector<RolloutGroup>& batch, long step) {
  for (const auto& g : batch)
    for (const auto& r : g.rollouts) out << rollout_to_json(r, step).dump() << '\n';
}

DumpError::DumpError(std::size_t line, const std::string& what)
    : InvalidInput(fmt::format("line {}: {}", line, what)), line_(line) {}

namespace {

TokenSequence token_array(const json& j, const char* field, std::size_t line) {
  const auto& a = j.at(field);
  if (!a.is_array()) throw DumpError(line, fmt::format("'{}' must be an array", field));
  TokenSequence out;
  for (const auto& v : a) {
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw DumpError(line, fmt::format("'{}' must hold non-negative integer token ids", field));
    out.push_back(v.get<TokenId>());
  }
  return out;
}

std::vector<double> logp_array(const json& j, const char* field, std::size_t line, std::size_t expected) {
  const auto& a = j.at(field);
  if (!a.is_array()) throw DumpError(line, fmt::format("'{}' must be an array", field));
  std::vector<double> out;
  for (const auto& v : a) {
    if (!v.is_number()) throw DumpError(line, fmt::format("'{}' must hold numbers", field));
    const double x = v.get<double>();
    if (!std::isfinite(x) || x > 0.0) throw DumpError(line, fmt::format("'{}' entries must be finite and <= 0", field));
    out.push_back(x);
  }
  if (out.size() != expected)
    throw DumpError(line, fmt::format("'{}' has {} entries, generated has {}", field, out.size(), expected));
  return out;
}

}  // namespace

std::vector<DumpRecord> read_rollout_dump(std::istream& in) {
  std::vector<DumpRecord> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw DumpError(line, fmt::format("invalid JSON ({})", e.what()));
    }
    if (!j.is_object()) throw DumpError(line, "expected a JSON object");
    for (const char* field : {"step", "prompt", "generated", "terminated_by", "student_logps_old", "teacher_logps"})
      if (!j.contains(field)) throw DumpError(line, fmt::format("missing field '{}'", field));
    DumpRecord rec;
    if (!j["step"].is_number_integer()) throw DumpError(line, "'step' must be an integer");
    rec.step = j["step"].get<long>();
    rec.rollout.prompt = token_array(j, "prompt", line);
    rec.rollout.generated = token_array(j, "generated", line);
    const auto& term = j["terminated_by"];
    if (!term.is_string() || (term != "eos" && term != "budget"))
      throw DumpError(line, "'terminated_by' must be \"eos\" or \"budget\"");
    rec.rollout.terminated_by = term == "eos" ? Termination::eos : Termination::budget;
    if (rec.rollout.terminated_by == Termination::eos && rec.rollout.generated.empty())
      throw DumpError(line, "EOS-terminated rollout with no generated tokens");
    rec.rollout.student_logps_old = logp_array(j, "student_logps_old", line, rec.rollout.generated.size());
    rec.rollout.teacher_logps = logp_array(j, "teacher_logps", line, rec.rollout.generated.size());
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace opd
