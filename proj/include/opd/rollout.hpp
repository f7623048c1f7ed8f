#pragma once

#include <cstdint>
#include <iosfwd>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "opd/policy.hpp"

namespace opd {

enum class Termination { eos, budget };
std::string_view to_string(Termination t);

// One sampled trajectory. Log-probabilities are temperature-1 values of the sampled
// tokens under the sampling-time student and under the teacher.
struct Rollout {
  TokenSequence prompt;
  TokenSequence generated;
  Termination terminated_by = Termination::eos;
  std::vector<double> student_logps_old;
  std::vector<double> teacher_logps;

  PrefixState state_at(std::size_t t) const {
    return {prompt, std::span<const TokenId>(generated).first(t)};
  }
  bool truncated() const { return terminated_by == Termination::budget; }
};

struct RolloutGroup {
  TokenSequence prompt;
  std::vector<Rollout> rollouts;
};

struct GenerationConfig {
  int max_len = 64;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int group_size = 4;

  void validate() const;
};

// Samples from the temperature-scaled student until EOS or max_len tokens.
// Draw t of the rollout uses the counter-based stream (cfg.seed, stream_id, t).
Rollout generate_rollout(const Policy& student, const Policy& teacher, std::span<const TokenId> prompt,
                         const GenerationConfig& cfg, std::uint64_t stream_id);

// G rollouts with stream ids 0..G-1.
RolloutGroup generate_group(const Policy& student, const Policy& teacher, std::span<const TokenId> prompt,
                            const GenerationConfig& cfg, int threads = 1);

// One group per prompt; group j uses seeds[j] in place of cfg.seed. All rollouts of all
// groups are generated as one parallel map.
std::vector<RolloutGroup> generate_groups(const Policy& student, const Policy& teacher,
                                          const std::vector<TokenSequence>& prompts,
                                          const std::vector<std::uint64_t>& seeds, const GenerationConfig& cfg,
                                          int threads = 1);

std::size_t count_rollouts(const std::vector<RolloutGroup>& batch);
std::vector<const Rollout*> flatten(const std::vector<RolloutGroup>& batch);

// Rollout dump: one JSON object per line, fields in the order
// step, prompt, generated, terminated_by, student_logps_old, teacher_logps.
nlohmann::ordered_json rollout_to_json(const Rollout& r, long step);
void write_rollout_dump(std::ostream& out, const std::vector<RolloutGroup>& batch, long step);

struct DumpRecord {
  long step = 0;
  Rollout rollout;
};

// Thrown on schema violations; carries the 1-based line number.
class DumpError : public InvalidInput {
 public:
  DumpError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

std::vector<DumpRecord> read_rollout_dump(std::istream& in);

}  // namespace opd
