#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "opd/environment.hpp"
#include "opd/metrics.hpp"

namespace opd {

enum class TrainMode { opd, stable_opd, grpo, sft };
std::string_view to_string(TrainMode m);
TrainMode train_mode_from_string(std::string_view s);

struct TrainConfig {
  TrainMode mode = TrainMode::opd;
  long steps = 100;
  int prompts_per_step = 16;
  GenerationConfig generation;  // group_size is G; seed is ignored (derived per step)
  ObjectiveConfig objective;    // opd mode uses lambda_gold = beta_kl = 0
  RepetitionConfig repetition = RepetitionConfig::toy();
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int inner_epochs = 1;
  int eval_every = 10;
  int eval_samples = 4;  // rollouts per eval prompt
  double eval_temperature = 1.0;
  int dump_every = 0;        // 0: no rollout dumps
  int checkpoint_every = 0;  // 0: final checkpoint only
  int threads = 0;           // 0: hardware concurrency; results do not depend on it
  std::uint64_t seed = 0;

  void validate() const;
};

class Adam {
 public:
  Adam() = default;
  Adam(std::size_t n, double beta1, double beta2, double eps);

  // params -= lr * mhat / (sqrt(vhat) + eps), with bias-corrected moments.
  void step(std::span<double> params, std::span<const double> grad, double lr);

  long t() const { return t_; }
  const std::vector<double>& m() const { return m_; }
  const std::vector<double>& v() const { return v_; }
  void restore(long t, std::vector<double> m, std::vector<double> v);

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<double> m_, v_;
};

struct TrainState {
  std::unique_ptr<Policy> student;
  std::unique_ptr<Policy> reference;
  Adam adam;
  long step = 0;  // completed updates
};

// Non-finite loss or gradient. The offending batch has been dumped when a path is given.
class TrainingAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalRecord {
  long step = 0;
  double trunc_rate = 0.0;
  double rep_rate = 0.0;
  double accuracy = 0.0;
  double mean_length = 0.0;
};

// Prompt indices (into env.train_prompts) used by update `step`, 1-based.
std::vector<std::size_t> step_prompt_indices(const TrainConfig& cfg, std::size_t pool_size, long step);

struct StepOutput {
  MetricsRecord record;
  std::vector<RolloutGroup> batch;
};

// One update: G rollouts per prompt from the current student, the mode's loss, then
// inner_epochs Adam updates. Advantages are fixed at sampling time. The record
// describes the batch as sampled; its eval columns are NaN.
StepOutput train_step(TrainState& state, const Environment& env, const TrainConfig& cfg, long step,
                      const std::vector<std::size_t>& prompt_indices,
                      const std::filesystem::path& abort_dump = {});

// eval_samples rollouts per held-out prompt at eval_temperature with a fixed seed.
EvalRecord evaluate(const Policy& student, const Environment& env, const TrainConfig& cfg, long step);

extern const char* const kEvalHeader;
std::string format_eval_row(const EvalRecord& r);
std::vector<EvalRecord> read_eval_csv(std::istream& in);

struct RunOptions {
  std::filesystem::path output_dir;
  bool resume = false;
  std::optional<std::filesystem::path> init_checkpoint;  // seeds student and reference
  nlohmann::ordered_json manifest;                        // resolved config snapshot
};

struct ExperimentRun {
  std::vector<MetricsRecord> metrics;  // rows written by this invocation
  std::vector<EvalRecord> evals;
  long final_step = 0;
};

// Artifacts in output_dir: manifest.json, metrics.csv, eval.csv, rollouts.jsonl (when
// dumping), checkpoint.json and checkpoints/step_<k>.json.
// Resume continues from checkpoint.json and drops logged rows past its step.
ExperimentRun run_experiment(const EnvConfig& env_cfg, const TrainConfig& cfg, const RunOptions& opts);

nlohmann::ordered_json checkpoint_to_json(const TrainState& s);
TrainState checkpoint_from_json(const nlohmann::json& j, const TrainConfig& cfg);

}  // namespace opd
