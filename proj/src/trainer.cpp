#include "opd/trainer.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "opd/policy_io.hpp"
#include "opd/rng.hpp"

namespace opd {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::uint64_t kPromptStream = 0x70726d;
constexpr std::uint64_t kEvalSalt = 0x6576616c;

}  // namespace

std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::opd: return "opd";
    case TrainMode::stable_opd: return "stable_opd";
    case TrainMode::grpo: return "grpo";
    case TrainMode::sft: return "sft";
  }
  return "?";
}

TrainMode train_mode_from_string(std::string_view s) {
  if (s == "opd") return TrainMode::opd;
  if (s == "stable_opd") return TrainMode::stable_opd;
  if (s == "grpo") return TrainMode::grpo;
  if (s == "sft") return TrainMode::sft;
  throw ConfigError(fmt::format("unknown mode '{}' (expected opd, stable_opd, grpo or sft)", s));
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError(fmt::format("steps must be >= 1, got {}", steps));
  if (prompts_per_step < 1) throw ConfigError("prompts_per_step must be >= 1");
  generation.validate();
  objective.validate();
  repetition.validate();
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError(fmt::format("lr must be >= 0, got {}", lr));
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam eps must be > 0");
  if (inner_epochs < 1) throw ConfigError("inner_epochs must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (eval_samples < 1) throw ConfigError("eval_samples must be >= 1");
  if (!(eval_temperature > 0.0)) throw ConfigError("eval_temperature must be > 0");
  if (dump_every < 0 || checkpoint_every < 0) throw ConfigError("dump_every and checkpoint_every must be >= 0");
}

// ---------------------------------------------------------------------------

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad, double lr) {
  if (params.size() != m_.size() || grad.size() != m_.size()) throw UsageError("Adam: size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * grad[k];
    v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * grad[k] * grad[k];
    const double mhat = m_[k] / c1;
    const double vhat = v_[k] / c2;
    params[k] -= lr * mhat / (std::sqrt(vhat) + eps_);
  }
}

void Adam::restore(long t, std::vector<double> m, std::vector<double> v) {
  if (m.size() != m_.size() || v.size() != m_.size()) throw InvalidInput("Adam state size mismatch");
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> step_prompt_indices(const TrainConfig& cfg, std::size_t pool_size, long step) {
  if (pool_size == 0) throw UsageError("empty training prompt pool");
  const CounterRng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(step)), kPromptStream);
  std::vector<std::size_t> out(static_cast<std::size_t>(cfg.prompts_per_step));
  for (std::size_t j = 0; j < out.size(); ++j)
    out[j] = std::min(pool_size - 1, static_cast<std::size_t>(rng.uniform(j) * static_cast<double>(pool_size)));
  return out;
}

namespace {

std::vector<GoldenExample> golden_for(const Environment& env, const std::vector<std::size_t>& idx) {
  std::vector<GoldenExample> out;
  if (env.golden.empty()) return out;
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const auto& p = env.train_prompts[idx[j]];
    auto it = std::find_if(env.golden.begin(), env.golden.end(), [&](const GoldenExample& g) { return g.prompt == p; });
    out.push_back(it != env.golden.end() ? *it : env.golden[idx[j] % env.golden.size()]);
  }
  return out;
}

bool all_finite(const LossReport& r) {
  if (!std::isfinite(r.value)) return false;
  for (double g : r.grad)
    if (!std::isfinite(g)) return false;
  return true;
}

double component(const LossReport& r, const char* key) {
  auto it = r.components.find(key);
  return it == r.components.end() ? kNaN : it->second;
}

}  // namespace

StepOutput train_step(TrainState& state, const Environment& env, const TrainConfig& cfg, long step,
                      const std::vector<std::size_t>& prompt_indices, const fs::path& abort_dump) {
  if (prompt_indices.empty()) throw UsageError("train_step needs at least one prompt");
  Policy& student = *state.student;
  std::vector<TokenSequence> prompts;
  std::vector<std::uint64_t> seeds;
  for (std::size_t j = 0; j < prompt_indices.size(); ++j) {
    prompts.push_back(env.train_prompts.at(prompt_indices[j]));
    seeds.push_back(derive_seed(cfg.seed, static_cast<std::uint64_t>(step), j));
  }
  StepOutput out;
  out.batch = generate_groups(student, *env.teacher, prompts, seeds, cfg.generation, cfg.threads);
  const auto& batch = out.batch;

  // Reverse-KL advantages at sampling time; equal to the current-student values before the update.
  AdvantageTable adv;
  for (const Rollout* r : flatten(batch)) {
    std::vector<double> a(r->generated.size());
    for (std::size_t t = 0; t < a.size(); ++t) a[t] = r->teacher_logps[t] - r->student_logps_old[t];
    adv.per_token.push_back(std::move(a));
  }
  const auto masks = repetitive_masks(batch, env.vocab.eos(), cfg.repetition.mask_max_period,
                                      cfg.repetition.mask_min_repeats);
  const RolloutStats st = rollout_statistics(batch, adv, masks);

  MetricsRecord& rec = out.record;
  rec.step = step;
  rec.trunc_rate_rollout = trunc_rate(batch);
  rec.rep_rate_rollout = rep_rate(batch, env.vocab, cfg.repetition);
  rec.trunc_rate_eval = kNaN;
  rec.rep_rate_eval = kNaN;
  rec.mean_student_lp = st.mean_student_lp;
  rec.mean_teacher_lp = st.mean_teacher_lp;
  rec.mean_advantage = st.mean_advantage;
  rec.mean_length = st.mean_length;
  rec.adv_mean_repetitive = st.adv_mean_repetitive;
  rec.adv_mean_regular = st.adv_mean_regular;

  const auto golden = golden_for(env, prompt_indices);
  AdvantageTable grpo_adv;
  if (cfg.mode == TrainMode::grpo) {
    std::vector<double> rewards;
    for (const Rollout* r : flatten(batch)) rewards.push_back(env.task.verify(r->prompt, r->generated));
    grpo_adv = group_normalized_advantages(batch, rewards);
  }

  auto compute = [&]() -> LossReport {
    switch (cfg.mode) {
      case TrainMode::opd: {
        ObjectiveConfig o = cfg.objective;
        o.lambda_gold = 0.0;
        o.beta_kl = 0.0;
        return stable_opd_loss(batch, golden, student, *state.reference, o, &adv);
      }
      case TrainMode::stable_opd:
        return stable_opd_loss(batch, golden, student, *state.reference, cfg.objective, &adv);
      case TrainMode::grpo:
        return surrogate_loss(batch, grpo_adv, student, cfg.objective);
      case TrainMode::sft: {
        if (golden.empty()) throw UsageError("sft mode needs golden data");
        LossReport r;
        r.grad.assign(student.num_params(), 0.0);
        const double inv = 1.0 / static_cast<double>(golden.size());
        for (const auto& g : golden) {
          const auto s = sft_loss(g, student);
          r.value += s.value * inv;
          for (std::size_t k = 0; k < r.grad.size(); ++k) r.grad[k] += s.grad[k] * inv;
        }
        r.components["sft"] = r.value;
        return r;
      }
    }
    throw UsageError("unknown mode");
  };

  for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
    const LossReport report = compute();
    if (epoch == 0) {
      rec.loss_opd = component(report, "opd");
      rec.loss_sft = component(report, "sft");
      rec.loss_kl = component(report, "kl_penalty");
      rec.loss_total = report.value;
    }
    if (!all_finite(report)) {
      if (!abort_dump.empty()) {
        std::ofstream f(abort_dump);
        write_rollout_dump(f, batch, step);
      }
      throw TrainingAbort(fmt::format("non-finite loss or gradient at step {} (epoch {}){}", step, epoch,
                                      abort_dump.empty() ? "" : "; batch written to " + abort_dump.string()));
    }
    state.adam.step(student.mutable_params(), report.grad, cfg.lr);
  }
  state.step = step;
  return out;
}

EvalRecord evaluate(const Policy& student, const Environment& env, const TrainConfig& cfg, long step) {
  if (env.eval_prompts.empty()) throw UsageError("no evaluation prompts");
  GenerationConfig g = cfg.generation;
  g.temperature = cfg.eval_temperature;
  g.group_size = cfg.eval_samples;
  std::vector<std::uint64_t> seeds;
  for (std::size_t j = 0; j < env.eval_prompts.size(); ++j) seeds.push_back(derive_seed(cfg.seed ^ kEvalSalt, j));
  const auto batch = generate_groups(student, *env.teacher, env.eval_prompts, seeds, g, cfg.threads);
  const auto rollouts = flatten(batch);
  EvalRecord e;
  e.step = step;
  e.trunc_rate = trunc_rate(rollouts);
  e.rep_rate = rep_rate(rollouts, env.vocab, cfg.repetition);
  double correct = 0.0, len = 0.0;
  for (const Rollout* r : rollouts) {
    correct += env.task.verify(r->prompt, r->generated);
    len += static_cast<double>(r->generated.size());
  }
  e.accuracy = correct / static_cast<double>(rollouts.size());
  e.mean_length = len / static_cast<double>(rollouts.size());
  return e;
}

const char* const kEvalHeader = "step,trunc_rate,rep_rate,accuracy,mean_length";

std::string format_eval_row(const EvalRecord& r) {
  return fmt::format("{},{:.12g},{:.12g},{:.12g},{:.12g}", r.step, r.trunc_rate, r.rep_rate, r.accuracy,
                     r.mean_length);
}

std::vector<EvalRecord> read_eval_csv(std::istream& in) {
  std::string text;
  if (!std::getline(in, text)) throw InvalidInput("eval CSV is empty");
  if (!text.empty() && text.back() == '\r') text.pop_back();
  if (text != kEvalHeader) throw InvalidInput("line 1: unexpected eval header");
  std::vector<EvalRecord> out;
  std::size_t line = 1;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty()) continue;
    EvalRecord r;
    char c1, c2, c3, c4;
    std::istringstream ss(text);
    if (!(ss >> r.step >> c1 >> r.trunc_rate >> c2 >> r.rep_rate >> c3 >> r.accuracy >> c4 >> r.mean_length) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',')
      throw InvalidInput(fmt::format("line {}: malformed eval row", line));
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

ordered_json checkpoint_to_json(const TrainState& s) {
  ordered_json j;
  j["format"] = "opd-checkpoint";
  j["version"] = 1;
  j["step"] = s.step;
  j["student"] = policy_to_json(*s.student);
  j["reference"] = policy_to_json(*s.reference);
  j["adam"] = {{"t", s.adam.t()}, {"m", s.adam.m()}, {"v", s.adam.v()}};
  return j;
}

TrainState checkpoint_from_json(const json& j, const TrainConfig& cfg) {
  try {
    if (j.at("format") != "opd-checkpoint") throw InvalidInput("not a training checkpoint");
    TrainState s;
    s.step = j.at("step").get<long>();
    s.student = policy_from_json(j.at("student"));
    s.student->set_role(PolicyRole::student);
    s.reference = policy_from_json(j.at("reference"));
    s.reference->set_role(PolicyRole::reference);
    s.adam = Adam(s.student->num_params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    const auto& a = j.at("adam");
    s.adam.restore(a.at("t").get<long>(), a.at("m").get<std::vector<double>>(), a.at("v").get<std::vector<double>>());
    return s;
  } catch (const json::exception& e) {
    throw InvalidInput(fmt::format("malformed checkpoint: {}", e.what()));
  }
}

namespace {

void write_atomically(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error(fmt::format("cannot write {}", tmp.string()));
    f << text;
    if (!f) throw std::runtime_error(fmt::format("write failed for {}", tmp.string()));
  }
  fs::rename(tmp, path);
}

// Keeps the header and the rows whose leading integer field is <= max_step.
void truncate_csv(const fs::path& path, long max_step) {
  std::ifstream in(path);
  if (!in) return;
  std::string header, line, kept;
  std::getline(in, header);
  kept = header + "\n";
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stol(line.substr(0, line.find(','))) <= max_step) kept += line + "\n";
  }
  in.close();
  write_atomically(path, kept);
}

void truncate_dump(const fs::path& path, long max_step) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (json::parse(line).at("step").get<long>() <= max_step) kept += line + "\n";
  }
  in.close();
  write_atomically(path, kept);
}

}  // namespace

ExperimentRun run_experiment(const EnvConfig& env_cfg, const TrainConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const Environment env = build_environment(env_cfg);
  const fs::path dir = opts.output_dir;
  if (dir.empty()) throw ConfigError("no output directory");

  TrainState state;
  if (opts.resume) {
    std::ifstream f(dir / "checkpoint.json");
    if (!f) throw std::runtime_error(fmt::format("no checkpoint.json in {}", dir.string()));
    state = checkpoint_from_json(json::parse(f), cfg);
    if (state.step > cfg.steps)
      throw ConfigError(fmt::format("checkpoint is at step {}, beyond the configured {} steps", state.step, cfg.steps));
    truncate_csv(dir / "metrics.csv", state.step);
    truncate_csv(dir / "eval.csv", state.step);
    truncate_dump(dir / "rollouts.jsonl", state.step);
  } else {
    if (fs::exists(dir / "metrics.csv"))
      throw std::runtime_error(fmt::format("{} already holds a run; use --resume or another output directory",
                                           dir.string()));
    fs::create_directories(dir);
    if (opts.init_checkpoint) {
      // Either a bare policy file or a training checkpoint (its student is used).
      std::ifstream f(*opts.init_checkpoint);
      if (!f) throw ConfigError(fmt::format("cannot read init checkpoint {}", opts.init_checkpoint->string()));
      json j;
      try {
        j = json::parse(f);
      } catch (const json::exception& e) {
        throw ConfigError(fmt::format("init checkpoint {}: {}", opts.init_checkpoint->string(), e.what()));
      }
      state.student = policy_from_json(j.value("format", "") == "opd-checkpoint" ? j.at("student") : j);
    } else {
      state.student = env.student->clone();
    }
    state.student->set_role(PolicyRole::student);
    if (!(state.student->vocab() == env.vocab)) throw ConfigError("initial checkpoint vocabulary differs from env");
    state.reference = state.student->clone();
    state.reference->set_role(PolicyRole::reference);
    state.adam = Adam(state.student->num_params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  }
  fs::create_directories(dir / "checkpoints");
  {
    ordered_json manifest = opts.manifest;
    manifest["resumed_from_step"] = opts.resume ? state.step : 0;
    write_atomically(dir / "manifest.json", manifest.dump(2) + "\n");
  }

  std::ofstream metrics(dir / "metrics.csv", std::ios::app);
  std::ofstream evals(dir / "eval.csv", std::ios::app);
  if (!metrics || !evals) throw std::runtime_error(fmt::format("cannot open logs in {}", dir.string()));
  ExperimentRun run;
  if (!opts.resume) {
    write_metrics_header(metrics);
    evals << kEvalHeader << '\n';
    if (!env.golden.empty()) {
      std::ostringstream g;
      write_golden_jsonl(g, env.golden);
      write_atomically(dir / "golden.jsonl", g.str());
    }
    const EvalRecord e0 = evaluate(*state.student, env, cfg, 0);
    evals << format_eval_row(e0) << '\n' << std::flush;
    run.evals.push_back(e0);
  }
  std::ofstream dump;
  if (cfg.dump_every > 0) dump.open(dir / "rollouts.jsonl", std::ios::app);

  auto save_checkpoint = [&](const fs::path& p) { write_atomically(p, checkpoint_to_json(state).dump() + "\n"); };

  for (long s = state.step + 1; s <= cfg.steps; ++s) {
    const auto idx = step_prompt_indices(cfg, env.train_prompts.size(), s);
    StepOutput out = train_step(state, env, cfg, s, idx, dir / "abort_batch.jsonl");
    if (s % cfg.eval_every == 0) {
      const EvalRecord e = evaluate(*state.student, env, cfg, s);
      out.record.trunc_rate_eval = e.trunc_rate;
      out.record.rep_rate_eval = e.rep_rate;
      evals << format_eval_row(e) << '\n' << std::flush;
      run.evals.push_back(e);
    }
    metrics << format_metrics_row(out.record) << '\n' << std::flush;
    if (!metrics) throw std::runtime_error("failed writing metrics.csv");
    run.metrics.push_back(out.record);
    if (cfg.dump_every > 0 && s % cfg.dump_every == 0) {
      write_rollout_dump(dump, out.batch, s);
      dump.flush();
    }
    if (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0)
      save_checkpoint(dir / "checkpoints" / fmt::format("step_{}.json", s));
  }
  save_checkpoint(dir / "checkpoint.json");
  run.final_step = state.step;
  return run;
}

}  // namespace opd
