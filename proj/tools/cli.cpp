#include "cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include <cstdlib>
#include <fstream>
#include <ostream>

#include "opd/config.hpp"
#include "opd/metrics.hpp"
#include "opd/trainer.hpp"

namespace opd::cli {

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kInvalid = 2;

std::optional<fs::path> output_root_from_env() {
  const char* v = std::getenv("OPD_OUTPUT_ROOT");
  if (v == nullptr || *v == '\0') return std::nullopt;
  return fs::path(v);
}

int cmd_run(const std::string& config, const std::string& resume, const std::vector<std::string>& sets,
            std::ostream& out, std::ostream& err) {
  ExperimentConfig cfg;
  try {
    cfg = load_experiment_config(config, sets, output_root_from_env());
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kInvalid;
  }
  RunOptions opts;
  opts.output_dir = resume.empty() ? cfg.output_dir : fs::path(resume);
  opts.resume = !resume.empty();
  opts.init_checkpoint = cfg.init_checkpoint;
  opts.manifest["config_file"] = fs::absolute(config).lexically_normal().string();
  opts.manifest["config"] = to_json(cfg);
  opts.manifest["config"]["output_dir"] = opts.output_dir.string();
  try {
    const ExperimentRun run = run_experiment(cfg.env, cfg.train, opts);
    out << fmt::format("{}: {} steps in {}", to_string(cfg.train.mode), run.final_step, opts.output_dir.string());
    if (!run.evals.empty()) {
      const auto& e = run.evals.back();
      out << fmt::format(" (step {} eval: accuracy {:.4g}, trunc {:.4g}, rep {:.4g})", e.step, e.accuracy,
                         e.trunc_rate, e.rep_rate);
    }
    out << '\n';
    return kOk;
  } catch (const ConfigError& e) {
    err << "error: " << config << ": " << e.what() << '\n';
    return kInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
}

int cmd_metrics(const std::string& dump, int tail_chars, double tau, std::ostream& out, std::ostream& err) {
  std::ifstream in(dump);
  if (!in) {
    err << "error: cannot read " << dump << '\n';
    return kInvalid;
  }
  RepetitionConfig cfg;
  cfg.tail_chars = tail_chars;
  cfg.tau = tau;
  try {
    cfg.validate();
    const auto records = read_rollout_dump(in);
    if (records.empty()) {
      err << "error: " << dump << ": no rollouts\n";
      return kInvalid;
    }
    TokenId max_id = 1;
    std::vector<const Rollout*> rollouts;
    for (const auto& r : records) {
      rollouts.push_back(&r.rollout);
      for (TokenId t : r.rollout.generated) max_id = std::max(max_id, t);
    }
    // Glyphs depend only on the token id, so any vocabulary covering the ids renders alike.
    const Vocabulary vocab(max_id + 1, max_id);
    const CorpusSummary s = summarize_corpus(rollouts, vocab, cfg);
    out << "rollouts,trunc_rate,rep_rate,mean_comp_ratio,max_comp_ratio,mean_length\n";
    out << fmt::format("{},{:.12g},{:.12g},{:.12g},{:.12g},{:.12g}\n", s.rollouts, s.trunc_rate, s.rep_rate,
                       s.mean_comp_ratio, s.max_comp_ratio, s.mean_length);
    return kOk;
  } catch (const DumpError& e) {
    err << "error: " << dump << ":" << e.line() << ": " << e.what() << '\n';
    return kInvalid;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
}

int cmd_compare(const std::vector<std::string>& dirs, std::ostream& out, std::ostream& err) {
  if (dirs.size() < 2) {
    err << "error: compare needs at least two run directories\n";
    return kInvalid;
  }
  std::vector<std::vector<EvalRecord>> runs;
  std::vector<std::string> names;
  for (const auto& d : dirs) {
    const fs::path p = fs::path(d) / "eval.csv";
    std::ifstream in(p);
    if (!in) {
      err << "error: missing " << p.string() << '\n';
      return kInvalid;
    }
    try {
      runs.push_back(read_eval_csv(in));
    } catch (const InvalidInput& e) {
      err << "error: " << p.string() << ": " << e.what() << '\n';
      return kInvalid;
    }
    names.push_back(fs::path(d).lexically_normal().filename().string().empty()
                        ? fs::path(d).lexically_normal().parent_path().filename().string()
                        : fs::path(d).lexically_normal().filename().string());
  }
  auto grid = [](const std::vector<EvalRecord>& r) {
    std::vector<long> g;
    for (const auto& e : r) g.push_back(e.step);
    return g;
  };
  for (std::size_t i = 1; i < runs.size(); ++i) {
    if (grid(runs[i]) != grid(runs[0])) {
      err << "error: step grids differ\n";
      for (std::size_t k = 0; k < runs.size(); ++k) err << fmt::format("  {}: [{}]\n", dirs[k], fmt::join(grid(runs[k]), ","));
      return kInvalid;
    }
  }
  out << "step";
  for (const auto& n : names) out << fmt::format(",trunc_rate_{0},rep_rate_{0},accuracy_{0}", n);
  out << '\n';
  for (std::size_t row = 0; row < runs[0].size(); ++row) {
    out << runs[0][row].step;
    for (const auto& r : runs)
      out << fmt::format(",{:.12g},{:.12g},{:.12g}", r[row].trunc_rate, r[row].rep_rate, r[row].accuracy);
    out << '\n';
  }
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"On-policy distillation lab"};
  app.require_subcommand(1);

  std::string config, resume;
  std::vector<std::string> sets;
  auto* run_cmd = app.add_subcommand("run", "Run or resume a training experiment");
  run_cmd->add_option("--config", config, "Experiment config (JSON)")->required();
  run_cmd->add_option("--resume", resume, "Continue the run in this directory from its checkpoint");
  run_cmd->add_option("--set", sets, "Override a config value: dotted.key=value")->take_all();

  std::string dump;
  int tail_chars = RepetitionConfig{}.tail_chars;
  double tau = RepetitionConfig{}.tau;
  auto* metrics_cmd = app.add_subcommand("metrics", "Truncation and repetition summary of a rollout dump");
  metrics_cmd->add_option("--dump", dump, "Rollout dump (JSONL)")->required();
  metrics_cmd->add_option("--tail-chars", tail_chars, "Tail length L in rendered characters");
  metrics_cmd->add_option("--tau", tau, "Compression-ratio threshold");

  std::vector<std::string> dirs;
  auto* compare_cmd = app.add_subcommand("compare", "Join eval curves of several runs on their step grid");
  compare_cmd->add_option("dirs", dirs, "Run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kInvalid;
  }
  if (*run_cmd) return cmd_run(config, resume, sets, out, err);
  if (*metrics_cmd) return cmd_metrics(dump, tail_chars, tau, out, err);
  if (*compare_cmd) return cmd_compare(dirs, out, err);
  return kInvalid;
}

}  // namespace opd::cli
