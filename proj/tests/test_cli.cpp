#include <doctest.h>

#include <cstdlib>

#include "../tools/cli.hpp"
#include "opd/config.hpp"
#include "support.hpp"

using namespace opd;
using namespace opd::test;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "opd");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = opd::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

const fs::path kTrapConfig = fs::path(OPD_SOURCE_DIR) / "configs" / "trap_opd.json";

std::string dump_line(long step, const TokenSequence& gen, bool truncated) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["prompt"] = TokenSequence{0, 1};
  j["generated"] = gen;
  j["terminated_by"] = truncated ? "budget" : "eos";
  j["student_logps_old"] = std::vector<double>(gen.size(), -0.5);
  j["teacher_logps"] = std::vector<double>(gen.size(), -0.25);
  return j.dump() + "\n";
}

}  // namespace

TEST_CASE("config parsing: defaults, overrides and resolved output") {
  const std::string text = R"({
  "mode": "stable_opd",
  "steps": 5,
  "objective": {"lambda_gold": 0.5},
  "env": {"trap": {"repeat_boost": 9.0}}
})";
  const auto c = parse_experiment_config(text, "exp.json", "/base", {"seed=7", "objective.beta_kl=0.25", "env.task=reverse"});
  CHECK(c.train.mode == TrainMode::stable_opd);
  CHECK(c.train.steps == 5);
  CHECK(c.train.seed == 7);
  CHECK(c.train.objective.lambda_gold == 0.5);
  CHECK(c.train.objective.beta_kl == 0.25);
  CHECK(c.env.pair.trap.repeat_boost == 9.0);
  CHECK(c.output_dir == fs::path("/base/runs/exp"));
  const auto rooted = parse_experiment_config(text, "exp.json", "/base", {}, fs::path("/elsewhere"));
  CHECK(rooted.output_dir == fs::path("/elsewhere/exp"));
  const auto rel = parse_experiment_config(R"({"output_dir": "out/x"})", "a.json", "/base");
  CHECK(rel.output_dir == fs::path("/base/out/x"));

  // The resolved JSON reparses to the same config.
  const auto j = to_json(c);
  const auto again = parse_experiment_config(j.dump(2), "again.json", "/base");
  CHECK(to_json(again).dump() == j.dump());
  CHECK(j.at("env").contains("teacher_eos_margin"));
}

TEST_CASE("config errors name the file and line") {
  auto message = [](const std::string& text, std::vector<std::string> sets = {}) -> std::string {
    try {
      parse_experiment_config(text, "cfg.json", "/b", sets);
    } catch (const ConfigError& e) {
      return e.what();
    }
    return "";
  };
  CHECK(message("{\n  \"steps\": 5,\n  \"stpes\": 3\n}").rfind("cfg.json:3: unknown key 'stpes'", 0) == 0);
  CHECK(message("{\n  \"steps\": 5,\n  \"lr\": \"fast\"\n}").rfind("cfg.json:3:", 0) == 0);
  CHECK(message("{\n  \"env\": {\n    \"trap\": {\"boost\": 1}\n  }\n}").rfind("cfg.json:3: unknown key 'env.trap.boost'", 0) == 0);
  CHECK(message("{\n  \"steps\": 5,\n  \"lr\": 0.1,,\n}").rfind("cfg.json:3: malformed JSON", 0) == 0);
  CHECK(message("{\n\n  \"mode\": \"ppo\"\n}").rfind("cfg.json:3:", 0) == 0);
  CHECK(message("{\n  \"steps\": 0\n}").find("steps must be >= 1") != std::string::npos);
  CHECK(message("{}", {"noequals"}).find("expected key=value") != std::string::npos);
  CHECK(message("{\"steps\": 3}", {"steps.x=1"}).find("'steps' is not an object") != std::string::npos);
  CHECK(line_of_offset("a\nb\nc", 4) == 3);
}

TEST_CASE("cli run writes artifacts and records overrides") {
  const auto dir = scratch_dir("cli_run");
  const auto r = invoke({"run", "--config", kTrapConfig.string(), "--set", "steps=2", "--set", "seed=7", "--set",
                      "output_dir=" + (dir / "out").string()});
  CHECK(r.code == 0);
  CHECK(r.err.empty());
  for (const char* f : {"manifest.json", "metrics.csv", "eval.csv", "checkpoint.json"}) CHECK(fs::exists(dir / "out" / f));
  const auto manifest = nlohmann::json::parse(read_file(dir / "out" / "manifest.json"));
  CHECK(manifest.at("config").at("seed") == 7);
  CHECK(manifest.at("config").at("steps") == 2);

  // An existing run is not overwritten.
  const auto again = invoke({"run", "--config", kTrapConfig.string(), "--set", "steps=2", "--set",
                          "output_dir=" + (dir / "out").string()});
  CHECK(again.code == 1);

  // Resume extends the run.
  const auto more = invoke({"run", "--config", kTrapConfig.string(), "--set", "steps=4", "--set", "seed=7", "--resume",
                         (dir / "out").string()});
  CHECK(more.code == 0);
  std::istringstream in(read_file(dir / "out" / "metrics.csv"));
  CHECK(read_metrics_csv(in).size() == 4);
}

TEST_CASE("cli run honours the output root variable") {
  const auto dir = scratch_dir("cli_root");
  const auto cfg = dir / "tiny.json";
  write_file(cfg, R"({"steps": 1, "eval_every": 1, "prompts_per_step": 2})");
  setenv("OPD_OUTPUT_ROOT", (dir / "root").string().c_str(), 1);
  const auto r = invoke({"run", "--config", cfg.string()});
  unsetenv("OPD_OUTPUT_ROOT");
  CHECK(r.code == 0);
  CHECK(fs::exists(dir / "root" / "tiny" / "metrics.csv"));
}

TEST_CASE("cli run rejects invalid configs with exit 2 and no artifacts") {
  const auto dir = scratch_dir("cli_bad");
  const auto bad = dir / "bad.json";
  write_file(bad, "{\n  \"steps\": 3,\n  \"output_dir\": \"" + (dir / "out").string() + "\"\n  \"lr\": 1\n}\n");
  const auto r = invoke({"run", "--config", bad.string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("bad.json:4:") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "out"));

  const auto unknown = dir / "unknown.json";
  write_file(unknown, "{\n  \"steps\": 3,\n  \"learning_rate\": 1\n}\n");
  const auto u = invoke({"run", "--config", unknown.string()});
  CHECK(u.code == 2);
  CHECK(u.err.find("unknown.json:3: unknown key 'learning_rate'") != std::string::npos);

  CHECK(invoke({"run", "--config", (dir / "missing.json").string()}).code == 2);
  CHECK(invoke({"run"}).code == 2);
  CHECK(invoke({"frobnicate"}).code == 2);
  CHECK(invoke({}).code == 2);
}

TEST_CASE("cli metrics over a constructed dump") {
  const auto dir = scratch_dir("cli_metrics");
  std::mt19937_64 gen(3);
  const Vocabulary v(17, 16);
  std::string text;
  // Three long period-2 rollouts exceed L = 10000 rendered bytes and compress well.
  for (int i = 0; i < 3; ++i) {
    TokenSequence rep;
    for (int k = 0; k < 2600; ++k) rep.push_back(static_cast<TokenId>(k % 2 ? 4 : 9));
    text += dump_line(1, rep, true);
  }
  for (int i = 0; i < 4; ++i) text += dump_line(1, random_tokens(2600, v, gen), true);
  for (int i = 0; i < 3; ++i) text += dump_line(2, {1, 2, 3, 16}, false);
  write_file(dir / "dump.jsonl", text);

  const auto r = invoke({"metrics", "--dump", (dir / "dump.jsonl").string()});
  CHECK(r.code == 0);
  const auto header_end = r.out.find('\n');
  CHECK(r.out.substr(0, header_end) == "rollouts,trunc_rate,rep_rate,mean_comp_ratio,max_comp_ratio,mean_length");
  CHECK(r.out.substr(header_end + 1).rfind("10,0.7,0.3,", 0) == 0);
  CHECK(invoke({"metrics", "--dump", (dir / "dump.jsonl").string()}).out == r.out);

  // A tighter tail still finds the same three at toy thresholds.
  const auto toy = invoke({"metrics", "--dump", (dir / "dump.jsonl").string(), "--tail-chars", "200", "--tau", "5"});
  CHECK(toy.out.substr(toy.out.find('\n') + 1).rfind("10,0.7,0.3,", 0) == 0);

  write_file(dir / "empty.jsonl", "");
  CHECK(invoke({"metrics", "--dump", (dir / "empty.jsonl").string()}).code == 2);
  CHECK(invoke({"metrics", "--dump", (dir / "nope.jsonl").string()}).code == 2);
  write_file(dir / "broken.jsonl", dump_line(1, {1, 16}, false) + "{\"step\": 1}\n");
  const auto b = invoke({"metrics", "--dump", (dir / "broken.jsonl").string()});
  CHECK(b.code == 2);
  CHECK(b.err.find("broken.jsonl:2:") != std::string::npos);
  CHECK(invoke({"metrics", "--dump", (dir / "dump.jsonl").string(), "--tau", "0.5"}).code == 2);
}

TEST_CASE("cli compare") {
  const auto dir = scratch_dir("cli_compare");
  auto make_run = [&](const std::string& name, int steps, int every) {
    const auto r = invoke({"run", "--config", kTrapConfig.string(), "--set", "steps=" + std::to_string(steps), "--set",
                        "eval_every=" + std::to_string(every), "--set", "output_dir=" + (dir / name).string()});
    REQUIRE(r.code == 0);
  };
  make_run("a", 4, 2);
  make_run("b", 4, 1);
  const auto self = invoke({"compare", (dir / "a").string(), (dir / "a").string()});
  CHECK(self.code == 0);
  std::istringstream lines(self.out);
  std::string header, row;
  std::getline(lines, header);
  CHECK(header == "step,trunc_rate_a,rep_rate_a,accuracy_a,trunc_rate_a,rep_rate_a,accuracy_a");
  int rows = 0;
  while (std::getline(lines, row)) {
    ++rows;
    std::vector<std::string> cells;
    std::stringstream ss(row);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    REQUIRE(cells.size() == 7);
    CHECK(cells[1] == cells[4]);
    CHECK(cells[3] == cells[6]);
  }
  CHECK(rows == 3);

  const auto mismatch = invoke({"compare", (dir / "a").string(), (dir / "b").string()});
  CHECK(mismatch.code == 2);
  CHECK(mismatch.err.find("[0,2,4]") != std::string::npos);
  CHECK(mismatch.err.find("[0,1,2,3,4]") != std::string::npos);
  CHECK(invoke({"compare", (dir / "a").string(), (dir / "missing").string()}).code == 2);
  CHECK(invoke({"compare", (dir / "a").string()}).code == 2);
}
