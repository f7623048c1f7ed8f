// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when any fails.

#include <chrono>
#include <cmath>
#include <cstring>
#include <iostream>
#include <optional>

#include <fmt/core.h>

#include "opd/config.hpp"
#include "opd/metrics.hpp"
#include "support.hpp"

using namespace opd;
using namespace opd::test;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
  fmt::print("{} {}: {}\n", ok ? "PASS" : "FAIL", name, detail);
  std::fflush(stdout);
  failures += !ok;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::string seeded_text(std::size_t n, int symbols, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<int> d(0, symbols - 1);
  const std::string alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += alphabet[static_cast<std::size_t>(d(gen))];
  return s;
}

void make_on_policy(std::vector<RolloutGroup>& batch, const Policy& p) {
  for (auto& g : batch)
    for (auto& r : g.rollouts)
      for (std::size_t t = 0; t < r.generated.size(); ++t) r.student_logps_old[t] = p.log_prob(r.state_at(t), r.generated[t]);
}

void gradient_correctness() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(20240611);
  double w_opd = 0, w_sft = 0, w_off = 0, w_kl = 0, w_st = 0;
  const int n = 50;
  for (int i = 0; i < n; ++i) {
    Instance in = make_instance(i, gen);
    Policy& s = *in.student;
    w_opd = std::max(w_opd, max_rel_error(surrogate_loss(in.batch, in.adv, s, in.cfg).grad,
                                          finite_difference(s, [&](const Policy& q) {
                                            return surrogate_loss(in.batch, in.adv, q, in.cfg).value;
                                          })));
    const auto& ex = in.golden[1];
    w_sft = std::max(w_sft, max_rel_error(sft_loss(ex, s).grad,
                                          finite_difference(s, [&](const Policy& q) { return sft_loss(ex, q).value; })));
    const auto seq = flatten(in.batch)[0]->generated;
    const auto prompt = in.batch[0].prompt;
    w_off = std::max(w_off, max_rel_error(offline_distill_loss_report(prompt, seq, *in.teacher, s).grad,
                                          finite_difference(s, [&](const Policy& q) {
                                            return offline_distill_loss(prompt, seq, *in.teacher, q);
                                          })));
    const auto prefixes = rollout_prefixes(in.batch);
    w_kl = std::max(w_kl, max_rel_error(reference_kl_report(prefixes, s, *in.reference).grad,
                                        finite_difference(s, [&](const Policy& q) {
                                          return reference_kl_penalty(prefixes, q, *in.reference);
                                        })));
    w_st = std::max(w_st, max_rel_error(stable_opd_loss(in.batch, in.golden, s, *in.reference, in.cfg, &in.adv).grad,
                                        finite_difference(s, [&](const Policy& q) {
                                          return stable_opd_loss(in.batch, in.golden, q, *in.reference, in.cfg, &in.adv)
                                              .value;
                                        })));
  }
  const double secs = seconds_since(t0);
  const double worst = std::max({w_opd, w_sft, w_off, w_kl, w_st});
  report("gradient correctness", worst <= 1e-6 && secs < 60.0,
         fmt::format("{} instances; max rel err opd {:.2e} sft {:.2e} offline {:.2e} ref_kl {:.2e} stable {:.2e} "
                     "(tol 1e-6); {:.1f}s (limit 60s)",
                     n, w_opd, w_sft, w_off, w_kl, w_st, secs));
}

void objective_identities() {
  std::mt19937_64 gen(77);
  double rho_err = 0.0;
  for (int i = 0; i < 50; ++i) {
    Instance in = make_instance(i, gen);
    make_on_policy(in.batch, *in.student);
    const auto rep = surrogate_loss(in.batch, in.adv, *in.student, in.cfg);
    const auto oracle = score_gradient_oracle(in.batch, in.adv, *in.student, in.cfg.length_norm);
    for (std::size_t k = 0; k < oracle.size(); ++k) rho_err = std::max(rho_err, std::abs(rep.grad[k] - oracle[k]));
  }

  double self_max = 0.0;
  for (int i = 0; i < 20; ++i) {
    auto p = random_tabular(Vocabulary(5, 4), 2, 1.0, gen);
    auto t = p->clone();
    t->set_role(PolicyRole::teacher);
    const auto batch = random_batch(*p, *t, 3, 4, 10, gen, 0.0, 0.2);
    const auto rep = opd_loss(batch, *p, ObjectiveConfig{});
    self_max = std::max({self_max, std::abs(rep.value), max_abs(rep.grad)});
  }

  bool bitwise = true;
  for (int i = 0; i < 20; ++i) {
    Instance in = make_instance(i, gen);
    ObjectiveConfig zero = in.cfg;
    zero.lambda_gold = 0.0;
    zero.beta_kl = 0.0;
    const auto st = stable_opd_loss(in.batch, in.golden, *in.student, *in.reference, zero);
    const auto op = opd_loss(in.batch, *in.student, zero);
    bitwise = bitwise && same_bits(st.value, op.value) && same_bits(st.grad, op.grad);
  }
  report("objective identities", rho_err <= 1e-10 && self_max == 0.0 && bitwise,
         fmt::format("rho=1 vs score gradient max err {:.2e} (tol 1e-10); teacher==student max |loss|,|grad| {}; "
                     "lambda=beta=0 stable vs opd bitwise {}",
                     rho_err, self_max, bitwise ? "equal" : "different"));
}

void grpo_degeneracy() {
  std::mt19937_64 gen(5);
  bool adv_zero = true;
  double grad_max = 0.0;
  int groups = 0;
  for (int i = 0; i < 20; ++i) {
    auto p = random_tabular(Vocabulary(5, 4), 2, 1.0, gen);
    const auto batch = random_batch(*p, *p, 1, 4, 8, gen, 0.1, 0.2);
    const double reward = i % 2;
    const auto adv = group_normalized_advantages(batch, std::vector<double>(4, reward));
    for (const auto& row : adv.per_token)
      for (double a : row) adv_zero = adv_zero && a == 0.0;
    grad_max = std::max(grad_max, max_abs(surrogate_loss(batch, adv, *p, ObjectiveConfig{}).grad));
    ++groups;
  }
  report("GRPO degeneracy", adv_zero && grad_max == 0.0,
         fmt::format("{} all-equal groups: advantages all exactly zero {}; max |group gradient| {}", groups,
                     adv_zero ? "yes" : "no", grad_max));
}

void metric_oracles() {
  const RepetitionConfig cfg;  // L = 10000, tau = 10
  std::string ab;
  while (ab.size() < 12000) ab += "ab";
  const double periodic = comp_ratio(ab, cfg);
  const double uniform = comp_ratio(seeded_text(12000, 64, 12345), cfg);

  RepetitionConfig guard = cfg;
  guard.tail_chars = 1000;
  std::string xy;
  while (xy.size() < 1200) xy += "xy";
  const bool length_guard = rep_indicator_text(xy, guard) && !rep_indicator_text(xy.substr(0, 1000), guard) &&
                            !rep_indicator_text(xy.substr(0, 999), guard);

  // Raising tau never turns a flag on.
  bool monotone = true;
  for (int i = 0; i < 20; ++i) {
    const std::string text = i % 2 ? seeded_text(1200, 1 + i, i) : std::string(1200, 'q').replace(0, 7 * i, seeded_text(7 * i, 64, i));
    bool prev = true;
    for (double tau = 1.5; tau <= 60.0; tau *= 1.3) {
      RepetitionConfig c = guard;
      c.tau = tau;
      const bool flag = rep_indicator_text(text, c);
      monotone = monotone && (prev || !flag);
      prev = flag;
    }
  }

  std::mt19937_64 gen(14);
  double decomp = 0.0;
  for (int i = 0; i < 30; ++i) {
    Instance in = make_instance(i, gen);
    std::vector<std::vector<bool>> mask;
    std::bernoulli_distribution coin(0.4);
    for (const auto* r : flatten(in.batch)) {
      std::vector<bool> m;
      for (std::size_t t = 0; t < r->generated.size(); ++t) m.push_back(coin(gen));
      mask.push_back(m);
    }
    auto total = score_gradient_oracle(in.batch, in.adv, *in.student, in.cfg.length_norm);
    const auto split = gradient_decomposition(in.batch, *in.student, mask, in.cfg, &in.adv);
    for (std::size_t k = 0; k < total.size(); ++k)
      decomp = std::max(decomp, std::abs(split.regular[k] + split.repetitive[k] + total[k]));
  }
  report("metric oracles", periodic > 10.0 && uniform < 3.0 && length_guard && monotone && decomp <= 1e-10,
         fmt::format("comp_ratio period-2 {:.1f} (> 10), 64-symbol {:.2f} (< 3); length guard {}; tau monotone {}; "
                     "decomposition max err {:.2e} (tol 1e-10)",
                     periodic, uniform, length_guard ? "ok" : "broken", monotone ? "ok" : "broken", decomp));
}

struct TrapRun {
  std::vector<MetricsRecord> metrics;
  std::vector<EvalRecord> evals;
  double seconds = 0.0;
};

TrapRun run_config(const std::string& config, std::uint64_t seed, const fs::path& out,
                   const std::vector<std::string>& extra = {}, bool resume = false) {
  std::vector<std::string> sets{"seed=" + std::to_string(seed), "output_dir=" + out.string()};
  sets.insert(sets.end(), extra.begin(), extra.end());
  const auto exp = load_experiment_config(fs::path(OPD_SOURCE_DIR) / "configs" / config, sets);
  RunOptions opts;
  opts.output_dir = exp.output_dir;
  opts.resume = resume;
  opts.manifest = to_json(exp);
  const auto t0 = Clock::now();
  auto run = run_experiment(exp.env, exp.train, opts);
  return {std::move(run.metrics), std::move(run.evals), seconds_since(t0)};
}

// First 1-based step whose value reaches `threshold`.
std::optional<long> first_reaching(const std::vector<MetricsRecord>& m, double MetricsRecord::*field, double threshold,
                                   bool strict = false) {
  for (const auto& r : m)
    if (strict ? r.*field > threshold : r.*field >= threshold) return r.step;
  return std::nullopt;
}

std::string step_text(const std::optional<long>& s) { return s ? std::to_string(*s) : "never"; }

void trap_criteria(const fs::path& scratch) {
  const std::uint64_t seeds[] = {1, 2, 3};
  std::vector<TrapRun> opd, kl, stable;
  for (auto seed : seeds) {
    opd.push_back(run_config("trap_opd.json", seed, scratch / fmt::format("opd_s{}", seed)));
    kl.push_back(run_config("trap_opd_kl.json", seed, scratch / fmt::format("opd_kl_s{}", seed)));
    stable.push_back(run_config("trap_stable_opd.json", seed, scratch / fmt::format("stable_s{}", seed)));
  }

  // Failure mode.
  bool collapse_ok = true;
  std::string detail;
  for (std::size_t i = 0; i < opd.size(); ++i) {
    const auto& r = opd[i];
    const auto t90 = first_reaching(r.metrics, &MetricsRecord::trunc_rate_rollout, 0.9);
    const auto r30 = first_reaching(r.metrics, &MetricsRecord::rep_rate_rollout, 0.3);
    const long onset = t90 ? std::min(*t90, r30.value_or(*t90)) : r.metrics.back().step;
    double peak = 0.0;
    for (const auto& e : r.evals)
      if (e.step <= onset) peak = std::max(peak, e.accuracy);
    const double final_acc = r.evals.back().accuracy;
    const double drop = peak > 0 ? (peak - final_acc) / peak : 0.0;
    const bool ok = t90 && *t90 <= 2000 && r30 && *r30 <= 2000 && drop >= 0.5 && r.seconds < 600.0;
    collapse_ok = collapse_ok && ok;
    detail += fmt::format("{}seed {}: trunc>=0.9 at {}, rep>=0.3 at {}, peak acc {:.3f} -> final {:.3f} (drop {:.0f}%), "
                          "{:.0f}s",
                          i ? "; " : "", seeds[i], step_text(t90), step_text(r30), peak, final_acc, 100 * drop,
                          r.seconds);
  }
  report("failure-mode reproduction", collapse_ok,
         detail + " (need <= 2000 steps, drop >= 50%, < 600s)");

  // Stabilization.
  bool stable_ok = true;
  int ordered = 0;
  detail.clear();
  for (std::size_t i = 0; i < stable.size(); ++i) {
    const auto& s = stable[i];
    double max_rep = 0.0, max_trunc = 0.0;
    for (const auto& r : s.metrics) {
      max_rep = std::max(max_rep, r.rep_rate_rollout);
      max_trunc = std::max(max_trunc, r.trunc_rate_rollout);
    }
    const double trunc100 = s.metrics.at(99).trunc_rate_rollout;
    const double acc_opd = opd[i].evals.back().accuracy;
    const double acc_kl = kl[i].evals.back().accuracy;
    const double acc_st = s.evals.back().accuracy;
    const auto rep_opd = first_reaching(opd[i].metrics, &MetricsRecord::rep_rate_rollout, 0.2, true);
    const auto rep_st = first_reaching(s.metrics, &MetricsRecord::rep_rate_rollout, 0.2, true);
    const bool later = !rep_st || (rep_opd && *rep_st > *rep_opd);
    const bool final_rep = s.metrics.back().rep_rate_rollout <= opd[i].metrics.back().rep_rate_rollout;
    const bool ok = max_rep <= 0.05 && max_trunc <= 1.5 * trunc100 && acc_st > acc_opd && later && final_rep;
    stable_ok = stable_ok && ok;
    const bool order = acc_opd < acc_kl && acc_kl < acc_st;
    ordered += order;
    detail += fmt::format("{}seed {}: max rep {:.3f}, max trunc {:.3f} vs step-100 {:.3f}, rep>0.2 at {} vs opd {}; "
                          "final acc opd {:.3f} < kl {:.3f} < kl+mix {:.3f} {}",
                          i ? "; " : "", seeds[i], max_rep, max_trunc, trunc100, step_text(rep_st),
                          step_text(rep_opd), acc_opd, acc_kl, acc_st, order ? "holds" : "fails");
  }
  report("stabilization", stable_ok && ordered >= 2,
         detail + fmt::format(" (ordering on {}/3 seeds, need 2)", ordered));

  // Advantage asymmetry.
  bool asym_ok = true;
  detail.clear();
  for (std::size_t i = 0; i < opd.size(); ++i) {
    int logged = 0, wins = 0;
    bool on = false;
    for (const auto& r : opd[i].metrics) {
      on = on || r.rep_rate_rollout > 0.1;
      if (!on) continue;
      ++logged;
      wins += r.adv_mean_repetitive > r.adv_mean_regular;
    }
    const double frac = logged ? static_cast<double>(wins) / logged : 0.0;
    asym_ok = asym_ok && logged > 0 && frac >= 0.9;
    detail += fmt::format("{}seed {}: {}/{} steps ({:.1f}%)", i ? "; " : "", seeds[i], wins, logged, 100 * frac);
  }
  report("advantage asymmetry", asym_ok, detail + " with adv_mean_repetitive > adv_mean_regular (need >= 90%)");
}

void determinism(const fs::path& scratch) {
  bool ok = true;
  std::string detail;
  for (const std::string config : {"trap_opd.json", "trap_stable_opd.json"}) {
    const std::vector<std::string> sets{"steps=300"};
    run_config(config, 4, scratch / "a", sets);
    run_config(config, 4, scratch / "b", sets);
    run_config(config, 4, scratch / "c", {"steps=170"});
    run_config(config, 4, scratch / "c", sets, true);
    const bool twin = read_file(scratch / "a" / "metrics.csv") == read_file(scratch / "b" / "metrics.csv") &&
                      read_file(scratch / "a" / "eval.csv") == read_file(scratch / "b" / "eval.csv");
    const bool resumed = read_file(scratch / "a" / "metrics.csv") == read_file(scratch / "c" / "metrics.csv") &&
                         read_file(scratch / "a" / "eval.csv") == read_file(scratch / "c" / "eval.csv") &&
                         read_file(scratch / "a" / "checkpoint.json") == read_file(scratch / "c" / "checkpoint.json");
    ok = ok && twin && resumed;
    detail += fmt::format("{}{}: repeat run {}, resume 170->300 {}", detail.empty() ? "" : "; ", config,
                          twin ? "bitwise identical" : "differs", resumed ? "bitwise identical" : "differs");
    for (const char* d : {"a", "b", "c"}) fs::remove_all(scratch / d);
  }
  report("determinism", ok, detail);
}

}  // namespace

int main() {
  const fs::path scratch = scratch_dir("acceptance");
  try {
    gradient_correctness();
    objective_identities();
    grpo_degeneracy();
    metric_oracles();
    trap_criteria(scratch);
    determinism(scratch);
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance aborted: " << e.what() << "\n";
    return 1;
  }
  std::cout << (failures ? fmt::format("{} criteria failed\n", failures) : std::string("all criteria passed\n"));
  return failures ? 1 : 0;
}
