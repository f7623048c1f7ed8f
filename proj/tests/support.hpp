#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "opd/objectives.hpp"
#include "opd/policy.hpp"
#include "opd/rollout.hpp"

namespace opd::test {

inline std::vector<double> normal_vector(std::size_t n, double scale, std::mt19937_64& gen) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

inline std::unique_ptr<TabularPolicy> random_tabular(const Vocabulary& vocab, int order, double scale,
                                                     std::mt19937_64& gen, PolicyRole role = PolicyRole::student) {
  TabularPolicy shape(vocab, order);
  return std::make_unique<TabularPolicy>(vocab, order, normal_vector(shape.num_params(), scale, gen), role);
}

inline std::unique_ptr<MlpPolicy> random_mlp(const Vocabulary& vocab, int window, int hidden, double scale,
                                             std::mt19937_64& gen, PolicyRole role = PolicyRole::student) {
  MlpPolicy shape(vocab, window, hidden, std::uint64_t{1});
  return std::make_unique<MlpPolicy>(vocab, window, hidden, normal_vector(shape.num_params(), scale, gen), role);
}

inline TokenSequence random_tokens(int len, const Vocabulary& vocab, std::mt19937_64& gen) {
  std::uniform_int_distribution<int> d(0, vocab.size() - 2);
  TokenSequence s;
  for (int i = 0; i < len; ++i) {
    auto t = static_cast<TokenId>(d(gen));
    if (t >= vocab.eos()) ++t;
    s.push_back(t);
  }
  return s;
}

// Random prompts, rollouts sampled from `student`; stored sampling-time log-probs are
// jittered so ratios spread across the clip band without sitting on its edges.
inline std::vector<RolloutGroup> random_batch(const Policy& student, const Policy& teacher, int prompts, int group,
                                              int max_len, std::mt19937_64& gen, double jitter, double clip_eps) {
  std::vector<TokenSequence> ps;
  std::vector<std::uint64_t> seeds;
  std::uniform_int_distribution<int> len(1, 3);
  for (int i = 0; i < prompts; ++i) {
    ps.push_back(random_tokens(len(gen), student.vocab(), gen));
    seeds.push_back(gen());
  }
  GenerationConfig cfg;
  cfg.max_len = max_len;
  cfg.group_size = group;
  auto batch = generate_groups(student, teacher, ps, seeds, cfg);
  if (jitter > 0) {
    std::normal_distribution<double> d(0.0, jitter);
    for (auto& g : batch)
      for (auto& r : g.rollouts)
        for (auto& lp : r.student_logps_old) {
          double shifted = lp;
          for (;;) {
            shifted = lp + d(gen);
            const double rho = std::exp(lp - shifted);
            if (std::abs(rho - (1 - clip_eps)) > 1e-3 && std::abs(rho - (1 + clip_eps)) > 1e-3) break;
          }
          lp = shifted;
        }
  }
  return batch;
}

// Central differences of f around p's parameters, one coordinate at a time.
inline std::vector<double> finite_difference(Policy& p, const std::function<double(const Policy&)>& f,
                                             double h = 1e-5) {
  auto params = p.mutable_params();
  std::vector<double> g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double x = params[i];
    params[i] = x + h;
    const double up = f(p);
    params[i] = x - h;
    const double down = f(p);
    params[i] = x;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// Relative error per coordinate, max |a - b| / max(|a|, |b|, floor).
inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

inline double max_abs(const std::vector<double>& a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  f << text;
}

// Fresh scratch directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto d = std::filesystem::path(OPD_TEST_SCRATCH) / name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

inline std::filesystem::path golden_path(const std::string& name) {
  return std::filesystem::path(OPD_GOLDEN_DIR) / name;
}

// Compares `actual` to a committed golden file. OPD_UPDATE_GOLDEN=1 rewrites it instead.
inline bool matches_golden(const std::string& name, const std::string& actual) {
  const auto p = golden_path(name);
  const char* update = std::getenv("OPD_UPDATE_GOLDEN");
  if (update != nullptr && std::string(update) == "1") {
    write_file(p, actual);
    return true;
  }
  if (!std::filesystem::exists(p)) return false;
  return read_file(p) == actual;
}

// A random toy objective instance: student (tabular or mlp), teacher, perturbed
// reference, a jittered rollout batch with fixed reverse-KL advantages, golden examples.
struct Instance {
  Vocabulary vocab{5, 4};
  std::unique_ptr<Policy> student, teacher, reference;
  std::vector<RolloutGroup> batch;
  AdvantageTable adv;
  std::vector<GoldenExample> golden;
  ObjectiveConfig cfg;
};

inline Instance make_instance(int i, std::mt19937_64& gen) {
  Instance in;
  if (i % 3 == 2)
    in.student = random_mlp(in.vocab, 2, 4, 0.8, gen);
  else
    in.student = random_tabular(in.vocab, 1 + i % 2, 1.0, gen);
  in.teacher = random_tabular(in.vocab, 2, 1.5, gen, PolicyRole::teacher);
  in.reference = in.student->clone();
  for (auto& x : in.reference->mutable_params()) x += std::normal_distribution<double>(0.0, 0.5)(gen);
  in.reference->set_role(PolicyRole::reference);
  in.cfg.length_norm = i % 2 ? LengthNorm::none : LengthNorm::per_token_mean;
  in.cfg.lambda_gold = 0.7;
  in.cfg.beta_kl = 0.3;
  in.batch = random_batch(*in.student, *in.teacher, 2, 2, 6, gen, 0.15, in.cfg.clip_eps);
  in.adv = reverse_kl_advantages(in.batch, *in.student);
  for (int g = 0; g < 2; ++g) {
    GoldenExample ex;
    ex.prompt = random_tokens(2, in.vocab, gen);
    ex.target = random_tokens(1 + g * 2, in.vocab, gen);
    ex.target.push_back(in.vocab.eos());
    in.golden.push_back(ex);
  }
  return in;
}

// Plain advantage-weighted score gradient -(1/N) sum_i w_i sum_t A grad log pi, from log_prob_grad.
inline std::vector<double> score_gradient_oracle(const std::vector<RolloutGroup>& batch, const AdvantageTable& adv,
                                          const Policy& p, LengthNorm norm) {
  const auto rs = flatten(batch);
  std::vector<double> g(p.num_params(), 0.0);
  for (std::size_t i = 0; i < rs.size(); ++i) {
    const double w = norm == LengthNorm::per_token_mean ? 1.0 / rs[i]->generated.size() : 1.0;
    for (std::size_t t = 0; t < rs[i]->generated.size(); ++t) {
      const auto s = p.log_prob_grad(rs[i]->state_at(t), rs[i]->generated[t]);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] -= w * adv.per_token[i][t] * s[k] / rs.size();
    }
  }
  return g;
}

}  // namespace opd::test
