#include "opd/environment.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include <json.hpp>

#include "opd/metrics.hpp"
#include "opd/rng.hpp"

namespace opd {

std::string_view to_string(TaskKind k) { return k == TaskKind::copy ? "copy" : "reverse"; }

TaskKind task_kind_from_string(std::string_view s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "reverse") return TaskKind::reverse;
  throw ConfigError(fmt::format("unknown task '{}'", s));
}

void VerifiableTask::validate() const {
  if (vocab_size < 2 || eos < 0 || eos >= vocab_size) throw ConfigError("task vocabulary is malformed");
  if (prompt_min < 1 || prompt_max < prompt_min)
    throw ConfigError(fmt::format("bad prompt length range [{}, {}]", prompt_min, prompt_max));
}

TokenSequence VerifiableTask::target(std::span<const TokenId> prompt) const {
  TokenSequence out(prompt.begin(), prompt.end());
  if (kind == TaskKind::reverse) std::reverse(out.begin(), out.end());
  out.push_back(eos);
  return out;
}

int VerifiableTask::verify(std::span<const TokenId> prompt, std::span<const TokenId> response) const {
  const TokenSequence want = target(prompt);
  return std::equal(want.begin(), want.end(), response.begin(), response.end()) ? 1 : 0;
}

namespace {

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed, std::uint64_t stream) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  const CounterRng rng(seed, stream);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform(n - i) * static_cast<double>(i));
    std::swap(p[i - 1], p[std::min(j, i - 1)]);
  }
  return p;
}

constexpr std::uint64_t kForestStream = 0x666f72;
constexpr std::uint64_t kGoldenStream = 0x676f6c;
constexpr std::uint64_t kSplitStream = 0x73706c;
constexpr std::uint64_t kNoiseStream = 0x6e6f69;

}  // namespace

int Forest::depth(TokenId v) const {
  int d = 0;
  while (parent[static_cast<std::size_t>(v)] >= 0) {
    v = parent[static_cast<std::size_t>(v)];
    if (++d > static_cast<int>(parent.size())) throw InvalidInput("forest has a cycle");
  }
  return d;
}

TokenSequence Forest::path_to(TokenId v) const {
  TokenSequence path{v};
  while (parent[static_cast<std::size_t>(v)] >= 0) {
    v = parent[static_cast<std::size_t>(v)];
    path.push_back(v);
    if (path.size() > parent.size()) throw InvalidInput("forest has a cycle");
  }
  std::reverse(path.begin(), path.end());
  return path;
}

Forest make_forest(int num_tokens, int spine_depth, int min_path, int max_path, std::uint64_t seed) {
  if (num_tokens < 2) throw ConfigError("forest needs at least two tokens");
  if (spine_depth < 1 || spine_depth >= num_tokens)
    throw ConfigError(fmt::format("spine_depth must be in [1, {}], got {}", num_tokens - 1, spine_depth));
  if (min_path < 2 || max_path < min_path || max_path > spine_depth + 1)
    throw ConfigError(fmt::format("path range [{}, {}] does not fit a spine of depth {}", min_path, max_path,
                                  spine_depth));
  const auto n = static_cast<std::size_t>(num_tokens);
  const auto perm = seeded_permutation(n, seed, kForestStream);
  Forest f;
  f.parent.assign(n, -1);
  std::vector<int> depth(n, 0);
  std::vector<TokenId> placed{static_cast<TokenId>(perm[0])};
  for (int i = 1; i <= spine_depth; ++i) {
    const auto v = perm[static_cast<std::size_t>(i)];
    f.parent[v] = static_cast<TokenId>(perm[static_cast<std::size_t>(i - 1)]);
    depth[v] = i;
    placed.push_back(static_cast<TokenId>(v));
  }
  const CounterRng rng(seed, kForestStream + 1);
  for (std::size_t i = static_cast<std::size_t>(spine_depth) + 1; i < n; ++i) {
    std::vector<TokenId> candidates;
    for (TokenId p : placed) {
      const int child_len = depth[static_cast<std::size_t>(p)] + 2;
      if (child_len >= min_path && child_len <= max_path) candidates.push_back(p);
    }
    const auto k = static_cast<std::size_t>(rng.uniform(i) * static_cast<double>(candidates.size()));
    const TokenId p = candidates[std::min(k, candidates.size() - 1)];
    const auto v = perm[i];
    f.parent[v] = p;
    depth[v] = depth[static_cast<std::size_t>(p)] + 1;
    placed.push_back(static_cast<TokenId>(v));
  }
  return f;
}

std::vector<TokenSequence> forest_prompts(const Forest& f, int min_len, int max_len) {
  std::vector<TokenSequence> out;
  for (std::size_t v = 0; v < f.parent.size(); ++v) {
    const int len = f.depth(static_cast<TokenId>(v)) + 1;
    if (len >= min_len && len <= max_len) out.push_back(f.path_to(static_cast<TokenId>(v)));
  }
  return out;
}

std::vector<GoldenExample> make_golden_dataset(const VerifiableTask& task, int n, std::uint64_t seed,
                                               const std::vector<TokenSequence>& pool) {
  task.validate();
  if (n < 1) throw UsageError("golden dataset size must be >= 1");
  std::vector<GoldenExample> out;
  out.reserve(static_cast<std::size_t>(n));
  if (!pool.empty()) {
    const auto perm = seeded_permutation(pool.size(), seed, kGoldenStream);
    for (int i = 0; i < n; ++i) {
      const auto& p = pool[perm[static_cast<std::size_t>(i) % pool.size()]];
      out.push_back({p, task.target(p)});
    }
    return out;
  }
  const CounterRng rng(seed, kGoldenStream);
  std::uint64_t draw = 0;
  const int span_len = task.prompt_max - task.prompt_min + 1;
  for (int i = 0; i < n; ++i) {
    const int len = task.prompt_min + std::min(span_len - 1, static_cast<int>(rng.uniform(draw++) * span_len));
    TokenSequence p;
    for (int t = 0; t < len; ++t) {
      // Uniform over the V - 1 non-EOS tokens.
      auto tok = static_cast<TokenId>(
          std::min(task.vocab_size - 2, static_cast<int>(rng.uniform(draw++) * (task.vocab_size - 1))));
      if (tok >= task.eos) ++tok;
      p.push_back(tok);
    }
    out.push_back({p, task.target(p)});
  }
  return out;
}

void write_golden_jsonl(std::ostream& out, const std::vector<GoldenExample>& golden) {
  for (const auto& g : golden) {
    nlohmann::ordered_json j;
    j["prompt"] = g.prompt;
    j["target"] = g.target;
    out << j.dump() << '\n';
  }
}

std::unique_ptr<TabularPolicy> make_forest_solver(const Vocabulary& vocab, const Forest& f, double margin,
                                                  int order, PolicyRole role, std::optional<double> eos_margin) {
  if (order < 2) throw ConfigError("the forest solver needs context order >= 2");
  if (f.parent.size() != static_cast<std::size_t>(vocab.size())) throw ConfigError("forest/vocabulary mismatch");
  auto policy = std::make_unique<TabularPolicy>(vocab, order, role);
  const auto base = static_cast<std::size_t>(vocab.size()) + 1;
  const auto pad = static_cast<std::size_t>(vocab.size());
  const auto eos = static_cast<std::size_t>(vocab.eos());
  for (std::size_t r = 0; r < policy->num_rows(); ++r) {
    const std::size_t b = r % base;
    const std::size_t a = (r / base) % base;
    if (b == pad || b == eos) continue;
    const TokenId pb = f.parent[b];
    std::size_t choice;
    if (a != pad && a != eos && static_cast<TokenId>(a) == pb)
      choice = b;
    else if (pb < 0)
      choice = eos;
    else
      choice = static_cast<std::size_t>(pb);
    policy->row(r)[choice] = choice == eos && eos_margin ? *eos_margin : margin;
  }
  return policy;
}

double trap_construction_margin(const Policy& teacher, const Policy& student) {
  const Vocabulary& vocab = teacher.vocab();
  double worst = std::numeric_limits<double>::infinity();
  auto probe = [&](TokenSequence generated, TokenId continuation) {
    const TokenSequence prompt{generated.front()};
    const PrefixState s{prompt, generated};
    worst = std::min(worst, teacher.log_prob(s, continuation) - student.log_prob(s, continuation));
  };
  const auto* trap = dynamic_cast<const TrapTeacher*>(&teacher);
  const bool bigrams = trap == nullptr || trap->trap_params().max_period >= 2;
  for (TokenId x = 0; x < vocab.size(); ++x) {
    if (x == vocab.eos()) continue;
    probe({x, x}, x);
    if (!bigrams) continue;
    for (TokenId y = 0; y < vocab.size(); ++y)
      if (y != x && y != vocab.eos()) probe({x, y, x, y}, x);
  }
  return worst;
}

std::pair<std::unique_ptr<Policy>, std::unique_ptr<Policy>> build_trap_pair(const Vocabulary& vocab,
                                                                            const Forest& f,
                                                                            const TrapPairSpec& spec,
                                                                            std::uint64_t seed) {
  if (!(spec.trap.repeat_boost >= 0.0)) throw ConfigError("repeat_boost must be >= 0");
  if (!(spec.student_noise >= 0.0)) throw ConfigError("student_noise must be >= 0");
  auto teacher = std::make_unique<TrapTeacher>(
      make_forest_solver(vocab, f, spec.teacher_margin, spec.order, PolicyRole::teacher, spec.teacher_eos_margin),
      spec.trap);
  auto student = make_forest_solver(vocab, f, spec.student_margin, spec.order, PolicyRole::student);
  if (spec.student_noise > 0.0) {
    const CounterRng rng(seed, kNoiseStream);
    auto p = student->mutable_params();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] += spec.student_noise * (2.0 * rng.uniform(i) - 1.0);
  }
  if (spec.trap.repeat_boost > 0.0) {
    const double m = trap_construction_margin(*teacher, *student);
    if (!(m > 0.0))
      throw ConfigError(fmt::format(
          "trap construction check failed: teacher does not favour repeat continuations (worst gap {:.6g})", m));
  }
  return {std::move(teacher), std::move(student)};
}

void EnvConfig::validate() const {
  if (task != TaskKind::reverse) throw ConfigError("the trap environment supports the reverse task only");
  if (vocab_size < 3 || eos_id < 0 || eos_id >= vocab_size) throw ConfigError("bad vocabulary size or eos id");
  if (eval_prompts < 1) throw ConfigError("eval_prompts must be >= 1");
  if (golden_size < 0) throw ConfigError("golden_size must be >= 0");
  if (!(pair.teacher_margin >= 0.0) || !(pair.student_margin >= 0.0)) throw ConfigError("margins must be >= 0");
}

Environment build_environment(const EnvConfig& cfg) {
  cfg.validate();
  Vocabulary vocab(cfg.vocab_size, cfg.eos_id);
  VerifiableTask task{cfg.task, cfg.prompt_min, cfg.prompt_max, cfg.vocab_size, cfg.eos_id};
  task.validate();

  // Forest over the non-EOS ids; EOS gets no parent slot of its own.
  const Forest compact =
      make_forest(cfg.vocab_size - 1, cfg.spine_depth, cfg.prompt_min, cfg.prompt_max, cfg.seed);
  auto id_of = [&](TokenId c) { return c >= cfg.eos_id ? c + 1 : c; };
  Forest forest;
  forest.parent.assign(static_cast<std::size_t>(cfg.vocab_size), -1);
  for (std::size_t c = 0; c < compact.parent.size(); ++c)
    forest.parent[static_cast<std::size_t>(id_of(static_cast<TokenId>(c)))] =
        compact.parent[c] < 0 ? -1 : id_of(compact.parent[c]);

  std::vector<TokenSequence> prompts;
  for (std::size_t v = 0; v < forest.parent.size(); ++v) {
    if (static_cast<TokenId>(v) == cfg.eos_id) continue;
    const int len = forest.depth(static_cast<TokenId>(v)) + 1;
    if (len >= cfg.prompt_min && len <= cfg.prompt_max) prompts.push_back(forest.path_to(static_cast<TokenId>(v)));
  }
  if (prompts.size() <= static_cast<std::size_t>(cfg.eval_prompts))
    throw ConfigError(fmt::format("only {} prompts available; cannot hold out {} for evaluation", prompts.size(),
                                  cfg.eval_prompts));
  const auto perm = seeded_permutation(prompts.size(), cfg.seed, kSplitStream);
  Environment env{vocab, task, forest, {}, {}, {}, nullptr, nullptr, nullptr};
  for (std::size_t i = 0; i < perm.size(); ++i)
    (i < static_cast<std::size_t>(cfg.eval_prompts) ? env.eval_prompts : env.train_prompts)
        .push_back(prompts[perm[i]]);

  const int golden_n = cfg.golden_size > 0 ? cfg.golden_size : static_cast<int>(env.train_prompts.size());
  env.golden = make_golden_dataset(task, golden_n, cfg.seed, env.train_prompts);

  auto [teacher, student] = build_trap_pair(vocab, forest, cfg.pair, cfg.seed);
  env.reference = student->clone();
  env.reference->set_role(PolicyRole::reference);
  env.teacher = std::move(teacher);
  env.student = std::move(student);
  return env;
}

}  // namespace opd
