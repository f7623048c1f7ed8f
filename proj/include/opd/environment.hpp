#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "opd/objectives.hpp"
#include "opd/trap_teacher.hpp"

namespace opd {

enum class TaskKind { copy, reverse };
std::string_view to_string(TaskKind k);
TaskKind task_kind_from_string(std::string_view s);

// Binary-reward task over prompts of non-EOS tokens. The unique correct response is
// the prompt (copy) or the reversed prompt (reverse), followed by EOS.
struct VerifiableTask {
  TaskKind kind = TaskKind::reverse;
  int prompt_min = 4;
  int prompt_max = 8;
  int vocab_size = 17;
  TokenId eos = 16;

  void validate() const;
  TokenSequence target(std::span<const TokenId> prompt) const;
  int verify(std::span<const TokenId> prompt, std::span<const TokenId> response) const;
};

// Rooted forest over the non-EOS tokens; parent[v] == -1 marks a root.
struct Forest {
  std::vector<TokenId> parent;

  bool is_root(TokenId v) const { return parent[static_cast<std::size_t>(v)] < 0; }
  int depth(TokenId v) const;
  // Root-to-v path.
  TokenSequence path_to(TokenId v) const;
};

// A single tree: a spine of depth `spine_depth` from a random root, then every other
// token hangs off a random node whose children end up with path length in
// [min_path, max_path]. Token order and attachment points come from `seed`.
Forest make_forest(int num_tokens, int spine_depth, int min_path, int max_path, std::uint64_t seed);

// Every root-to-node path with length in [min_len, max_len], ordered by node id.
std::vector<TokenSequence> forest_prompts(const Forest& f, int min_len, int max_len);

// n golden examples. With a non-empty pool prompts cycle through a seeded permutation of
// the pool; otherwise prompts are drawn uniformly from the task's length range.
std::vector<GoldenExample> make_golden_dataset(const VerifiableTask& task, int n, std::uint64_t seed,
                                               const std::vector<TokenSequence>& pool = {});

// One {"prompt": [...], "target": [...]} object per line.
void write_golden_jsonl(std::ostream& out, const std::vector<GoldenExample>& golden);

// Order-n tabular policy that reverses forest paths: logit `margin` on the solver's
// choice given the last two context tokens (a, b), zero elsewhere:
//   a == parent(b) -> b;   b a root -> EOS;   otherwise -> parent(b).
// The EOS choice at roots gets `eos_margin` instead when given.
std::unique_ptr<TabularPolicy> make_forest_solver(const Vocabulary& vocab, const Forest& f, double margin,
                                                  int order, PolicyRole role,
                                                  std::optional<double> eos_margin = std::nullopt);

struct TrapPairSpec {
  double teacher_margin = 7.0;
  std::optional<double> teacher_eos_margin;  // teacher's EOS logit at roots; teacher_margin when unset
  double student_margin = 4.0;
  double student_noise = 0.5;  // uniform in [-noise, noise] added to every student logit
  int order = 2;
  TrapParams trap;
};

// Teacher = trap over a confident solver; student = weaker noisy solver. For a positive
// repeat boost the pair must pass the construction check: on every repeated-unigram and
// repeated-bigram probe, the teacher gives the repeat continuation a strictly higher
// log-probability than the student. Failure throws ConfigError.
std::pair<std::unique_ptr<Policy>, std::unique_ptr<Policy>> build_trap_pair(const Vocabulary& vocab,
                                                                            const Forest& f,
                                                                            const TrapPairSpec& spec,
                                                                            std::uint64_t seed);

// Smallest teacher-minus-student repeat-continuation log-prob gap over the probe set.
double trap_construction_margin(const Policy& teacher, const Policy& student);

struct EnvConfig {
  int vocab_size = 17;
  TokenId eos_id = 16;
  TaskKind task = TaskKind::reverse;
  int prompt_min = 4;
  int prompt_max = 8;
  int spine_depth = 7;
  int eval_prompts = 4;
  int golden_size = 0;  // 0: one golden example per training prompt
  TrapPairSpec pair;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Environment {
  Vocabulary vocab;
  VerifiableTask task;
  Forest forest;
  std::vector<TokenSequence> train_prompts;
  std::vector<TokenSequence> eval_prompts;
  std::vector<GoldenExample> golden;
  std::unique_ptr<Policy> teacher;
  std::unique_ptr<Policy> student;
  std::unique_ptr<Policy> reference;
};

Environment build_environment(const EnvConfig& cfg);

}  // namespace opd
