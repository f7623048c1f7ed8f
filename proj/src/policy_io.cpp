#include "opd/policy_io.hpp"

#include <fmt/format.h>

#include <fstream>

#include "opd/trap_teacher.hpp"

namespace opd {

using nlohmann::json;
using nlohmann::ordered_json;

ordered_json policy_to_json(const Policy& policy) {
  ordered_json j;
  j["format"] = "opd-policy";
  j["version"] = 1;
  j["kind"] = std::string(to_string(policy.kind()));
  j["role"] = std::string(to_string(policy.role()));
  j["vocab_size"] = policy.vocab().size();
  j["eos_id"] = policy.vocab().eos();
  j["glyphs"] = policy.vocab().glyphs();
  switch (policy.kind()) {
    case PolicyKind::tabular_ngram: {
      const auto& tab = static_cast<const TabularPolicy&>(policy);
      j["context_order"] = tab.order();
      j["params"] = std::vector<double>(tab.params().begin(), tab.params().end());
      break;
    }
    case PolicyKind::tiny_mlp: {
      const auto& mlp = static_cast<const MlpPolicy&>(policy);
      j["context_order"] = mlp.window();
      j["hidden"] = mlp.hidden();
      j["params"] = std::vector<double>(mlp.params().begin(), mlp.params().end());
      break;
    }
    case PolicyKind::trap: {
      const auto& trap = static_cast<const TrapTeacher&>(policy);
      const auto& p = trap.trap_params();
      j["trap"] = {{"repeat_boost", p.repeat_boost},
                   {"eos_damp", p.eos_damp},
                   {"long_context", p.long_context},
                   {"max_period", p.max_period}};
      j["base"] = policy_to_json(trap.base());
      break;
    }
  }
  return j;
}

std::unique_ptr<Policy> policy_from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != "opd-policy") throw InvalidInput("not an opd-policy checkpoint");
    if (j.at("version").get<int>() != 1) throw InvalidInput("unsupported checkpoint version");
    const auto kind = policy_kind_from_string(j.at("kind").get<std::string>());
    const auto role = policy_role_from_string(j.at("role").get<std::string>());
    Vocabulary vocab(j.at("vocab_size").get<int>(), j.at("eos_id").get<TokenId>(),
                     j.at("glyphs").get<std::vector<std::string>>());
    switch (kind) {
      case PolicyKind::tabular_ngram:
        return std::make_unique<TabularPolicy>(std::move(vocab), j.at("context_order").get<int>(),
                                               j.at("params").get<std::vector<double>>(), role);
      case PolicyKind::tiny_mlp:
        return std::make_unique<MlpPolicy>(std::move(vocab), j.at("context_order").get<int>(),
                                           j.at("hidden").get<int>(), j.at("params").get<std::vector<double>>(),
                                           role);
      case PolicyKind::trap: {
        const auto& t = j.at("trap");
        TrapParams p;
        p.repeat_boost = t.at("repeat_boost").get<double>();
        p.eos_damp = t.at("eos_damp").get<double>();
        p.long_context = t.at("long_context").get<int>();
        p.max_period = t.at("max_period").get<int>();
        auto base = policy_from_json(j.at("base"));
        if (!(base->vocab() == vocab)) throw InvalidInput("trap base vocabulary differs from trap vocabulary");
        return std::make_unique<TrapTeacher>(std::move(base), p);
      }
    }
  } catch (const json::exception& e) {
    throw InvalidInput(fmt::format("malformed policy checkpoint: {}", e.what()));
  }
  throw InvalidInput("unreachable policy kind");
}

void save_policy(const Policy& policy, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << policy_to_json(policy).dump() << '\n';
  if (!out) throw std::runtime_error(fmt::format("write failed for {}", path.string()));
}

std::unique_ptr<Policy> load_policy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InvalidInput(fmt::format("{}: {}", path.string(), e.what()));
  }
  return policy_from_json(j);
}

}  // namespace opd
