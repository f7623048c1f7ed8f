#pragma once

#include <filesystem>
#include <memory>

#include <json.hpp>

#include "opd/policy.hpp"

namespace opd {

// Policy checkpoint layout (JSON object, keys in this order):
//
//   format        "opd-policy"
//   version       1
//   kind          "tabular-ngram" | "tiny-mlp" | "trap"
//   role          "student" | "teacher" | "reference"
//   vocab_size    V
//   eos_id        EOS token id
//   glyphs        array of V strings
//   context_order tabular: n;  tiny-mlp: context window
//   hidden        tiny-mlp only: hidden width
//   params        flat parameter vector (shortest round-trip decimal, lossless)
//   trap          trap only: {repeat_boost, eos_damp, long_context, max_period}
//   base          trap only: nested checkpoint of the base policy (params live here)
nlohmann::ordered_json policy_to_json(const Policy& policy);
std::unique_ptr<Policy> policy_from_json(const nlohmann::json& j);

void save_policy(const Policy& policy, const std::filesystem::path& path);
std::unique_ptr<Policy> load_policy(const std::filesystem::path& path);

}  // namespace opd
