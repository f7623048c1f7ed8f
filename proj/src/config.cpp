#include "opd/config.hpp"

#include <fmt/format.h>

#include <fstream>
#include <set>
#include <sstream>

namespace opd {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::size_t line_of_offset(const std::string& text, std::size_t pos) {
  pos = std::min(pos, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n'));
}

namespace {

struct Context {
  const std::string& text;
  const std::string& source;

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    const auto at = key.empty() ? std::string::npos : text.find("\"" + key + "\"");
    if (at == std::string::npos) throw ConfigError(fmt::format("{}: {}", source, msg));
    throw ConfigError(fmt::format("{}:{}: {}", source, line_of_offset(text, at), msg));
  }
};

class Section {
 public:
  Section(const json& j, std::string path, const Context& ctx) : j_(j), path_(std::move(path)), ctx_(ctx) {
    if (!j_.is_object()) ctx_.fail(leaf(), fmt::format("'{}' must be an object", path_.empty() ? "<root>" : path_));
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  double real(const std::string& key, double def) {
    const json* v = take(key);
    if (!v) return def;
    if (!v->is_number()) ctx_.fail(key, fmt::format("'{}' must be a number", name(key)));
    return v->get<double>();
  }

  long integer(const std::string& key, long def) {
    const json* v = take(key);
    if (!v) return def;
    if (!v->is_number_integer()) ctx_.fail(key, fmt::format("'{}' must be an integer", name(key)));
    return v->get<long>();
  }

  std::uint64_t unsigned_integer(const std::string& key, std::uint64_t def) {
    const json* v = take(key);
    if (!v) return def;
    if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<long long>() < 0))
      ctx_.fail(key, fmt::format("'{}' must be a non-negative integer", name(key)));
    return v->get<std::uint64_t>();
  }

  std::string str(const std::string& key, const std::string& def) {
    const json* v = take(key);
    if (!v) return def;
    if (!v->is_string()) ctx_.fail(key, fmt::format("'{}' must be a string", name(key)));
    return v->get<std::string>();
  }

  // Runs fn(Section) for sub-object `key` when present.
  template <class Fn>
  void sub(const std::string& key, Fn&& fn) {
    const json* v = take(key);
    if (!v) return;
    Section s(*v, name(key), ctx_);
    fn(s);
    s.finish();
  }

  template <class T, class Parse>
  T enumerated(const std::string& key, T def, Parse&& parse) {
    const std::string s = str(key, "");
    if (s.empty()) return def;
    try {
      return parse(s);
    } catch (const ConfigError& e) {
      ctx_.fail(key, e.what());
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) ctx_.fail(k, fmt::format("unknown key '{}'", name(k)));
  }

  const Context& ctx() const { return ctx_; }

 private:
  const json* take(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return nullptr;
    return &j_.at(key);
  }
  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string leaf() const {
    const auto dot = path_.rfind('.');
    return dot == std::string::npos ? path_ : path_.substr(dot + 1);
  }

  const json& j_;
  std::string path_;
  const Context& ctx_;
  std::set<std::string> used_;
};

void apply_override(json& root, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError(fmt::format("--set '{}': expected key=value", spec));
  const std::string key = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(fmt::format("--set '{}': empty path component", spec));
    if (!node->is_object())
      throw ConfigError(fmt::format("--set '{}': '{}' is not an object", spec, key.substr(0, start - 1)));
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() ? p : (base / p).lexically_normal(); }

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& source_name,
                                         const fs::path& base_dir, const std::vector<std::string>& overrides,
                                         const std::optional<fs::path>& output_root) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(
        fmt::format("{}:{}: malformed JSON ({})", source_name, line_of_offset(text, e.byte > 0 ? e.byte - 1 : 0),
                    e.what()));
  }
  for (const auto& o : overrides) apply_override(root, o);

  const Context ctx{text, source_name};
  Section top(root, "", ctx);
  ExperimentConfig c;
  TrainConfig& t = c.train;
  EnvConfig& e = c.env;

  const std::string out = top.str("output_dir", "");
  const std::string init = top.str("init_checkpoint", "");
  t.seed = top.unsigned_integer("seed", t.seed);
  t.mode = top.enumerated("mode", t.mode, train_mode_from_string);
  t.steps = top.integer("steps", t.steps);
  t.prompts_per_step = static_cast<int>(top.integer("prompts_per_step", t.prompts_per_step));
  t.lr = top.real("lr", t.lr);
  t.inner_epochs = static_cast<int>(top.integer("inner_epochs", t.inner_epochs));
  t.eval_every = static_cast<int>(top.integer("eval_every", t.eval_every));
  t.eval_samples = static_cast<int>(top.integer("eval_samples", t.eval_samples));
  t.eval_temperature = top.real("eval_temperature", t.eval_temperature);
  t.dump_every = static_cast<int>(top.integer("dump_every", t.dump_every));
  t.checkpoint_every = static_cast<int>(top.integer("checkpoint_every", t.checkpoint_every));
  t.threads = static_cast<int>(top.integer("threads", t.threads));
  top.sub("adam", [&](Section& s) {
    t.adam_beta1 = s.real("beta1", t.adam_beta1);
    t.adam_beta2 = s.real("beta2", t.adam_beta2);
    t.adam_eps = s.real("eps", t.adam_eps);
  });
  top.sub("generation", [&](Section& s) {
    t.generation.max_len = static_cast<int>(s.integer("max_len", t.generation.max_len));
    t.generation.temperature = s.real("temperature", t.generation.temperature);
    t.generation.group_size = static_cast<int>(s.integer("group_size", t.generation.group_size));
  });
  top.sub("objective", [&](Section& s) {
    t.objective.clip_eps = s.real("clip_eps", t.objective.clip_eps);
    t.objective.lambda_gold = s.real("lambda_gold", t.objective.lambda_gold);
    t.objective.beta_kl = s.real("beta_kl", t.objective.beta_kl);
    t.objective.length_norm = s.enumerated("length_norm", t.objective.length_norm, length_norm_from_string);
  });
  top.sub("repetition", [&](Section& s) {
    auto& r = t.repetition;
    r.tail_chars = static_cast<int>(s.integer("tail_chars", r.tail_chars));
    r.tau = s.real("tau", r.tau);
    r.compression_level = static_cast<int>(s.integer("compression_level", r.compression_level));
    r.mask_max_period = static_cast<int>(s.integer("mask_max_period", r.mask_max_period));
    r.mask_min_repeats = static_cast<int>(s.integer("mask_min_repeats", r.mask_min_repeats));
  });
  top.sub("env", [&](Section& s) {
    e.vocab_size = static_cast<int>(s.integer("vocab_size", e.vocab_size));
    e.eos_id = static_cast<TokenId>(s.integer("eos_id", e.eos_id));
    e.task = s.enumerated("task", e.task, task_kind_from_string);
    e.prompt_min = static_cast<int>(s.integer("prompt_min", e.prompt_min));
    e.prompt_max = static_cast<int>(s.integer("prompt_max", e.prompt_max));
    e.spine_depth = static_cast<int>(s.integer("spine_depth", e.spine_depth));
    e.eval_prompts = static_cast<int>(s.integer("eval_prompts", e.eval_prompts));
    e.golden_size = static_cast<int>(s.integer("golden_size", e.golden_size));
    e.seed = s.unsigned_integer("seed", e.seed);
    e.pair.teacher_margin = s.real("teacher_margin", e.pair.teacher_margin);
    if (s.has("teacher_eos_margin")) e.pair.teacher_eos_margin = s.real("teacher_eos_margin", 0.0);
    else s.real("teacher_eos_margin", 0.0);
    e.pair.student_margin = s.real("student_margin", e.pair.student_margin);
    e.pair.student_noise = s.real("student_noise", e.pair.student_noise);
    e.pair.order = static_cast<int>(s.integer("order", e.pair.order));
    s.sub("trap", [&](Section& tr) {
      auto& p = e.pair.trap;
      p.repeat_boost = tr.real("repeat_boost", p.repeat_boost);
      p.eos_damp = tr.real("eos_damp", p.eos_damp);
      p.long_context = static_cast<int>(tr.integer("long_context", p.long_context));
      p.max_period = static_cast<int>(tr.integer("max_period", p.max_period));
    });
  });
  top.finish();

  auto check = [&](const char* key, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& err) {
      ctx.fail(key, err.what());
    }
  };
  check("", [&] { t.validate(); });
  check("env", [&] { e.validate(); });

  if (!out.empty())
    c.output_dir = resolve(base_dir, out);
  else
    c.output_dir = (output_root ? *output_root : base_dir / "runs") / fs::path(source_name).stem();
  if (!init.empty()) c.init_checkpoint = resolve(base_dir, init);
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path, const std::vector<std::string>& overrides,
                                        const std::optional<fs::path>& output_root) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError(fmt::format("{}: cannot read config file", path.string()));
  std::stringstream ss;
  ss << f.rdbuf();
  const fs::path base = fs::absolute(path).parent_path();
  return parse_experiment_config(ss.str(), path.string(), base, overrides, output_root);
}

ordered_json to_json(const ExperimentConfig& c) {
  const TrainConfig& t = c.train;
  const EnvConfig& e = c.env;
  ordered_json j;
  j["output_dir"] = c.output_dir.string();
  j["init_checkpoint"] = c.init_checkpoint ? ordered_json(c.init_checkpoint->string()) : ordered_json(nullptr);
  j["seed"] = t.seed;
  j["mode"] = std::string(to_string(t.mode));
  j["steps"] = t.steps;
  j["prompts_per_step"] = t.prompts_per_step;
  j["lr"] = t.lr;
  j["inner_epochs"] = t.inner_epochs;
  j["eval_every"] = t.eval_every;
  j["eval_samples"] = t.eval_samples;
  j["eval_temperature"] = t.eval_temperature;
  j["dump_every"] = t.dump_every;
  j["checkpoint_every"] = t.checkpoint_every;
  j["threads"] = t.threads;
  j["adam"] = {{"beta1", t.adam_beta1}, {"beta2", t.adam_beta2}, {"eps", t.adam_eps}};
  j["generation"] = {{"max_len", t.generation.max_len},
                     {"temperature", t.generation.temperature},
                     {"group_size", t.generation.group_size}};
  j["objective"] = {{"clip_eps", t.objective.clip_eps},
                    {"lambda_gold", t.objective.lambda_gold},
                    {"beta_kl", t.objective.beta_kl},
                    {"length_norm", std::string(to_string(t.objective.length_norm))}};
  j["repetition"] = {{"tail_chars", t.repetition.tail_chars},
                     {"tau", t.repetition.tau},
                     {"compression_level", t.repetition.compression_level},
                     {"mask_max_period", t.repetition.mask_max_period},
                     {"mask_min_repeats", t.repetition.mask_min_repeats}};
  ordered_json env;
  env["vocab_size"] = e.vocab_size;
  env["eos_id"] = e.eos_id;
  env["task"] = std::string(to_string(e.task));
  env["prompt_min"] = e.prompt_min;
  env["prompt_max"] = e.prompt_max;
  env["spine_depth"] = e.spine_depth;
  env["eval_prompts"] = e.eval_prompts;
  env["golden_size"] = e.golden_size;
  env["seed"] = e.seed;
  env["teacher_margin"] = e.pair.teacher_margin;
  env["teacher_eos_margin"] =
      e.pair.teacher_eos_margin ? ordered_json(*e.pair.teacher_eos_margin) : ordered_json(nullptr);
  env["student_margin"] = e.pair.student_margin;
  env["student_noise"] = e.pair.student_noise;
  env["order"] = e.pair.order;
  env["trap"] = {{"repeat_boost", e.pair.trap.repeat_boost},
                 {"eos_damp", e.pair.trap.eos_damp},
                 {"long_context", e.pair.trap.long_context},
                 {"max_period", e.pair.trap.max_period}};
  j["env"] = env;
  return j;
}

}  // namespace opd
