#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "opd/trainer.hpp"

namespace opd {

// Experiment config file: a JSON object mirroring TrainConfig plus an "env" section and
// an output directory. Unknown keys are rejected; relative paths resolve against the
// directory holding the file. Errors are ConfigError with "file:line: message" text.
struct ExperimentConfig {
  EnvConfig env;
  TrainConfig train;
  std::filesystem::path output_dir;
  std::optional<std::filesystem::path> init_checkpoint;
};

// `overrides` are "dotted.key=value" strings; value is parsed as JSON, else taken as a string.
// `output_root` supplies the default output directory (<root>/<config stem>) when the file
// does not name one.
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {},
                                        const std::optional<std::filesystem::path>& output_root = std::nullopt);

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& source_name,
                                         const std::filesystem::path& base_dir,
                                         const std::vector<std::string>& overrides = {},
                                         const std::optional<std::filesystem::path>& output_root = std::nullopt);

// Fully resolved config, every field present.
nlohmann::ordered_json to_json(const ExperimentConfig& c);

// 1-based line of byte offset `pos` in `text`.
std::size_t line_of_offset(const std::string& text, std::size_t pos);

}  // namespace opd
