// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: configuration resolution with per-field
// provenance, task loading, and the optimize / evaluate / compare / convert /
// resume commands.

#pragma once

#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "greater/lm.hpp"
#include "greater/optimizer.hpp"
#include "greater/task.hpp"

namespace greater::cli {

enum ExitCode : int { kOk = 0, kRunFailure = 1, kConfigError = 2, kModelError = 3 };

struct ResolvedConfig {
  RunConfig run;
  std::string model_cache;
  std::string device = "cpu";
  /// Field name -> "default", "env", "file", "task" or "cli".
  std::map<std::string, std::string> provenance;

  nlohmann::json to_json() const;
};

/// Layers defaults, environment (GREATER_MODEL_CACHE, GREATER_DEVICE only),
/// the config file object, then CLI values. `file` and `cli` map field
/// names to JSON values; unknown fields raise ConfigError.
ResolvedConfig resolve_config(const nlohmann::json& file, const nlohmann::json& cli,
                              const std::map<std::string, std::string>& env);

/// Reads GREATER_MODEL_CACHE and GREATER_DEVICE from the process.
std::map<std::string, std::string> process_env();

/// Task source as named by --task:
///   synthetic[:N]  teacher-labelled synthetic task with N records
///   *.json         task config {"data", "test_data", "name", "answer_kind",
///                  "split_spec", "template"}
///   anything else  canonical JSONL
struct TaskSource {
  std::string name;
  std::string data;
  std::string test_data;
  std::optional<std::string> answer_kind;
  std::optional<std::string> split_spec;
  std::optional<std::string> extraction_template;
  std::size_t synthetic_records = 0;
};

TaskSource parse_task_source(const std::string& task);

/// Fills answer_kind / split_spec / template from the task config where the
/// resolved value is still a default (provenance becomes "task").
void apply_task_defaults(const TaskSource& src, ResolvedConfig& cfg);

TaskDataset load_task(const TaskSource& src, const RunConfig& cfg, const LanguageModel& model);

/// Entry point; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace greater::cli
