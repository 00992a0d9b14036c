// SPDX-License-Identifier: Apache-2.0
//
// The optimisation loop: per step, propose candidates for one prompt
// position, generate reasoning, rank candidates by gradient, re-evaluate the
// top mu, replace the token and track the best prompt seen. Positions cycle
// over the current prompt; a prompt that does not end in an end token grows by
// one placeholder slot at the end of each cycle.

#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "greater/io.hpp"
#include "greater/lm.hpp"
#include "greater/loss.hpp"
#include "greater/reasoning.hpp"
#include "greater/task.hpp"

namespace greater {

inline constexpr std::string_view kDefaultPrompt =
    "Use proper logical reasoning and think step by step. Finally, give the actual correct answer.";

struct RunConfig {
  std::string model = "toy:v1";
  /// Task description (config path, dataset path or a synthetic task name).
  std::string task;
  std::string split_spec = "bbh";
  std::uint64_t data_seed = 0;
  std::string answer_kind = "numeric";
  /// Extraction template override; empty means the answer kind's default.
  std::string extraction_template;

  std::string init_prompt = std::string(kDefaultPrompt);
  std::size_t steps = 105;
  std::size_t k = 10;
  std::size_t q = 5;
  std::size_t mu = 3;
  double lambda = 0.2;
  std::uint64_t seed = 0;
  bool ablate_reasoning = false;
  std::size_t max_new_tokens = 64;
  std::vector<std::string> stop_sequences;
  std::size_t prompt_cap = 64;
  /// "gradient" or "random" (uniform pick from the candidate slate).
  std::string selection = "gradient";
  /// Stop once the prompt is unchanged for a full position cycle.
  bool early_stop = false;

  /// Throws ConfigError on invalid values.
  void validate() const;
  DecodeConfig decode() const;
  ExtractionTemplate extraction(AnswerKind kind) const;

  nlohmann::json to_json() const;
  /// Missing fields keep their defaults; unknown fields raise ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  /// Hash of every field except `steps`, so a run can be extended.
  std::string hash() const;
};

struct StepRecord {
  std::size_t t = 0;
  std::size_t position = 0;
  std::vector<std::string> sampled_ids;
  /// Per-sample filtered top-k lists.
  std::vector<std::vector<TokenId>> per_sample;
  std::vector<TokenId> intersection;
  bool fallback = false;
  std::vector<CandidateScore> scores;
  TokenId previous_token = 0;
  TokenId chosen_token = 0;
  /// Loss of the prompt as it was when the step began.
  std::optional<LossBreakdown> loss;
  /// Re-evaluated loss of the chosen token.
  std::optional<LossBreakdown> selected_loss;
  /// Prompt after the replacement.
  std::vector<TokenId> prompt_ids;
  std::string prompt_text;
  double best_loss = std::numeric_limits<double>::infinity();
  bool improved = false;
  std::vector<std::vector<TokenId>> reasoning;
  /// "ok" or "skipped" (non-finite values; token retained).
  std::string status = "ok";
  std::string diagnostic;
  std::size_t next_position = 0;
  std::vector<TokenId> next_prompt_ids;
  std::size_t unchanged_steps = 0;
  std::string config_hash;

  nlohmann::json to_json(const LanguageModel& model) const;
  static StepRecord from_json(const nlohmann::json& j);
};

/// Batch and reasoning behind the best loss, enough to recompute it.
struct ChampionSnapshot {
  std::size_t step = 0;
  std::vector<std::string> sample_ids;
  std::vector<std::vector<TokenId>> reasoning;
};

struct OptimizationState {
  /// Completed steps.
  std::size_t t = 0;
  std::size_t position = 0;
  std::vector<TokenId> prompt;
  std::vector<TokenId> best_prompt;
  double best_loss = std::numeric_limits<double>::infinity();
  std::optional<LossBreakdown> best_breakdown;
  std::optional<ChampionSnapshot> champion;
  std::size_t unchanged_steps = 0;
  std::vector<StepRecord> trajectory;
};

struct OptimizationResult {
  OptimizationState state;
  std::string best_prompt;
  std::string final_prompt;
  bool early_stopped = false;
};

/// Token that renders ending in '.', '?' or '!'.
bool is_end_token(const LanguageModel& model, TokenId id);

/// Most probable admissible next token given the prompt alone.
TokenId placeholder_token(const LanguageModel& model, std::span<const TokenId> prompt);

/// Moves to the next position. At the last index: wrap to 0 if the prompt
/// ends in an end token or has reached `cap`, otherwise append a placeholder
/// and point at it.
void advance_position(const LanguageModel& model, OptimizationState& state, std::size_t cap);

/// Run directory: config.json, trajectory.jsonl, best_prompt.txt,
/// final_prompt.txt, log.jsonl.
class RunDirectory {
 public:
  /// Creates (or with `force` clears) the directory and writes config.json.
  /// Throws ConfigError if it already holds a run and `force` is false.
  static RunDirectory create(const std::filesystem::path& dir, const RunConfig& config, bool force = false,
                             bool quiet = true);
  /// Opens an existing run for resuming. Throws ConfigError when there is no
  /// run there.
  static RunDirectory open(const std::filesystem::path& dir, bool quiet = true);

  const std::filesystem::path& path() const { return dir_; }
  const RunConfig& config() const { return config_; }
  RunLog& log() { return *log_; }

  void append(const StepRecord& record, const LanguageModel& model);
  void write_prompts(const std::string& best, const std::string& final_prompt);
  /// Parses trajectory.jsonl, truncating it after the last intact record.
  std::vector<StepRecord> read_trajectory();

 private:
  std::filesystem::path dir_;
  RunConfig config_;
  std::shared_ptr<RunLog> log_;
};

struct OptimizeOptions {
  /// Stop after this many steps in this invocation (simulated interruption).
  std::optional<std::size_t> stop_after;
  std::function<void(const StepRecord&)> on_step;
};

/// Runs from the initial prompt. With a run directory every step is
/// appended before the next begins.
OptimizationResult optimize(const RunConfig& config, const TaskDataset& dataset, const LanguageModel& model,
                            RunDirectory* run = nullptr, const OptimizeOptions& options = {});

/// Rebuilds the state after the last intact step of `records`.
OptimizationState restore_state(const RunConfig& config, const LanguageModel& model,
                                const std::vector<StepRecord>& records);

/// Continues a run. `expected`, when given, must hash equal to the stored
/// config.
OptimizationResult resume(RunDirectory& run, const TaskDataset& dataset, const LanguageModel& model,
                          const std::optional<RunConfig>& expected = std::nullopt,
                          const OptimizeOptions& options = {});

/// Mean loss of `prompt` over `samples` with freshly generated reasoning.
LossBreakdown prompt_loss(const LanguageModel& model, std::span<const TaskSample> samples,
                          std::span<const TokenId> prompt, const ExtractionTemplate& tmpl, const DecodeConfig& decode,
                          double lambda, bool include_reasoning = true);

/// Recomputes the champion's loss from its snapshot.
LossBreakdown champion_loss(const LanguageModel& model, const TaskDataset& dataset, const RunConfig& config,
                            const OptimizationState& state);

}  // namespace greater
