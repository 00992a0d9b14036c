// SPDX-License-Identifier: Apache-2.0
//
// Accuracy of a prompt on one split, report files, and side-by-side
// comparison of reports.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "greater/lm.hpp"
#include "greater/reasoning.hpp"
#include "greater/task.hpp"

namespace greater {

/// Everything needed to reproduce an evaluation.
struct EvalRequest {
  std::string model = "toy:v1";
  /// Task description as given on the command line (config or data path).
  std::string task;
  std::string split_spec = "bbh";
  std::uint64_t data_seed = 0;
  std::string answer_kind = "numeric";
  std::string extraction_template;
  std::string split = "dev";
  std::string prompt;
  std::size_t max_new_tokens = 64;
  std::vector<std::string> stop_sequences;
  std::size_t answer_tokens = 8;

  DecodeConfig decode() const;
  ExtractionTemplate extraction() const;
  nlohmann::json to_json() const;
  static EvalRequest from_json(const nlohmann::json& j);
  /// Hash of the settings rows must share to be compared: task, split and
  /// decoding. Model and prompt are excluded.
  std::string settings_hash() const;
};

struct SampleResult {
  std::string id;
  std::string prediction;
  std::string gold;
  int correct = 0;
  std::string continuation;
  std::string diagnostic;
};

struct EvalReport {
  EvalRequest request;
  std::vector<SampleResult> samples;
  double accuracy = 0.0;
  std::string timestamp;
  std::string config_hash;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Runs x | p -> reasoning -> extraction -> metric for every sample of the
/// requested split. A failing sample is scored 0 with a diagnostic.
EvalReport evaluate(const LanguageModel& model, const TaskDataset& dataset, const EvalRequest& request);

void write_report(const std::filesystem::path& path, const EvalReport& report);
EvalReport read_report(const std::filesystem::path& path);

struct ComparisonRow {
  std::size_t input_index = 0;
  std::string label;
  std::string model;
  std::string prompt;
  double accuracy = 0.0;
  /// Relative to the first report given.
  double delta = 0.0;
  /// "baseline", "win", "draw" or "loss" against the first report.
  std::string outcome;
  /// Per-sample outcomes against the first report.
  std::size_t sample_wins = 0;
  std::size_t sample_draws = 0;
  std::size_t sample_losses = 0;
};

struct Comparison {
  std::string task;
  std::string split;
  /// By accuracy descending, ties by input order.
  std::vector<ComparisonRow> rows;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Throws ConfigError when reports differ in task, split or settings hash, or
/// when the list is empty. `labels` defaults to "#<index>".
Comparison compare(const std::vector<EvalReport>& reports, const std::vector<std::string>& labels = {});

}  // namespace greater
