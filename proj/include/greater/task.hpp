// SPDX-License-Identifier: Apache-2.0
//
// Task datasets in the canonical `{"input": str, "target": str}` JSONL form,
// deterministic train/dev/test splits, and the exact-match metric.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "greater/common.hpp"

namespace greater {

enum class AnswerKind { numeric, multiple_choice, label };

std::string to_string(AnswerKind kind);
/// Accepts "numeric", "multiple-choice" (or "multiple_choice", "mc"), "label".
AnswerKind parse_answer_kind(std::string_view text);

inline constexpr std::string_view kNoAnswer = "no-answer";

struct TaskSample {
  std::string id;
  std::string input;
  std::string target;
  AnswerKind kind = AnswerKind::numeric;

  /// Throws DataError: empty input/target, or a multiple-choice target that
  /// is not a single letter A-Z.
  void validate() const;
  friend bool operator==(const TaskSample&, const TaskSample&) = default;
};

/// Split sizes. A missing test count takes every remaining record (or the
/// whole separate test file).
struct SplitSpec {
  std::size_t train = 50;
  std::size_t dev = 100;
  std::optional<std::size_t> test = 100;
  std::uint64_t seed = 0;

  /// "bbh" (50/100/100), "gsm8k" (100/100/1319), "folio" (50/100/203), or
  /// explicit "train/dev/test" counts where test may be "all".
  static SplitSpec parse(std::string_view text, std::uint64_t seed = 0);
  std::string to_string() const;
};

struct TaskDataset {
  std::string name;
  AnswerKind kind = AnswerKind::numeric;
  std::vector<TaskSample> train;
  std::vector<TaskSample> dev;
  std::vector<TaskSample> test;
  std::optional<std::string> extraction_template;

  /// "train", "dev" or "test"; throws ConfigError otherwise.
  const std::vector<TaskSample>& split(std::string_view which) const;
};

/// Reads canonical JSONL. Record ids come from an "id" field when present,
/// otherwise `<prefix>L<line>`. Malformed lines raise DataError naming the
/// line number.
std::vector<TaskSample> read_jsonl(const std::filesystem::path& path, AnswerKind kind, std::string_view id_prefix = "");
void write_jsonl(const std::filesystem::path& path, const std::vector<TaskSample>& samples);

/// Draws the splits from `records` with a seeded shuffle. When `test_records`
/// is given, the test split is taken from it in file order instead.
TaskDataset make_splits(std::string name, AnswerKind kind, std::vector<TaskSample> records, const SplitSpec& spec,
                        std::optional<std::vector<TaskSample>> test_records = std::nullopt);

TaskDataset load_dataset(const std::filesystem::path& path, AnswerKind kind, const SplitSpec& spec,
                         const std::optional<std::filesystem::path>& test_path = std::nullopt);

/// 1 when prediction matches gold after normalisation, else 0. Numeric
/// answers compare by value; letters and labels case-insensitively. The
/// "no-answer" sentinel never matches.
int metric(std::string_view prediction, std::string_view gold, AnswerKind kind);

/// Parses "72", "1,234", "$5", "-3.50" and the like.
std::optional<double> parse_number(std::string_view text);

}  // namespace greater
