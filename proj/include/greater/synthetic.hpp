// SPDX-License-Identifier: Apache-2.0
//
// Teacher-labelled synthetic tasks for desk-scale runs. Inputs are short
// "<op> d d d" strings; each gold answer is what the model itself extracts
// after reasoning under a hidden teacher prompt, so the task is solvable by
// the model under the right prompt and the answer depends on the reasoning.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "greater/lm.hpp"
#include "greater/task.hpp"

namespace greater {

struct SyntheticSpec {
  std::string teacher_prompt = "count each number carefully then add";
  std::size_t records = 250;
  std::uint64_t seed = 0;
  std::size_t max_new_tokens = 24;
  std::size_t answer_tokens = 8;
  /// Caps how many records may share one gold answer (0: no cap).
  std::size_t max_per_answer = 0;
};

/// Throws DataError when not enough parseable records can be drawn.
std::vector<TaskSample> synthetic_records(const LanguageModel& model, const SyntheticSpec& spec);

TaskDataset synthetic_dataset(const LanguageModel& model, const SyntheticSpec& spec, const SplitSpec& split);

}  // namespace greater
