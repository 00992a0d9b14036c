// SPDX-License-Identifier: Apache-2.0

#include "greater/synthetic.hpp"

#include <map>

#include "greater/reasoning.hpp"
#include "greater/rng.hpp"

namespace greater {

std::vector<TaskSample> synthetic_records(const LanguageModel& model, const SyntheticSpec& spec) {
  static const char* kOps[] = {"add", "sum", "count", "list", "check", "order", "solve", "first"};
  const auto tmpl = ExtractionTemplate::default_for(AnswerKind::numeric);
  DecodeConfig dc;
  dc.max_new_tokens = spec.max_new_tokens;
  const auto teacher = model.tokenize(spec.teacher_prompt);
  if (teacher.empty()) throw ConfigError("synthetic task: teacher prompt tokenizes to nothing");

  Rng rng(derive_seed(spec.seed, 0x5717));
  std::vector<TaskSample> out;
  std::map<std::string, std::size_t> per_answer;
  const std::size_t budget = 40 * spec.records + 1000;
  for (std::size_t draw = 0; out.size() < spec.records; ++draw) {
    if (draw >= budget)
      throw DataError("synthetic task: only " + std::to_string(out.size()) + " of " + std::to_string(spec.records) +
                      " records found");
    std::string input = kOps[rng.below(std::size(kOps))];
    const auto n = 2 + rng.below(3);
    for (std::uint64_t i = 0; i < n; ++i) input += " " + std::to_string(rng.below(10));
    TaskSample s{"syn" + std::to_string(out.size()), input, "0", AnswerKind::numeric};
    const auto got = extract_answer(model, s, teacher, tmpl, dc, spec.answer_tokens);
    if (got.answer == kNoAnswer) continue;
    if (spec.max_per_answer && per_answer[got.answer] >= spec.max_per_answer) continue;
    ++per_answer[got.answer];
    s.target = got.answer;
    out.push_back(std::move(s));
  }
  return out;
}

TaskDataset synthetic_dataset(const LanguageModel& model, const SyntheticSpec& spec, const SplitSpec& split) {
  auto ds = make_splits("synthetic", AnswerKind::numeric, synthetic_records(model, spec), split);
  return ds;
}

}  // namespace greater
