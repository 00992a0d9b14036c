// SPDX-License-Identifier: Apache-2.0
//
// Reasoning generation and answer extraction. A trace lays out
//   input x | prompt p | reasoning r | extraction prefix
// followed by the gold answer tokens, which are teacher-forced when scoring.

#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "greater/lm.hpp"
#include "greater/task.hpp"

namespace greater {

struct ExtractionTemplate {
  static constexpr std::string_view kSlot = "{answer}";

  /// Text with exactly one `{answer}` marker; everything before it is the
  /// extraction prefix appended after the reasoning.
  std::string text;
  /// Maximum gold answer tokens scored.
  std::size_t answer_span = 1;
  AnswerKind kind = AnswerKind::numeric;

  static ExtractionTemplate default_for(AnswerKind kind);
  /// Throws ConfigError when the slot is missing or repeated, or span is 0.
  void validate() const;
  std::string prefix() const;
};

struct ReasoningTrace {
  std::string sample_id;
  /// x | p | r | extraction prefix.
  std::vector<TokenId> tokens;
  Span input;
  Span prompt;
  Span reasoning;
  Span extract;
  /// Gold answer token ids.
  std::vector<TokenId> answer;

  std::span<const TokenId> reasoning_ids() const { return {tokens.data() + reasoning.begin, reasoning.size()}; }
  std::span<const TokenId> prompt_ids() const { return {tokens.data() + prompt.begin, prompt.size()}; }
  /// tokens followed by all answer tokens except the last (teacher forcing).
  std::vector<TokenId> scoring_sequence() const;
  /// Logit row predicting answer token t.
  std::size_t answer_row(std::size_t t) const { return extract.end - 1 + t; }
  /// Sequence index of prompt token i.
  std::size_t prompt_index(std::size_t i) const { return prompt.begin + i; }
  /// Same layout with the prompt span overwritten; lengths must match.
  ReasoningTrace with_prompt(std::span<const TokenId> prompt_ids) const;
  ReasoningTrace with_prompt_token(std::size_t i, TokenId token) const;

  /// Throws ModelError unless spans are contiguous x->p->r->extract, cover
  /// the tokens exactly, x is non-empty and the answer is non-empty.
  void validate() const;
};

/// Generates r greedily from x | p and assembles the trace. With
/// `include_reasoning` false the reasoning span is left empty (the
/// gradient-without-reasoning ablation).
ReasoningTrace generate_reasoning(const LanguageModel& model, const TaskSample& sample,
                                  std::span<const TokenId> prompt, const ExtractionTemplate& tmpl,
                                  const DecodeConfig& decode, bool include_reasoning = true);

/// Rebuilds a trace from recorded reasoning ids (no generation).
ReasoningTrace assemble_trace(const LanguageModel& model, const TaskSample& sample, std::span<const TokenId> prompt,
                              std::span<const TokenId> reasoning, const ExtractionTemplate& tmpl);

struct AnswerLogits {
  /// One raw logit vector per answer token.
  std::vector<std::vector<double>> rows;
  /// Full pass, for backpropagating into the indicator weights.
  std::unique_ptr<IndicatorPass> pass;
};

/// Teacher-forced answer logits with prompt token `position` (index inside
/// the prompt span) represented by the indicator.
AnswerLogits answer_logits(const LanguageModel& model, const ReasoningTrace& trace, const OneHotIndicator& indicator,
                           std::size_t position);

/// Parses a continuation: first number (numeric), option letter (multiple
/// choice) or first word, lower-cased (label). Returns "no-answer" when
/// nothing parses.
std::string parse_answer(std::string_view continuation, AnswerKind kind);

struct ExtractedAnswer {
  std::string answer;
  std::vector<TokenId> reasoning;
  std::string continuation;
};

/// Evaluation-time pipeline on one cached session: x | p -> reasoning ->
/// extraction prefix -> continuation -> parse.
ExtractedAnswer extract_answer(const LanguageModel& model, const TaskSample& sample, std::span<const TokenId> prompt,
                               const ExtractionTemplate& tmpl, const DecodeConfig& decode,
                               std::size_t answer_tokens = 8);

inline std::string extract_answer_text(const LanguageModel& model, const TaskSample& sample,
                                       std::span<const TokenId> prompt, const ExtractionTemplate& tmpl,
                                       const DecodeConfig& decode) {
  return extract_answer(model, sample, prompt, tmpl, decode).answer;
}

}  // namespace greater
