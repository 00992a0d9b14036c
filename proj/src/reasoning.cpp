// SPDX-License-Identifier: Apache-2.0

#include "greater/reasoning.hpp"

#include <cctype>
#include <regex>

namespace greater {

ExtractionTemplate ExtractionTemplate::default_for(AnswerKind kind) {
  switch (kind) {
    case AnswerKind::numeric: return {"Therefore, the final answer (arabic numerals) is {answer}", 8, kind};
    case AnswerKind::multiple_choice: return {"Therefore, the final answer is ({answer})", 1, kind};
    case AnswerKind::label: return {"Therefore, the final answer is {answer}", 4, kind};
  }
  return {};
}

void ExtractionTemplate::validate() const {
  const auto first = text.find(kSlot);
  if (first == std::string::npos) throw ConfigError("extraction template '" + text + "' has no {answer} slot");
  if (text.find(kSlot, first + 1) != std::string::npos)
    throw ConfigError("extraction template '" + text + "' has more than one {answer} slot");
  if (answer_span < 1) throw ConfigError("extraction template: answer span must be >= 1");
  if (prefix().find_first_not_of(" \t\n") == std::string::npos)
    throw ConfigError("extraction template '" + text + "' has no text before the {answer} slot");
}

std::string ExtractionTemplate::prefix() const { return text.substr(0, text.find(kSlot)); }

std::vector<TokenId> ReasoningTrace::scoring_sequence() const {
  std::vector<TokenId> seq = tokens;
  if (!answer.empty()) seq.insert(seq.end(), answer.begin(), answer.end() - 1);
  return seq;
}

ReasoningTrace ReasoningTrace::with_prompt(std::span<const TokenId> prompt_ids) const {
  if (prompt_ids.size() != prompt.size())
    throw ModelError("trace " + sample_id + ": prompt length " + std::to_string(prompt_ids.size()) +
                     " does not match recorded layout " + std::to_string(prompt.size()));
  ReasoningTrace t = *this;
  std::copy(prompt_ids.begin(), prompt_ids.end(), t.tokens.begin() + static_cast<std::ptrdiff_t>(prompt.begin));
  return t;
}

ReasoningTrace ReasoningTrace::with_prompt_token(std::size_t i, TokenId token) const {
  if (i >= prompt.size()) throw ModelError("trace " + sample_id + ": prompt position out of range");
  ReasoningTrace t = *this;
  t.tokens[prompt_index(i)] = token;
  return t;
}

void ReasoningTrace::validate() const {
  const bool ordered = input.begin == 0 && input.end == prompt.begin && prompt.end == reasoning.begin &&
                       reasoning.end == extract.begin && extract.end == tokens.size();
  if (!ordered) throw ModelError("trace " + sample_id + ": spans are not contiguous x -> p -> r -> extract");
  if (input.empty()) throw ModelError("trace " + sample_id + ": empty input span");
  if (answer.empty()) throw ModelError("trace " + sample_id + ": empty answer");
}

namespace {

std::vector<TokenId> answer_ids(const LanguageModel& model, const TaskSample& sample, const ExtractionTemplate& tmpl) {
  auto y = model.tokenize(sample.target);
  if (y.empty()) throw DataError("sample " + sample.id + ": target '" + sample.target + "' tokenizes to nothing");
  if (y.size() > tmpl.answer_span) y.resize(tmpl.answer_span);
  return y;
}

std::vector<TokenId> input_ids(const LanguageModel& model, const TaskSample& sample) {
  auto x = model.tokenize(sample.input);
  if (x.empty()) throw DataError("sample " + sample.id + ": input tokenizes to nothing");
  return x;
}

ReasoningTrace layout(const std::string& id, std::vector<TokenId> x, std::span<const TokenId> p,
                      std::span<const TokenId> r, const std::vector<TokenId>& ext, std::vector<TokenId> y) {
  ReasoningTrace t;
  t.sample_id = id;
  t.tokens = std::move(x);
  t.input = {0, t.tokens.size()};
  t.tokens.insert(t.tokens.end(), p.begin(), p.end());
  t.prompt = {t.input.end, t.tokens.size()};
  t.tokens.insert(t.tokens.end(), r.begin(), r.end());
  t.reasoning = {t.prompt.end, t.tokens.size()};
  t.tokens.insert(t.tokens.end(), ext.begin(), ext.end());
  t.extract = {t.reasoning.end, t.tokens.size()};
  t.answer = std::move(y);
  t.validate();
  return t;
}

}  // namespace

ReasoningTrace generate_reasoning(const LanguageModel& model, const TaskSample& sample,
                                  std::span<const TokenId> prompt, const ExtractionTemplate& tmpl,
                                  const DecodeConfig& decode, bool include_reasoning) {
  tmpl.validate();
  decode.validate();
  auto x = input_ids(model, sample);
  auto y = answer_ids(model, sample, tmpl);
  const auto ext = model.tokenize(tmpl.prefix());
  model.check_window(x.size() + prompt.size() + (include_reasoning ? decode.max_new_tokens : 0) + ext.size() + y.size(),
                     "reasoning trace for sample " + sample.id);
  std::vector<TokenId> r;
  if (include_reasoning) {
    std::vector<TokenId> ctx = x;
    ctx.insert(ctx.end(), prompt.begin(), prompt.end());
    r = model.generate(ctx, decode);
  }
  return layout(sample.id, std::move(x), prompt, r, ext, std::move(y));
}

ReasoningTrace assemble_trace(const LanguageModel& model, const TaskSample& sample, std::span<const TokenId> prompt,
                              std::span<const TokenId> reasoning, const ExtractionTemplate& tmpl) {
  tmpl.validate();
  auto x = input_ids(model, sample);
  auto y = answer_ids(model, sample, tmpl);
  const auto ext = model.tokenize(tmpl.prefix());
  model.check_window(x.size() + prompt.size() + reasoning.size() + ext.size() + y.size(),
                     "reasoning trace for sample " + sample.id);
  return layout(sample.id, std::move(x), prompt, reasoning, ext, std::move(y));
}

AnswerLogits answer_logits(const LanguageModel& model, const ReasoningTrace& trace, const OneHotIndicator& indicator,
                           std::size_t position) {
  if (position >= trace.prompt.size())
    throw ModelError("answer_logits: position " + std::to_string(position) + " outside prompt of length " +
                     std::to_string(trace.prompt.size()));
  const auto seq = trace.scoring_sequence();
  AnswerLogits out;
  out.pass = model.forward_with_indicator(seq, trace.prompt_index(position), indicator);
  for (std::size_t t = 0; t < trace.answer.size(); ++t) {
    const auto row = out.pass->logits().row(trace.answer_row(t));
    out.rows.emplace_back(row.begin(), row.end());
  }
  return out;
}

std::string parse_answer(std::string_view continuation, AnswerKind kind) {
  const std::string text(continuation);
  switch (kind) {
    case AnswerKind::numeric: {
      static const std::regex number(R"(-?\d[\d,]*(\.\d+)?)");
      std::smatch m;
      if (!std::regex_search(text, m, number)) return std::string(kNoAnswer);
      std::string s;
      for (char c : m.str())
        if (c != ',') s.push_back(c);
      return s;
    }
    case AnswerKind::multiple_choice: {
      static const std::regex paren(R"(\(([A-Za-z])\))");
      static const std::regex leading(R"(^\s*\(?([A-Za-z])(\)|[^A-Za-z]|$))");
      std::smatch m;
      if (std::regex_search(text, m, paren) || std::regex_search(text, m, leading))
        return std::string(1, static_cast<char>(std::toupper(static_cast<unsigned char>(m.str(1)[0]))));
      return std::string(kNoAnswer);
    }
    case AnswerKind::label: {
      std::string word;
      std::size_t i = 0;
      while (i < text.size() && !std::isalnum(static_cast<unsigned char>(text[i]))) ++i;
      while (i < text.size() && std::isalnum(static_cast<unsigned char>(text[i])))
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[i++]))));
      return word.empty() ? std::string(kNoAnswer) : word;
    }
  }
  return std::string(kNoAnswer);
}

ExtractedAnswer extract_answer(const LanguageModel& model, const TaskSample& sample, std::span<const TokenId> prompt,
                               const ExtractionTemplate& tmpl, const DecodeConfig& decode, std::size_t answer_tokens) {
  tmpl.validate();
  const auto x = input_ids(model, sample);
  const auto ext = model.tokenize(tmpl.prefix());
  model.check_window(x.size() + prompt.size() + decode.max_new_tokens + ext.size() + answer_tokens,
                     "answer extraction for sample " + sample.id);
  std::vector<TokenId> ctx = x;
  ctx.insert(ctx.end(), prompt.begin(), prompt.end());

  ExtractedAnswer out;
  auto session = model.open_session();
  auto logits = session->append(ctx);
  out.reasoning = model.generate(*session, std::move(logits), decode);
  logits = session->append(ext);
  DecodeConfig tail;
  tail.max_new_tokens = answer_tokens;
  const auto cont = model.generate(*session, std::move(logits), tail);
  out.continuation = model.detokenize(cont);
  out.answer = parse_answer(out.continuation, tmpl.kind);
  return out;
}

}  // namespace greater
