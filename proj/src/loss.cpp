// SPDX-License-Identifier: Apache-2.0

#include "greater/loss.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace greater {

double ce_loss(std::span<const std::vector<double>> logits, std::span<const TokenId> targets) {
  if (logits.size() != targets.size())
    throw ModelError("ce_loss: " + std::to_string(logits.size()) + " logit vectors for " +
                     std::to_string(targets.size()) + " targets");
  if (targets.empty()) throw ModelError("ce_loss: no targets");
  double sum = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) sum -= log_softmax(logits[t])[targets[t]];
  return sum / static_cast<double>(targets.size());
}

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
}

struct TraceLoss {
  double ce = 0.0;
  double perplexity = 0.0;
};

TraceLoss trace_loss(const LogitTable& logits, const ReasoningTrace& tr) {
  TraceLoss out;
  for (std::size_t t = 0; t < tr.answer.size(); ++t)
    out.ce -= log_softmax(logits.row(tr.answer_row(t)))[tr.answer[t]];
  out.ce /= static_cast<double>(tr.answer.size());
  if (tr.prompt.empty()) throw ModelError("trace " + tr.sample_id + ": empty prompt");
  double lp = 0.0;
  for (std::size_t i = 0; i < tr.prompt.size(); ++i) {
    const std::size_t idx = tr.prompt_index(i);
    lp += log_softmax(logits.row(idx - 1))[tr.tokens[idx]];
  }
  out.perplexity = std::exp(-lp / static_cast<double>(tr.prompt.size()));
  return out;
}

}  // namespace

double perplexity_term(const LanguageModel& model, std::span<const TokenId> input, std::span<const TokenId> prompt) {
  if (prompt.empty()) throw ModelError("perplexity_term: empty prompt");
  if (input.empty()) throw ModelError("perplexity_term: empty input");
  std::vector<TokenId> seq(input.begin(), input.end());
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  const auto logits = model.forward(seq);
  double lp = 0.0;
  for (std::size_t i = 0; i < prompt.size(); ++i) lp += log_softmax(logits.row(input.size() + i - 1))[prompt[i]];
  return std::exp(-lp / static_cast<double>(prompt.size()));
}

LossBreakdown evaluate_loss(const LanguageModel& model, std::span<const ReasoningTrace> traces, double lambda) {
  if (traces.empty()) throw ModelError("evaluate_loss: empty batch");
  double ce = 0.0, perpl = 0.0;
  for (const auto& tr : traces) {
    const auto l = trace_loss(model.forward(tr.scoring_sequence()), tr);
    ce += l.ce;
    perpl += l.perplexity;
  }
  const auto n = static_cast<double>(traces.size());
  auto out = LossBreakdown::make(ce / n, perpl / n, lambda, traces.size());
  require_finite(out.total, "loss");
  return out;
}

LossBreakdown evaluate_substitution(const LanguageModel& model, std::span<const ReasoningTrace> traces,
                                    std::size_t position, TokenId token, double lambda) {
  std::vector<ReasoningTrace> swapped;
  swapped.reserve(traces.size());
  for (const auto& tr : traces) swapped.push_back(tr.with_prompt_token(position, token));
  return evaluate_loss(model, swapped, lambda);
}

GradientReport gradient_rank(const LanguageModel& model, std::span<const ReasoningTrace> traces,
                             const OneHotIndicator& indicator, std::size_t position, double lambda) {
  if (traces.empty()) throw ModelError("gradient_rank: empty batch");
  indicator.validate();
  const std::size_t n = indicator.size();
  const double B = static_cast<double>(traces.size());

  GradientReport rep;
  rep.grad.assign(n, 0.0);
  double ce_sum = 0.0, perpl_sum = 0.0;
  for (const auto& tr : traces) {
    if (position >= tr.prompt.size()) throw ModelError("gradient_rank: position outside prompt");
    const auto seq = tr.scoring_sequence();
    const auto pass = model.forward_with_indicator(seq, tr.prompt_index(position), indicator);
    const auto& logits = pass->logits();

    std::map<std::size_t, std::vector<double>> up;
    double ce = 0.0;
    const double ce_scale = 1.0 / (B * static_cast<double>(tr.answer.size()));
    for (std::size_t t = 0; t < tr.answer.size(); ++t) {
      const std::size_t row = tr.answer_row(t);
      const auto lsm = log_softmax(logits.row(row));
      ce -= lsm[tr.answer[t]];
      auto& g = up[row];
      g.resize(lsm.size());
      for (std::size_t v = 0; v < lsm.size(); ++v) g[v] = ce_scale * std::exp(lsm[v]);
      g[tr.answer[t]] -= ce_scale;
    }
    ce /= static_cast<double>(tr.answer.size());

    // Prompt log-likelihood; the optimised position's target is the
    // weighted candidate mixture.
    const std::size_t P = tr.prompt.size();
    std::vector<std::vector<double>> prompt_lsm(P);
    double lp = 0.0;
    for (std::size_t i = 0; i < P; ++i) {
      const std::size_t idx = tr.prompt_index(i);
      prompt_lsm[i] = log_softmax(logits.row(idx - 1));
      if (i == position) {
        for (std::size_t j = 0; j < n; ++j) lp += indicator.weights[j] * prompt_lsm[i][indicator.candidates[j]];
      } else {
        lp += prompt_lsm[i][tr.tokens[idx]];
      }
    }
    const double perpl = std::exp(-lp / static_cast<double>(P));
    // dL/d(lp) for this sample.
    const double c = (lambda / B) * perpl * (-1.0 / static_cast<double>(P));
    if (c != 0.0) {
      for (std::size_t i = 0; i < P; ++i) {
        const std::size_t row = tr.prompt_index(i) - 1;
        auto& g = up[row];
        const auto& lsm = prompt_lsm[i];
        g.resize(lsm.size(), 0.0);
        double mass = 1.0;
        if (i == position) {
          mass = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            g[indicator.candidates[j]] += c * indicator.weights[j];
            mass += indicator.weights[j];
            rep.grad[j] += c * lsm[indicator.candidates[j]];
          }
        } else {
          g[tr.tokens[tr.prompt_index(i)]] += c;
        }
        for (std::size_t v = 0; v < lsm.size(); ++v) g[v] -= c * mass * std::exp(lsm[v]);
      }
    }

    std::vector<LogitGrad> upstream;
    upstream.reserve(up.size());
    for (auto& [row, g] : up) upstream.push_back({row, std::move(g)});
    const auto dw = pass->backward(upstream);
    for (std::size_t j = 0; j < n; ++j) rep.grad[j] += dw[j];
    ce_sum += ce;
    perpl_sum += perpl;
  }

  rep.loss = LossBreakdown::make(ce_sum / B, perpl_sum / B, lambda, traces.size());
  require_finite(rep.loss.total, "loss");
  for (double g : rep.grad) require_finite(g, "gradient");

  for (std::size_t j = 0; j < n; ++j) rep.scores.push_back({indicator.candidates[j], -rep.grad[j], std::nullopt});
  std::sort(rep.scores.begin(), rep.scores.end(), [](const CandidateScore& a, const CandidateScore& b) {
    return a.neg_grad != b.neg_grad ? a.neg_grad > b.neg_grad : a.token < b.token;
  });
  return rep;
}

Selection select_replacement(const LanguageModel& model, std::vector<CandidateScore>& scores, std::size_t mu,
                             std::span<const ReasoningTrace> traces, std::size_t position, double lambda) {
  if (mu < 1) throw ConfigError("mu must be >= 1");
  if (scores.empty()) throw ModelError("select_replacement: no candidates");
  const std::size_t m = std::min(mu, scores.size());
  std::optional<Selection> best;
  for (std::size_t r = 0; r < m; ++r) {
    const auto loss = evaluate_substitution(model, traces, position, scores[r].token, lambda);
    scores[r].reeval_loss = loss.total;
    if (!best || loss.total < best->loss.total) best = Selection{scores[r].token, loss};
  }
  return *best;
}

}  // namespace greater
