// SPDX-License-Identifier: Apache-2.0
//
// Regularised answer loss over reasoning traces, its gradient with respect to
// the candidate indicator at one prompt position, and top-mu re-evaluation.
//
//   L = mean_b CE_b + lambda * mean_b perpl_b
//   CE_b    = mean over answer tokens of -log p(y_t | x p r extract y_<t)
//   perpl_b = exp(-(1/|p|) sum_i log p(p_i | x, p_<i))

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "greater/lm.hpp"
#include "greater/reasoning.hpp"

namespace greater {

struct LossBreakdown {
  double ce = 0.0;
  double perplexity = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  std::size_t batch_size = 0;

  static LossBreakdown make(double ce, double perplexity, double lambda, std::size_t batch_size) {
    return {ce, perplexity, lambda, ce + lambda * perplexity, batch_size};
  }
};

/// Mean token cross-entropy; one logit vector per target id.
double ce_loss(std::span<const std::vector<double>> logits, std::span<const TokenId> targets);

/// Prompt perplexity given x, from a fresh forward pass over x | p.
double perplexity_term(const LanguageModel& model, std::span<const TokenId> input, std::span<const TokenId> prompt);

/// Loss of each trace as laid out (hard tokens), averaged over the batch.
/// Throws NumericError on a non-finite result.
LossBreakdown evaluate_loss(const LanguageModel& model, std::span<const ReasoningTrace> traces, double lambda);

/// Same with prompt token `position` replaced by `token` in every trace.
LossBreakdown evaluate_substitution(const LanguageModel& model, std::span<const ReasoningTrace> traces,
                                    std::size_t position, TokenId token, double lambda);

struct CandidateScore {
  TokenId token = 0;
  /// -dL/dw for this candidate's indicator weight.
  double neg_grad = 0.0;
  std::optional<double> reeval_loss;
};

struct GradientReport {
  /// Loss at the current (one-hot) indicator.
  LossBreakdown loss;
  /// dL/dw in indicator order.
  std::vector<double> grad;
  /// Every indicator candidate, by neg_grad descending, ties to lower id.
  std::vector<CandidateScore> scores;
};

/// Forward with the indicator at `position` of each trace, backward to the
/// weights, summed over the batch. The perplexity target at `position` is the
/// weighted log-probability sum over candidates, so the weights receive that
/// term's direct gradient as well. Throws NumericError on non-finite values.
GradientReport gradient_rank(const LanguageModel& model, std::span<const ReasoningTrace> traces,
                             const OneHotIndicator& indicator, std::size_t position, double lambda);

struct Selection {
  TokenId token = 0;
  LossBreakdown loss;
};

/// Re-evaluates the first min(mu, |scores|) scores with the hard token
/// substituted (filling reeval_loss) and returns the lowest total; ties keep
/// the better-ranked candidate.
Selection select_replacement(const LanguageModel& model, std::vector<CandidateScore>& scores, std::size_t mu,
                             std::span<const ReasoningTrace> traces, std::size_t position, double lambda);

}  // namespace greater
