// SPDX-License-Identifier: Apache-2.0
//
// Per-position candidate slates: top-k next-token proposals for each sampled
// input, intersected across the samples.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "greater/lm.hpp"
#include "greater/task.hpp"

namespace greater {

struct CandidateSet {
  std::size_t position = 0;
  /// (sample id, filtered top-k list) in draw order.
  std::vector<std::pair<std::string, std::vector<TokenId>>> per_sample;
  /// Tokens proposed for every sample, by mean log-probability (desc).
  std::vector<TokenId> intersection;
  /// The intersection was empty and was replaced by the vote ranking.
  bool fallback = false;
};

/// Special, end-of-sequence and whitespace-only tokens never become prompt
/// tokens.
bool is_admissible(const LanguageModel& model, TokenId id);

/// Indices of `q` samples drawn without replacement. Throws ConfigError when
/// the dataset is empty or q exceeds it.
std::vector<std::size_t> sample_batch(std::size_t dataset_size, std::size_t q, std::uint64_t seed);

/// Candidates for prompt position `position` given the prompt prefix, over an
/// explicit batch of samples. Each sample contributes its top-k next tokens
/// after `x | prefix`; inadmissible tokens are removed after taking top-k.
/// An empty intersection falls back to ranking the union by how many lists
/// contain a token, then mean log-probability, then id, keeping at most k.
/// The slate is empty only when no top-k token is admissible.
CandidateSet propose_for_batch(const LanguageModel& model, std::span<const TaskSample> batch,
                               std::span<const TokenId> prefix, std::size_t position, std::size_t k);

/// Samples q inputs with `seed`, then proposes as above.
CandidateSet propose(const LanguageModel& model, std::span<const TaskSample> samples, std::span<const TokenId> prefix,
                     std::size_t position, std::size_t k, std::size_t q, std::uint64_t seed);

/// Indicator over the intersection plus the current token (appended when
/// missing), one-hot on the current token.
OneHotIndicator build_indicator(const LanguageModel& model, const CandidateSet& cands, TokenId current);

}  // namespace greater
