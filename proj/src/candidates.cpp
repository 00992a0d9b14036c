// SPDX-License-Identifier: Apache-2.0

#include "greater/candidates.hpp"

#include <algorithm>
#include <map>

#include "greater/rng.hpp"

namespace greater {

bool is_admissible(const LanguageModel& model, TokenId id) {
  const auto& h = model.handle();
  return id != h.eos_id && !h.is_special(id) && !model.is_blank_token(id);
}

std::vector<std::size_t> sample_batch(std::size_t dataset_size, std::size_t q, std::uint64_t seed) {
  if (dataset_size == 0) throw ConfigError("candidate proposal: empty dataset");
  if (q == 0) throw ConfigError("candidate proposal: q must be >= 1");
  if (q > dataset_size)
    throw ConfigError("candidate proposal: q = " + std::to_string(q) + " exceeds the " + std::to_string(dataset_size) +
                      " available samples");
  Rng rng(seed);
  return rng.sample_without_replacement(dataset_size, q);
}

CandidateSet propose_for_batch(const LanguageModel& model, std::span<const TaskSample> batch,
                               std::span<const TokenId> prefix, std::size_t position, std::size_t k) {
  if (batch.empty()) throw ConfigError("candidate proposal: empty dataset");
  if (k < 1) throw ConfigError("candidate proposal: k must be >= 1");
  const std::size_t V = model.handle().vocab_size;
  if (k > V) throw ConfigError("candidate proposal: k = " + std::to_string(k) + " exceeds the vocabulary");

  CandidateSet out;
  out.position = position;
  std::vector<double> mean_lp(V, 0.0);
  std::map<TokenId, std::size_t> votes;
  for (const auto& sample : batch) {
    std::vector<TokenId> ctx = model.tokenize(sample.input);
    if (ctx.empty()) throw DataError("sample " + sample.id + ": input tokenizes to nothing");
    ctx.insert(ctx.end(), prefix.begin(), prefix.end());
    const auto lp = model.next_token_distribution(ctx);
    for (std::size_t v = 0; v < V; ++v) mean_lp[v] += lp[v] / static_cast<double>(batch.size());

    std::vector<TokenId> order(V);
    for (std::size_t v = 0; v < V; ++v) order[v] = static_cast<TokenId>(v);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](TokenId a, TokenId b) { return lp[a] != lp[b] ? lp[a] > lp[b] : a < b; });
    std::vector<TokenId> top;
    for (std::size_t r = 0; r < k; ++r) {
      if (is_admissible(model, order[r])) top.push_back(order[r]);
    }
    for (TokenId t : top) ++votes[t];
    out.per_sample.emplace_back(sample.id, std::move(top));
  }

  auto by_mean = [&](TokenId a, TokenId b) { return mean_lp[a] != mean_lp[b] ? mean_lp[a] > mean_lp[b] : a < b; };
  for (const auto& [tok, n] : votes) {
    if (n == batch.size()) out.intersection.push_back(tok);
  }
  std::sort(out.intersection.begin(), out.intersection.end(), by_mean);

  if (out.intersection.empty()) {
    out.fallback = true;
    std::vector<TokenId> pool;
    for (const auto& [tok, n] : votes) pool.push_back(tok);
    std::sort(pool.begin(), pool.end(), [&](TokenId a, TokenId b) {
      return votes[a] != votes[b] ? votes[a] > votes[b] : by_mean(a, b);
    });
    if (pool.size() > k) pool.resize(k);
    out.intersection = std::move(pool);
  }
  return out;
}

CandidateSet propose(const LanguageModel& model, std::span<const TaskSample> samples, std::span<const TokenId> prefix,
                     std::size_t position, std::size_t k, std::size_t q, std::uint64_t seed) {
  const auto idx = sample_batch(samples.size(), q, seed);
  std::vector<TaskSample> batch;
  batch.reserve(idx.size());
  for (std::size_t i : idx) batch.push_back(samples[i]);
  return propose_for_batch(model, batch, prefix, position, k);
}

OneHotIndicator build_indicator(const LanguageModel& model, const CandidateSet& cands, TokenId current) {
  std::vector<TokenId> ids = cands.intersection;
  if (std::find(ids.begin(), ids.end(), current) == ids.end()) ids.push_back(current);
  return model.make_indicator(std::move(ids), current);
}

}  // namespace greater
