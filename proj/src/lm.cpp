// SPDX-License-Identifier: Apache-2.0

#include "greater/lm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "greater/toy_lm.hpp"

namespace greater {

void ModelHandle::validate() const {
  if (vocab_size == 0) throw ModelError("model '" + id + "': vocab size must be positive");
  if (embedding_dim == 0) throw ModelError("model '" + id + "': embedding dimension must be positive");
  for (TokenId s : special_ids) {
    if (s < 0 || static_cast<std::size_t>(s) >= vocab_size)
      throw ModelError("model '" + id + "': special token id " + std::to_string(s) + " outside vocabulary");
  }
  if (!is_special(eos_id)) throw ModelError("model '" + id + "': end-of-sequence id is not a special token");
}

void DecodeConfig::validate() const {
  if (max_new_tokens < 1) throw ConfigError("decode config: max new tokens must be >= 1");
}

std::optional<std::size_t> OneHotIndicator::hot_index() const {
  std::optional<std::size_t> hot;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    if (weights[j] == 1.0) {
      if (hot) return std::nullopt;
      hot = j;
    } else if (weights[j] != 0.0) {
      return std::nullopt;
    }
  }
  return hot;
}

void OneHotIndicator::validate() const {
  if (weights.size() != candidates.size())
    throw ModelError("indicator: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(candidates.size()) + " candidates");
  if (embedding_rows.size() != candidates.size() * embedding_dim)
    throw ModelError("indicator: embedding sub-table has " + std::to_string(embedding_rows.size()) +
                     " entries, expected " + std::to_string(candidates.size() * embedding_dim));
  if (candidates.empty()) throw ModelError("indicator: empty candidate slate");
  std::unordered_set<TokenId> seen;
  for (TokenId c : candidates) {
    if (!seen.insert(c).second) throw ModelError("indicator: duplicate candidate " + std::to_string(c));
  }
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  auto out = log_softmax(logits);
  for (double& v : out) v = std::exp(v);
  return out;
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

void LanguageModel::check_window(std::size_t length, std::string_view what) const {
  if (length > handle().window) {
    throw WindowError(std::string(what) + ": " + std::to_string(length) + " tokens exceed the " +
                      std::to_string(handle().window) + "-token window of model '" + handle().id + "'");
  }
}

std::vector<double> LanguageModel::next_token_distribution(std::span<const TokenId> context) const {
  if (context.empty()) throw ModelError("next_token_distribution: empty context");
  for (TokenId t : context) {
    if (t < 0 || static_cast<std::size_t>(t) >= handle().vocab_size)
      throw ModelError("next_token_distribution: token id " + std::to_string(t) + " outside vocabulary");
  }
  check_window(context.size(), "next_token_distribution");
  auto session = open_session();
  return log_softmax(session->append(context));
}

std::vector<TokenId> LanguageModel::generate(std::span<const TokenId> context, const DecodeConfig& config) const {
  config.validate();
  if (context.empty()) throw ModelError("generate: empty context");
  check_window(context.size() + config.max_new_tokens, "generate (context + max new tokens)");
  auto session = open_session();
  auto logits = session->append(context);
  return generate(*session, std::move(logits), config);
}

namespace {

// Earliest occurrence of any stop sequence, or npos.
std::size_t find_stop(const std::string& text, const std::vector<std::string>& stops) {
  std::size_t best = std::string::npos;
  for (const auto& s : stops) {
    if (s.empty()) continue;
    const std::size_t at = text.find(s);
    if (at != std::string::npos && (best == std::string::npos || at < best)) best = at;
  }
  return best;
}

}  // namespace

std::vector<TokenId> LanguageModel::generate(DecodeSession& session, std::vector<double> last_logits,
                                             const DecodeConfig& config) const {
  config.validate();
  check_window(session.length() + config.max_new_tokens, "generate (context + max new tokens)");
  const std::size_t start = session.length();
  std::vector<TokenId> out;
  for (std::size_t step = 0; step < config.max_new_tokens; ++step) {
    const auto next = static_cast<TokenId>(argmax(last_logits));
    if (next == handle().eos_id) break;
    out.push_back(next);
    const TokenId one[1] = {next};
    last_logits = session.append(one);
    if (!config.stop_sequences.empty()) {
      const std::string text = detokenize(out);
      const std::size_t at = find_stop(text, config.stop_sequences);
      if (at != std::string::npos) {
        // Keep the longest token prefix whose rendering ends before the stop.
        while (!out.empty()) {
          out.pop_back();
          const std::string prefix = detokenize(out);
          if (prefix.size() <= at && text.compare(0, prefix.size(), prefix) == 0 &&
              find_stop(prefix, config.stop_sequences) == std::string::npos)
            break;
        }
        session.truncate(start + out.size());
        return out;
      }
    }
  }
  return out;
}

OneHotIndicator LanguageModel::make_indicator(std::vector<TokenId> candidates, TokenId current) const {
  OneHotIndicator ind;
  ind.embedding_dim = handle().embedding_dim;
  ind.candidates = std::move(candidates);
  ind.weights.assign(ind.candidates.size(), 0.0);
  ind.embedding_rows.reserve(ind.candidates.size() * ind.embedding_dim);
  bool found = false;
  for (std::size_t j = 0; j < ind.candidates.size(); ++j) {
    if (ind.candidates[j] == current) {
      ind.weights[j] = 1.0;
      found = true;
    }
    const auto row = embedding(ind.candidates[j]);
    ind.embedding_rows.insert(ind.embedding_rows.end(), row.begin(), row.end());
  }
  if (!found) throw ModelError("indicator: current token " + std::to_string(current) + " not among candidates");
  ind.validate();
  return ind;
}

bool LanguageModel::is_blank_token(TokenId id) const {
  const TokenId one[1] = {id};
  const std::string text = detokenize(one);
  return std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

std::unique_ptr<LanguageModel> load_model(const std::string& id, const ModelOptions& options) {
  if (id == "toy:v1") {
    if (options.device != "cpu" && !options.device.empty())
      throw ModelError("model 'toy:v1' runs on cpu only, got device '" + options.device + "'");
    return std::make_unique<ToyLm>();
  }
  if (id.empty()) throw ModelError("no model identifier given");
  throw ModelError("model '" + id +
                   "': no backend is available for this identifier in this build (only 'toy:v1' is bundled)");
}

}  // namespace greater
