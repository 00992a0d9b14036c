// SPDX-License-Identifier: Apache-2.0
//
// Uniform causal language model interface: tokenization, greedy decoding with
// cached state, full forward passes, and forward/backward passes in which one
// input position is a weighted mixture of candidate token embeddings.

#pragma once

#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "greater/common.hpp"

namespace greater {

struct ModelHandle {
  std::string id;
  std::size_t vocab_size = 0;
  std::size_t embedding_dim = 0;
  std::size_t window = 0;
  std::set<TokenId> special_ids;
  TokenId eos_id = 0;

  bool is_special(TokenId id) const { return special_ids.contains(id); }
  /// Throws ModelError when the invariants do not hold.
  void validate() const;
};

struct DecodeConfig {
  std::size_t max_new_tokens = 64;
  std::vector<std::string> stop_sequences;

  /// Only greedy decoding is supported.
  static constexpr const char* mode = "greedy";

  /// Throws ConfigError for max_new_tokens == 0.
  void validate() const;
};

/// Row-major [rows x vocab] table of raw (pre-softmax) logits.
class LogitTable {
 public:
  LogitTable() = default;
  LogitTable(std::size_t rows, std::size_t vocab) : rows_(rows), vocab_(vocab), data_(rows * vocab, 0.0) {}

  std::size_t rows() const { return rows_; }
  std::size_t vocab() const { return vocab_; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * vocab_, vocab_}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * vocab_, vocab_}; }

 private:
  std::size_t rows_ = 0;
  std::size_t vocab_ = 0;
  std::vector<double> data_;
};

/// Weight vector over a candidate slate plus the matching rows of the
/// embedding table. The represented input embedding is weights^T * rows.
struct OneHotIndicator {
  std::vector<TokenId> candidates;
  std::vector<double> weights;
  /// candidates.size() x embedding_dim, row-major.
  std::vector<double> embedding_rows;
  std::size_t embedding_dim = 0;

  std::size_t size() const { return candidates.size(); }
  std::span<const double> embedding_row(std::size_t j) const {
    return {embedding_rows.data() + j * embedding_dim, embedding_dim};
  }
  /// Index of the entry with weight 1, if the weights are exactly one-hot.
  std::optional<std::size_t> hot_index() const;
  /// Throws ModelError on length mismatches or duplicate candidates.
  void validate() const;
};

/// Upstream gradient of a scalar loss with respect to one row of raw logits.
struct LogitGrad {
  std::size_t row = 0;
  std::vector<double> grad;
};

/// Result of a mixed-embedding forward pass. Holds the activations needed to
/// backpropagate into the indicator weights.
class IndicatorPass {
 public:
  virtual ~IndicatorPass() = default;
  virtual const LogitTable& logits() const = 0;
  /// dL/dweights for a loss whose gradient with respect to the logits is
  /// `upstream`. Rows not listed contribute zero.
  virtual std::vector<double> backward(std::span<const LogitGrad> upstream) const = 0;
};

/// Incremental decoding state (key/value cache).
class DecodeSession {
 public:
  virtual ~DecodeSession() = default;
  /// Appends tokens and returns the raw logits at the last appended position.
  virtual std::vector<double> append(std::span<const TokenId> ids) = 0;
  virtual std::size_t length() const = 0;
  /// Drops cached positions beyond `length`.
  virtual void truncate(std::size_t length) = 0;
};

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual const ModelHandle& handle() const = 0;

  virtual std::vector<TokenId> tokenize(std::string_view text) const = 0;
  virtual std::string detokenize(std::span<const TokenId> ids) const = 0;

  /// Embedding table row for one token.
  virtual std::vector<double> embedding(TokenId id) const = 0;

  virtual std::unique_ptr<DecodeSession> open_session() const = 0;

  /// Uncached pass over the whole sequence; one logit row per input token.
  virtual LogitTable forward(std::span<const TokenId> ids) const = 0;

  /// Like forward(), except the input at `position` is the indicator's mixed
  /// embedding. `ids[position]` is ignored.
  virtual std::unique_ptr<IndicatorPass> forward_with_indicator(std::span<const TokenId> ids, std::size_t position,
                                                                const OneHotIndicator& indicator) const = 0;

  /// Log-probabilities of the next token.
  std::vector<double> next_token_distribution(std::span<const TokenId> context) const;

  /// Greedy continuation. Stops at end-of-sequence (not included), when a
  /// stop sequence appears in the rendered text (truncated before it), or at
  /// max_new_tokens.
  std::vector<TokenId> generate(std::span<const TokenId> context, const DecodeConfig& config) const;

  /// Greedy continuation of an already-prefilled session. On return the
  /// session holds exactly the prefill followed by the returned tokens.
  std::vector<TokenId> generate(DecodeSession& session, std::vector<double> last_logits,
                                const DecodeConfig& config) const;

  /// Throws WindowError when `length` tokens do not fit.
  void check_window(std::size_t length, std::string_view what) const;

  /// Gathers embedding rows for `candidates` and puts weight 1 on `current`.
  OneHotIndicator make_indicator(std::vector<TokenId> candidates, TokenId current) const;

  /// Token renders as nothing but whitespace.
  bool is_blank_token(TokenId id) const;
};

std::vector<double> log_softmax(std::span<const double> logits);
std::vector<double> softmax(std::span<const double> logits);
/// Lowest index among maxima.
std::size_t argmax(std::span<const double> values);

struct ModelOptions {
  bool deterministic = true;
  std::string device = "cpu";
  std::string cache_dir;
};

/// Resolves a model identifier. `toy:v1` is the bundled reference model;
/// other identifiers need an external backend and raise ModelError.
std::unique_ptr<LanguageModel> load_model(const std::string& id, const ModelOptions& options = {});

}  // namespace greater
