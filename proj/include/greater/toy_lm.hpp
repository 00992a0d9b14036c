// SPDX-License-Identifier: Apache-2.0
//
// `toy:v1`: a two-layer causal transformer over a 64-entry word vocabulary
// with fixed-seed random weights. Small enough to check every gradient and
// selection step against brute force.

#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "greater/lm.hpp"

namespace greater {

/// Word-level tokenizer. Letter runs are looked up whole, digits and
/// punctuation are single tokens, anything else maps to <unk>.
class ToyTokenizer {
 public:
  ToyTokenizer();

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t size() const { return pieces_.size(); }
  const std::string& piece(TokenId id) const { return pieces_.at(static_cast<std::size_t>(id)); }
  /// Throws std::out_of_range for pieces outside the vocabulary.
  TokenId id(const std::string& piece) const;

  static constexpr TokenId kEos = 0;
  static constexpr TokenId kUnk = 1;

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> index_;
};

struct ToyLmConfig {
  std::size_t d_model = 48;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 96;
  std::size_t window = 256;
  std::uint64_t seed = 20240917;
  double embedding_scale = 1.0;
  double unembedding_scale = 4.0;
};

struct ToyLayer {
  Eigen::MatrixXd wq, wk, wv, wo;  // d x d
  Eigen::MatrixXd w1;              // d x ff
  Eigen::MatrixXd w2;              // ff x d
};

struct ToyWeights {
  Eigen::MatrixXd token_embedding;     // vocab x d
  Eigen::MatrixXd position_embedding;  // window x d
  std::vector<ToyLayer> layers;
  Eigen::MatrixXd unembedding;  // d x vocab
};

class ToyLm final : public LanguageModel {
 public:
  explicit ToyLm(ToyLmConfig config = {});

  const ModelHandle& handle() const override { return handle_; }
  std::vector<TokenId> tokenize(std::string_view text) const override { return tokenizer_.encode(text); }
  std::string detokenize(std::span<const TokenId> ids) const override { return tokenizer_.decode(ids); }
  std::vector<double> embedding(TokenId id) const override;
  std::unique_ptr<DecodeSession> open_session() const override;
  LogitTable forward(std::span<const TokenId> ids) const override;
  std::unique_ptr<IndicatorPass> forward_with_indicator(std::span<const TokenId> ids, std::size_t position,
                                                        const OneHotIndicator& indicator) const override;

  const ToyLmConfig& config() const { return config_; }
  const ToyWeights& weights() const { return weights_; }
  const ToyTokenizer& tokenizer() const { return tokenizer_; }

  static constexpr double kNormEps = 1e-6;

 private:
  Eigen::MatrixXd embed(std::span<const TokenId> ids) const;

  ToyLmConfig config_;
  ToyTokenizer tokenizer_;
  ToyWeights weights_;
  ModelHandle handle_;
};

}  // namespace greater
