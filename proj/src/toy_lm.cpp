// SPDX-License-Identifier: Apache-2.0

#include "greater/toy_lm.hpp"

#include <cctype>
#include <cmath>
#include <limits>

#include "greater/rng.hpp"

namespace greater {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Tokenizer

namespace {

const char* const kPieces[] = {
    "<eos>", "<unk>",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "A", "B", "C", "D", "E",
    ".", ",", "(", ")", ":", "?",
    "Use", "proper", "logical", "reasoning", "and", "think", "step", "by", "Finally", "give", "the", "actual",
    "correct", "answer",
    "Therefore", "final", "is", "arabic", "numerals",
    "True", "False", "Uncertain",
    "a", "b", "c",
    "count", "add", "sum", "first", "then", "check", "each", "number", "carefully", "list", "solve", "order",
    "clear", "simple", "logic", "explain",
};

bool is_word_char(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0 || c == '\''; }
bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }
bool attaches_left(const std::string& p) { return p == "." || p == "," || p == ")" || p == ":" || p == "?"; }

}  // namespace

ToyTokenizer::ToyTokenizer() {
  for (const char* p : kPieces) {
    index_.emplace(p, static_cast<TokenId>(pieces_.size()));
    pieces_.emplace_back(p);
  }
}

TokenId ToyTokenizer::id(const std::string& piece) const {
  auto it = index_.find(piece);
  if (it == index_.end()) throw std::out_of_range("toy tokenizer: no piece '" + piece + "'");
  return it->second;
}

std::vector<TokenId> ToyTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    std::string piece;
    if (is_word_char(c)) {
      while (i < text.size() && is_word_char(text[i])) piece.push_back(text[i++]);
    } else if ((static_cast<unsigned char>(c) & 0x80) != 0) {
      // Whole UTF-8 sequence becomes one unknown piece.
      piece.push_back(text[i++]);
      while (i < text.size() && (static_cast<unsigned char>(text[i]) & 0xC0) == 0x80) piece.push_back(text[i++]);
    } else {
      piece.push_back(text[i++]);
    }
    auto it = index_.find(piece);
    out.push_back(it == index_.end() ? kUnk : it->second);
  }
  return out;
}

std::string ToyTokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  const std::string* prev = nullptr;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size())
      throw ModelError("toy tokenizer: token id " + std::to_string(id) + " outside vocabulary");
    const std::string& p = pieces_[static_cast<std::size_t>(id)];
    const bool glue = prev == nullptr || attaches_left(p) || *prev == "(" ||
                      (is_digit(p.front()) && p.size() == 1 && prev->size() == 1 && is_digit(prev->front()));
    if (!glue) out.push_back(' ');
    out += p;
    prev = &p;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model math

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

// Row-wise RMS normalisation without gain. Returns inverse RMS per row.
VectorXd rms_normalize(const MatrixXd& x, MatrixXd& y) {
  const auto n = static_cast<double>(x.cols());
  VectorXd inv(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) inv(r) = 1.0 / std::sqrt(x.row(r).squaredNorm() / n + ToyLm::kNormEps);
  y = x.array().colwise() * inv.array();
  return inv;
}

MatrixXd rms_normalize_backward(const MatrixXd& y, const VectorXd& inv, const MatrixXd& dy) {
  const auto n = static_cast<double>(y.cols());
  MatrixXd dx(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double proj = dy.row(r).dot(y.row(r)) / n;
    dx.row(r) = inv(r) * (dy.row(r) - proj * y.row(r));
  }
  return dx;
}

template <typename Row>
void softmax_row_inplace(Row&& row, Eigen::Index valid) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < valid; ++j) mx = std::max(mx, row(j));
  double sum = 0.0;
  for (Eigen::Index j = 0; j < valid; ++j) {
    row(j) = std::exp(row(j) - mx);
    sum += row(j);
  }
  for (Eigen::Index j = 0; j < valid; ++j) row(j) /= sum;
  for (Eigen::Index j = valid; j < row.size(); ++j) row(j) = 0.0;
}

struct LayerCache {
  MatrixXd h_in, a, q, k, v, o, h_mid, b, u, g;
  VectorXd inv_a, inv_b;
  std::vector<MatrixXd> probs;  // per head, T x T, causal
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  MatrixXd h_final, f;
  VectorXd inv_f;
  MatrixXd logits;  // T x V
};

ForwardCache run_forward(const ToyWeights& w, const ToyLmConfig& cfg, MatrixXd x) {
  const auto T = x.rows();
  const auto dh = static_cast<Eigen::Index>(cfg.d_model / cfg.n_heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  ForwardCache c;
  c.layers.resize(w.layers.size());
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const ToyLayer& L = w.layers[l];
    LayerCache& lc = c.layers[l];
    lc.h_in = std::move(x);
    lc.inv_a = rms_normalize(lc.h_in, lc.a);
    lc.q = lc.a * L.wq;
    lc.k = lc.a * L.wk;
    lc.v = lc.a * L.wv;
    lc.o = MatrixXd::Zero(T, static_cast<Eigen::Index>(cfg.d_model));
    lc.probs.resize(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dh;
      MatrixXd s = (lc.q.middleCols(c0, dh) * lc.k.middleCols(c0, dh).transpose()) * scale;
      for (Eigen::Index i = 0; i < T; ++i) softmax_row_inplace(s.row(i), i + 1);
      lc.o.middleCols(c0, dh) = s * lc.v.middleCols(c0, dh);
      lc.probs[h] = std::move(s);
    }
    lc.h_mid = lc.h_in + lc.o * L.wo;
    lc.inv_b = rms_normalize(lc.h_mid, lc.b);
    lc.u = lc.b * L.w1;
    lc.g = lc.u.unaryExpr([](double u) { return gelu(u); });
    x = lc.h_mid + lc.g * L.w2;
  }
  c.h_final = std::move(x);
  c.inv_f = rms_normalize(c.h_final, c.f);
  c.logits = c.f * w.unembedding;
  return c;
}

// Gradient of the loss with respect to the layer-0 input rows.
MatrixXd run_backward(const ToyWeights& w, const ToyLmConfig& cfg, const ForwardCache& c, const MatrixXd& dlogits) {
  const auto T = c.logits.rows();
  const auto dh = static_cast<Eigen::Index>(cfg.d_model / cfg.n_heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  MatrixXd df = dlogits * w.unembedding.transpose();
  MatrixXd dx = rms_normalize_backward(c.f, c.inv_f, df);
  for (std::size_t li = w.layers.size(); li-- > 0;) {
    const ToyLayer& L = w.layers[li];
    const LayerCache& lc = c.layers[li];
    // x_out = h_mid + gelu(b W1) W2
    MatrixXd dg = dx * L.w2.transpose();
    MatrixXd du = dg.cwiseProduct(lc.u.unaryExpr([](double u) { return gelu_grad(u); }));
    MatrixXd db = du * L.w1.transpose();
    MatrixXd dh_mid = dx + rms_normalize_backward(lc.b, lc.inv_b, db);
    // h_mid = h_in + o Wo
    MatrixXd d_o = dh_mid * L.wo.transpose();
    MatrixXd dq = MatrixXd::Zero(T, lc.q.cols());
    MatrixXd dk = MatrixXd::Zero(T, lc.k.cols());
    MatrixXd dv = MatrixXd::Zero(T, lc.v.cols());
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dh;
      const MatrixXd& p = lc.probs[h];
      const auto d_oh = d_o.middleCols(c0, dh);
      dv.middleCols(c0, dh) = p.transpose() * d_oh;
      MatrixXd dp = d_oh * lc.v.middleCols(c0, dh).transpose();
      MatrixXd ds(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        const double dot = dp.row(i).dot(p.row(i));
        ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
      }
      dq.middleCols(c0, dh) = (ds * lc.k.middleCols(c0, dh)) * scale;
      dk.middleCols(c0, dh) = (ds.transpose() * lc.q.middleCols(c0, dh)) * scale;
    }
    MatrixXd da = dq * L.wq.transpose() + dk * L.wk.transpose() + dv * L.wv.transpose();
    dx = dh_mid + rms_normalize_backward(lc.a, lc.inv_a, da);
  }
  return dx;
}

LogitTable to_table(const MatrixXd& logits) {
  LogitTable t(static_cast<std::size_t>(logits.rows()), static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    auto row = t.row(static_cast<std::size_t>(r));
    for (Eigen::Index v = 0; v < logits.cols(); ++v) row[static_cast<std::size_t>(v)] = logits(r, v);
  }
  return t;
}

MatrixXd gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal() * stddev;
  return m;
}

class ToySession final : public DecodeSession {
 public:
  explicit ToySession(const ToyLm& lm) : lm_(lm), keys_(lm.weights().layers.size()), values_(keys_.size()) {
    const auto d = static_cast<Eigen::Index>(lm.config().d_model);
    for (auto& k : keys_) k.resize(0, d);
    for (auto& v : values_) v.resize(0, d);
  }

  std::vector<double> append(std::span<const TokenId> ids) override {
    if (ids.empty()) throw ModelError("decode session: nothing to append");
    RowVectorXd logits;
    for (TokenId id : ids) logits = step(id);
    return {logits.data(), logits.data() + logits.size()};
  }

  std::size_t length() const override { return length_; }

  void truncate(std::size_t length) override {
    if (length >= length_) return;
    for (auto& k : keys_) k.conservativeResize(static_cast<Eigen::Index>(length), Eigen::NoChange);
    for (auto& v : values_) v.conservativeResize(static_cast<Eigen::Index>(length), Eigen::NoChange);
    length_ = length;
  }

 private:
  RowVectorXd step(TokenId id) {
    const ToyLmConfig& cfg = lm_.config();
    const ToyWeights& w = lm_.weights();
    if (id < 0 || static_cast<std::size_t>(id) >= lm_.handle().vocab_size)
      throw ModelError("decode session: token id " + std::to_string(id) + " outside vocabulary");
    lm_.check_window(length_ + 1, "decode session");
    const auto t = static_cast<Eigen::Index>(length_);
    const auto dh = static_cast<Eigen::Index>(cfg.d_model / cfg.n_heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    MatrixXd x = w.token_embedding.row(id) + w.position_embedding.row(t);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
      const ToyLayer& L = w.layers[l];
      MatrixXd a;
      rms_normalize(x, a);
      const MatrixXd q = a * L.wq;
      keys_[l].conservativeResize(t + 1, Eigen::NoChange);
      values_[l].conservativeResize(t + 1, Eigen::NoChange);
      keys_[l].row(t) = a * L.wk;
      values_[l].row(t) = a * L.wv;
      MatrixXd o(1, static_cast<Eigen::Index>(cfg.d_model));
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h) * dh;
        RowVectorXd s = (q.middleCols(c0, dh) * keys_[l].middleCols(c0, dh).transpose()) * scale;
        softmax_row_inplace(s, s.size());
        o.middleCols(c0, dh) = s * values_[l].middleCols(c0, dh);
      }
      const MatrixXd h_mid = x + o * L.wo;
      MatrixXd b;
      rms_normalize(h_mid, b);
      x = h_mid + (b * L.w1).unaryExpr([](double u) { return gelu(u); }) * L.w2;
    }
    MatrixXd f;
    rms_normalize(x, f);
    ++length_;
    return f * w.unembedding;
  }

  const ToyLm& lm_;
  std::vector<MatrixXd> keys_;
  std::vector<MatrixXd> values_;
  std::size_t length_ = 0;
};

class ToyIndicatorPass final : public IndicatorPass {
 public:
  ToyIndicatorPass(const ToyLm& lm, ForwardCache cache, std::size_t position, const OneHotIndicator& ind)
      : lm_(lm), cache_(std::move(cache)), position_(position), indicator_(ind), table_(to_table(cache_.logits)) {}

  const LogitTable& logits() const override { return table_; }

  std::vector<double> backward(std::span<const LogitGrad> upstream) const override {
    MatrixXd dlogits = MatrixXd::Zero(cache_.logits.rows(), cache_.logits.cols());
    for (const auto& g : upstream) {
      if (g.row >= table_.rows() || g.grad.size() != table_.vocab())
        throw ModelError("indicator backward: upstream gradient shape mismatch");
      for (std::size_t v = 0; v < g.grad.size(); ++v)
        dlogits(static_cast<Eigen::Index>(g.row), static_cast<Eigen::Index>(v)) += g.grad[v];
    }
    const MatrixXd dx = run_backward(lm_.weights(), lm_.config(), cache_, dlogits);
    const auto dpos = dx.row(static_cast<Eigen::Index>(position_));
    std::vector<double> grad(indicator_.size(), 0.0);
    for (std::size_t j = 0; j < indicator_.size(); ++j) {
      const auto row = indicator_.embedding_row(j);
      double s = 0.0;
      for (std::size_t d = 0; d < row.size(); ++d) s += dpos(static_cast<Eigen::Index>(d)) * row[d];
      grad[j] = s;
    }
    return grad;
  }

 private:
  const ToyLm& lm_;
  ForwardCache cache_;
  std::size_t position_;
  OneHotIndicator indicator_;
  LogitTable table_;
};

}  // namespace

ToyLm::ToyLm(ToyLmConfig config) : config_(config) {
  if (config_.d_model % config_.n_heads != 0) throw ModelError("toy:v1: d_model must be divisible by n_heads");
  const auto V = static_cast<Eigen::Index>(tokenizer_.size());
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  const auto ff = static_cast<Eigen::Index>(config_.d_ff);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Rng rng(config_.seed);
  weights_.token_embedding = gaussian(rng, V, d, config_.embedding_scale);
  weights_.position_embedding = gaussian(rng, static_cast<Eigen::Index>(config_.window), d, 0.5);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    ToyLayer L;
    L.wq = gaussian(rng, d, d, inv_sqrt_d);
    L.wk = gaussian(rng, d, d, inv_sqrt_d);
    L.wv = gaussian(rng, d, d, inv_sqrt_d);
    L.wo = gaussian(rng, d, d, inv_sqrt_d);
    L.w1 = gaussian(rng, d, ff, inv_sqrt_d);
    L.w2 = gaussian(rng, ff, d, 1.0 / std::sqrt(static_cast<double>(ff)));
    weights_.layers.push_back(std::move(L));
  }
  weights_.unembedding = gaussian(rng, d, V, inv_sqrt_d * config_.unembedding_scale);

  handle_.id = "toy:v1";
  handle_.vocab_size = tokenizer_.size();
  handle_.embedding_dim = config_.d_model;
  handle_.window = config_.window;
  handle_.special_ids = {ToyTokenizer::kEos, ToyTokenizer::kUnk};
  handle_.eos_id = ToyTokenizer::kEos;
  handle_.validate();
}

std::vector<double> ToyLm::embedding(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= handle_.vocab_size)
    throw ModelError("toy:v1: token id " + std::to_string(id) + " outside vocabulary");
  const auto row = weights_.token_embedding.row(id);
  return std::vector<double>(row.begin(), row.end());
}

MatrixXd ToyLm::embed(std::span<const TokenId> ids) const {
  const auto T = static_cast<Eigen::Index>(ids.size());
  MatrixXd x(T, static_cast<Eigen::Index>(config_.d_model));
  for (Eigen::Index t = 0; t < T; ++t) {
    const TokenId id = ids[static_cast<std::size_t>(t)];
    if (id < 0 || static_cast<std::size_t>(id) >= handle_.vocab_size)
      throw ModelError("toy:v1: token id " + std::to_string(id) + " outside vocabulary");
    x.row(t) = weights_.token_embedding.row(id) + weights_.position_embedding.row(t);
  }
  return x;
}

std::unique_ptr<DecodeSession> ToyLm::open_session() const { return std::make_unique<ToySession>(*this); }

LogitTable ToyLm::forward(std::span<const TokenId> ids) const {
  if (ids.empty()) throw ModelError("forward: empty sequence");
  check_window(ids.size(), "forward");
  return to_table(run_forward(weights_, config_, embed(ids)).logits);
}

std::unique_ptr<IndicatorPass> ToyLm::forward_with_indicator(std::span<const TokenId> ids, std::size_t position,
                                                             const OneHotIndicator& indicator) const {
  if (ids.empty()) throw ModelError("forward_with_indicator: empty sequence");
  if (position >= ids.size())
    throw ModelError("forward_with_indicator: position " + std::to_string(position) + " outside sequence of " +
                     std::to_string(ids.size()));
  indicator.validate();
  if (indicator.embedding_dim != config_.d_model)
    throw ModelError("forward_with_indicator: embedding sub-table width does not match model");
  check_window(ids.size(), "forward_with_indicator");
  MatrixXd x = embed(ids);
  RowVectorXd mix = RowVectorXd::Zero(static_cast<Eigen::Index>(config_.d_model));
  for (std::size_t j = 0; j < indicator.size(); ++j) {
    const auto row = indicator.embedding_row(j);
    for (std::size_t d = 0; d < row.size(); ++d) mix(static_cast<Eigen::Index>(d)) += indicator.weights[j] * row[d];
  }
  const auto p = static_cast<Eigen::Index>(position);
  x.row(p) = mix + weights_.position_embedding.row(p);
  return std::make_unique<ToyIndicatorPass>(*this, run_forward(weights_, config_, std::move(x)), position, indicator);
}

}  // namespace greater
