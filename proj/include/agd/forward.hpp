#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "agd/error.hpp"
#include "agd/model.hpp"
#include "agd/tensor.hpp"
#include "agd/tokenizer.hpp"

namespace agd {

/// Per-position layernorm record: normalised output plus the statistics the
/// backward pass and the frozen-std LRP rule need.
template <typename T>
struct NormRecord {
  Tensor<T> out;          // [n, d] after gain/shift
  std::vector<T> mean;    // [n]
  std::vector<T> rstd;    // [n], 1 / sqrt(var + eps)
};

template <typename T>
struct LayerRecord {
  Tensor<T> resid_in;               // [n, d]
  NormRecord<T> ln1;
  Tensor<T> q, k, v;                // [n, d], head h occupies columns [h*dh, (h+1)*dh)
  std::vector<Tensor<T>> scores;    // per head [n, n], scaled pre-softmax, 0 above diagonal
  std::vector<Tensor<T>> attn;      // per head [n, n], post-softmax, 0 above diagonal
  Tensor<T> z;                      // [n, d] concatenated per-head outputs z_i^h
  Tensor<T> attn_out;               // [n, d] after W_O
  Tensor<T> resid_mid;              // resid_in + attn_out
  NormRecord<T> ln2;
  Tensor<T> ff_pre, ff_act, ff_out; // [n, d_ff], [n, d_ff], [n, d]
};

/// Everything recorded by one forward pass. A cache is tied to the model that
/// produced it; attribution checks this.
template <typename T>
struct ActivationCache {
  const Model<T>* model = nullptr;
  bool complete = false;
  std::vector<TokenId> tokens;
  Tensor<T> embed;                  // [n, d] token + position embedding
  std::vector<LayerRecord<T>> layers;
  Tensor<T> resid_final;            // [n, d] residual after the last block
  NormRecord<T> lnf;                // empty when the model has no final norm
  Tensor<T> logits;                 // [n, vocab]

  std::size_t seq_len() const { return embed.rows(); }

  /// Residual stream entering block l; l == n_layers gives the final residual.
  const Tensor<T>& residual(std::size_t l) const {
    return l < layers.size() ? layers[l].resid_in : resid_final;
  }

  /// Logits at the last position.
  std::vector<T> last_logits() const {
    auto r = logits.row(logits.rows() - 1);
    return {r.begin(), r.end()};
  }

  void check_for(const Model<T>& m) const {
    if (!complete) throw StaleCacheError("activation cache is incomplete");
    if (model != &m) throw StaleCacheError("activation cache was produced by a different model");
  }
};

namespace detail {

template <typename T>
T gelu(T x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const double xd = x;
  return static_cast<T>(0.5 * xd * (1.0 + std::tanh(k * (xd + 0.044715 * xd * xd * xd))));
}

template <typename T>
T gelu_grad(T x) {
  constexpr double k = 0.7978845608028654;
  const double xd = x;
  const double u = k * (xd + 0.044715 * xd * xd * xd);
  const double t = std::tanh(u);
  const double du = k * (1.0 + 3.0 * 0.044715 * xd * xd);
  return static_cast<T>(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du);
}

template <typename T>
T activate(Activation a, T x) {
  return a == Activation::gelu ? gelu(x) : (x > T{0} ? x : T{0});
}

template <typename T>
T activate_grad(Activation a, T x) {
  return a == Activation::gelu ? gelu_grad(x) : (x > T{0} ? T{1} : T{0});
}

template <typename T>
void layer_norm(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b, double eps, NormRecord<T>& rec) {
  const std::size_t n = x.rows(), d = x.cols();
  rec.out = Tensor<T>(n, d);
  rec.mean.assign(n, T{0});
  rec.rstd.assign(n, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    auto xi = x.row(i);
    T mean{0};
    for (T v : xi) mean += v;
    mean /= static_cast<T>(d);
    T var{0};
    for (T v : xi) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T rstd = T{1} / std::sqrt(var + static_cast<T>(eps));
    rec.mean[i] = mean;
    rec.rstd[i] = rstd;
    for (std::size_t k = 0; k < d; ++k) rec.out(i, k) = (xi[k] - mean) * rstd * g[k] + b[k];
  }
}

}  // namespace detail

/// Full forward pass from precomputed input vectors (token + position
/// embedding), recording everything needed for gradients and relevance.
/// `logit_rows` restricts which positions get logits (the rest stay zero).
template <typename T>
ActivationCache<T> forward_embeddings(const Model<T>& m, const Tensor<T>& embed, std::vector<TokenId> tokens = {},
                                      const std::vector<bool>* logit_rows = nullptr) {
  const ModelConfig& c = m.config;
  const std::size_t n = embed.rows(), d = c.d_model, dh = c.d_head;
  if (n < 1) throw RangeError("forward: empty sequence");
  if (n > c.max_seq_len)
    throw RangeError("forward: sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));

  ActivationCache<T> cache;
  cache.model = &m;
  cache.tokens = std::move(tokens);
  cache.embed = embed;
  cache.layers.resize(c.n_layers);
  Tensor<T> h = embed;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& w = m.layers[l];
    auto& rec = cache.layers[l];
    rec.resid_in = h;
    detail::layer_norm(h, w.ln1_g, w.ln1_b, c.ln_epsilon, rec.ln1);
    matmul_rows(rec.ln1.out, w.wq, &w.bq.data, rec.q);
    matmul_rows(rec.ln1.out, w.wk, &w.bk.data, rec.k);
    matmul_rows(rec.ln1.out, w.wv, &w.bv.data, rec.v);
    rec.scores.assign(c.n_heads, Tensor<T>(n, n));
    rec.attn.assign(c.n_heads, Tensor<T>(n, n));
    rec.z = Tensor<T>(n, d);
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      const std::size_t off = hd * dh;
      auto& s = rec.scores[hd];
      auto& a = rec.attn[hd];
      for (std::size_t i = 0; i < n; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          T dot{0};
          for (std::size_t k = 0; k < dh; ++k) dot += rec.q(i, off + k) * rec.k(j, off + k);
          s(i, j) = dot * scale;
          mx = std::max(mx, s(i, j));
        }
        T sum{0};
        for (std::size_t j = 0; j <= i; ++j) {
          a(i, j) = std::exp(s(i, j) - mx);
          sum += a(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) a(i, j) /= sum;
        for (std::size_t j = 0; j <= i; ++j) {
          const T aij = a(i, j);
          for (std::size_t k = 0; k < dh; ++k) rec.z(i, off + k) += aij * rec.v(j, off + k);
        }
      }
    }
    matmul_rows(rec.z, w.wo, &w.bo.data, rec.attn_out);
    rec.resid_mid = h;
    for (std::size_t i = 0; i < h.size(); ++i) rec.resid_mid[i] += rec.attn_out[i];

    detail::layer_norm(rec.resid_mid, w.ln2_g, w.ln2_b, c.ln_epsilon, rec.ln2);
    matmul_rows(rec.ln2.out, w.w1, &w.b1.data, rec.ff_pre);
    rec.ff_act = rec.ff_pre;
    for (auto& v : rec.ff_act.data) v = detail::activate(c.activation, v);
    matmul_rows(rec.ff_act, w.w2, &w.b2.data, rec.ff_out);
    h = rec.resid_mid;
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += rec.ff_out[i];
  }
  cache.resid_final = h;
  if (c.final_norm) {
    detail::layer_norm(h, m.lnf_g, m.lnf_b, c.ln_epsilon, cache.lnf);
    matmul_rows(cache.lnf.out, m.unembed, nullptr, cache.logits, logit_rows);
  } else {
    matmul_rows(h, m.unembed, nullptr, cache.logits, logit_rows);
  }
  cache.complete = true;
  return cache;
}

template <typename T>
Tensor<T> embed_tokens(const Model<T>& m, std::span<const TokenId> tokens) {
  const ModelConfig& c = m.config;
  if (tokens.empty()) throw RangeError("forward: empty token sequence");
  if (tokens.size() > c.max_seq_len)
    throw RangeError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  Tensor<T> x(tokens.size(), c.d_model);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= c.vocab_size)
      throw RangeError("forward: token id " + std::to_string(tokens[i]) + " out of range (vocab " +
                       std::to_string(c.vocab_size) + ")");
    for (std::size_t k = 0; k < c.d_model; ++k) x(i, k) = m.tok_emb(tokens[i], k) + m.pos_emb(i, k);
  }
  return x;
}

template <typename T>
ActivationCache<T> forward(const Model<T>& m, std::span<const TokenId> tokens,
                           const std::vector<bool>* logit_rows = nullptr) {
  return forward_embeddings(m, embed_tokens(m, tokens), std::vector<TokenId>(tokens.begin(), tokens.end()), logit_rows);
}

/// Projects an arbitrary residual-stream row through the final norm (if any)
/// and the unembedding. Used for early-exit distributions.
template <typename T>
std::vector<T> project_to_logits(const Model<T>& m, std::span<const T> resid) {
  Tensor<T> x(1, resid.size());
  std::copy(resid.begin(), resid.end(), x.data.begin());
  Tensor<T> logits;
  if (m.config.final_norm) {
    NormRecord<T> rec;
    detail::layer_norm(x, m.lnf_g, m.lnf_b, m.config.ln_epsilon, rec);
    matmul_rows(rec.out, m.unembed, nullptr, logits);
  } else {
    matmul_rows(x, m.unembed, nullptr, logits);
  }
  return logits.data;
}

}  // namespace agd
