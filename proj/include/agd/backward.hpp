#pragma once

#include <optional>
#include <vector>

#include "agd/error.hpp"
#include "agd/forward.hpp"
#include "agd/model.hpp"

namespace agd {

/// Gradients of a scalar readout with respect to intermediate activations.
template <typename T>
struct BackwardResult {
  Tensor<T> d_embed;                  // [n, d]
  std::vector<Tensor<T>> d_resid;     // n_layers + 1 entries; d_resid[0] == d_embed
  std::vector<Tensor<T>> d_z;         // per layer, gradient at the concatenated head outputs
  std::vector<Tensor<T>> d_attn_out;  // per layer, gradient at the attention sublayer output
};

namespace detail {

// Accumulates dx for y = LN(x); optionally accumulates gain/shift grads.
template <typename T>
void layer_norm_backward(const Tensor<T>& x, const NormRecord<T>& rec, const Tensor<T>& g, const Tensor<T>& dy,
                         Tensor<T>& dx, Tensor<T>* dg, Tensor<T>* db) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<T> xhat(d), dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    T mean_dxhat{0}, mean_dxhat_xhat{0};
    for (std::size_t k = 0; k < d; ++k) {
      xhat[k] = (x(i, k) - rec.mean[i]) * rec.rstd[i];
      dxhat[k] = dy(i, k) * g[k];
      mean_dxhat += dxhat[k];
      mean_dxhat_xhat += dxhat[k] * xhat[k];
      if (dg) (*dg)[k] += dy(i, k) * xhat[k];
      if (db) (*db)[k] += dy(i, k);
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    for (std::size_t k = 0; k < d; ++k)
      dx(i, k) += rec.rstd[i] * (dxhat[k] - mean_dxhat - xhat[k] * mean_dxhat_xhat);
  }
}

}  // namespace detail

/// Reverse-mode pass for an arbitrary upstream gradient on the logits.
///
/// `d_logits` is [n, vocab]. When `grads` is non-null it must be shaped like
/// the model; parameter gradients are accumulated into it.
template <typename T>
BackwardResult<T> backward(const Model<T>& m, const ActivationCache<T>& cache, const Tensor<T>& d_logits,
                           Model<T>* grads = nullptr) {
  cache.check_for(m);
  const ModelConfig& c = m.config;
  const std::size_t n = cache.seq_len(), d = c.d_model, dh = c.d_head, L = c.n_layers;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));

  BackwardResult<T> out;
  out.d_resid.resize(L + 1);
  out.d_z.resize(L);
  out.d_attn_out.resize(L);

  Tensor<T> dh_cur(n, d);
  if (c.final_norm) {
    Tensor<T> d_norm(n, d);
    matmul_rows_backward_input(d_logits, m.unembed, d_norm);
    if (grads) matmul_rows_backward_params(cache.lnf.out, d_logits, grads->unembed, nullptr);
    detail::layer_norm_backward(cache.resid_final, cache.lnf, m.lnf_g, d_norm, dh_cur,
                                grads ? &grads->lnf_g : nullptr, grads ? &grads->lnf_b : nullptr);
  } else {
    matmul_rows_backward_input(d_logits, m.unembed, dh_cur);
    if (grads) matmul_rows_backward_params(cache.resid_final, d_logits, grads->unembed, nullptr);
  }
  out.d_resid[L] = dh_cur;

  for (std::size_t li = L; li-- > 0;) {
    const auto& w = m.layers[li];
    const auto& rec = cache.layers[li];
    LayerWeights<T>* gw = grads ? &grads->layers[li] : nullptr;

    // MLP sublayer: resid_out = resid_mid + W2·act(W1·LN2(resid_mid))
    Tensor<T> d_mid = dh_cur;
    Tensor<T> d_act(n, c.d_ff);
    matmul_rows_backward_input(dh_cur, w.w2, d_act);
    if (gw) matmul_rows_backward_params(rec.ff_act, dh_cur, gw->w2, &gw->b2.data);
    for (std::size_t i = 0; i < d_act.size(); ++i) d_act[i] *= detail::activate_grad(c.activation, rec.ff_pre[i]);
    Tensor<T> d_ln2(n, d);
    matmul_rows_backward_input(d_act, w.w1, d_ln2);
    if (gw) matmul_rows_backward_params(rec.ln2.out, d_act, gw->w1, &gw->b1.data);
    detail::layer_norm_backward(rec.resid_mid, rec.ln2, w.ln2_g, d_ln2, d_mid, gw ? &gw->ln2_g : nullptr,
                                gw ? &gw->ln2_b : nullptr);

    // Attention sublayer: resid_mid = resid_in + W_O·concat_h(A^h V^h)
    out.d_attn_out[li] = d_mid;
    Tensor<T> d_in = d_mid;
    Tensor<T> d_z(n, d);
    matmul_rows_backward_input(d_mid, w.wo, d_z);
    if (gw) matmul_rows_backward_params(rec.z, d_mid, gw->wo, &gw->bo.data);
    out.d_z[li] = d_z;

    Tensor<T> dq(n, d), dk(n, d), dv(n, d);
    std::vector<T> da(n);
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      const std::size_t off = hd * dh;
      const auto& a = rec.attn[hd];
      for (std::size_t i = 0; i < n; ++i) {
        T dot_sum{0};
        for (std::size_t j = 0; j <= i; ++j) {
          T acc{0};
          for (std::size_t k = 0; k < dh; ++k) {
            acc += d_z(i, off + k) * rec.v(j, off + k);
            dv(j, off + k) += a(i, j) * d_z(i, off + k);
          }
          da[j] = acc;
          dot_sum += a(i, j) * acc;
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const T ds = a(i, j) * (da[j] - dot_sum) * scale;
          if (ds == T{0}) continue;
          for (std::size_t k = 0; k < dh; ++k) {
            dq(i, off + k) += ds * rec.k(j, off + k);
            dk(j, off + k) += ds * rec.q(i, off + k);
          }
        }
      }
    }
    Tensor<T> d_ln1(n, d);
    matmul_rows_backward_input(dq, w.wq, d_ln1);
    matmul_rows_backward_input(dk, w.wk, d_ln1);
    matmul_rows_backward_input(dv, w.wv, d_ln1);
    if (gw) {
      matmul_rows_backward_params(rec.ln1.out, dq, gw->wq, &gw->bq.data);
      matmul_rows_backward_params(rec.ln1.out, dk, gw->wk, &gw->bk.data);
      matmul_rows_backward_params(rec.ln1.out, dv, gw->wv, &gw->bv.data);
    }
    detail::layer_norm_backward(rec.resid_in, rec.ln1, w.ln1_g, d_ln1, d_in, gw ? &gw->ln1_g : nullptr,
                                gw ? &gw->ln1_b : nullptr);
    dh_cur = std::move(d_in);
    out.d_resid[li] = dh_cur;
  }

  out.d_embed = dh_cur;
  if (grads) {
    for (std::size_t i = 0; i < n; ++i) {
      const TokenId t = cache.tokens.at(i);
      for (std::size_t k = 0; k < d; ++k) {
        grads->tok_emb(t, k) += dh_cur(i, k);
        grads->pos_emb(i, k) += dh_cur(i, k);
      }
    }
  }
  return out;
}

/// Upstream gradient selecting `direction · logits[last]`.
template <typename T>
Tensor<T> last_position_readout(const ActivationCache<T>& cache, std::span<const T> direction) {
  Tensor<T> d_logits(cache.seq_len(), cache.logits.cols());
  if (direction.size() != d_logits.cols()) throw RangeError("readout direction has the wrong length");
  std::copy(direction.begin(), direction.end(), d_logits.row(cache.seq_len() - 1).begin());
  return d_logits;
}

/// d logit[last, target] / d (input embedding vectors), shape [n, d_model].
template <typename T>
Tensor<T> input_gradient(const Model<T>& m, const ActivationCache<T>& cache, TokenId target) {
  cache.check_for(m);
  if (target >= m.config.vocab_size)
    throw RangeError("input_gradient: target id " + std::to_string(target) + " out of range");
  std::vector<T> dir(m.config.vocab_size, T{0});
  dir[target] = T{1};
  return backward(m, cache, last_position_readout<T>(cache, dir)).d_embed;
}

}  // namespace agd
