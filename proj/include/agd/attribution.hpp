#pragma once

/**
 * Signed relevance of model components for one target logit.
 *
 * Two methods share one output type:
 *   - ixg: Input x Gradient at the embeddings, residual streams and head outputs.
 *   - lrp: epsilon-LRP with transformer rules. Layernorm standard deviations are
 *     frozen, activations pass relevance through unchanged, residual sums split
 *     relevance by signed branch contribution, and A·V treats A as constant
 *     (value_path) or shares relevance with the softmax (bilinear_split).
 *     Bias shares and epsilon leakage are collected in `absorbed`, so in
 *     value_path mode  sum(input_relevance) + absorbed == target logit.
 */

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <type_traits>
#include <string>
#include <variant>
#include <vector>

#include "agd/backward.hpp"
#include "agd/error.hpp"
#include "agd/forward.hpp"
#include "agd/roi.hpp"

namespace agd {

enum class AttributionMethod { ixg, lrp };
enum class AttentionRule { value_path, bilinear_split };

inline std::string to_string(AttributionMethod m) { return m == AttributionMethod::ixg ? "ixg" : "lrp"; }
inline AttributionMethod attribution_method_from_string(const std::string& s) {
  if (s == "ixg") return AttributionMethod::ixg;
  if (s == "lrp") return AttributionMethod::lrp;
  throw DataError("unknown attribution method '" + s + "'");
}
inline std::string to_string(AttentionRule r) {
  return r == AttentionRule::value_path ? "value-path" : "bilinear-split";
}
inline AttentionRule attention_rule_from_string(const std::string& s) {
  if (s == "value-path") return AttentionRule::value_path;
  if (s == "bilinear-split") return AttentionRule::bilinear_split;
  throw DataError("unknown attention rule '" + s + "'");
}

struct LrpConfig {
  double epsilon = 1e-6;
  AttentionRule attention_rule = AttentionRule::value_path;

  void validate() const {
    if (!(epsilon > 0.0)) throw ConfigError("lrp epsilon must be > 0");
  }
};

/// One attributable component.
struct ComponentId {
  struct InputToken {
    std::size_t position;
  };
  struct AttentionHead {
    std::size_t layer, head;
  };
  struct Residual {
    std::size_t layer, position;
  };
  struct Absorbed {};
  std::variant<InputToken, AttentionHead, Residual, Absorbed> id;
};

template <typename T>
struct AttributionMap {
  TokenId target = 0;
  AttributionMethod method = AttributionMethod::lrp;
  T target_logit{0};                // readout value the map explains
  std::vector<T> input_relevance;   // [n], summed over embedding dims (signed)
  Tensor<T> head_relevance;         // [n_layers, n_heads]
  Tensor<T> residual_relevance;     // [n_layers + 1, n]; row 0 is the input embedding
  Tensor<T> attn_out_relevance;     // [n_layers, n], relevance at each attention sublayer output
  std::vector<Tensor<T>> z_relevance;  // per layer [n, d_model], per-element head-output relevance
  T absorbed{0};

  std::size_t seq_len() const { return input_relevance.size(); }

  T relevance(const ComponentId& c) const {
    return std::visit(
        [&](const auto& v) -> T {
          using V = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<V, ComponentId::InputToken>) {
            if (v.position >= seq_len()) throw RangeError("input position out of range");
            return input_relevance[v.position];
          } else if constexpr (std::is_same_v<V, ComponentId::AttentionHead>) {
            if (v.layer >= head_relevance.shape[0] || v.head >= head_relevance.shape[1])
              throw RangeError("head index out of range");
            return head_relevance(v.layer, v.head);
          } else if constexpr (std::is_same_v<V, ComponentId::Residual>) {
            if (v.layer >= residual_relevance.shape[0] || v.position >= residual_relevance.shape[1])
              throw RangeError("residual index out of range");
            return residual_relevance(v.layer, v.position);
          } else {
            return absorbed;
          }
        },
        c.id);
  }
};

namespace detail {

template <typename T>
T stabilize(T y, T eps) {
  return y >= T{0} ? y + eps : y - eps;
}

template <typename T>
T total(const Tensor<T>& t) {
  T s{0};
  for (T v : t.data) s += v;
  return s;
}

// Epsilon rule through y = x·W + b over all rows. Returns relevance on x.
template <typename T>
Tensor<T> lrp_linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& y, const Tensor<T>& r_out, T eps) {
  Tensor<T> ratio(r_out.shape);
  for (std::size_t i = 0; i < ratio.size(); ++i) ratio[i] = r_out[i] / stabilize(y[i], eps);
  Tensor<T> r_in(x.shape);
  matmul_rows_backward_input(ratio, w, r_in);
  for (std::size_t i = 0; i < r_in.size(); ++i) r_in[i] *= x[i];
  return r_in;
}

// Epsilon rule through a layernorm with its per-row std frozen.
template <typename T>
Tensor<T> lrp_layer_norm(const Tensor<T>& x, const NormRecord<T>& rec, const Tensor<T>& g, const Tensor<T>& r_out,
                         T eps) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor<T> r_in(x.shape);
  std::vector<T> gr(d);
  for (std::size_t i = 0; i < n; ++i) {
    T mean_gr{0};
    for (std::size_t k = 0; k < d; ++k) {
      gr[k] = g[k] * r_out(i, k) / stabilize(rec.out(i, k), eps);
      mean_gr += gr[k];
    }
    mean_gr /= static_cast<T>(d);
    for (std::size_t k = 0; k < d; ++k) r_in(i, k) = x(i, k) * rec.rstd[i] * (gr[k] - mean_gr);
  }
  return r_in;
}

// Splits relevance of out = a + b between the two summands.
template <typename T>
void lrp_residual(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& r_out, T eps, Tensor<T>& r_a,
                  Tensor<T>& r_b) {
  r_a = Tensor<T>(a.shape);
  r_b = Tensor<T>(b.shape);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T ratio = r_out[i] / stabilize(a[i] + b[i], eps);
    r_a[i] = a[i] * ratio;
    r_b[i] = b[i] * ratio;
  }
}

template <typename T>
std::vector<T> row_sums(const Tensor<T>& t) {
  std::vector<T> out(t.rows(), T{0});
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (T v : t.row(i)) out[i] += v;
  return out;
}

template <typename T>
void set_row(Tensor<T>& dst, std::size_t r, const std::vector<T>& values) {
  std::copy(values.begin(), values.end(), dst.row(r).begin());
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
AttributionMap<T> init_map(const Model<T>& m, const ActivationCache<T>& cache, AttributionMethod method) {
  AttributionMap<T> map;
  const std::size_t n = cache.seq_len(), L = m.config.n_layers;
  map.method = method;
  map.input_relevance.assign(n, T{0});
  map.head_relevance = Tensor<T>(L, m.config.n_heads);
  map.residual_relevance = Tensor<T>(L + 1, n);
  map.attn_out_relevance = Tensor<T>(L, n);
  map.z_relevance.resize(L);
  return map;
}

template <typename T>
void fill_head_sums(const ModelConfig& c, AttributionMap<T>& map) {
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      T s{0};
      const auto& zr = map.z_relevance[l];
      for (std::size_t i = 0; i < zr.rows(); ++i)
        for (std::size_t k = h * c.d_head; k < (h + 1) * c.d_head; ++k) s += zr(i, k);
      map.head_relevance(l, h) = s;
    }
}

template <typename T>
AttributionMap<T> attribute_ixg(const Model<T>& m, const ActivationCache<T>& cache, std::span<const T> direction) {
  const ModelConfig& c = m.config;
  const std::size_t n = cache.seq_len();
  AttributionMap<T> map = init_map(m, cache, AttributionMethod::ixg);
  const auto g = backward(m, cache, last_position_readout<T>(cache, direction));
  map.target_logit = dot<T>(cache.logits.row(n - 1), direction);
  for (std::size_t l = 0; l <= c.n_layers; ++l) {
    const auto& x = cache.residual(l);
    for (std::size_t i = 0; i < n; ++i) map.residual_relevance(l, i) = dot<T>(x.row(i), g.d_resid[l].row(i));
  }
  for (std::size_t i = 0; i < n; ++i) map.input_relevance[i] = dot<T>(cache.embed.row(i), g.d_embed.row(i));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& rec = cache.layers[l];
    map.z_relevance[l] = Tensor<T>(rec.z.shape);
    for (std::size_t i = 0; i < rec.z.size(); ++i) map.z_relevance[l][i] = rec.z[i] * g.d_z[l][i];
    for (std::size_t i = 0; i < n; ++i)
      map.attn_out_relevance(l, i) = dot<T>(rec.attn_out.row(i), g.d_attn_out[l].row(i));
  }
  fill_head_sums(c, map);
  T sum{0};
  for (T v : map.input_relevance) sum += v;
  map.absorbed = map.target_logit - sum;
  return map;
}

template <typename T>
AttributionMap<T> attribute_lrp(const Model<T>& m, const ActivationCache<T>& cache, std::span<const T> direction,
                                const LrpConfig& cfg) {
  const ModelConfig& c = m.config;
  const std::size_t n = cache.seq_len(), d = c.d_model, dh = c.d_head, L = c.n_layers;
  const T eps = static_cast<T>(cfg.epsilon);
  AttributionMap<T> map = init_map(m, cache, AttributionMethod::lrp);
  T absorbed{0};

  // Unembedding: logit = x_last · (W_U · direction), no bias.
  const Tensor<T>& x_final = c.final_norm ? cache.lnf.out : cache.resid_final;
  std::vector<T> u(d, T{0});
  for (std::size_t k = 0; k < d; ++k) u[k] = dot<T>(m.unembed.row(k), direction);
  const T logit = dot<T>(x_final.row(n - 1), u);
  map.target_logit = logit;
  Tensor<T> r_final(n, d);
  {
    const T ratio = logit / stabilize(logit, eps);
    T passed{0};
    for (std::size_t k = 0; k < d; ++k) {
      r_final(n - 1, k) = x_final(n - 1, k) * u[k] * ratio;
      passed += r_final(n - 1, k);
    }
    absorbed += logit - passed;
  }
  Tensor<T> r_h;
  if (c.final_norm) {
    r_h = lrp_layer_norm(cache.resid_final, cache.lnf, m.lnf_g, r_final, eps);
    absorbed += total(r_final) - total(r_h);
  } else {
    r_h = std::move(r_final);
  }
  set_row(map.residual_relevance, L, row_sums(r_h));

  const bool split = cfg.attention_rule == AttentionRule::bilinear_split;
  const T value_share = split ? T{0.5} : T{1};
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));

  for (std::size_t li = L; li-- > 0;) {
    const auto& w = m.layers[li];
    const auto& rec = cache.layers[li];

    // MLP sublayer.
    Tensor<T> r_mid, r_ff;
    lrp_residual(rec.resid_mid, rec.ff_out, r_h, eps, r_mid, r_ff);
    absorbed += total(r_h) - total(r_mid) - total(r_ff);
    Tensor<T> r_act = lrp_linear(rec.ff_act, w.w2, rec.ff_out, r_ff, eps);
    absorbed += total(r_ff) - total(r_act);
    // Elementwise activation: relevance passes through unchanged.
    Tensor<T> r_ln2 = lrp_linear(rec.ln2.out, w.w1, rec.ff_pre, r_act, eps);
    absorbed += total(r_act) - total(r_ln2);
    Tensor<T> r_mid_ln = lrp_layer_norm(rec.resid_mid, rec.ln2, w.ln2_g, r_ln2, eps);
    absorbed += total(r_ln2) - total(r_mid_ln);
    for (std::size_t i = 0; i < r_mid.size(); ++i) r_mid[i] += r_mid_ln[i];

    // Attention sublayer.
    Tensor<T> r_in, r_attn;
    lrp_residual(rec.resid_in, rec.attn_out, r_mid, eps, r_in, r_attn);
    absorbed += total(r_mid) - total(r_in) - total(r_attn);
    set_row(map.attn_out_relevance, li, row_sums(r_attn));
    Tensor<T> r_z = lrp_linear(rec.z, w.wo, rec.attn_out, r_attn, eps);
    absorbed += total(r_attn) - total(r_z);
    map.z_relevance[li] = r_z;

    Tensor<T> r_v(n, d), r_q(n, d), r_k(n, d);
    T r_to_softmax{0};
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      const std::size_t off = hd * dh;
      const auto& a = rec.attn[hd];
      const auto& s = rec.scores[hd];
      std::vector<T> r_a(n);
      for (std::size_t i = 0; i < n; ++i) {
        T r_a_sum{0};
        for (std::size_t j = 0; j <= i; ++j) {
          T acc{0};
          for (std::size_t k = 0; k < dh; ++k) {
            const T ratio = r_z(i, off + k) / stabilize(rec.z(i, off + k), eps);
            const T contrib = a(i, j) * rec.v(j, off + k) * ratio;
            r_v(j, off + k) += value_share * contrib;
            acc += contrib;
          }
          r_a[j] = (T{1} - value_share) * acc;
          r_a_sum += r_a[j];
        }
        if (!split) continue;
        r_to_softmax += r_a_sum;
        // Gradient x input at the softmax, then an even split of q·k.
        for (std::size_t j = 0; j <= i; ++j) {
          const T r_s = s(i, j) * (r_a[j] - a(i, j) * r_a_sum);
          const T ratio = r_s / stabilize(s(i, j), eps);
          for (std::size_t k = 0; k < dh; ++k) {
            const T contrib = rec.q(i, off + k) * rec.k(j, off + k) * scale * ratio;
            r_q(i, off + k) += T{0.5} * contrib;
            r_k(j, off + k) += T{0.5} * contrib;
          }
        }
      }
    }
    absorbed += total(r_z) - total(r_v) - r_to_softmax;
    // Softmax gradient x input does not sum to what entered the softmax.
    if (split) absorbed += r_to_softmax - total(r_q) - total(r_k);

    Tensor<T> r_ln1 = lrp_linear(rec.ln1.out, w.wv, rec.v, r_v, eps);
    absorbed += total(r_v) - total(r_ln1);
    if (split) {
      Tensor<T> from_q = lrp_linear(rec.ln1.out, w.wq, rec.q, r_q, eps);
      Tensor<T> from_k = lrp_linear(rec.ln1.out, w.wk, rec.k, r_k, eps);
      absorbed += total(r_q) - total(from_q) + total(r_k) - total(from_k);
      for (std::size_t i = 0; i < r_ln1.size(); ++i) r_ln1[i] += from_q[i] + from_k[i];
    }
    Tensor<T> r_in_ln = lrp_layer_norm(rec.resid_in, rec.ln1, w.ln1_g, r_ln1, eps);
    absorbed += total(r_ln1) - total(r_in_ln);
    for (std::size_t i = 0; i < r_in.size(); ++i) r_in[i] += r_in_ln[i];

    r_h = std::move(r_in);
    set_row(map.residual_relevance, li, row_sums(r_h));
  }

  map.input_relevance = row_sums(r_h);
  fill_head_sums(c, map);
  map.absorbed = absorbed;
  return map;
}

}  // namespace detail

/// Relevance map for `direction · logits[last]` (a general linear readout).
template <typename T>
AttributionMap<T> attribute_direction(const Model<T>& m, const ActivationCache<T>& cache,
                                      std::span<const T> direction, AttributionMethod method,
                                      const LrpConfig& lrp = {}) {
  cache.check_for(m);
  if (direction.size() != m.config.vocab_size) throw RangeError("readout direction has the wrong length");
  switch (method) {
    case AttributionMethod::ixg:
      return detail::attribute_ixg(m, cache, direction);
    case AttributionMethod::lrp:
      lrp.validate();
      return detail::attribute_lrp(m, cache, direction, lrp);
  }
  throw DataError("unknown attribution method");
}

/// Relevance map for the pre-softmax logit of `target` at the last position.
template <typename T>
AttributionMap<T> attribute(const Model<T>& m, const ActivationCache<T>& cache, TokenId target,
                            AttributionMethod method, const LrpConfig& lrp = {}) {
  cache.check_for(m);
  if (target >= m.config.vocab_size)
    throw RangeError("attribute: target id " + std::to_string(target) + " out of range");
  std::vector<T> dir(m.config.vocab_size, T{0});
  dir[target] = T{1};
  AttributionMap<T> map = attribute_direction<T>(m, cache, dir, method, lrp);
  map.target = target;
  return map;
}

/// r_h(c): relevance summed over every position and dimension of head (layer, head).
template <typename T>
T head_relevance(const AttributionMap<T>& map, std::size_t layer, std::size_t head) {
  return map.relevance({ComponentId::AttentionHead{layer, head}});
}

/// S(c, R): sum of relevance over the components selected by `roi`.
template <typename T>
T roi_score(const AttributionMap<T>& map, const RoiSpec& roi) {
  return std::visit(
      [&](const auto& r) -> T {
        using R = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<R, RoiSpec::InputSpan>) {
          std::vector<char> selected(map.seq_len(), 0);
          for (const auto& range : r.ranges) {
            if (range.begin >= range.end || range.end > map.seq_len())
              throw RangeError("roi span [" + std::to_string(range.begin) + ", " + std::to_string(range.end) +
                               ") out of range for sequence length " + std::to_string(map.seq_len()));
            for (std::size_t i = range.begin; i < range.end; ++i) selected[i] = 1;
          }
          T s{0};
          for (std::size_t i = 0; i < selected.size(); ++i)
            if (selected[i]) s += map.input_relevance[i];
          return s;
        } else if constexpr (std::is_same_v<R, RoiSpec::HeadSet>) {
          std::vector<HeadRef> heads = r.heads;
          std::sort(heads.begin(), heads.end());
          heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
          T s{0};
          for (const auto& h : heads) s += head_relevance(map, h.layer, h.head);
          return s;
        } else {
          T s{0};
          for (T v : map.input_relevance) s += v;
          return s;
        }
      },
      roi.region);
}

}  // namespace agd
