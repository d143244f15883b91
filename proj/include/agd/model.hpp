#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "agd/config.hpp"
#include "agd/error.hpp"
#include "agd/tensor.hpp"

namespace agd {

template <typename T>
struct LayerWeights {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // w*: [d_model, d_model], b*: [d_model]
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> w1, b1;  // [d_model, d_ff], [d_ff]
  Tensor<T> w2, b2;  // [d_ff, d_model], [d_model]
};

/// Weights of a pre-LN GPT-style decoder. Linear maps are stored [in, out]
/// and applied as y = x·W + b. Embeddings are untied from the unembedding.
template <typename T>
struct Model {
  ModelConfig config;
  Tensor<T> tok_emb;  // [vocab, d_model]
  Tensor<T> pos_emb;  // [max_seq_len, d_model]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> lnf_g, lnf_b;  // empty when !config.final_norm
  Tensor<T> unembed;       // [d_model, vocab]

  /// Zero-filled weights with every shape matching `cfg`.
  static Model zeros(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model, f = cfg.d_ff;
    Model m;
    m.config = cfg;
    m.tok_emb = Tensor<T>(cfg.vocab_size, d);
    m.pos_emb = Tensor<T>(cfg.max_seq_len, d);
    m.layers.resize(cfg.n_layers);
    for (auto& l : m.layers) {
      l.ln1_g = Tensor<T>(std::vector<std::size_t>{d});
      l.ln1_b = Tensor<T>({d});
      l.wq = Tensor<T>(d, d), l.wk = Tensor<T>(d, d), l.wv = Tensor<T>(d, d), l.wo = Tensor<T>(d, d);
      l.bq = Tensor<T>({d}), l.bk = Tensor<T>({d}), l.bv = Tensor<T>({d}), l.bo = Tensor<T>({d});
      l.ln2_g = Tensor<T>(std::vector<std::size_t>{d});
      l.ln2_b = Tensor<T>({d});
      l.w1 = Tensor<T>(d, f), l.b1 = Tensor<T>({f});
      l.w2 = Tensor<T>(f, d), l.b2 = Tensor<T>({d});
    }
    if (cfg.final_norm) {
      m.lnf_g = Tensor<T>(std::vector<std::size_t>{d});
      m.lnf_b = Tensor<T>({d});
    }
    m.unembed = Tensor<T>(d, cfg.vocab_size);
    return m;
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> out = Model<U>::zeros(config);
    std::vector<Tensor<U>*> dst;
    out.for_each_tensor([&](const std::string&, Tensor<U>& t) { dst.push_back(&t); });
    std::size_t i = 0;
    for_each_tensor([&](const std::string&, const Tensor<T>& t) { *dst[i++] = t.template cast<U>(); });
    return out;
  }

  bool operator==(const Model&) const = default;

  // Visits every tensor in canonical (file) order.
  template <typename F>
  void for_each_tensor(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& m, F&& f) {
    f("tok_emb", m.tok_emb);
    f("pos_emb", m.pos_emb);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      auto& l = m.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "ln1.g", l.ln1_g);
      f(p + "ln1.b", l.ln1_b);
      f(p + "attn.wq", l.wq);
      f(p + "attn.bq", l.bq);
      f(p + "attn.wk", l.wk);
      f(p + "attn.bk", l.bk);
      f(p + "attn.wv", l.wv);
      f(p + "attn.bv", l.bv);
      f(p + "attn.wo", l.wo);
      f(p + "attn.bo", l.bo);
      f(p + "ln2.g", l.ln2_g);
      f(p + "ln2.b", l.ln2_b);
      f(p + "mlp.w1", l.w1);
      f(p + "mlp.b1", l.b1);
      f(p + "mlp.w2", l.w2);
      f(p + "mlp.b2", l.b2);
    }
    if (m.config.final_norm) {
      f("lnf.g", m.lnf_g);
      f("lnf.b", m.lnf_b);
    }
    f("unembed", m.unembed);
  }
};

/// Expected (name, shape) list in canonical order.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>> tensor_layout(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  Model<float>::zeros(cfg).for_each_tensor(
      [&](const std::string& name, const Tensor<float>& t) { out.emplace_back(name, t.shape); });
  return out;
}

struct InitOptions {
  double weight_std = 0.02;
  double embed_std = 0.1;
  double bias_std = 0.0;  // non-zero biases are used by attribution tests
  double ln_jitter = 0.0; // perturbs layernorm gain/shift around (1, 0)
};

/// Deterministic random initialisation from `seed`.
template <typename T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed, const InitOptions& opt = {}) {
  Model<T> m = Model<T>::zeros(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Tensor<T>& t, double std, double mean = 0.0) {
    for (auto& v : t.data) v = static_cast<T>(mean + std * normal(rng));
  };
  m.for_each_tensor([&](const std::string& name, Tensor<T>& t) {
    const bool is_ln = name.find("ln") != std::string::npos;
    const bool gain = is_ln && name.back() == 'g';
    if (name == "tok_emb" || name == "pos_emb") {
      fill(t, opt.embed_std);
    } else if (is_ln) {
      if (opt.ln_jitter > 0)
        fill(t, opt.ln_jitter, gain ? 1.0 : 0.0);
      else if (gain)
        std::fill(t.data.begin(), t.data.end(), T{1});
    } else if (t.shape.size() == 1) {
      if (opt.bias_std > 0) fill(t, opt.bias_std);
    } else {
      fill(t, opt.weight_std);
    }
  });
  return m;
}

/// Calls f(name, a_tensor, b_tensor) over two models of identical config.
template <typename T, typename F>
void zip_tensors(Model<T>& a, const Model<T>& b, F&& f) {
  std::vector<const Tensor<T>*> bs;
  b.for_each_tensor([&](const std::string&, const Tensor<T>& t) { bs.push_back(&t); });
  std::size_t i = 0;
  a.for_each_tensor([&](const std::string& name, Tensor<T>& t) { f(name, t, *bs[i++]); });
}

template <typename T>
bool all_finite(const Model<T>& m) {
  bool ok = true;
  m.for_each_tensor([&](const std::string&, const Tensor<T>& t) {
    for (T v : t.data) ok = ok && std::isfinite(static_cast<double>(v));
  });
  return ok;
}

}  // namespace agd
