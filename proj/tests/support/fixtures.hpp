#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "agd/model.hpp"
#include "agd/tokenizer.hpp"

namespace agd::testing {

inline ModelConfig small_config(std::size_t layers = 2, std::size_t heads = 2, std::size_t d = 8,
                                std::size_t vocab = 260) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d;
  c.d_head = d / heads;
  c.d_ff = 2 * d;
  c.vocab_size = vocab;
  c.max_seq_len = 32;
  return c;
}

/// Random model with non-trivial biases and layernorm parameters.
template <typename T>
Model<T> random_model(const ModelConfig& c, std::uint64_t seed, double weight_std = 0.3) {
  InitOptions o;
  o.weight_std = weight_std;
  o.embed_std = 1.0;
  o.bias_std = 0.1;
  o.ln_jitter = 0.2;
  return init_model<T>(c, seed, o);
}

inline std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<TokenId> dist(0, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> t(n);
  for (auto& x : t) x = dist(rng);
  return t;
}

/// ||a - b|| / max(||b||, tiny)
template <typename A, typename B>
double rel_l2(const A& a, const B& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (double(a[i]) - double(b[i])) * (double(a[i]) - double(b[i]));
    den += double(b[i]) * double(b[i]);
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace agd::testing
