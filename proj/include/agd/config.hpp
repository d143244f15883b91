#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "json.hpp"

#include "agd/error.hpp"

namespace agd {

enum class Activation { gelu, relu };

inline std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + s + "'");
}

/// Shape and hyper-parameters of a pre-layernorm decoder-only transformer.
///
/// `final_norm = false` drops the final layernorm; with `n_layers = 0` the
/// model is then a pure linear map embedding -> unembedding.
struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 32;
  std::size_t d_head = 8;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 260;
  std::size_t max_seq_len = 64;
  double ln_epsilon = 1e-5;
  Activation activation = Activation::gelu;
  bool final_norm = true;

  bool operator==(const ModelConfig&) const = default;

  /// Throws ConfigError on the first violated invariant.
  void validate() const {
    if (n_heads < 1 || d_model < 1 || d_head < 1 || d_ff < 1 || max_seq_len < 1)
      throw ConfigError("model config: all counts must be >= 1");
    if (vocab_size < 2) throw ConfigError("model config: vocab_size must be >= 2");
    if (d_model != n_heads * d_head)
      throw ConfigError("model config: d_model (" + std::to_string(d_model) + ") != n_heads (" +
                        std::to_string(n_heads) + ") * d_head (" + std::to_string(d_head) + ")");
    if (!(ln_epsilon > 0.0) || !std::isfinite(ln_epsilon))
      throw ConfigError("model config: ln_epsilon must be a positive finite number");
  }
};

inline void to_json(nlohmann::ordered_json& j, const ModelConfig& c) {
  j = nlohmann::ordered_json{{"n_layers", c.n_layers},       {"n_heads", c.n_heads},
                             {"d_model", c.d_model},         {"d_head", c.d_head},
                             {"d_ff", c.d_ff},               {"vocab_size", c.vocab_size},
                             {"max_seq_len", c.max_seq_len}, {"ln_epsilon", c.ln_epsilon},
                             {"activation", to_string(c.activation)}, {"final_norm", c.final_norm}};
}

/// Parses and validates. Missing `d_head` is derived from d_model / n_heads.
template <typename Json>
ModelConfig config_from_json(const Json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").template get<std::size_t>();
    c.n_heads = j.at("n_heads").template get<std::size_t>();
    c.d_model = j.at("d_model").template get<std::size_t>();
    c.d_head = j.contains("d_head") ? j.at("d_head").template get<std::size_t>()
                                    : (c.n_heads ? c.d_model / c.n_heads : 0);
    c.d_ff = j.at("d_ff").template get<std::size_t>();
    c.vocab_size = j.at("vocab_size").template get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").template get<std::size_t>();
    c.ln_epsilon = j.value("ln_epsilon", 1e-5);
    c.activation = activation_from_string(j.value("activation", std::string("gelu")));
    c.final_norm = j.value("final_norm", true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace agd
