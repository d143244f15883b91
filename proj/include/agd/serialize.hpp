#pragma once

/**
 * JSON forms of decode requests, step traces, decode configs and relevance heatmaps.
 */

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "agd/attribution.hpp"
#include "agd/decoding.hpp"
#include "agd/error.hpp"
#include "agd/tokenizer.hpp"
#include "json.hpp"

namespace agd {

inline nlohmann::json to_json(const RoiSpec& roi) {
  if (const auto* s = std::get_if<RoiSpec::InputSpan>(&roi.region)) {
    nlohmann::json spans = nlohmann::json::array();
    for (const auto& r : s->ranges) spans.push_back({r.begin, r.end});
    return {{"spans", spans}};
  }
  if (const auto* h = std::get_if<RoiSpec::HeadSet>(&roi.region)) {
    nlohmann::json heads = nlohmann::json::array();
    for (const auto& x : h->heads) heads.push_back({x.layer, x.head});
    return {{"heads", heads}};
  }
  return "all";
}

/// "all" | {"spans": [[b, e), ...]} (token positions) | {"heads": [[l, h], ...]}.
/// Segment-named ROIs ({"segment": name}) are resolved against `prompt`.
inline RoiSpec roi_from_json(const nlohmann::json& j, const Prompt* prompt = nullptr) {
  try {
    if (j.is_string()) {
      if (j.get<std::string>() == "all") return RoiSpec::all_inputs();
      throw DataError("unknown roi '" + j.get<std::string>() + "'");
    }
    if (j.contains("segment")) {
      if (!prompt) throw DataError("segment roi needs a prompt");
      return RoiSpec::input_span({prompt->segment(j.at("segment").get<std::string>())});
    }
    if (j.contains("spans")) {
      std::vector<PositionRange> rs;
      for (const auto& p : j.at("spans")) rs.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>()});
      return RoiSpec::input_span(std::move(rs));
    }
    if (j.contains("heads")) {
      std::vector<HeadRef> hs;
      for (const auto& p : j.at("heads")) hs.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>()});
      return RoiSpec::head_set(std::move(hs));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("roi: ") + e.what());
  }
  throw DataError("roi must be \"all\" or an object with segment, spans or heads");
}

inline nlohmann::json to_json(const DecodeConfig& c) {
  nlohmann::json j{{"method", to_string(c.method)},
                   {"max_new_tokens", c.max_new_tokens},
                   {"stop_tokens", c.stop_tokens},
                   {"p", c.nucleus_p},
                   {"seed", c.seed},
                   {"alpha", c.cad_alpha},
                   {"cad_drop_segment", c.cad_drop_segment},
                   {"contrast_layer", c.dola_contrast_layer},
                   {"beta", c.dola_beta},
                   {"attr_method", to_string(c.agd.attr_method)},
                   {"epsilon", c.agd.lrp.epsilon},
                   {"attention_rule", to_string(c.agd.lrp.attention_rule)},
                   {"roi", to_json(c.agd.roi)},
                   {"k", c.agd.k},
                   {"pi_min", c.agd.pi_min}};
  j["tau"] = c.agd.tau ? nlohmann::json(*c.agd.tau) : nlohmann::json(nullptr);
  return j;
}

/// Overlays the fields present in `j` onto `c`.
inline void apply_decode_fields(const nlohmann::json& j, DecodeConfig& c, const Prompt* prompt = nullptr) {
  try {
    if (j.contains("method")) c.method = decode_method_from_string(j.at("method").get<std::string>());
    if (j.contains("max_new_tokens")) c.max_new_tokens = j.at("max_new_tokens").get<std::size_t>();
    if (j.contains("stop_tokens")) c.stop_tokens = j.at("stop_tokens").get<std::vector<TokenId>>();
    if (j.contains("p")) c.nucleus_p = j.at("p").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("alpha")) c.cad_alpha = j.at("alpha").get<double>();
    if (j.contains("cad_drop_segment")) c.cad_drop_segment = j.at("cad_drop_segment").get<std::string>();
    if (j.contains("contrast_layer")) c.dola_contrast_layer = j.at("contrast_layer").get<std::size_t>();
    if (j.contains("beta")) c.dola_beta = j.at("beta").get<double>();
    if (j.contains("attr_method"))
      c.agd.attr_method = attribution_method_from_string(j.at("attr_method").get<std::string>());
    if (j.contains("epsilon")) c.agd.lrp.epsilon = j.at("epsilon").get<double>();
    if (j.contains("attention_rule"))
      c.agd.lrp.attention_rule = attention_rule_from_string(j.at("attention_rule").get<std::string>());
    if (j.contains("roi")) c.agd.roi = roi_from_json(j.at("roi"), prompt);
    if (j.contains("k")) c.agd.k = j.at("k").get<std::size_t>();
    if (j.contains("pi_min")) c.agd.pi_min = j.at("pi_min").get<double>();
    if (j.contains("tau")) {
      if (j.at("tau").is_null())
        c.agd.tau.reset();
      else
        c.agd.tau = j.at("tau").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("decode config: ") + e.what());
  }
}

struct DecodeRequest {
  std::string prompt_text;
  Prompt prompt;
  DecodeConfig config;
};

/// {prompt, segments: {name: [start, end)} (byte offsets), ...decode config fields}.
inline DecodeRequest decode_request_from_json(const nlohmann::json& j) {
  DecodeRequest r;
  std::map<std::string, PositionRange> segs;
  try {
    r.prompt_text = j.at("prompt").get<std::string>();
    if (j.contains("segments"))
      for (const auto& [name, v] : j.at("segments").items())
        segs[name] = {v.at(0).get<std::size_t>(), v.at(1).get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("decode request: ") + e.what());
  }
  r.prompt = Prompt::from_text(r.prompt_text, segs);
  apply_decode_fields(j, r.config, &r.prompt);
  return r;
}

inline nlohmann::json to_json(const StepTrace& t) {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : t.candidates.entries)
    cands.push_back({{"token", c.token}, {"label", Tokenizer::label(c.token)}, {"prob", c.prob}, {"logit", c.logit}});
  nlohmann::json scores = nlohmann::json::array();
  for (const auto& [tok, s] : t.scores) scores.push_back({{"token", tok}, {"score", s}});
  return {{"step", t.step},
          {"entropy", t.entropy},
          {"gated", t.gated},
          {"candidates", cands},
          {"fallback", t.candidates.fallback},
          {"scores", scores},
          {"chosen", t.chosen},
          {"chosen_label", Tokenizer::label(t.chosen)},
          {"chosen_reason", to_string(t.reason)}};
}

inline StepTrace step_trace_from_json(const nlohmann::json& j) {
  StepTrace t;
  try {
    t.step = j.at("step").get<std::size_t>();
    t.entropy = j.at("entropy").get<double>();
    t.gated = j.at("gated").get<bool>();
    for (const auto& c : j.at("candidates"))
      t.candidates.entries.push_back(
          {c.at("token").get<TokenId>(), c.at("prob").get<double>(), c.at("logit").get<double>()});
    t.candidates.fallback = j.at("fallback").get<bool>();
    for (const auto& s : j.at("scores")) t.scores.emplace_back(s.at("token").get<TokenId>(), s.at("score").get<double>());
    t.chosen = j.at("chosen").get<TokenId>();
    const auto reason = j.at("chosen_reason").get<std::string>();
    bool known = false;
    for (auto r : {ChoiceReason::greedy, ChoiceReason::attribution_argmax, ChoiceReason::sampled, ChoiceReason::contrast})
      if (to_string(r) == reason) t.reason = r, known = true;
    if (!known) throw DataError("unknown chosen_reason '" + reason + "'");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("step trace: ") + e.what());
  }
  return t;
}

/// {tokens: [label], layers: [[value per token]]}: one row per residual-stream
/// layer (row 0 = embeddings). Unless `raw`, each row is divided by its max
/// absolute value; all-zero rows stay zero.
template <typename T>
nlohmann::json heatmap_json(const AttributionMap<T>& map, const std::vector<TokenId>& tokens, bool raw = false) {
  const auto& rr = map.residual_relevance;
  if (rr.cols() != tokens.size()) throw DataError("heatmap: token count does not match the map");
  nlohmann::json labels = nlohmann::json::array();
  for (TokenId t : tokens) labels.push_back(Tokenizer::label(t));
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < rr.rows(); ++l) {
    double mx = 0.0;
    for (std::size_t i = 0; i < rr.cols(); ++i) mx = std::max(mx, std::abs(static_cast<double>(rr(l, i))));
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t i = 0; i < rr.cols(); ++i) {
      const double v = static_cast<double>(rr(l, i));
      row.push_back(raw || mx == 0.0 ? v : v / mx);
    }
    layers.push_back(row);
  }
  return {{"tokens", labels},
          {"layers", layers},
          {"target", map.target},
          {"target_label", Tokenizer::label(map.target)},
          {"method", to_string(map.method)},
          {"normalized", !raw}};
}

}  // namespace agd
