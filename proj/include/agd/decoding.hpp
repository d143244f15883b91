#pragma once

/**
 * Autoregressive decoding with attribution-guided token selection.
 *
 * Every step re-runs the full forward pass (no KV cache). AGD builds a
 * candidate set (top-k, probability floor pi_min, top-1 fallback), attributes
 * each candidate's logit back to the model and picks the candidate with the
 * largest summed relevance on the region of interest. The gated variant only
 * does this when the step entropy reaches tau and is greedy otherwise.
 */

#include <chrono>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "agd/attribution.hpp"
#include "agd/error.hpp"
#include "agd/forward.hpp"
#include "agd/roi.hpp"
#include "agd/sampling.hpp"
#include "agd/tokenizer.hpp"

namespace agd {

enum class DecodeMethod { greedy, nucleus, cad, dola, agd };
enum class ChoiceReason { greedy, attribution_argmax, sampled, contrast };

inline std::string to_string(DecodeMethod m) {
  switch (m) {
    case DecodeMethod::greedy: return "greedy";
    case DecodeMethod::nucleus: return "nucleus";
    case DecodeMethod::cad: return "cad";
    case DecodeMethod::dola: return "dola";
    case DecodeMethod::agd: return "agd";
  }
  return "?";
}
inline DecodeMethod decode_method_from_string(const std::string& s) {
  for (auto m : {DecodeMethod::greedy, DecodeMethod::nucleus, DecodeMethod::cad, DecodeMethod::dola, DecodeMethod::agd})
    if (to_string(m) == s) return m;
  throw DataError("unknown decoding method '" + s + "'");
}
inline std::string to_string(ChoiceReason r) {
  switch (r) {
    case ChoiceReason::greedy: return "greedy";
    case ChoiceReason::attribution_argmax: return "attribution-argmax";
    case ChoiceReason::sampled: return "sampled";
    case ChoiceReason::contrast: return "contrast";
  }
  return "?";
}

/// Token ids plus named segment spans (token positions).
struct Prompt {
  std::vector<TokenId> tokens;
  std::map<std::string, PositionRange> segments;

  /// BOS + bytes; byte-offset segments shift by one for the BOS.
  static Prompt from_text(const std::string& text, const std::map<std::string, PositionRange>& byte_segments = {}) {
    Prompt p;
    p.tokens = Tokenizer::encode_prompt(text);
    for (const auto& [name, r] : byte_segments) {
      if (r.begin > r.end || r.end > text.size())
        throw DataError("segment '" + name + "' [" + std::to_string(r.begin) + ", " + std::to_string(r.end) +
                        ") lies outside the prompt");
      p.segments[name] = {r.begin + 1, r.end + 1};
    }
    return p;
  }

  const PositionRange& segment(const std::string& name) const {
    auto it = segments.find(name);
    if (it == segments.end()) throw DataError("prompt has no '" + name + "' segment");
    return it->second;
  }

  /// Copy of the prompt with one segment removed (the CAD context-free input).
  std::vector<TokenId> without(const std::string& name) const {
    const auto& r = segment(name);
    std::vector<TokenId> out(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(r.begin));
    out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(r.end), tokens.end());
    return out;
  }
};

struct AgdParams {
  AttributionMethod attr_method = AttributionMethod::lrp;
  LrpConfig lrp;
  RoiSpec roi = RoiSpec::all_inputs();
  std::size_t k = 5;
  double pi_min = 0.05;
  std::optional<double> tau;  // entropy gate in nats; absent = always guided
};

struct DecodeConfig {
  DecodeMethod method = DecodeMethod::greedy;
  double nucleus_p = 0.95;
  std::uint64_t seed = 0;
  double cad_alpha = 1.0;
  std::string cad_drop_segment = "instruction";
  std::size_t dola_contrast_layer = 0;
  double dola_beta = 0.1;
  AgdParams agd;
  std::size_t max_new_tokens = 64;
  std::vector<TokenId> stop_tokens;

  void validate(const ModelConfig& mc) const {
    if (!(nucleus_p > 0.0 && nucleus_p <= 1.0)) throw ConfigError("nucleus p must lie in (0, 1]");
    if (!(cad_alpha >= 0.0)) throw ConfigError("cad alpha must be >= 0");
    if (agd.k < 1) throw ConfigError("agd k must be >= 1");
    if (!(agd.pi_min >= 0.0 && agd.pi_min < 1.0)) throw ConfigError("agd pi_min must lie in [0, 1)");
    if (agd.tau && !(*agd.tau >= 0.0)) throw ConfigError("agd tau must be >= 0");
    if (!(dola_beta >= 0.0 && dola_beta <= 1.0)) throw ConfigError("dola beta must lie in [0, 1]");
    if (method == DecodeMethod::dola && dola_contrast_layer >= mc.n_layers)
      throw ConfigError("dola contrast layer " + std::to_string(dola_contrast_layer) + " must be < n_layers (" +
                        std::to_string(mc.n_layers) + ")");
    if (method == DecodeMethod::agd) agd.lrp.validate();
  }
};

struct StepTrace {
  std::size_t step = 0;
  double entropy = 0.0;
  bool gated = false;  // attribution pass executed
  CandidateSet candidates;
  std::vector<std::pair<TokenId, double>> scores;  // S(c, R) per candidate, when gated
  TokenId chosen = 0;
  ChoiceReason reason = ChoiceReason::greedy;
};

struct DecodeResult {
  std::vector<TokenId> tokens;  // generated tokens only
  std::string text;
  std::vector<StepTrace> trace;
  double gated_fraction = 0.0;
  double wall_seconds = 0.0;
};

/// Throws RangeError unless `roi` fits a sequence of `seq_len` tokens on `mc`.
inline void validate_roi(const RoiSpec& roi, std::size_t seq_len, const ModelConfig& mc) {
  if (const auto* s = std::get_if<RoiSpec::InputSpan>(&roi.region)) {
    for (const auto& r : s->ranges)
      if (r.begin >= r.end || r.end > seq_len)
        throw RangeError("roi span [" + std::to_string(r.begin) + ", " + std::to_string(r.end) +
                         ") is empty or exceeds the prompt length " + std::to_string(seq_len));
  } else if (const auto* h = std::get_if<RoiSpec::HeadSet>(&roi.region)) {
    for (const auto& ref : h->heads)
      if (ref.layer >= mc.n_layers || ref.head >= mc.n_heads)
        throw RangeError("roi head (" + std::to_string(ref.layer) + ", " + std::to_string(ref.head) +
                         ") is outside the model");
  }
}

/// Picks the candidate with the largest score; ties go to the higher model
/// probability, then the lower token id. `scores[i]` belongs to `set.entries[i]`.
inline TokenId choose_by_attribution(const CandidateSet& set, std::span<const double> scores) {
  if (set.entries.empty() || scores.size() != set.entries.size())
    throw DataError("choose_by_attribution: scores must match the candidate set");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const auto& a = set.entries[i];
    const auto& b = set.entries[best];
    if (scores[i] > scores[best] ||
        (scores[i] == scores[best] && (a.prob > b.prob || (a.prob == b.prob && a.token < b.token))))
      best = i;
  }
  return set.entries[best].token;
}

namespace detail {

template <typename T>
std::pair<TokenId, StepTrace> agd_select_cached(const Model<T>& m, const ActivationCache<T>& cache,
                                                const std::vector<double>& probs, const AgdParams& p) {
  StepTrace tr;
  const auto logits = cache.last_logits();
  const std::vector<double> logits_d(logits.begin(), logits.end());
  tr.entropy = shannon_entropy(probs);
  tr.candidates = select_candidates(probs, p.k, p.pi_min, logits_d);
  tr.gated = true;
  std::vector<double> scores;
  for (const auto& c : tr.candidates.entries) {
    const auto map = attribute(m, cache, c.token, p.attr_method, p.lrp);
    const double s = static_cast<double>(roi_score(map, p.roi));
    scores.push_back(s);
    tr.scores.emplace_back(c.token, s);
  }
  tr.chosen = choose_by_attribution(tr.candidates, scores);
  tr.reason = ChoiceReason::attribution_argmax;
  return {tr.chosen, tr};
}

template <typename T>
std::pair<TokenId, StepTrace> gated_step_cached(const Model<T>& m, const ActivationCache<T>& cache,
                                                const AgdParams& p) {
  const auto logits = cache.last_logits();
  const auto probs = softmax<T>(logits);
  const double h = shannon_entropy(probs);
  if (p.tau && h < *p.tau) {
    StepTrace tr;
    tr.entropy = h;
    const std::vector<double> logits_d(logits.begin(), logits.end());
    tr.candidates = select_candidates(probs, p.k, p.pi_min, logits_d);
    tr.gated = false;
    tr.chosen = argmax_token(probs);
    tr.reason = ChoiceReason::greedy;
    return {tr.chosen, tr};
  }
  return agd_select_cached(m, cache, probs, p);
}

}  // namespace detail

/// One AGD step on `tokens`: argmax over candidates of S(c, roi).
template <typename T>
std::pair<TokenId, StepTrace> agd_select(const Model<T>& m, std::span<const TokenId> tokens, const AgdParams& p) {
  validate_roi(p.roi, tokens.size(), m.config);
  const auto cache = forward(m, tokens);
  return detail::agd_select_cached(m, cache, softmax<T>(cache.last_logits()), p);
}

/// Entropy-gated step: greedy when H(p) < tau, otherwise agd_select.
template <typename T>
std::pair<TokenId, StepTrace> gated_step(const Model<T>& m, std::span<const TokenId> tokens, const AgdParams& p) {
  if (!p.tau) throw ConfigError("gated_step requires tau");
  validate_roi(p.roi, tokens.size(), m.config);
  const auto cache = forward(m, tokens);
  return detail::gated_step_cached(m, cache, p);
}

/// Runs the configured decoder until a stop token, EOS or max_new_tokens.
/// Stop tokens are emitted (and traced) before stopping.
template <typename T>
DecodeResult decode(const Model<T>& m, const Prompt& prompt, const DecodeConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate(m.config);
  const ModelConfig& mc = m.config;
  if (prompt.tokens.empty()) throw DataError("decode: empty prompt");
  if (prompt.tokens.size() + cfg.max_new_tokens > mc.max_seq_len)
    throw RangeError("decode: prompt of " + std::to_string(prompt.tokens.size()) + " tokens plus " +
                     std::to_string(cfg.max_new_tokens) + " new tokens overflows the context of " +
                     std::to_string(mc.max_seq_len));
  if (cfg.method == DecodeMethod::agd) validate_roi(cfg.agd.roi, prompt.tokens.size(), mc);

  std::vector<TokenId> seq = prompt.tokens;
  std::vector<TokenId> cf_seq;
  if (cfg.method == DecodeMethod::cad) cf_seq = prompt.without(cfg.cad_drop_segment);
  std::mt19937_64 rng(cfg.seed);

  DecodeResult res;
  std::size_t gated = 0;
  for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
    const auto cache = forward(m, seq);
    const auto logits = cache.last_logits();
    const auto probs = softmax<T>(logits);
    TokenId next = 0;
    StepTrace tr;
    switch (cfg.method) {
      case DecodeMethod::greedy:
        tr.entropy = shannon_entropy(probs);
        next = argmax_token(probs);
        tr.reason = ChoiceReason::greedy;
        break;
      case DecodeMethod::nucleus: {
        tr.entropy = shannon_entropy(probs);
        const auto filtered = nucleus_filter(probs, cfg.nucleus_p);
        next = sample_token(filtered, rng);
        tr.reason = ChoiceReason::sampled;
        break;
      }
      case DecodeMethod::cad: {
        tr.entropy = shannon_entropy(probs);
        const auto cf_cache = forward(m, cf_seq);
        const auto adjusted = cad_logits<T>(logits, cf_cache.last_logits(), cfg.cad_alpha);
        next = argmax_token(softmax<double>(adjusted));
        tr.reason = ChoiceReason::contrast;
        break;
      }
      case DecodeMethod::dola: {
        tr.entropy = shannon_entropy(probs);
        const auto final_lp = log_softmax<T>(logits);
        const auto& early_resid = cache.residual(cfg.dola_contrast_layer);
        const auto early_logits = project_to_logits<T>(m, early_resid.row(seq.size() - 1));
        const auto early_lp = log_softmax<T>(early_logits);
        next = argmax_with_tiebreak(dola_logits(final_lp, early_lp, cfg.dola_beta), probs);
        tr.reason = ChoiceReason::contrast;
        break;
      }
      case DecodeMethod::agd: {
        auto [tok, t] = cfg.agd.tau ? detail::gated_step_cached(m, cache, cfg.agd)
                                    : detail::agd_select_cached(m, cache, probs, cfg.agd);
        next = tok;
        tr = std::move(t);
        break;
      }
    }
    tr.step = step;
    tr.chosen = next;
    gated += tr.gated ? 1 : 0;
    res.trace.push_back(std::move(tr));
    res.tokens.push_back(next);
    seq.push_back(next);
    if (cfg.method == DecodeMethod::cad) cf_seq.push_back(next);
    const bool stop = next == Tokenizer::kEos ||
                      std::find(cfg.stop_tokens.begin(), cfg.stop_tokens.end(), next) != cfg.stop_tokens.end();
    if (stop) break;
  }
  res.text = Tokenizer::decode(res.tokens);
  res.gated_fraction = res.trace.empty() ? 0.0 : static_cast<double>(gated) / static_cast<double>(res.trace.size());
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace agd
