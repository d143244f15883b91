#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "agd/error.hpp"
#include "agd/tokenizer.hpp"

namespace agd {

struct Candidate {
  TokenId token = 0;
  double prob = 0.0;
  double logit = 0.0;
  bool operator==(const Candidate&) const = default;
};

/// Ordered by descending probability, ties by ascending token id.
struct CandidateSet {
  std::vector<Candidate> entries;
  bool fallback = false;  // true when the probability floor removed everything

  std::size_t size() const { return entries.size(); }
  bool contains(TokenId t) const {
    return std::any_of(entries.begin(), entries.end(), [&](const Candidate& c) { return c.token == t; });
  }
};

/// Softmax in double precision regardless of the logit type.
template <typename T>
std::vector<double> softmax(std::span<const T> logits) {
  std::vector<double> p(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (T l : logits) mx = std::max(mx, static_cast<double>(l));
  double sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += (p[i] = std::exp(static_cast<double>(logits[i]) - mx));
  for (auto& v : p) v /= sum;
  return p;
}

template <typename T>
std::vector<double> log_softmax(std::span<const T> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (T l : logits) mx = std::max(mx, static_cast<double>(l));
  double sum = 0;
  for (T l : logits) sum += std::exp(static_cast<double>(l) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

inline void validate_distribution(std::span<const double> probs, double tol = 1e-6) {
  if (probs.empty()) throw DistributionError("empty distribution");
  double sum = 0;
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0) throw DistributionError("distribution has a negative or non-finite entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > tol)
    throw DistributionError("distribution sums to " + std::to_string(sum) + ", not 1");
}

/// Token indices sorted by descending probability, ties by ascending id.
inline std::vector<TokenId> rank_tokens(std::span<const double> probs, std::size_t top) {
  std::vector<TokenId> idx(probs.size());
  std::iota(idx.begin(), idx.end(), TokenId{0});
  top = std::min(top, idx.size());
  auto before = [&](TokenId a, TokenId b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top), idx.end(), before);
  idx.resize(top);
  return idx;
}

/// Highest-probability token, lowest id on ties.
inline TokenId argmax_token(std::span<const double> probs) { return rank_tokens(probs, 1).front(); }

/// Top-k by probability, then drop entries below `pi_min`. If nothing
/// survives, the single most probable token is returned.
///
/// `logits` is optional; without it each entry's logit is its log-probability.
inline CandidateSet select_candidates(std::span<const double> probs, std::size_t k, double pi_min,
                                      std::span<const double> logits = {}) {
  validate_distribution(probs);
  if (k < 1) throw ConfigError("candidate set size k must be >= 1");
  if (!(pi_min >= 0.0 && pi_min < 1.0)) throw ConfigError("pi_min must lie in [0, 1)");
  if (!logits.empty() && logits.size() != probs.size()) throw DataError("logits and probs differ in length");
  CandidateSet set;
  const auto ranked = rank_tokens(probs, k);
  auto entry = [&](TokenId t) {
    return Candidate{t, probs[t], logits.empty() ? std::log(probs[t]) : logits[t]};
  };
  for (TokenId t : ranked)
    if (probs[t] >= pi_min) set.entries.push_back(entry(t));
  if (set.entries.empty()) {
    set.entries.push_back(entry(ranked.front()));
    set.fallback = true;
  }
  return set;
}

/// H(p) = -Σ p ln p in nats, with 0 ln 0 = 0.
inline double shannon_entropy(std::span<const double> probs) {
  validate_distribution(probs);
  double h = 0;
  for (double p : probs)
    if (p > 0) h -= p * std::log(p);
  return std::max(h, 0.0);
}

/// Smallest top set (by descending probability) whose mass reaches `p`,
/// renormalised. Returned as a full-length vector with zeros outside the set.
inline std::vector<double> nucleus_filter(std::span<const double> probs, double p) {
  validate_distribution(probs);
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("nucleus p must lie in (0, 1]");
  const auto ranked = rank_tokens(probs, probs.size());
  std::vector<double> out(probs.size(), 0.0);
  double mass = 0;
  std::size_t keep = 0;
  while (keep < ranked.size()) {
    mass += probs[ranked[keep++]];
    if (mass >= p) break;
  }
  double kept = 0;
  for (std::size_t i = 0; i < keep; ++i) kept += probs[ranked[i]];
  for (std::size_t i = 0; i < keep; ++i) out[ranked[i]] = probs[ranked[i]] / kept;
  return out;
}

/// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Inverse-CDF draw over tokens in ascending rank order.
inline TokenId sample_token(std::span<const double> probs, std::mt19937_64& rng) {
  const auto ranked = rank_tokens(probs, probs.size());
  const double u = unit_uniform(rng);
  double cum = 0;
  TokenId last = ranked.front();
  for (TokenId t : ranked) {
    if (probs[t] <= 0) break;
    last = t;
    cum += probs[t];
    if (u < cum) return t;
  }
  return last;
}

/// Context-aware decoding: (1 + α)·full − α·context_free, elementwise.
template <typename T>
std::vector<double> cad_logits(std::span<const T> full, std::span<const T> context_free, double alpha) {
  if (full.size() != context_free.size()) throw DataError("cad: logit vectors differ in length");
  if (!(alpha >= 0.0)) throw ConfigError("cad: alpha must be >= 0");
  std::vector<double> out(full.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (1.0 + alpha) * static_cast<double>(full[i]) - alpha * static_cast<double>(context_free[i]);
  return out;
}

/// DoLA contrast: log p_final − log p_early on the plausible set
/// {y : p_final(y) >= β·max p_final}, −inf elsewhere.
inline std::vector<double> dola_logits(std::span<const double> final_logprobs, std::span<const double> early_logprobs,
                                       double beta) {
  if (final_logprobs.size() != early_logprobs.size()) throw DataError("dola: distributions differ in length");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("dola: plausibility beta must lie in [0, 1]");
  const double max_lp = *std::max_element(final_logprobs.begin(), final_logprobs.end());
  const double cutoff = beta > 0 ? max_lp + std::log(beta) : -std::numeric_limits<double>::infinity();
  std::vector<double> out(final_logprobs.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (final_logprobs[i] >= cutoff) out[i] = final_logprobs[i] - early_logprobs[i];
  return out;
}

/// Highest score; ties go to the higher probability, then the lower id.
inline TokenId argmax_with_tiebreak(std::span<const double> scores, std::span<const double> probs) {
  TokenId best = 0;
  for (TokenId t = 1; t < scores.size(); ++t) {
    if (scores[t] > scores[best] || (scores[t] == scores[best] && probs[t] > probs[best])) best = t;
  }
  return best;
}

}  // namespace agd
