#pragma once

/**
 * In-context vs parametric head extraction from counterfactual samples.
 *
 * For each head h: D(h) = mean over samples of r_h(c_cf) on the open-book
 * prompt minus mean of r_h(c_gold) on the closed-book prompt. The n heads
 * with the largest D form the in-context set, the n smallest the parametric set.
 */

#include <algorithm>
#include <istream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "agd/attribution.hpp"
#include "agd/error.hpp"
#include "agd/forward.hpp"
#include "agd/parallel.hpp"
#include "agd/prompts.hpp"
#include "agd/roi.hpp"
#include "agd/tokenizer.hpp"

namespace agd {

struct CounterfactualSample {
  std::string question;
  std::string counterfactual_context;
  std::vector<TokenId> c_cf;
  std::vector<TokenId> c_gold;

  void validate() const {
    if (counterfactual_context.empty()) throw DataError("counterfactual sample has an empty context");
    if (c_cf.empty() || c_gold.empty()) throw DataError("counterfactual sample has an empty target");
  }
};

/// One JSON object with string fields question, counterfactual_context, c_cf, c_gold.
inline CounterfactualSample counterfactual_from_json(const nlohmann::json& j) {
  CounterfactualSample s;
  try {
    s.question = j.at("question").get<std::string>();
    s.counterfactual_context = j.at("counterfactual_context").get<std::string>();
    s.c_cf = Tokenizer::encode(j.at("c_cf").get<std::string>());
    s.c_gold = Tokenizer::encode(j.at("c_gold").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("counterfactual sample: ") + e.what());
  }
  s.validate();
  return s;
}

inline nlohmann::json to_json(const CounterfactualSample& s) {
  return {{"question", s.question},
          {"counterfactual_context", s.counterfactual_context},
          {"c_cf", Tokenizer::decode(s.c_cf)},
          {"c_gold", Tokenizer::decode(s.c_gold)}};
}

inline std::vector<CounterfactualSample> read_counterfactual_jsonl(std::istream& in) {
  std::vector<CounterfactualSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(counterfactual_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

struct HeadScore {
  HeadRef head;
  double d_value = 0.0;
};

struct HeadSets {
  std::vector<HeadRef> ctx_heads;
  std::vector<HeadRef> param_heads;
  std::size_t n = 0;
};

struct HeadScoringOptions {
  AttributionMethod method = AttributionMethod::lrp;
  LrpConfig lrp;
  bool mean_over_tokens = false;  // average r_h over every target token (teacher forced)
  std::string system = kSystemPreamble;
  std::size_t jobs = 1;
};

/// r_h for `target` continuing `prompt`, as a flat [layer * n_heads + head] vector.
/// With mean_over_tokens the target is teacher-forced and r_h averaged over its tokens.
template <typename T>
std::vector<double> target_head_relevance(const Model<T>& m, const std::vector<TokenId>& prompt,
                                          const std::vector<TokenId>& target, const HeadScoringOptions& o) {
  const std::size_t L = m.config.n_layers, H = m.config.n_heads;
  std::vector<double> acc(L * H, 0.0);
  const std::size_t steps = o.mean_over_tokens ? target.size() : 1;
  std::vector<TokenId> seq = prompt;
  for (std::size_t j = 0; j < steps; ++j) {
    const auto cache = forward(m, seq);
    const auto map = attribute(m, cache, target[j], o.method, o.lrp);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < H; ++h) acc[l * H + h] += static_cast<double>(map.head_relevance(l, h));
    seq.push_back(target[j]);
  }
  for (auto& v : acc) v /= static_cast<double>(steps);
  return acc;
}

/// D from per-sample relevances: mean(ob) − mean(cb), summed in sample order.
inline std::vector<HeadScore> difference_scores(const std::vector<std::vector<double>>& ob,
                                                const std::vector<std::vector<double>>& cb, std::size_t n_heads) {
  if (ob.empty() || cb.empty()) throw DataError("difference_scores: no samples");
  const std::size_t width = ob.front().size();
  if (n_heads == 0 || width % n_heads != 0) throw DataError("difference_scores: bad head count");
  auto mean = [&](const std::vector<std::vector<double>>& rows) {
    std::vector<double> s(width, 0.0);
    for (const auto& r : rows) {
      if (r.size() != width) throw DataError("difference_scores: ragged relevance rows");
      for (std::size_t i = 0; i < width; ++i) s[i] += r[i];
    }
    for (auto& v : s) v /= static_cast<double>(rows.size());
    return s;
  };
  const auto mo = mean(ob), mc = mean(cb);
  std::vector<HeadScore> out;
  for (std::size_t i = 0; i < width; ++i) out.push_back({{i / n_heads, i % n_heads}, mo[i] - mc[i]});
  return out;
}

/// D for every (layer, head), in (layer, head) order.
template <typename T>
std::vector<HeadScore> head_difference_scores(const Model<T>& m, const std::vector<CounterfactualSample>& samples,
                                              const HeadScoringOptions& o = {}) {
  if (samples.empty()) throw DataError("head_difference_scores: empty sample list");
  if (o.method == AttributionMethod::lrp) o.lrp.validate();
  std::vector<std::vector<double>> ob(samples.size()), cb(samples.size());
  parallel_for(samples.size(), o.jobs, [&](std::size_t i) {
    const auto& s = samples[i];
    s.validate();
    const auto ob_prompt = Tokenizer::encode_prompt(render_open_book(s.question, s.counterfactual_context, o.system).text);
    const auto cb_prompt = Tokenizer::encode_prompt(render_closed_book(s.question, o.system).text);
    ob[i] = target_head_relevance(m, ob_prompt, s.c_cf, o);
    cb[i] = target_head_relevance(m, cb_prompt, s.c_gold, o);
  });
  return difference_scores(ob, cb, m.config.n_heads);
}

/// ctx = n largest D, param = n smallest D among the remaining heads;
/// ties broken by (layer, head) ascending.
inline HeadSets extract_head_sets(const std::vector<HeadScore>& scores, std::size_t n) {
  if (n < 1) throw ConfigError("extract_head_sets: n must be >= 1");
  if (2 * n > scores.size())
    throw ConfigError("extract_head_sets: n = " + std::to_string(n) + " exceeds half of the " +
                      std::to_string(scores.size()) + " heads");
  std::vector<HeadScore> s = scores;
  std::sort(s.begin(), s.end(), [](const HeadScore& a, const HeadScore& b) {
    return a.d_value != b.d_value ? a.d_value > b.d_value : a.head < b.head;
  });
  HeadSets out;
  out.n = n;
  std::set<HeadRef> taken;
  for (std::size_t i = 0; i < n; ++i) {
    out.ctx_heads.push_back(s[i].head);
    taken.insert(s[i].head);
  }
  std::sort(s.begin(), s.end(), [](const HeadScore& a, const HeadScore& b) {
    return a.d_value != b.d_value ? a.d_value < b.d_value : a.head < b.head;
  });
  for (const auto& h : s) {
    if (out.param_heads.size() == n) break;
    if (!taken.count(h.head)) out.param_heads.push_back(h.head);
  }
  std::sort(out.ctx_heads.begin(), out.ctx_heads.end());
  std::sort(out.param_heads.begin(), out.param_heads.end());
  return out;
}

inline nlohmann::json to_json(const HeadSets& sets, const std::vector<HeadScore>& scores) {
  auto pairs = [](const std::vector<HeadRef>& hs) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& h : hs) a.push_back({h.layer, h.head});
    return a;
  };
  nlohmann::json sc = nlohmann::json::array();
  for (const auto& s : scores) sc.push_back({{"layer", s.head.layer}, {"head", s.head.head}, {"d_value", s.d_value}});
  return {{"n", sets.n}, {"ctx_heads", pairs(sets.ctx_heads)}, {"param_heads", pairs(sets.param_heads)}, {"scores", sc}};
}

/// Reads `key` ("ctx_heads" or "param_heads") of a head-set document as an ROI.
inline RoiSpec head_roi_from_json(const nlohmann::json& j, const std::string& key) {
  std::vector<HeadRef> heads;
  try {
    for (const auto& p : j.at(key)) heads.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>()});
  } catch (const nlohmann::json::exception& e) {
    throw DataError("head set '" + key + "': " + e.what());
  }
  return RoiSpec::head_set(std::move(heads));
}

}  // namespace agd
