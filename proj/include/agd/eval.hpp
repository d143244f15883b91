#pragma once

/**
 * Evaluation over instruction-following and QA corpora, entropy-threshold
 * calibration, and persistent run reports.
 */

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "agd/constraints.hpp"
#include "agd/datasets.hpp"
#include "agd/decoding.hpp"
#include "agd/parallel.hpp"
#include "agd/prompts.hpp"
#include "agd/toy_task.hpp"
#include "json.hpp"

namespace agd {

struct SampleVerdict {
  std::string id;
  std::string output;
  std::vector<bool> constraints;  // instruction following: one flag per constraint
  bool all_satisfied = false;
  std::optional<double> recall;   // QA
  std::size_t steps = 0;
  std::size_t gated_steps = 0;
  std::optional<std::string> error;  // decode failure; sample excluded from metrics

  bool operator==(const SampleVerdict&) const = default;
};

struct EvalReport {
  std::string kind;  // "instruction-following" or "qa"
  std::vector<SampleVerdict> samples;
  std::optional<double> pla, ila, recall;
  double gated_fraction = 0.0;  // gated steps / all steps over evaluated samples
  std::size_t evaluated = 0;
  std::size_t failed = 0;
  nlohmann::json config = nlohmann::json::object();
  std::string started_at, finished_at;

  bool operator==(const EvalReport&) const = default;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json to_json(const SampleVerdict& v) {
  nlohmann::json j{{"id", v.id},
                   {"output", v.output},
                   {"constraints", v.constraints},
                   {"all_satisfied", v.all_satisfied},
                   {"steps", v.steps},
                   {"gated_steps", v.gated_steps}};
  j["recall"] = v.recall ? nlohmann::json(*v.recall) : nlohmann::json(nullptr);
  j["error"] = v.error ? nlohmann::json(*v.error) : nlohmann::json(nullptr);
  return j;
}

inline SampleVerdict sample_verdict_from_json(const nlohmann::json& j) {
  SampleVerdict v;
  v.id = j.at("id").get<std::string>();
  v.output = j.at("output").get<std::string>();
  v.constraints = j.at("constraints").get<std::vector<bool>>();
  v.all_satisfied = j.at("all_satisfied").get<bool>();
  v.steps = j.at("steps").get<std::size_t>();
  v.gated_steps = j.at("gated_steps").get<std::size_t>();
  if (!j.at("recall").is_null()) v.recall = j.at("recall").get<double>();
  if (!j.at("error").is_null()) v.error = j.at("error").get<std::string>();
  return v;
}

inline nlohmann::json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(nullptr); };
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : r.samples) samples.push_back(to_json(s));
  return {{"kind", r.kind},
          {"pla", opt(r.pla)},
          {"ila", opt(r.ila)},
          {"recall", opt(r.recall)},
          {"gated_fraction", r.gated_fraction},
          {"evaluated", r.evaluated},
          {"failed", r.failed},
          {"config", r.config},
          {"started_at", r.started_at},
          {"finished_at", r.finished_at},
          {"samples", samples}};
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    auto opt = [&](const char* k) {
      return j.at(k).is_null() ? std::optional<double>() : std::optional<double>(j.at(k).get<double>());
    };
    r.kind = j.at("kind").get<std::string>();
    r.pla = opt("pla");
    r.ila = opt("ila");
    r.recall = opt("recall");
    r.gated_fraction = j.at("gated_fraction").get<double>();
    r.evaluated = j.at("evaluated").get<std::size_t>();
    r.failed = j.at("failed").get<std::size_t>();
    r.config = j.at("config");
    r.started_at = j.at("started_at").get<std::string>();
    r.finished_at = j.at("finished_at").get<std::string>();
    for (const auto& s : j.at("samples")) r.samples.push_back(sample_verdict_from_json(s));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("eval report: ") + e.what());
  }
  return r;
}

/// PLA, ILA, recall and gated fraction over the samples without errors.
inline void summarize(EvalReport& r) {
  std::size_t ok = 0, all = 0, cons = 0, sat = 0, steps = 0, gated = 0, with_recall = 0;
  double recall = 0.0;
  for (const auto& s : r.samples) {
    if (s.error) continue;
    ++ok;
    all += s.all_satisfied;
    cons += s.constraints.size();
    sat += static_cast<std::size_t>(std::count(s.constraints.begin(), s.constraints.end(), true));
    steps += s.steps;
    gated += s.gated_steps;
    if (s.recall) recall += *s.recall, ++with_recall;
  }
  r.evaluated = ok;
  r.failed = r.samples.size() - ok;
  r.pla.reset();
  r.ila.reset();
  r.recall.reset();
  if (r.kind == "instruction-following" && ok > 0) {
    r.pla = static_cast<double>(all) / static_cast<double>(ok);
    r.ila = static_cast<double>(sat) / static_cast<double>(cons);
  }
  if (with_recall > 0) r.recall = recall / static_cast<double>(with_recall);
  r.gated_fraction = steps ? static_cast<double>(gated) / static_cast<double>(steps) : 0.0;
}

namespace detail {
inline void record_decode(SampleVerdict& v, const DecodeResult& d) {
  v.output = d.text;
  v.steps = d.trace.size();
  v.gated_steps = 0;
  for (const auto& t : d.trace) v.gated_steps += t.gated;
}
}  // namespace detail

using IFDecodeFn = std::function<DecodeResult(const IFSample&)>;
using QADecodeFn = std::function<DecodeResult(const QASample&)>;

/// Decodes every sample (up to `jobs` at a time) and checks its constraints.
/// A decode that throws is recorded on the sample and excluded from PLA/ILA.
inline EvalReport eval_instruction_following(const std::vector<IFSample>& samples, const IFDecodeFn& decode_fn,
                                             std::size_t jobs = 1, nlohmann::json config = nlohmann::json::object()) {
  if (samples.empty()) throw DataError("eval_instruction_following: no samples");
  EvalReport r;
  r.kind = "instruction-following";
  r.config = std::move(config);
  r.started_at = utc_timestamp();
  r.samples.resize(samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) {
    const auto& s = samples[i];
    auto& v = r.samples[i];
    v.id = s.id;
    try {
      s.validate();
      detail::record_decode(v, decode_fn(s));
    } catch (const std::exception& e) {
      v.error = e.what();
      return;
    }
    v.all_satisfied = true;
    for (const auto& c : s.constraints) {
      v.constraints.push_back(check_constraint(v.output, c));
      v.all_satisfied = v.all_satisfied && v.constraints.back();
    }
  });
  summarize(r);
  r.finished_at = utc_timestamp();
  return r;
}

/// Decodes every QA sample and scores answer_recall.
inline EvalReport eval_qa(const std::vector<QASample>& samples, const QADecodeFn& decode_fn, std::size_t jobs = 1,
                          nlohmann::json config = nlohmann::json::object()) {
  if (samples.empty()) throw DataError("eval_qa: no samples");
  EvalReport r;
  r.kind = "qa";
  r.config = std::move(config);
  r.started_at = utc_timestamp();
  r.samples.resize(samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) {
    const auto& s = samples[i];
    auto& v = r.samples[i];
    v.id = s.id;
    try {
      s.validate();
      detail::record_decode(v, decode_fn(s));
    } catch (const std::exception& e) {
      v.error = e.what();
      return;
    }
    v.recall = answer_recall(v.output, s.answers);
  });
  summarize(r);
  r.finished_at = utc_timestamp();
  return r;
}

enum class QAPromptStyle { open_book, closed_book, kv };

inline std::string to_string(QAPromptStyle s) {
  switch (s) {
    case QAPromptStyle::open_book: return "open-book";
    case QAPromptStyle::closed_book: return "closed-book";
    case QAPromptStyle::kv: return "kv";
  }
  return "?";
}
inline QAPromptStyle qa_prompt_style_from_string(const std::string& s) {
  for (auto v : {QAPromptStyle::open_book, QAPromptStyle::closed_book, QAPromptStyle::kv})
    if (to_string(v) == s) return v;
  throw DataError("unknown prompt style '" + s + "'");
}

/// Renders a QA sample; open-book and kv require a context.
inline Prompt qa_prompt(const QASample& s, QAPromptStyle style, const std::string& system = kSystemPreamble) {
  RenderedPrompt rp;
  switch (style) {
    case QAPromptStyle::open_book:
      if (!s.context) throw DataError("sample '" + s.id + "' has no context for an open-book prompt");
      rp = render_open_book(s.question, *s.context, system);
      break;
    case QAPromptStyle::closed_book: rp = render_closed_book(s.question, system); break;
    case QAPromptStyle::kv:
      if (!s.context) throw DataError("sample '" + s.id + "' has no context for a kv prompt");
      rp = render_kv_prompt(s.question, *s.context);
      break;
  }
  return Prompt::from_text(rp.text, rp.segments);
}

inline Prompt if_prompt(const IFSample& s) {
  const auto rp = render_instruction_prompt(s.instruction, s.task);
  return Prompt::from_text(rp.text, rp.segments);
}

/// Copy of `cfg` with an input-span ROI over `segment` of `prompt`; other
/// ROIs (and non-AGD methods) are returned unchanged. EOS always stops.
inline DecodeConfig bind_roi(DecodeConfig cfg, const Prompt& prompt, const std::optional<std::string>& segment) {
  if (cfg.method == DecodeMethod::agd && segment) cfg.agd.roi = RoiSpec::input_span({prompt.segment(*segment)});
  return cfg;
}

/// Nearest-rank percentile: the smallest value v with at least ceil(p·N) values <= v.
inline double nearest_rank_percentile(std::vector<double> values, double p) {
  if (values.empty()) throw DataError("percentile of an empty set");
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("percentile must lie in (0, 1)");
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(values.size())));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

/// Per-step entropies of greedy decoding over `prompts`.
template <typename T>
std::vector<double> greedy_entropies(const Model<T>& m, const std::vector<Prompt>& prompts, std::size_t max_new_tokens,
                                     std::size_t jobs = 1) {
  std::vector<std::vector<double>> per(prompts.size());
  DecodeConfig cfg;
  cfg.max_new_tokens = max_new_tokens;
  parallel_for(prompts.size(), jobs, [&](std::size_t i) {
    for (const auto& t : decode(m, prompts[i], cfg).trace) per[i].push_back(t.entropy);
  });
  std::vector<double> all;
  for (const auto& v : per) all.insert(all.end(), v.begin(), v.end());
  return all;
}

/// tau = nearest-rank `percentile` of the greedy per-step entropy pool (nats).
template <typename T>
double calibrate_entropy_threshold(const Model<T>& m, const std::vector<Prompt>& prompts, double percentile,
                                   std::size_t max_new_tokens, std::size_t jobs = 1) {
  if (prompts.empty()) throw DataError("calibrate_entropy_threshold: no prompts");
  if (!(percentile > 0.0 && percentile < 1.0)) throw ConfigError("percentile must lie in (0, 1)");
  const auto ent = greedy_entropies(m, prompts, max_new_tokens, jobs);
  if (ent.empty()) throw DataError("calibrate_entropy_threshold: no decode steps");
  return nearest_rank_percentile(ent, percentile);
}

}  // namespace agd
