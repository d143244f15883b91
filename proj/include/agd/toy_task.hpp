#pragma once

/**
 * Synthetic corpora small enough for the byte-level toy model.
 *
 * kv_lookup: the context lists key/value pairs ("c5 a3 f1"), the question is a
 * key and the answer its value. Each key also has a fixed default value; with
 * probability `noise` a training label is replaced by that default, which
 * teaches the model a parametric answer that competes with the context.
 * Evaluation samples are always labelled from the context.
 *
 * keyword_instruction: the instruction asks to use or avoid a vocabulary word,
 * the reference output is a short list of words honouring it. With probability
 * `noise` a training output ignores the instruction.
 */

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "agd/datasets.hpp"
#include "agd/error.hpp"
#include "agd/prompts.hpp"
#include "json.hpp"

namespace agd {

enum class ToyTaskKind { keyword_instruction, kv_lookup };

inline std::string to_string(ToyTaskKind k) { return k == ToyTaskKind::kv_lookup ? "kv_lookup" : "keyword_instruction"; }
inline ToyTaskKind toy_task_kind_from_string(const std::string& s) {
  if (s == "kv_lookup") return ToyTaskKind::kv_lookup;
  if (s == "keyword_instruction") return ToyTaskKind::keyword_instruction;
  throw DataError("unknown task kind '" + s + "'");
}

struct ToyTaskSpec {
  ToyTaskKind kind = ToyTaskKind::kv_lookup;
  std::size_t n_train = 2000;
  std::size_t n_eval = 200;
  double noise = 0.0;
  std::uint64_t seed = 0;
  // kv_lookup
  std::size_t n_keys = 8;           // keys are the first n_keys lowercase letters
  std::size_t n_values = 10;        // values are the first n_values digits
  std::size_t pairs_per_context = 4;
  // keyword_instruction
  std::vector<std::string> vocabulary{"sun", "moon", "tree", "rock", "fish", "bird", "rain", "snow"};
  std::vector<std::string> keywords;  // empty = whole vocabulary
  std::size_t words_per_output = 3;

  void validate() const {
    if (n_train < 1 || n_eval < 1) throw ConfigError("toy task: sample counts must be >= 1");
    if (!(noise >= 0.0 && noise < 1.0)) throw ConfigError("toy task: noise must lie in [0, 1)");
    if (kind == ToyTaskKind::kv_lookup) {
      if (n_keys < 1 || n_keys > 26) throw ConfigError("toy task: n_keys must lie in [1, 26]");
      if (n_values < 2 || n_values > 10) throw ConfigError("toy task: n_values must lie in [2, 10]");
      if (pairs_per_context < 1 || pairs_per_context > n_keys)
        throw ConfigError("toy task: pairs_per_context must lie in [1, n_keys]");
    } else {
      if (vocabulary.size() < 2) throw ConfigError("toy task: vocabulary needs at least two words");
      for (const auto& w : vocabulary)
        if (text::word_tokens(w) != std::vector<std::string>{text::lower(w)})
          throw ConfigError("toy task: vocabulary entry '" + w + "' is not a single lowercase word");
      for (const auto& k : keywords)
        if (std::find(vocabulary.begin(), vocabulary.end(), k) == vocabulary.end())
          throw ConfigError("toy task: keyword '" + k + "' is not in the vocabulary");
      if (words_per_output < 1) throw ConfigError("toy task: words_per_output must be >= 1");
    }
  }
};

inline nlohmann::json to_json(const ToyTaskSpec& s) {
  return {{"kind", to_string(s.kind)},       {"n_train", s.n_train},
          {"n_eval", s.n_eval},              {"noise", s.noise},
          {"seed", s.seed},                  {"n_keys", s.n_keys},
          {"n_values", s.n_values},          {"pairs_per_context", s.pairs_per_context},
          {"vocabulary", s.vocabulary},      {"keywords", s.keywords},
          {"words_per_output", s.words_per_output}};
}

inline ToyTaskSpec toy_task_spec_from_json(const nlohmann::json& j) {
  ToyTaskSpec s;
  try {
    s.kind = toy_task_kind_from_string(j.at("kind").get<std::string>());
    s.n_train = j.value("n_train", s.n_train);
    s.n_eval = j.value("n_eval", s.n_eval);
    s.noise = j.value("noise", s.noise);
    s.seed = j.value("seed", s.seed);
    s.n_keys = j.value("n_keys", s.n_keys);
    s.n_values = j.value("n_values", s.n_values);
    s.pairs_per_context = j.value("pairs_per_context", s.pairs_per_context);
    s.vocabulary = j.value("vocabulary", s.vocabulary);
    s.keywords = j.value("keywords", s.keywords);
    s.words_per_output = j.value("words_per_output", s.words_per_output);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("toy task spec: ") + e.what());
  }
  s.validate();
  return s;
}

/// A training pair: the rendered prompt and the completion to learn (EOS is appended by the trainer).
struct TrainText {
  std::string id;
  std::string prompt;
  std::string completion;
  bool operator==(const TrainText&) const = default;
};

inline nlohmann::json to_json(const TrainText& t) {
  return {{"id", t.id}, {"prompt", t.prompt}, {"completion", t.completion}};
}

inline TrainText train_text_from_json(const nlohmann::json& j) {
  try {
    return {j.at("id").get<std::string>(), j.at("prompt").get<std::string>(), j.at("completion").get<std::string>()};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("training example: ") + e.what());
  }
}

struct ToyCorpus {
  ToyTaskSpec spec;
  std::vector<TrainText> train;
  std::vector<QASample> train_qa, eval_qa;  // kv_lookup
  std::vector<IFSample> train_if, eval_if;  // keyword_instruction
};

/// kv_lookup prompt: context, then " ?" and the key; the context is the "context" segment.
inline RenderedPrompt render_kv_prompt(const std::string& question, const std::string& context) {
  RenderedPrompt p;
  p.text = context + " ?" + question;
  p.segments["context"] = {0, context.size()};
  p.segments["task"] = {context.size() + 2, p.text.size()};
  return p;
}

/// Per-key default ("parametric") values, fixed by the seed.
inline std::vector<char> kv_default_values(const ToyTaskSpec& s) {
  std::mt19937_64 rng(s.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<char> d(s.n_keys);
  for (auto& v : d) v = static_cast<char>('0' + rng() % s.n_values);
  return d;
}

namespace detail {

inline std::string sample_id(const char* split, std::size_t i) {
  std::string n = std::to_string(i);
  return std::string(split) + "-" + std::string(n.size() < 5 ? 5 - n.size() : 0, '0') + n;
}

inline void make_kv(const ToyTaskSpec& s, std::mt19937_64& rng, const std::vector<char>& defaults, bool train,
                    std::size_t i, ToyCorpus& out) {
  std::vector<std::size_t> keys(s.n_keys);
  std::iota(keys.begin(), keys.end(), 0);
  std::shuffle(keys.begin(), keys.end(), rng);
  keys.resize(s.pairs_per_context);
  std::string context;
  std::vector<char> values;
  for (std::size_t p = 0; p < keys.size(); ++p) {
    values.push_back(static_cast<char>('0' + rng() % s.n_values));
    if (p) context += ' ';
    context += static_cast<char>('a' + keys[p]);
    context += values.back();
  }
  const std::size_t q = rng() % keys.size();
  const std::string question(1, static_cast<char>('a' + keys[q]));
  std::string answer(1, values[q]);
  const bool noisy = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < s.noise;
  QASample qa{sample_id(train ? "train" : "eval", i), question, context, {answer}};
  if (train) {
    if (noisy) answer.assign(1, defaults[keys[q]]);
    qa.answers = {answer};
    out.train.push_back({qa.id, render_kv_prompt(question, context).text, answer});
    out.train_qa.push_back(std::move(qa));
  } else {
    out.eval_qa.push_back(std::move(qa));
  }
}

inline void make_keyword(const ToyTaskSpec& s, std::mt19937_64& rng, bool train, std::size_t i, ToyCorpus& out) {
  const auto& pool = s.keywords.empty() ? s.vocabulary : s.keywords;
  const std::string kw = pool[rng() % pool.size()];
  const bool include = rng() % 2 == 0;
  IFSample sample;
  sample.id = sample_id(train ? "train" : "eval", i);
  sample.instruction = (include ? "use " : "avoid ") + kw;
  sample.task = "words:";
  sample.constraints = {include ? ConstraintSpec::include({kw}) : ConstraintSpec::exclude({kw}),
                        ConstraintSpec::max_words(s.words_per_output)};
  std::vector<std::string> others;
  for (const auto& w : s.vocabulary)
    if (w != kw) others.push_back(w);
  std::vector<std::string> words;
  for (std::size_t w = 0; w < s.words_per_output; ++w) words.push_back(others[rng() % others.size()]);
  if (include) words[rng() % words.size()] = kw;
  const bool noisy = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < s.noise;
  if (train && noisy)
    for (auto& w : words) w = s.vocabulary[rng() % s.vocabulary.size()];
  std::string output;
  for (const auto& w : words) output += (output.empty() ? "" : " ") + w;
  if (train) {
    out.train.push_back({sample.id, render_instruction_prompt(sample.instruction, sample.task).text, output});
    out.train_if.push_back(std::move(sample));
  } else {
    out.eval_if.push_back(std::move(sample));
  }
}

}  // namespace detail

/// Deterministic in `spec.seed`; train ids are "train-NNNNN", eval ids "eval-NNNNN".
inline ToyCorpus generate_toy_task(const ToyTaskSpec& spec) {
  spec.validate();
  ToyCorpus out;
  out.spec = spec;
  std::mt19937_64 rng(spec.seed);
  const auto defaults = kv_default_values(spec);
  for (int split = 0; split < 2; ++split) {
    const bool train = split == 0;
    const std::size_t n = train ? spec.n_train : spec.n_eval;
    for (std::size_t i = 0; i < n; ++i) {
      if (spec.kind == ToyTaskKind::kv_lookup)
        detail::make_kv(spec, rng, defaults, train, i, out);
      else
        detail::make_keyword(spec, rng, train, i, out);
    }
  }
  return out;
}

}  // namespace agd
