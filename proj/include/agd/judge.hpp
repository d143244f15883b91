#pragma once

/**
 * Two-stage LLM-judged quality score over an OpenAI-compatible
 * chat-completion endpoint: first ask the judge for up to five yes/no
 * questions about a prompt, then ask it to answer them for a response.
 * QS = yes / (yes + no), ignoring "Not Applicable".
 */

#include <chrono>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "agd/error.hpp"
#include "agd/eval.hpp"
#include "agd/parallel.hpp"
#include "agd/text.hpp"
#include "json.hpp"

namespace agd::judge {

inline constexpr const char* kQuestionTemplate =
    "The following is a prompt that is used to evaluate the generations from a large language model. We do not "
    "know how to evaluate the quality of model answers for this prompt. Can you come up with 5 or less questions "
    "that can break down the quality to  simpler evaluation tasks that we can then ask about the model answer? Each "
    "question should have a simple yes, no answer.\n"
    "Prompt: {{ prompt without instruction }}\n"
    "List all sub questions in the following format:\n"
    "Output:\n"
    "1: Question: <question>\n"
    "2: Question: <question>\n"
    "...\n"
    "N: Question: <question>";

inline constexpr const char* kAnswerTemplate =
    "We need to evaluate the quality of generations from a large language model. You will be given an input "
    "prompt, the response from a language model and a set of questions assessing the quality of the response. You "
    "need to review the response against the input prompt and provide an answer to each question as either 'Yes', "
    "'No' or 'Not Applicable' if the question does not apply to the case along with a reason for your answer.\n"
    "Prompt: {{ prompt without instruction }}\n"
    "Response: {{ response }}\n"
    "Questions: {{ up to 5 evaluation questions }}\n"
    "List your answers in the following format:\n"
    "Output:\n"
    "1. Question: <question>. Reason: <reason>: Answer: <answer>\n"
    "2. Question: <question>. Reason: <reason>: Answer: <answer>\n"
    "...\n"
    "N. Question: <question>. Reason: <reason>: Answer: <answer>";

/// Fills every `{{ slot }}` in one left-to-right pass, so slot-like text in
/// the values is copied verbatim.
inline std::string fill_template(const std::string& tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t pos = 0;
  std::size_t used = 0;
  while (true) {
    const auto open = tmpl.find("{{", pos);
    if (open == std::string::npos) break;
    const auto close = tmpl.find("}}", open);
    if (close == std::string::npos) break;
    const auto it = values.find(tmpl.substr(open, close + 2 - open));
    if (it == values.end()) throw ConfigError("no value for template slot " + tmpl.substr(open, close + 2 - open));
    out.append(tmpl, pos, open - pos);
    out += it->second;
    pos = close + 2;
    ++used;
  }
  out.append(tmpl, pos);
  if (used != values.size()) throw ConfigError("template slot count mismatch");
  return out;
}

inline std::string question_prompt(const std::string& task) {
  return fill_template(kQuestionTemplate, {{"{{ prompt without instruction }}", task}});
}

/// Questions are listed one per line as "1. <question>".
inline std::string format_questions(const std::vector<std::string>& questions) {
  std::string out;
  for (std::size_t i = 0; i < questions.size(); ++i)
    out += (i ? "\n" : "") + std::to_string(i + 1) + ". " + questions[i];
  return out;
}

inline std::string answer_prompt(const std::string& task, const std::string& response,
                                 const std::vector<std::string>& questions) {
  return fill_template(kAnswerTemplate, {{"{{ prompt without instruction }}", task},
                                         {"{{ response }}", response},
                                         {"{{ up to 5 evaluation questions }}", format_questions(questions)}});
}

/// Lines of the form "<n>: Question: <text>" (also accepts "<n>." ); 1-5 required.
inline std::vector<std::string> parse_questions(const std::string& raw) {
  static const std::regex line_re(R"(^\s*\d+\s*[:.]\s*Question:\s*(.*?)\s*$)", std::regex::icase);
  std::vector<std::string> out;
  std::istringstream in(raw);
  std::string line;
  std::smatch m;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (std::regex_match(line, m, line_re) && !m[1].str().empty()) out.push_back(m[1].str());
  }
  if (out.empty() || out.size() > 5)
    throw ParseError("expected 1 to 5 numbered questions, found " + std::to_string(out.size()), raw);
  return out;
}

enum class Answer { yes, no, not_applicable };

inline std::string to_string(Answer a) {
  switch (a) {
    case Answer::yes: return "yes";
    case Answer::no: return "no";
    case Answer::not_applicable: return "not_applicable";
  }
  return "?";
}

struct QualityVerdict {
  std::string question;
  std::string reason;
  Answer answer = Answer::not_applicable;
  bool operator==(const QualityVerdict&) const = default;
};

inline std::optional<Answer> parse_answer(const std::string& s) {
  const auto w = text::word_tokens(s);
  if (w.size() == 1 && w[0] == "yes") return Answer::yes;
  if (w.size() == 1 && w[0] == "no") return Answer::no;
  if (w.size() == 2 && w[0] == "not" && w[1] == "applicable") return Answer::not_applicable;
  if ((w.size() == 1 && w[0] == "na") || (w.size() == 2 && w[0] == "n" && w[1] == "a")) return Answer::not_applicable;
  return std::nullopt;
}

/// Lines of the form "<n>. Question: <q>. Reason: <r>: Answer: <Yes|No|Not Applicable>".
inline std::vector<QualityVerdict> parse_verdicts(const std::string& raw) {
  static const std::regex line_re(R"(^\s*\d+\s*[.:]\s*Question:\s*(.*?)\.?\s*Reason:\s*(.*)\s*:\s*Answer:\s*(.*?)\s*$)",
                                  std::regex::icase);
  std::vector<QualityVerdict> out;
  std::istringstream in(raw);
  std::string line;
  std::smatch m;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!std::regex_match(line, m, line_re)) continue;
    const auto a = parse_answer(m[3].str());
    if (!a) throw ParseError("unrecognised answer '" + m[3].str() + "'", raw);
    out.push_back({m[1].str(), m[2].str(), *a});
  }
  if (out.empty()) throw ParseError("no answer lines found", raw);
  return out;
}

/// yes / (yes + no); throws DataError when no verdict is yes or no.
inline double quality_score(const std::vector<QualityVerdict>& verdicts) {
  std::size_t yes = 0, no = 0;
  for (const auto& v : verdicts) {
    yes += v.answer == Answer::yes;
    no += v.answer == Answer::no;
  }
  if (yes + no == 0) throw DataError("quality_score: every verdict is not applicable");
  return static_cast<double>(yes) / static_cast<double>(yes + no);
}

struct JudgeConfig {
  std::string endpoint;  // full URL of the chat-completions resource
  std::string model;
  std::string token_env = "AGD_JUDGE_TOKEN";  // empty = no Authorization header
  double timeout_seconds = 60.0;
  int max_retries = 3;
  double backoff_seconds = 1.0;  // doubled after each failed attempt
  std::size_t max_in_flight = 1;

  void validate() const {
    if (endpoint.empty()) throw ConfigError("judge endpoint is required");
    if (model.empty()) throw ConfigError("judge model name is required");
    if (!(timeout_seconds > 0)) throw ConfigError("judge timeout must be > 0");
    if (max_retries < 0) throw ConfigError("judge retries must be >= 0");
    if (max_in_flight < 1) throw ConfigError("judge in-flight limit must be >= 1");
  }
};

/// Transport failure; `retryable` for connection errors, timeouts, 429 and 5xx.
class TransportError : public RuntimeFailure {
 public:
  TransportError(const std::string& what, bool retryable, int status = 0)
      : RuntimeFailure(what), retryable_(retryable), status_(status) {}
  bool retryable() const noexcept { return retryable_; }
  int status() const noexcept { return status_; }

 private:
  bool retryable_;
  int status_;
};

/// POSTs a JSON body and returns the response body.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string post_json(const std::string& url, const std::string& body,
                                const std::map<std::string, std::string>& headers, double timeout_seconds) = 0;
};

inline nlohmann::json chat_request(const std::string& model, const std::string& prompt) {
  return {{"model", model}, {"messages", {{{"role", "user"}, {"content", prompt}}}}, {"stream", false}};
}

inline std::string chat_response_text(const std::string& body) {
  try {
    const auto j = nlohmann::json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed chat-completion response: ") + e.what(), body);
  }
}

class JudgeClient {
 public:
  using Sleeper = std::function<void(double seconds)>;

  JudgeClient(JudgeConfig cfg, std::shared_ptr<Transport> transport, Sleeper sleeper = {})
      : cfg_(std::move(cfg)), transport_(std::move(transport)), sleep_(std::move(sleeper)) {
    cfg_.validate();
    if (!transport_) throw ConfigError("judge client needs a transport");
    if (!sleep_) sleep_ = [](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); };
    if (!cfg_.token_env.empty()) {
      const char* tok = std::getenv(cfg_.token_env.c_str());
      if (!tok || !*tok) throw ConfigError("environment variable " + cfg_.token_env + " with the judge token is not set");
      token_ = tok;
    }
  }

  const JudgeConfig& config() const { return cfg_; }

  /// One chat turn with retries and exponential backoff.
  std::string complete(const std::string& prompt) const {
    std::map<std::string, std::string> headers{{"Content-Type", "application/json"}};
    if (!token_.empty()) headers["Authorization"] = "Bearer " + token_;
    const std::string body = chat_request(cfg_.model, prompt).dump();
    double wait = cfg_.backoff_seconds;
    for (int attempt = 0;; ++attempt) {
      try {
        return chat_response_text(transport_->post_json(cfg_.endpoint, body, headers, cfg_.timeout_seconds));
      } catch (const TransportError& e) {
        if (!e.retryable() || attempt >= cfg_.max_retries)
          throw IoError("judge request failed after " + std::to_string(attempt + 1) + " attempt(s): " + e.what());
        sleep_(wait);
        wait *= 2;
      }
    }
  }

  std::vector<std::string> generate_quality_questions(const std::string& task) const {
    return parse_questions(complete(question_prompt(task)));
  }

  std::vector<QualityVerdict> answer_questions(const std::string& task, const std::string& response,
                                               const std::vector<std::string>& questions) const {
    return parse_verdicts(complete(answer_prompt(task, response, questions)));
  }

 private:
  JudgeConfig cfg_;
  std::shared_ptr<Transport> transport_;
  Sleeper sleep_;
  std::string token_;
};

struct JudgedSample {
  std::string id;
  std::vector<std::string> questions;
  std::vector<QualityVerdict> verdicts;
  std::optional<double> quality;
  std::optional<std::string> error;
};

struct JudgeReport {
  std::vector<JudgedSample> samples;
  std::optional<double> mean_quality;
};

/// Judges only the report's samples that satisfied all constraints, as
/// QS is defined over those. `task_of(id)` gives the prompt without instruction.
inline JudgeReport judge_report(const EvalReport& report, const std::function<std::string(const std::string&)>& task_of,
                                const JudgeClient& client) {
  std::vector<const SampleVerdict*> passing;
  for (const auto& s : report.samples)
    if (!s.error && s.all_satisfied) passing.push_back(&s);
  JudgeReport out;
  out.samples.resize(passing.size());
  parallel_for(passing.size(), client.config().max_in_flight, [&](std::size_t i) {
    auto& js = out.samples[i];
    js.id = passing[i]->id;
    try {
      const auto task = task_of(js.id);
      js.questions = client.generate_quality_questions(task);
      js.verdicts = client.answer_questions(task, passing[i]->output, js.questions);
      js.quality = quality_score(js.verdicts);
    } catch (const std::exception& e) {
      js.error = e.what();
    }
  });
  double sum = 0;
  std::size_t n = 0;
  for (const auto& s : out.samples)
    if (s.quality) sum += *s.quality, ++n;
  if (n) out.mean_quality = sum / static_cast<double>(n);
  return out;
}

inline nlohmann::json to_json(const JudgeReport& r, const JudgeConfig& cfg) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : r.samples) {
    nlohmann::json v = nlohmann::json::array();
    for (const auto& x : s.verdicts)
      v.push_back({{"question", x.question}, {"reason", x.reason}, {"answer", to_string(x.answer)}});
    samples.push_back({{"id", s.id},
                       {"questions", s.questions},
                       {"verdicts", v},
                       {"quality", s.quality ? nlohmann::json(*s.quality) : nlohmann::json(nullptr)},
                       {"error", s.error ? nlohmann::json(*s.error) : nlohmann::json(nullptr)}});
  }
  return {{"judge", {{"endpoint", cfg.endpoint}, {"model", cfg.model}, {"temperature", "endpoint default"}}},
          {"mean_quality", r.mean_quality ? nlohmann::json(*r.mean_quality) : nlohmann::json(nullptr)},
          {"samples", samples}};
}

}  // namespace agd::judge
