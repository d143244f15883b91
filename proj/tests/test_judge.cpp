#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <deque>
#include <mutex>
#include <random>

#include "agd/judge.hpp"
#include "support/judge_templates.hpp"

#ifdef AGD_WITH_JUDGE_HTTP
#include "agd/judge_http.hpp"
#endif

using namespace agd;
using namespace agd::judge;

namespace {

std::string chat_body(const std::string& content) {
  return nlohmann::json{{"id", "x"}, {"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", content}}}}}}}
      .dump();
}

struct Call {
  std::string url;
  nlohmann::json body;
  std::map<std::string, std::string> headers;
};

/// Replays scripted outcomes; an empty string means "fail with a retryable error".
class ScriptedTransport : public Transport {
 public:
  std::deque<std::string> replies;
  std::vector<Call> calls;
  std::string post_json(const std::string& url, const std::string& body, const std::map<std::string, std::string>& headers,
                        double) override {
    std::lock_guard lk(mu_);
    calls.push_back({url, nlohmann::json::parse(body), headers});
    if (replies.empty()) throw TransportError("no reply scripted", false);
    auto r = replies.front();
    replies.pop_front();
    if (r.empty()) throw TransportError("connection reset", true);
    return r;
  }

 private:
  std::mutex mu_;
};

/// Answers by inspecting the prompt; safe to call concurrently.
class EchoJudge : public Transport {
 public:
  std::atomic<int> in_flight{0}, peak{0}, total{0};
  std::string post_json(const std::string&, const std::string& body, const std::map<std::string, std::string>&,
                        double) override {
    const int now = ++in_flight;
    int p = peak.load();
    while (now > p && !peak.compare_exchange_weak(p, now)) {
    }
    ++total;
    const auto prompt = nlohmann::json::parse(body)["messages"][0]["content"].get<std::string>();
    std::string reply;
    if (prompt.rfind("The following", 0) == 0) {
      reply = "Output:\n1: Question: Is it short?\n2: Question: Is it polite?";
    } else {
      const bool good = prompt.find("Response: good") != std::string::npos;
      reply = std::string("1. Question: Is it short?. Reason: r: Answer: Yes\n") +
              "2. Question: Is it polite?. Reason: r: Answer: " + (good ? "Yes" : "No");
    }
    --in_flight;
    return chat_body(reply);
  }
};

JudgeConfig test_config() {
  JudgeConfig c;
  c.endpoint = "http://judge.invalid/v1/chat/completions";
  c.model = "judge-model";
  c.token_env = "";
  c.backoff_seconds = 0.5;
  return c;
}

}  // namespace

TEST(JudgeTemplates, QuestionPromptByteExact) {
  const std::string task = "Write a riddle about forests.";
  EXPECT_EQ(question_prompt(task), agd::testing::expected_question_prompt(task));
}

TEST(JudgeTemplates, AnswerPromptByteExact) {
  const std::vector<std::string> qs{"Is it a riddle?", "Is it about forests?"};
  const auto got = answer_prompt("Write a riddle.", "What has roots?", qs);
  EXPECT_EQ(got, agd::testing::expected_answer_prompt("Write a riddle.", "What has roots?",
                                                 "1. Is it a riddle?\n2. Is it about forests?"));
}

TEST(JudgeTemplates, SlotTextIsNotReinterpreted) {
  const std::string task = "{{ response }} and {{ up to 5 evaluation questions }}";
  const auto got = answer_prompt(task, "R", {"Q"});
  EXPECT_EQ(got, agd::testing::expected_answer_prompt(task, "R", "1. Q"));
}

TEST(QualityScore, Definitional) {
  using A = Answer;
  const std::vector<QualityVerdict> v{{"a", "", A::yes}, {"b", "", A::yes}, {"c", "", A::no}, {"d", "", A::not_applicable}};
  EXPECT_DOUBLE_EQ(quality_score(v), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(quality_score({{"a", "", A::yes}}), 1.0);
  EXPECT_THROW(quality_score({{"a", "", A::not_applicable}}), DataError);
  EXPECT_THROW(quality_score({}), DataError);
}

TEST(QualityScore, PermutationInvariant) {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<QualityVerdict> v;
    const int n = 1 + static_cast<int>(rng() % 6);
    for (int i = 0; i < n; ++i) v.push_back({"q", "", static_cast<Answer>(rng() % 3)});
    v.push_back({"q", "", Answer::yes});
    const double base = quality_score(v);
    std::shuffle(v.begin(), v.end(), rng);
    EXPECT_EQ(quality_score(v), base);
  }
}

TEST(ParseQuestions, NumberedList) {
  const auto q = parse_questions("Output:\n1: Question: Is it short?\n2: Question: Does it rhyme?\r\n3: Question: Is it kind?\n");
  ASSERT_EQ(q.size(), 3u);
  EXPECT_EQ(q[0], "Is it short?");
  EXPECT_EQ(q[1], "Does it rhyme?");
  EXPECT_EQ(q[2], "Is it kind?");
}

TEST(ParseQuestions, MalformedKeepsRawText) {
  const std::string raw = "I cannot help with that.";
  try {
    parse_questions(raw);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.raw(), raw);
  }
  std::string six;
  for (int i = 1; i <= 6; ++i) six += std::to_string(i) + ": Question: q" + std::to_string(i) + "\n";
  EXPECT_THROW(parse_questions(six), ParseError);
}

TEST(ParseVerdicts, StructuredLines) {
  const auto v = parse_verdicts(
      "Output:\n"
      "1. Question: Is it short?. Reason: it has 5 words: Answer: Yes\n"
      "2. Question: Does it rhyme?. Reason: no rhyme: Answer: No\n"
      "3. Question: Is the code valid?. Reason: there is no code: Answer: Not Applicable\n"
      "4. Question: Is it in French?. Reason: n/a: Answer: N/A\n");
  ASSERT_EQ(v.size(), 4u);
  EXPECT_EQ(v[3].answer, Answer::not_applicable);
  EXPECT_EQ(v[0], (QualityVerdict{"Is it short?", "it has 5 words", Answer::yes}));
  EXPECT_EQ(v[1].answer, Answer::no);
  EXPECT_EQ(v[2].answer, Answer::not_applicable);
  EXPECT_EQ(v[2].reason, "there is no code");
  EXPECT_THROW(parse_verdicts("1. Question: q. Reason: r: Answer: maybe"), ParseError);
  EXPECT_THROW(parse_verdicts("nothing here"), ParseError);
}

TEST(JudgeConfig, Validation) {
  auto c = test_config();
  EXPECT_NO_THROW(c.validate());
  c.timeout_seconds = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = test_config();
  c.max_retries = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = test_config();
  c.endpoint.clear();
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(JudgeClient, RequestShapeAndBearerToken) {
  ::setenv("AGD_TEST_JUDGE_TOKEN", "sekret", 1);
  auto cfg = test_config();
  cfg.token_env = "AGD_TEST_JUDGE_TOKEN";
  auto t = std::make_shared<ScriptedTransport>();
  t->replies = {chat_body("1: Question: A?\n2: Question: B?\n3: Question: C?")};
  JudgeClient client(cfg, t);
  const auto q = client.generate_quality_questions("Summarise the text.");
  EXPECT_EQ(q, (std::vector<std::string>{"A?", "B?", "C?"}));
  ASSERT_EQ(t->calls.size(), 1u);
  EXPECT_EQ(t->calls[0].url, cfg.endpoint);
  EXPECT_EQ(t->calls[0].headers.at("Authorization"), "Bearer sekret");
  EXPECT_EQ(t->calls[0].body["model"], "judge-model");
  EXPECT_EQ(t->calls[0].body["stream"], false);
  EXPECT_FALSE(t->calls[0].body.contains("temperature"));
  EXPECT_EQ(t->calls[0].body["messages"][0]["role"], "user");
  EXPECT_EQ(t->calls[0].body["messages"][0]["content"], agd::testing::expected_question_prompt("Summarise the text."));
}

TEST(JudgeClient, MissingTokenVariableIsConfigError) {
  auto cfg = test_config();
  cfg.token_env = "AGD_TEST_JUDGE_TOKEN_UNSET";
  ::unsetenv("AGD_TEST_JUDGE_TOKEN_UNSET");
  EXPECT_THROW(JudgeClient(cfg, std::make_shared<ScriptedTransport>()), ConfigError);
}

TEST(JudgeClient, RetriesWithExponentialBackoff) {
  auto cfg = test_config();
  cfg.max_retries = 3;
  auto t = std::make_shared<ScriptedTransport>();
  t->replies = {"", "", chat_body("1: Question: A?")};
  std::vector<double> waits;
  JudgeClient client(cfg, t, [&](double s) { waits.push_back(s); });
  EXPECT_EQ(client.generate_quality_questions("x").size(), 1u);
  EXPECT_EQ(waits, (std::vector<double>{0.5, 1.0}));
}

TEST(JudgeClient, GivesUpAfterMaxRetries) {
  auto cfg = test_config();
  cfg.max_retries = 2;
  auto t = std::make_shared<ScriptedTransport>();
  t->replies = {"", "", "", chat_body("1: Question: A?")};
  std::vector<double> waits;
  JudgeClient client(cfg, t, [&](double s) { waits.push_back(s); });
  EXPECT_THROW(client.generate_quality_questions("x"), IoError);
  EXPECT_EQ(t->calls.size(), 3u);
  EXPECT_EQ(waits.size(), 2u);
}

TEST(JudgeClient, MalformedResponseCarriesBody) {
  auto t = std::make_shared<ScriptedTransport>();
  t->replies = {R"({"error": "overloaded"})"};
  JudgeClient client(test_config(), t, [](double) {});
  try {
    client.generate_quality_questions("x");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.raw(), R"({"error": "overloaded"})");
  }
}

TEST(JudgeReport, OnlyConstraintPassingSamplesAreJudged) {
  EvalReport report;
  report.kind = "instruction_following";
  report.samples = {{"a", "good", {true}, true, {}, 1, 0, {}},
                    {"b", "bad", {true, false}, false, {}, 1, 0, {}},
                    {"c", "meh", {true}, true, {}, 1, 0, {}},
                    {"d", "", {}, false, {}, 0, 0, std::string("decode failed")}};
  auto t = std::make_shared<EchoJudge>();
  auto cfg = test_config();
  cfg.max_in_flight = 2;
  JudgeClient client(cfg, t);
  const auto r = judge_report(report, [](const std::string& id) { return "task " + id; }, client);
  ASSERT_EQ(r.samples.size(), 2u);
  EXPECT_EQ(r.samples[0].id, "a");
  EXPECT_EQ(r.samples[1].id, "c");
  EXPECT_DOUBLE_EQ(*r.samples[0].quality, 1.0);
  EXPECT_DOUBLE_EQ(*r.samples[1].quality, 0.5);
  EXPECT_DOUBLE_EQ(*r.mean_quality, 0.75);
  EXPECT_EQ(t->total.load(), 4);
  EXPECT_LE(t->peak.load(), 2);
  for (const auto& s : r.samples) {
    const auto it = std::find_if(report.samples.begin(), report.samples.end(), [&](auto& x) { return x.id == s.id; });
    EXPECT_TRUE(it->all_satisfied);
  }
}

#ifdef AGD_WITH_JUDGE_HTTP

TEST(HttpTransport, SplitUrl) {
  const auto u = split_url("https://api.example.com:8443/v1/chat/completions");
  EXPECT_EQ(u.origin, "https://api.example.com:8443");
  EXPECT_EQ(u.path, "/v1/chat/completions");
  EXPECT_EQ(split_url("http://h").path, "/");
  EXPECT_THROW(split_url("ftp://h/x"), ConfigError);
}

TEST(HttpTransport, LoopbackEndpoint) {
  httplib::Server svr;
  std::atomic<int> hits{0};
  std::string seen_auth;
  svr.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    if (hits++ == 0) {
      res.status = 503;
      return;
    }
    seen_auth = req.get_header_value("Authorization");
    const auto body = nlohmann::json::parse(req.body);
    const bool is_question = body["messages"][0]["content"].get<std::string>().rfind("The following", 0) == 0;
    res.set_content(chat_body(is_question ? "1: Question: Is it short?" : "1. Question: Is it short?. Reason: yes: Answer: Yes"),
                    "application/json");
  });
  const int port = svr.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { svr.listen_after_bind(); });
  svr.wait_until_ready();

  ::setenv("AGD_TEST_JUDGE_TOKEN", "tok", 1);
  auto cfg = test_config();
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.token_env = "AGD_TEST_JUDGE_TOKEN";
  cfg.timeout_seconds = 5;
  JudgeClient client(cfg, std::make_shared<HttpTransport>(), [](double) {});
  const auto q = client.generate_quality_questions("Write one line.");
  const auto v = client.answer_questions("Write one line.", "A line.", q);
  svr.stop();
  th.join();
  EXPECT_EQ(q, (std::vector<std::string>{"Is it short?"}));
  EXPECT_DOUBLE_EQ(quality_score(v), 1.0);
  EXPECT_EQ(hits.load(), 3);
  EXPECT_EQ(seen_auth, "Bearer tok");
}

TEST(HttpTransport, ClientErrorIsNotRetried) {
  httplib::Server svr;
  std::atomic<int> hits{0};
  svr.Post("/c", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 401;
  });
  const int port = svr.bind_to_any_port("127.0.0.1");
  std::thread th([&] { svr.listen_after_bind(); });
  svr.wait_until_ready();
  auto cfg = test_config();
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/c";
  JudgeClient client(cfg, std::make_shared<HttpTransport>(), [](double) {});
  EXPECT_THROW(client.complete("x"), IoError);
  svr.stop();
  th.join();
  EXPECT_EQ(hits.load(), 1);
}

#endif
