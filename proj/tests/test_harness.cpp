#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "agd/eval.hpp"
#include "agd/train.hpp"
#include "support/constraint_cases.hpp"
#include "support/fixtures.hpp"

using namespace agd;
using agd::testing::random_model;
using agd::testing::small_config;

TEST(Constraints, TruthTable) {
  const auto cases = agd::testing::constraint_truth_table();
  ASSERT_EQ(cases.size(), 30u);
  for (const auto& c : cases) EXPECT_EQ(check_constraint(c.output, c.spec), c.expected) << c.output;
}

TEST(Constraints, ExcludeIsNegatedIncludeOnSingleWords) {
  const std::vector<std::string> outputs{"the sun is up", "Sunny day", "SUN!", "", "moon,sun", "sunsun"};
  for (const auto& o : outputs)
    for (const std::string w : {"sun", "moon", "day"})
      EXPECT_NE(check_constraint(o, ConstraintSpec::include({w})), check_constraint(o, ConstraintSpec::exclude({w})));
}

TEST(Constraints, JsonRoundTripAndValidation) {
  for (const auto& c : agd::testing::constraint_truth_table())
    EXPECT_EQ(constraint_from_json(nlohmann::json::parse(to_json(c.spec).dump())), c.spec);
  EXPECT_THROW(constraint_from_json(nlohmann::json{{"type", "sonnet"}}), DataError);
  EXPECT_THROW(constraint_from_json(nlohmann::json{{"type", "keywords_include"}, {"keywords", nlohmann::json::array()}}),
               DataError);
  EXPECT_THROW(constraint_from_json(nlohmann::json{{"type", "min_words"}}), DataError);
}

TEST(Recall, Examples) {
  EXPECT_DOUBLE_EQ(answer_recall("The answer is Paris.", {"Paris"}), 1.0);
  EXPECT_DOUBLE_EQ(answer_recall("It is in New York.", {"New York City"}), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(answer_recall("John F Kennedy", {"JFK", "John F. Kennedy"}), 1.0);
  EXPECT_DOUBLE_EQ(answer_recall("nothing here", {"Paris"}), 0.0);
  EXPECT_THROW(answer_recall("x", {}), DataError);
}

TEST(Recall, AppendingNeverDecreases) {
  std::mt19937_64 rng(2);
  const std::vector<std::string> words{"new", "york", "city", "the", "paris", ",", "is", "John", "F.", "kennedy"};
  for (int trial = 0; trial < 300; ++trial) {
    std::string out;
    const std::vector<std::string> gold{"New York City", "John F. Kennedy"};
    double prev = answer_recall(out, gold);
    for (int k = 0; k < 8; ++k) {
      out += " " + words[rng() % words.size()];
      const double now = answer_recall(out, gold);
      EXPECT_GE(now, prev);
      prev = now;
    }
  }
}

namespace {
DecodeResult fake_decode(const std::string& text) {
  DecodeResult r;
  r.text = text;
  r.trace.resize(2);
  r.trace[0].gated = true;
  return r;
}
}  // namespace

TEST(Metrics, HandTable) {
  const auto t = agd::testing::metric_hand_table();
  std::map<std::string, std::string> outs;
  for (std::size_t i = 0; i < t.samples.size(); ++i) outs[t.samples[i].id] = t.outputs[i];
  const auto r = eval_instruction_following(t.samples, [&](const IFSample& s) { return fake_decode(outs.at(s.id)); });
  EXPECT_EQ(*r.pla, t.pla);
  EXPECT_EQ(*r.ila, t.ila);
  EXPECT_DOUBLE_EQ(r.gated_fraction, 0.5);
}

TEST(Metrics, Definitions) {
  IFSample s{"a", "i", "t", {ConstraintSpec::include({"sun"}), ConstraintSpec::no_commas()}};
  auto r = eval_instruction_following({s}, [](const IFSample&) { return fake_decode("moon"); });
  EXPECT_EQ(*r.pla, 0.0);
  EXPECT_EQ(*r.ila, 0.5);
  r = eval_instruction_following({s}, [](const IFSample&) { return fake_decode("sun"); });
  EXPECT_EQ(*r.pla, 1.0);
  EXPECT_EQ(*r.ila, 1.0);
}

TEST(Metrics, SingleConstraintCorporaHavePlaEqualIla) {
  std::mt19937_64 rng(5);
  std::vector<IFSample> samples;
  std::map<std::string, std::string> outs;
  const auto cases = agd::testing::constraint_truth_table();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    samples.push_back({"s" + std::to_string(i), "i", "t", {cases[i].spec}});
    outs[samples.back().id] = cases[i].output;
  }
  const auto r = eval_instruction_following(samples, [&](const IFSample& s) { return fake_decode(outs.at(s.id)); });
  EXPECT_EQ(*r.pla, *r.ila);
}

TEST(Metrics, DecodeFailuresAreFlaggedAndExcluded) {
  std::vector<IFSample> samples{{"ok", "i", "t", {ConstraintSpec::no_commas()}},
                                {"bad", "i", "t", {ConstraintSpec::no_commas()}}};
  const auto r = eval_instruction_following(samples, [](const IFSample& s) {
    if (s.id == "bad") throw RangeError("too long");
    return fake_decode("x, y");
  });
  EXPECT_EQ(r.failed, 1u);
  EXPECT_EQ(r.evaluated, 1u);
  EXPECT_EQ(*r.samples[1].error, "too long");
  EXPECT_EQ(*r.pla, 0.0);
  EXPECT_THROW(eval_instruction_following({}, [](const IFSample&) { return fake_decode(""); }), DataError);
}

TEST(Datasets, ZeroConstraintSampleRejected) {
  std::istringstream in(R"({"id":"a","instruction":"i","task":"t","constraints":[]})");
  EXPECT_THROW(read_if_samples(in), DataError);
  std::istringstream dup(
      R"({"id":"a","instruction":"i","task":"t","constraints":[{"type":"no_commas"}]})"
      "\n"
      R"({"id":"a","instruction":"i","task":"t","constraints":[{"type":"no_commas"}]})");
  EXPECT_THROW(read_if_samples(dup), DataError);
  std::istringstream qa(R"({"id":"q","question":"?","answers":[]})");
  EXPECT_THROW(read_qa_samples(qa), DataError);
}

TEST(Datasets, JsonlRoundTrip) {
  const auto t = agd::testing::metric_hand_table();
  std::stringstream ss;
  write_jsonl(ss, t.samples);
  EXPECT_EQ(read_if_samples(ss), t.samples);
  std::vector<QASample> qa{{"q1", "who?", std::nullopt, {"a", "b"}}, {"q2", "k", std::string("k5"), {"5"}}};
  std::stringstream qs;
  write_jsonl(qs, qa);
  EXPECT_EQ(read_qa_samples(qs), qa);
}

TEST(Percentile, NearestRank) {
  std::vector<double> v;
  for (int i = 10; i >= 1; --i) v.push_back(i / 10.0);
  EXPECT_EQ(nearest_rank_percentile(v, 0.8), 0.8);
  EXPECT_EQ(nearest_rank_percentile(v, 0.05), 0.1);
  EXPECT_EQ(nearest_rank_percentile(v, 0.99), 1.0);
  EXPECT_THROW(nearest_rank_percentile(v, 1.0), ConfigError);
  EXPECT_THROW(nearest_rank_percentile(v, 0.0), ConfigError);
  EXPECT_THROW(nearest_rank_percentile({}, 0.5), DataError);
}

TEST(Percentile, MatchesCountingOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> v(1 + rng() % 40);
    for (auto& x : v) x = static_cast<double>(rng() % 15) / 4.0;  // ties on purpose
    const double p = std::uniform_real_distribution<double>(0.001, 0.999)(rng);
    // smallest element whose at-or-below count reaches p·N
    double want = INFINITY;
    for (double c : v) {
      const auto below = std::count_if(v.begin(), v.end(), [&](double y) { return y <= c; });
      if (static_cast<double>(below) >= p * static_cast<double>(v.size())) want = std::min(want, c);
    }
    EXPECT_EQ(nearest_rank_percentile(v, p), want);
  }
}

TEST(Calibration, MonotoneInPercentile) {
  auto c = small_config(2, 2, 8, 12);
  const auto m = random_model<double>(c, 4, 0.8);
  std::mt19937_64 rng(1);
  std::vector<Prompt> prompts;
  for (int i = 0; i < 10; ++i) prompts.push_back(Prompt{agd::testing::random_tokens(rng, 5, 12), {}});
  double prev = -1;
  for (double p : {0.1, 0.3, 0.5, 0.8, 0.95}) {
    const double tau = calibrate_entropy_threshold(m, prompts, p, 6);
    EXPECT_GE(tau, prev);
    prev = tau;
  }
  EXPECT_THROW(calibrate_entropy_threshold(m, prompts, 1.0, 6), ConfigError);
  EXPECT_THROW(calibrate_entropy_threshold(m, {}, 0.8, 6), DataError);
}

TEST(ToyTask, DeterministicAndDisjoint) {
  for (auto kind : {ToyTaskKind::kv_lookup, ToyTaskKind::keyword_instruction}) {
    ToyTaskSpec s;
    s.kind = kind;
    s.n_train = 50;
    s.n_eval = 20;
    s.noise = 0.3;
    s.seed = 9;
    const auto a = generate_toy_task(s), b = generate_toy_task(s);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.eval_qa, b.eval_qa);
    EXPECT_EQ(a.eval_if, b.eval_if);
    std::set<std::string> train_ids;
    for (const auto& t : a.train) train_ids.insert(t.id);
    for (const auto& e : a.eval_qa) EXPECT_FALSE(train_ids.count(e.id));
    for (const auto& e : a.eval_if) EXPECT_FALSE(train_ids.count(e.id));
    EXPECT_EQ(a.train.size(), 50u);
    EXPECT_EQ(a.eval_qa.size() + a.eval_if.size(), 20u);
  }
}

TEST(ToyTask, KvAnswersInContextWithoutNoise) {
  ToyTaskSpec s;
  s.n_train = 300;
  s.n_eval = 100;
  const auto corpus = generate_toy_task(s);
  for (const auto& q : corpus.train_qa) {
    const auto pos = q.context->find(q.question);
    ASSERT_NE(pos, std::string::npos);
    EXPECT_EQ(q.context->substr(pos + 1, 1), q.answers[0]);
  }
  for (const auto& q : corpus.eval_qa) EXPECT_NE(q.context->find(q.question + q.answers[0]), std::string::npos);
  s.noise = 0.5;
  const auto noisy = generate_toy_task(s);
  std::size_t off = 0;
  const auto defaults = kv_default_values(s);
  for (const auto& q : noisy.train_qa) {
    const bool in_ctx = q.context->find(q.question + q.answers[0]) != std::string::npos;
    if (!in_ctx) {
      ++off;
      EXPECT_EQ(q.answers[0][0], defaults[q.question[0] - 'a']);
    }
  }
  EXPECT_GT(off, 50u);
  for (const auto& q : noisy.eval_qa) EXPECT_NE(q.context->find(q.question + q.answers[0]), std::string::npos);
}

TEST(ToyTask, KeywordReferencesSatisfyConstraintsWithoutNoise) {
  ToyTaskSpec s;
  s.kind = ToyTaskKind::keyword_instruction;
  s.n_train = 200;
  const auto corpus = generate_toy_task(s);
  for (std::size_t i = 0; i < corpus.train.size(); ++i)
    for (const auto& c : corpus.train_if[i].constraints) EXPECT_TRUE(check_constraint(corpus.train[i].completion, c));
  s.keywords = {"comet"};
  EXPECT_THROW(generate_toy_task(s), ConfigError);
  s.keywords.clear();
  s.noise = 1.0;
  EXPECT_THROW(generate_toy_task(s), ConfigError);
}

TEST(Prompts, Templates) {
  const auto ob = render_open_book("Who?", "Doc.");
  EXPECT_EQ(ob.text,
            "You are a helpful assistant.\n\nDoc. \n\nBased on this text, answer this question:\nQ: Who?\nA:\n");
  const auto ctx = ob.segments.at("context");
  EXPECT_EQ(ob.text.substr(ctx.begin, ctx.end - ctx.begin), "Doc.");
  const auto ins = ob.segments.at("instruction");
  EXPECT_EQ(ob.text.substr(ins.begin, ins.end - ins.begin), "You are a helpful assistant.");
  EXPECT_EQ(render_closed_book("Who?").text, "You are a helpful assistant.\n\nWho?\n");
  const auto ip = render_instruction_prompt("use sun", "words:");
  EXPECT_EQ(ip.text, "use sun\n\nwords:\n");
  const auto task = ip.segments.at("task");
  EXPECT_EQ(ip.text.substr(task.begin, task.end - task.begin), "words:");
  const auto kv = render_kv_prompt("c", "a1 c5");
  EXPECT_EQ(kv.text, "a1 c5 ?c");
  const auto p = Prompt::from_text(kv.text, kv.segments);
  EXPECT_EQ(p.segment("context").begin, 1u);
  EXPECT_EQ(p.segment("context").end, 6u);
}

TEST(Report, JsonRoundTrip) {
  const auto t = agd::testing::metric_hand_table();
  auto r = eval_instruction_following(t.samples, [&](const IFSample& s) {
    if (s.id == "s2") throw DataError("boom");
    return fake_decode(t.outputs[std::stoul(s.id.substr(1))]);
  }, 3, nlohmann::json{{"seed", 7}, {"paths", {"a.jsonl"}}});
  r.gated_fraction = 0.1 + 0.2;  // not exactly representable in decimal
  EXPECT_EQ(eval_report_from_json(nlohmann::json::parse(to_json(r).dump())), r);
  auto q = eval_qa({{"q", "k", std::string("k5"), {"5"}}}, [](const QASample&) { return fake_decode("5"); });
  EXPECT_EQ(*q.recall, 1.0);
  EXPECT_FALSE(q.pla);
  EXPECT_EQ(eval_report_from_json(nlohmann::json::parse(to_json(q).dump())), q);
}

TEST(Eval, ParallelMatchesSerial) {
  auto c = small_config(2, 2, 8, 260);
  c.max_seq_len = 48;
  const auto m = random_model<float>(c, 2, 0.5);
  ToyTaskSpec s;
  s.n_train = 1;
  s.n_eval = 12;
  const auto corpus = generate_toy_task(s);
  DecodeConfig cfg;
  cfg.method = DecodeMethod::agd;
  cfg.max_new_tokens = 3;
  const auto fn = [&](const QASample& q) {
    const auto p = qa_prompt(q, QAPromptStyle::kv);
    return decode(m, p, bind_roi(cfg, p, "context"));
  };
  auto a = eval_qa(corpus.eval_qa, fn, 1), b = eval_qa(corpus.eval_qa, fn, 4);
  b.started_at = a.started_at;
  b.finished_at = a.finished_at;
  EXPECT_EQ(a, b);
}

namespace {
ModelConfig train_config() {
  auto c = small_config(1, 2, 8, 260);
  c.max_seq_len = 24;
  return c;
}
}  // namespace

TEST(Train, ZeroStepsReturnsInitialisation) {
  TrainOptions o;
  o.steps = 0;
  o.seed = 4;
  const auto m = train_toy_model<double>(train_config(), {}, o);
  const auto init = init_model<double>(train_config(), 4, o.init);
  m.for_each_tensor([&](const std::string& name, const Tensor<double>& t) {
    init.for_each_tensor([&](const std::string& n2, const Tensor<double>& u) {
      if (name == n2) EXPECT_EQ(t, u) << name;
    });
  });
}

TEST(Train, GradientMatchesFiniteDifferences) {
  const auto c = train_config();
  const std::vector<TrainExample> batch_ex{make_train_example("ab c", "xy"), make_train_example("q", "zz")};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto m = random_model<double>(c, seed);
    std::vector<const TrainExample*> batch{&batch_ex[0], &batch_ex[1]};
    Model<double> g = Model<double>::zeros(c);
    batch_gradient(m, batch, g);
    std::vector<double> fd, an;
    std::vector<Tensor<double>*> mt;
    std::vector<const Tensor<double>*> gt;
    m.for_each_tensor([&](const std::string&, Tensor<double>& t) { mt.push_back(&t); });
    g.for_each_tensor([&](const std::string&, const Tensor<double>& t) { gt.push_back(&t); });
    const double h = 1e-4;
    for (std::size_t k = 0; k < mt.size(); ++k) {
      const std::size_t stride = std::max<std::size_t>(1, mt[k]->size() / 23);
      for (std::size_t i = 0; i < mt[k]->size(); i += stride) {
        const double o = (*mt[k])[i];
        (*mt[k])[i] = o + h;
        const double lp = mean_loss(m, batch_ex);
        (*mt[k])[i] = o - h;
        const double lm = mean_loss(m, batch_ex);
        (*mt[k])[i] = o;
        fd.push_back((lp - lm) / (2 * h));
        an.push_back((*gt[k])[i]);
      }
    }
    EXPECT_LE(agd::testing::rel_l2(an, fd), 1e-3) << "seed " << seed;
  }
}

TEST(Train, LossDecreasesOnHeldOut) {
  ToyTaskSpec s;
  s.n_train = 400;
  s.n_eval = 50;
  s.pairs_per_context = 2;
  const auto corpus = generate_toy_task(s);
  std::vector<TrainText> held;
  for (const auto& q : corpus.eval_qa)
    held.push_back({q.id, render_kv_prompt(q.question, *q.context).text, q.answers[0]});
  const auto train_ex = make_train_examples(corpus.train), held_ex = make_train_examples(held);
  TrainOptions o;
  o.steps = 150;
  o.learning_rate = 0.3;
  o.batch_size = 8;
  o.init.weight_std = 0.1;
  o.init.embed_std = 1.0;
  TrainOptions zero = o;
  zero.steps = 0;
  const auto before = mean_loss(train_toy_model<float>(train_config(), train_ex, zero), held_ex);
  TrainStats stats;
  const auto m = train_toy_model<float>(train_config(), train_ex, o, &stats);
  EXPECT_LT(mean_loss(m, held_ex), before);
  EXPECT_EQ(stats.batch_losses.size(), 150u);
  EXPECT_TRUE(all_finite(m));
}

TEST(Train, DivergenceReportsStep) {
  const std::vector<TrainExample> ex{make_train_example("ab", "c")};
  TrainOptions o;
  o.steps = 200;
  o.learning_rate = 1e6;
  o.init.weight_std = 1.0;
  o.init.embed_std = 1.0;
  try {
    train_toy_model<float>(train_config(), ex, o);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_LT(e.step(), 200u);
  }
}

TEST(Train, RejectsBadInputs) {
  TrainOptions o;
  o.steps = 1;
  EXPECT_THROW(train_toy_model<float>(train_config(), {}, o), DataError);
  EXPECT_THROW(train_toy_model<float>(train_config(), {make_train_example(std::string(40, 'x'), "y")}, o), DataError);
  o.learning_rate = 0;
  EXPECT_THROW(train_toy_model<float>(train_config(), {make_train_example("a", "b")}, o), ConfigError);
}
