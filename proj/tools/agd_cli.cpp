// agd: command-line front end for the attribution-guided decoding lab.
//
// Logs go to stderr; results go to --out files or stdout. Every run writes a
// manifest (argv, resolved config, paths, seed, version, wall time) that
// `agd replay` re-executes.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "agd/decoding.hpp"
#include "agd/eval.hpp"
#include "agd/heads.hpp"
#include "agd/serialize.hpp"
#include "agd/toy_task.hpp"
#include "agd/train.hpp"
#include "agd/weights_io.hpp"
#include "json.hpp"

#ifdef AGD_WITH_JUDGE_HTTP
#include "agd/judge_http.hpp"
#endif

#ifndef AGD_VERSION
#define AGD_VERSION "0.0.0"
#endif

using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

template <typename... Args>
void log(const Args&... args) {
  std::ostringstream os;
  os << "agd: ";
  (os << ... << args);
  os << '\n';
  std::cerr << os.str();
}

std::string read_file(const std::string& path) {
  auto in = agd::open_input(path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json_file(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw agd::DataError(path + ": " + e.what());
  }
}

/// Writes to `path`, or to stdout when `path` is empty or "-".
void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    std::cout.flush();
    return;
  }
  auto out = agd::open_output(path);
  out << text;
  if (!out) throw agd::IoError("failed writing " + path);
}

/// Model text may hold bytes that are not UTF-8; they are written as U+FFFD.
std::string dumps(const json& j, int indent = -1) {
  return j.dump(indent, ' ', false, json::error_handler_t::replace);
}

std::string jsonl(const std::vector<json>& rows) {
  std::string s;
  for (const auto& r : rows) s += dumps(r) + "\n";
  return s;
}

struct Run {
  std::string subcommand;
  json config = json::object();
  json inputs = json::object();
  json outputs = json::object();
  std::optional<std::uint64_t> seed;
  std::string manifest_path;
};

// ---------------------------------------------------------------------------
// shared flags

struct ModelFlags {
  std::string path;
  bool f64 = false;
};

void add_model_flags(CLI::App* app, ModelFlags& f) {
  app->add_option("--model", f.path, "Weight file (.agdw)")->required()->check(CLI::ExistingFile);
  app->add_flag("--f64", f.f64, "Run in 64-bit floating point");
}

/// Runs `fn.template operator()<T>()` with T = double under --f64, float otherwise.
template <typename Fn>
void with_precision(bool f64, Fn&& fn) {
  if (f64)
    fn.template operator()<double>();
  else
    fn.template operator()<float>();
}

struct DecodeFlags {
  std::optional<std::string> method;
  std::optional<std::size_t> k;
  std::optional<double> pi_min, p, alpha, tau, beta, epsilon;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_new_tokens, contrast_layer;
  std::optional<std::string> attr_method, attention_rule, cad_drop, roi_segment, roi_heads, head_set;
};

void add_decode_flags(CLI::App* app, DecodeFlags& f) {
  app->add_option("--method", f.method, "greedy | nucleus | cad | dola | agd")
      ->check(CLI::IsMember({"greedy", "nucleus", "cad", "dola", "agd"}));
  app->add_option("--k", f.k, "AGD candidate count (default 5)");
  app->add_option("--pmin", f.pi_min, "AGD minimum candidate probability (default 0.05)");
  app->add_option("--tau", f.tau, "Entropy gate in nats; omitted = attribution on every step");
  app->add_option("--attr", f.attr_method, "Attribution method: lrp | ixg (default lrp)")
      ->check(CLI::IsMember({"lrp", "ixg"}));
  app->add_option("--epsilon", f.epsilon, "LRP stabiliser (default 1e-6)");
  app->add_option("--attention-rule", f.attention_rule, "value-path | bilinear-split")
      ->check(CLI::IsMember({"value-path", "bilinear-split"}));
  app->add_option("--roi-segment", f.roi_segment, "ROI = the named prompt segment");
  app->add_option("--roi-heads", f.roi_heads, "ROI = a head set from an extract-heads file")
      ->check(CLI::ExistingFile);
  app->add_option("--head-set", f.head_set, "Which head set of --roi-heads: ctx | param (default ctx)")
      ->check(CLI::IsMember({"ctx", "param"}));
  app->add_option("--p", f.p, "Nucleus mass (default 0.95)");
  app->add_option("--seed", f.seed, "Sampling seed (default 0)");
  app->add_option("--alpha", f.alpha, "CAD contrast strength (default 1)");
  app->add_option("--cad-drop", f.cad_drop, "Segment removed for the CAD contrast input (default instruction)");
  app->add_option("--contrast-layer", f.contrast_layer, "DoLA early-exit residual index (default 0)");
  app->add_option("--beta", f.beta, "DoLA plausibility ratio (default 0.1)");
  app->add_option("--max-new-tokens", f.max_new_tokens, "Generation budget (default 64)");
}

/// Flag overrides in the decode-request JSON vocabulary; segment ROIs are bound per prompt.
json decode_overrides(const DecodeFlags& f) {
  json j = json::object();
  if (f.method) j["method"] = *f.method;
  if (f.k) j["k"] = *f.k;
  if (f.pi_min) j["pi_min"] = *f.pi_min;
  if (f.tau) j["tau"] = *f.tau;
  if (f.attr_method) j["attr_method"] = *f.attr_method;
  if (f.epsilon) j["epsilon"] = *f.epsilon;
  if (f.attention_rule) j["attention_rule"] = *f.attention_rule;
  if (f.p) j["p"] = *f.p;
  if (f.seed) j["seed"] = *f.seed;
  if (f.alpha) j["alpha"] = *f.alpha;
  if (f.cad_drop) j["cad_drop_segment"] = *f.cad_drop;
  if (f.contrast_layer) j["contrast_layer"] = *f.contrast_layer;
  if (f.beta) j["beta"] = *f.beta;
  if (f.max_new_tokens) j["max_new_tokens"] = *f.max_new_tokens;
  if (f.roi_heads) {
    const std::string key = f.head_set.value_or("ctx") + "_heads";
    j["roi"] = agd::to_json(agd::head_roi_from_json(read_json_file(*f.roi_heads), key));
  }
  if (f.roi_segment && f.roi_heads) throw CLI::ValidationError("--roi-segment and --roi-heads are exclusive");
  return j;
}

std::size_t default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------
// decode

struct DecodeCmd {
  ModelFlags model;
  DecodeFlags flags;
  std::string request, prompt_text, out, result_out;
};

void run_decode(const DecodeCmd& c, Run& run) {
  agd::DecodeRequest req;
  if (!c.request.empty()) {
    req = agd::decode_request_from_json(read_json_file(c.request));
    run.inputs["request"] = c.request;
  } else {
    req.prompt_text = c.prompt_text;
    req.prompt = agd::Prompt::from_text(c.prompt_text);
  }
  agd::apply_decode_fields(decode_overrides(c.flags), req.config, &req.prompt);
  req.config = agd::bind_roi(req.config, req.prompt, c.flags.roi_segment);
  run.inputs["model"] = c.model.path;
  run.seed = req.config.seed;

  with_precision(c.model.f64, [&]<typename T>() {
    const auto m = agd::load_model<T>(c.model.path);
    req.config.validate(m.config);
    run.config = agd::to_json(req.config);
    run.config["f64"] = c.model.f64;
    const auto r = agd::decode(m, req.prompt, req.config);
    std::vector<json> rows;
    for (const auto& t : r.trace) rows.push_back(agd::to_json(t));
    if (!c.out.empty()) {
      emit(c.out, jsonl(rows));
      run.outputs["trace"] = c.out;
    }
    const json result{{"text", r.text}, {"tokens", r.tokens}, {"steps", r.trace.size()},
                      {"gated_fraction", r.gated_fraction}, {"wall_seconds", r.wall_seconds}};
    emit(c.result_out, dumps(result, 2) + "\n");
    if (!c.result_out.empty() && c.result_out != "-") run.outputs["result"] = c.result_out;
    log("decoded ", r.trace.size(), " tokens in ", r.wall_seconds, " s");
  });
}

// ---------------------------------------------------------------------------
// attribute

struct AttributeCmd {
  ModelFlags model;
  std::string request, prompt_text, out, method = "lrp", attention_rule = "value-path";
  std::optional<std::size_t> target_id;
  std::optional<std::string> target_char;
  double epsilon = 1e-6;
  bool raw = false;
};

void run_attribute(const AttributeCmd& c, Run& run) {
  agd::Prompt prompt;
  if (!c.request.empty()) {
    prompt = agd::decode_request_from_json(read_json_file(c.request)).prompt;
    run.inputs["request"] = c.request;
  } else {
    prompt = agd::Prompt::from_text(c.prompt_text);
  }
  run.inputs["model"] = c.model.path;
  agd::LrpConfig lrp;
  lrp.epsilon = c.epsilon;
  lrp.attention_rule = agd::attention_rule_from_string(c.attention_rule);
  lrp.validate();
  const auto method = agd::attribution_method_from_string(c.method);
  if (c.target_char && c.target_char->size() != 1) throw agd::DataError("--target-char must be a single byte");

  with_precision(c.model.f64, [&]<typename T>() {
    const auto m = agd::load_model<T>(c.model.path);
    if (prompt.tokens.size() > m.config.max_seq_len) throw agd::RangeError("prompt exceeds max_seq_len");
    const auto cache = agd::forward(m, prompt.tokens);
    agd::TokenId target;
    if (c.target_id)
      target = static_cast<agd::TokenId>(*c.target_id);
    else if (c.target_char)
      target = static_cast<unsigned char>((*c.target_char)[0]);
    else {
      const auto last = cache.logits.row(cache.logits.rows() - 1);
      target = static_cast<agd::TokenId>(std::max_element(last.begin(), last.end()) - last.begin());
    }
    const auto map = agd::attribute(m, cache, target, method, lrp);
    auto hm = agd::heatmap_json(map, prompt.tokens, c.raw);
    hm["absorbed"] = static_cast<double>(map.absorbed);
    hm["target_logit"] = static_cast<double>(map.target_logit);
    emit(c.out, dumps(hm) + "\n");
    if (!c.out.empty() && c.out != "-") run.outputs["heatmap"] = c.out;
    run.config = {{"method", c.method}, {"epsilon", c.epsilon}, {"attention_rule", c.attention_rule},
                  {"target", target}, {"raw", c.raw}, {"f64", c.model.f64}};
    log("attributed target ", agd::Tokenizer::label(target), " over ", prompt.tokens.size(), " positions");
  });
}

// ---------------------------------------------------------------------------
// eval

struct EvalCmd {
  ModelFlags model;
  DecodeFlags flags;
  std::string data, task = "if", style = "open-book", out;
  std::size_t jobs = default_jobs();
};

void run_eval(const EvalCmd& c, Run& run) {
  run.inputs = {{"model", c.model.path}, {"data", c.data}};
  agd::DecodeConfig base;
  auto overrides = decode_overrides(c.flags);
  agd::apply_decode_fields(overrides, base);
  run.seed = base.seed;

  with_precision(c.model.f64, [&]<typename T>() {
    const auto m = agd::load_model<T>(c.model.path);
    base.validate(m.config);
    json cfg = agd::to_json(base);
    cfg["task"] = c.task;
    if (c.flags.roi_segment) cfg["roi"] = {{"segment", *c.flags.roi_segment}};
    cfg["f64"] = c.model.f64;
    auto in = agd::open_input(c.data);
    agd::EvalReport report;
    if (c.task == "if") {
      const auto samples = agd::read_if_samples(in);
      log("evaluating ", samples.size(), " instruction-following samples with ", c.jobs, " job(s)");
      report = agd::eval_instruction_following(
          samples,
          [&](const agd::IFSample& s) {
            const auto p = agd::if_prompt(s);
            return agd::decode(m, p, agd::bind_roi(base, p, c.flags.roi_segment));
          },
          c.jobs, cfg);
    } else {
      const auto style = agd::qa_prompt_style_from_string(c.style);
      cfg["style"] = c.style;
      const auto samples = agd::read_qa_samples(in);
      log("evaluating ", samples.size(), " QA samples with ", c.jobs, " job(s)");
      report = agd::eval_qa(
          samples,
          [&](const agd::QASample& s) {
            const auto p = agd::qa_prompt(s, style);
            return agd::decode(m, p, agd::bind_roi(base, p, c.flags.roi_segment));
          },
          c.jobs, cfg);
    }
    run.config = cfg;
    emit(c.out, dumps(agd::to_json(report), 2) + "\n");
    if (!c.out.empty() && c.out != "-") run.outputs["report"] = c.out;
    auto pct = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("n/a"); };
    log("evaluated ", report.evaluated, " failed ", report.failed, "  PLA ", pct(report.pla), "  ILA ",
        pct(report.ila), "  recall ", pct(report.recall), "  attributed ", pct(report.gated_fraction));
  });
}

// ---------------------------------------------------------------------------
// extract-heads

struct HeadsCmd {
  ModelFlags model;
  std::string data, out, method = "lrp";
  std::size_t n = 4;
  double epsilon = 1e-6;
  bool mean_over_tokens = false;
  std::size_t jobs = default_jobs();
};

void run_extract_heads(const HeadsCmd& c, Run& run) {
  run.inputs = {{"model", c.model.path}, {"data", c.data}};
  auto in = agd::open_input(c.data);
  const auto samples = agd::read_counterfactual_jsonl(in);
  agd::HeadScoringOptions o;
  o.method = agd::attribution_method_from_string(c.method);
  o.lrp.epsilon = c.epsilon;
  o.mean_over_tokens = c.mean_over_tokens;
  o.jobs = c.jobs;
  run.config = {{"n", c.n}, {"method", c.method}, {"epsilon", c.epsilon}, {"mean_over_tokens", c.mean_over_tokens},
                {"f64", c.model.f64}};
  with_precision(c.model.f64, [&]<typename T>() {
    const auto m = agd::load_model<T>(c.model.path);
    log("scoring ", m.config.n_layers * m.config.n_heads, " heads over ", samples.size(), " samples");
    const auto scores = agd::head_difference_scores(m, samples, o);
    const auto sets = agd::extract_head_sets(scores, c.n);
    emit(c.out, dumps(agd::to_json(sets, scores), 2) + "\n");
    if (!c.out.empty() && c.out != "-") run.outputs["heads"] = c.out;
  });
}

// ---------------------------------------------------------------------------
// calibrate-tau

struct TauCmd {
  ModelFlags model;
  std::string data, task = "if", style = "open-book", out;
  double percentile = 0.8;
  std::size_t max_new_tokens = 64;
  std::size_t jobs = default_jobs();
};

void run_calibrate_tau(const TauCmd& c, Run& run) {
  run.inputs = {{"model", c.model.path}, {"data", c.data}};
  run.config = {{"task", c.task}, {"percentile", c.percentile}, {"max_new_tokens", c.max_new_tokens},
                {"f64", c.model.f64}};
  std::vector<agd::Prompt> prompts;
  auto in = agd::open_input(c.data);
  if (c.task == "if") {
    for (const auto& s : agd::read_if_samples(in)) prompts.push_back(agd::if_prompt(s));
  } else {
    run.config["style"] = c.style;
    const auto style = agd::qa_prompt_style_from_string(c.style);
    for (const auto& s : agd::read_qa_samples(in)) prompts.push_back(agd::qa_prompt(s, style));
  }
  with_precision(c.model.f64, [&]<typename T>() {
    const auto m = agd::load_model<T>(c.model.path);
    const auto ent = agd::greedy_entropies(m, prompts, c.max_new_tokens, c.jobs);
    if (ent.empty()) throw agd::DataError("calibrate-tau: no decode steps");
    const double tau = agd::nearest_rank_percentile(ent, c.percentile);
    const json result{{"tau", tau}, {"percentile", c.percentile}, {"steps", ent.size()}, {"prompts", prompts.size()}};
    emit(c.out, dumps(result, 2) + "\n");
    if (!c.out.empty() && c.out != "-") run.outputs["tau"] = c.out;
    log("tau = ", tau, " nats (", c.percentile, " quantile of ", ent.size(), " greedy steps)");
  });
}

// ---------------------------------------------------------------------------
// gen-task

struct GenTaskCmd {
  std::string kind = "kv_lookup", out_dir;
  std::size_t n_train = 2000, n_eval = 200;
  double noise = 0.0;
  std::uint64_t seed = 0;
};

void run_gen_task(const GenTaskCmd& c, Run& run) {
  agd::ToyTaskSpec spec;
  spec.kind = agd::toy_task_kind_from_string(c.kind);
  spec.n_train = c.n_train;
  spec.n_eval = c.n_eval;
  spec.noise = c.noise;
  spec.seed = c.seed;
  spec.validate();
  const auto corpus = agd::generate_toy_task(spec);
  std::filesystem::create_directories(c.out_dir);
  const auto dir = std::filesystem::path(c.out_dir);
  std::vector<json> train;
  for (const auto& t : corpus.train) train.push_back(agd::to_json(t));
  emit((dir / "train.jsonl").string(), jsonl(train));
  std::vector<json> eval, train_samples;
  if (spec.kind == agd::ToyTaskKind::kv_lookup) {
    for (const auto& s : corpus.eval_qa) eval.push_back(agd::to_json(s));
    for (const auto& s : corpus.train_qa) train_samples.push_back(agd::to_json(s));
  } else {
    for (const auto& s : corpus.eval_if) eval.push_back(agd::to_json(s));
    for (const auto& s : corpus.train_if) train_samples.push_back(agd::to_json(s));
  }
  emit((dir / "eval.jsonl").string(), jsonl(eval));
  emit((dir / "train_samples.jsonl").string(), jsonl(train_samples));
  emit((dir / "task.json").string(), dumps(agd::to_json(spec), 2) + "\n");
  run.seed = c.seed;
  run.config = agd::to_json(spec);
  run.outputs = {{"dir", c.out_dir}};
  log("wrote ", train.size(), " training texts and ", eval.size(), " eval samples to ", c.out_dir);
}

// ---------------------------------------------------------------------------
// train-toy

struct TrainCmd {
  std::string train, config, out, losses;
  std::size_t layers = 2, heads = 4, d_model = 32, d_ff = 64, max_seq_len = 24;
  std::string activation = "gelu";
  std::size_t steps = 4000, batch = 16, log_every = 500;
  double lr = 0.3, weight_std = 0.1, embed_std = 1.0;
  std::uint64_t seed = 0;
  bool f64 = false;
};

void run_train_toy(const TrainCmd& c, Run& run) {
  agd::ModelConfig mc;
  if (!c.config.empty()) {
    mc = agd::config_from_json(read_json_file(c.config));
    run.inputs["config"] = c.config;
  } else {
    mc.n_layers = c.layers;
    mc.n_heads = c.heads;
    mc.d_model = c.d_model;
    mc.d_head = c.heads ? c.d_model / c.heads : 0;
    mc.d_ff = c.d_ff;
    mc.max_seq_len = c.max_seq_len;
    mc.activation = agd::activation_from_string(c.activation);
    mc.validate();
  }
  auto in = agd::open_input(c.train);
  const auto texts = agd::read_jsonl<agd::TrainText>(in, agd::train_text_from_json);
  const auto examples = agd::make_train_examples(texts);
  agd::TrainOptions o;
  o.steps = c.steps;
  o.learning_rate = c.lr;
  o.batch_size = c.batch;
  o.seed = c.seed;
  o.init.weight_std = c.weight_std;
  o.init.embed_std = c.embed_std;
  o.log_every = c.log_every;
  o.on_log = [](std::size_t step, double loss) { log("step ", step, " loss ", loss); };
  nlohmann::ordered_json mcj = mc;
  run.config = {{"model", json::parse(mcj.dump())}, {"steps", c.steps},         {"lr", c.lr},
                {"batch", c.batch},                 {"weight_std", c.weight_std}, {"embed_std", c.embed_std},
                {"f64", c.f64}};
  run.seed = c.seed;
  run.inputs["train"] = c.train;
  log("training on ", examples.size(), " examples for ", c.steps, " steps");
  with_precision(c.f64, [&]<typename T>() {
    agd::TrainStats stats;
    const auto m = agd::train_toy_model<T>(mc, examples, o, &stats);
    agd::save_model(m, c.out);
    run.outputs["model"] = c.out;
    if (!c.losses.empty()) {
      emit(c.losses, dumps(json{{"batch_losses", stats.batch_losses}}) + "\n");
      run.outputs["losses"] = c.losses;
    }
    log("final training loss ", agd::mean_loss(m, examples));
  });
}

// ---------------------------------------------------------------------------
// judge

struct JudgeCmd {
  std::string report, data, out, endpoint, model, token_env = "AGD_JUDGE_TOKEN";
  double timeout = 60;
  int retries = 3;
  double backoff = 1.0;
  std::size_t in_flight = 4;
};

void run_judge([[maybe_unused]] const JudgeCmd& c, [[maybe_unused]] Run& run) {
#ifndef AGD_WITH_JUDGE_HTTP
  throw agd::RuntimeFailure("this build has no HTTP judge transport (configure with -DAGD_WITH_JUDGE_HTTP=ON)");
#else
  agd::judge::JudgeConfig cfg;
  cfg.endpoint = c.endpoint;
  cfg.model = c.model;
  cfg.token_env = c.token_env;
  cfg.timeout_seconds = c.timeout;
  cfg.max_retries = c.retries;
  cfg.backoff_seconds = c.backoff;
  cfg.max_in_flight = c.in_flight;
  agd::judge::JudgeClient client(cfg, std::make_shared<agd::judge::HttpTransport>());
  const auto report = agd::eval_report_from_json(read_json_file(c.report));
  auto in = agd::open_input(c.data);
  std::map<std::string, std::string> tasks;
  for (const auto& s : agd::read_if_samples(in)) tasks[s.id] = s.task;
  const auto jr = agd::judge::judge_report(
      report,
      [&](const std::string& id) {
        const auto it = tasks.find(id);
        if (it == tasks.end()) throw agd::DataError("sample '" + id + "' missing from " + c.data);
        return it->second;
      },
      client);
  emit(c.out, dumps(agd::judge::to_json(jr, cfg), 2) + "\n");
  run.inputs = {{"report", c.report}, {"data", c.data}};
  run.config = {{"endpoint", c.endpoint}, {"model", c.model}, {"token_env", c.token_env}, {"timeout", c.timeout},
                {"retries", c.retries}, {"in_flight", c.in_flight}, {"temperature", "endpoint default"}};
  if (!c.out.empty() && c.out != "-") run.outputs["judge"] = c.out;
  log("judged ", jr.samples.size(), " constraint-satisfying samples; mean QS ",
      jr.mean_quality ? std::to_string(*jr.mean_quality) : std::string("n/a"));
  if (!jr.samples.empty() && !jr.mean_quality)
    throw agd::RuntimeFailure("no sample could be judged; first error: " + jr.samples.front().error.value_or("?"));
#endif
}

// ---------------------------------------------------------------------------

void write_manifest(const Run& run, const std::vector<std::string>& argv, double wall_seconds) {
  if (run.manifest_path == "none") return;
  const json m{{"tool", "agd"},
               {"version", AGD_VERSION},
               {"subcommand", run.subcommand},
               {"argv", argv},
               {"cwd", std::filesystem::current_path().string()},
               {"config", run.config},
               {"inputs", run.inputs},
               {"outputs", run.outputs},
               {"seed", run.seed ? json(*run.seed) : json(nullptr)},
               {"wall_seconds", wall_seconds},
               {"finished_at", agd::utc_timestamp()}};
  emit(run.manifest_path, dumps(m, 2) + "\n");
}

/// Primary output path of a subcommand, used to place its manifest.
std::string default_manifest_path(const std::string& sub, const std::string& primary_out) {
  if (!primary_out.empty() && primary_out != "-") return primary_out + ".manifest.json";
  return "agd-" + sub + ".manifest.json";
}

int run_cli(const std::vector<std::string>& argv) {
  CLI::App app{"Attribution-guided decoding lab", "agd"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", AGD_VERSION);
  std::string manifest;
  app.add_option("--manifest", manifest, "Run manifest path ('none' to skip); default <out>.manifest.json");

  DecodeCmd decode_c;
  auto* decode = app.add_subcommand("decode", "Decode one prompt and write the per-step trace");
  add_model_flags(decode, decode_c.model);
  auto* req_opt = decode->add_option("--request", decode_c.request, "Decode request JSON")->check(CLI::ExistingFile);
  decode->add_option("--prompt", decode_c.prompt_text, "Raw prompt text (no segments)")->excludes(req_opt);
  decode->add_option("--out", decode_c.out, "Step trace (JSON lines)");
  decode->add_option("--result", decode_c.result_out, "Result JSON (default stdout)");
  add_decode_flags(decode, decode_c.flags);

  AttributeCmd attr_c;
  auto* attribute = app.add_subcommand("attribute", "Export a relevance heatmap for one next-token target");
  add_model_flags(attribute, attr_c.model);
  auto* areq = attribute->add_option("--request", attr_c.request, "Decode request JSON (prompt only)")
                   ->check(CLI::ExistingFile);
  attribute->add_option("--prompt", attr_c.prompt_text, "Raw prompt text")->excludes(areq);
  auto* tid = attribute->add_option("--target-id", attr_c.target_id, "Target token id (default: greedy next token)");
  attribute->add_option("--target-char", attr_c.target_char, "Target token as a single byte")->excludes(tid);
  attribute->add_option("--method", attr_c.method, "lrp | ixg")->check(CLI::IsMember({"lrp", "ixg"}));
  attribute->add_option("--epsilon", attr_c.epsilon, "LRP stabiliser");
  attribute->add_option("--attention-rule", attr_c.attention_rule, "value-path | bilinear-split")
      ->check(CLI::IsMember({"value-path", "bilinear-split"}));
  attribute->add_flag("--raw", attr_c.raw, "Skip per-layer normalisation");
  attribute->add_option("--out", attr_c.out, "Heatmap JSON (default stdout)");

  EvalCmd eval_c;
  auto* eval = app.add_subcommand("eval", "Decode a dataset and score it");
  add_model_flags(eval, eval_c.model);
  eval->add_option("--data", eval_c.data, "Samples (JSON lines)")->required()->check(CLI::ExistingFile);
  eval->add_option("--task", eval_c.task, "if | qa")->check(CLI::IsMember({"if", "qa"}));
  eval->add_option("--style", eval_c.style, "QA prompt: open-book | closed-book | kv")
      ->check(CLI::IsMember({"open-book", "closed-book", "kv"}));
  eval->add_option("--jobs", eval_c.jobs, "Samples decoded in parallel")->check(CLI::PositiveNumber);
  eval->add_option("--out", eval_c.out, "Report JSON (default stdout)");
  add_decode_flags(eval, eval_c.flags);

  HeadsCmd heads_c;
  auto* heads = app.add_subcommand("extract-heads", "Score heads on counterfactual samples and pick head sets");
  add_model_flags(heads, heads_c.model);
  heads->add_option("--data", heads_c.data, "Counterfactual samples (JSON lines)")->required()->check(CLI::ExistingFile);
  heads->add_option("--n", heads_c.n, "Heads per set")->check(CLI::PositiveNumber);
  heads->add_option("--method", heads_c.method, "lrp | ixg")->check(CLI::IsMember({"lrp", "ixg"}));
  heads->add_option("--epsilon", heads_c.epsilon, "LRP stabiliser");
  heads->add_flag("--mean-over-tokens", heads_c.mean_over_tokens, "Average r_h over every answer token");
  heads->add_option("--jobs", heads_c.jobs, "Samples scored in parallel")->check(CLI::PositiveNumber);
  heads->add_option("--out", heads_c.out, "Head-set JSON (default stdout)");

  TauCmd tau_c;
  auto* tau = app.add_subcommand("calibrate-tau", "Entropy threshold from greedy decoding on a dataset");
  add_model_flags(tau, tau_c.model);
  tau->add_option("--data", tau_c.data, "Samples (JSON lines)")->required()->check(CLI::ExistingFile);
  tau->add_option("--task", tau_c.task, "if | qa")->check(CLI::IsMember({"if", "qa"}));
  tau->add_option("--style", tau_c.style, "QA prompt: open-book | closed-book | kv")
      ->check(CLI::IsMember({"open-book", "closed-book", "kv"}));
  tau->add_option("--percentile", tau_c.percentile, "Quantile in (0, 1)");
  tau->add_option("--max-new-tokens", tau_c.max_new_tokens, "Generation budget");
  tau->add_option("--jobs", tau_c.jobs, "Prompts decoded in parallel")->check(CLI::PositiveNumber);
  tau->add_option("--out", tau_c.out, "Result JSON (default stdout)");

  GenTaskCmd gen_c;
  auto* gen = app.add_subcommand("gen-task", "Generate a synthetic toy task");
  gen->add_option("--kind", gen_c.kind, "kv_lookup | keyword_instruction")
      ->check(CLI::IsMember({"kv_lookup", "keyword_instruction"}));
  gen->add_option("--n-train", gen_c.n_train, "Training samples");
  gen->add_option("--n-eval", gen_c.n_eval, "Evaluation samples");
  gen->add_option("--noise", gen_c.noise, "Fraction of training labels corrupted");
  gen->add_option("--seed", gen_c.seed, "Generator seed");
  gen->add_option("--out-dir", gen_c.out_dir, "Output directory")->required();

  TrainCmd train_c;
  auto* train = app.add_subcommand("train-toy", "Train a toy model on generated training texts");
  train->add_option("--train", train_c.train, "Training texts (JSON lines)")->required()->check(CLI::ExistingFile);
  train->add_option("--config", train_c.config, "Model config JSON (overrides the shape flags)")
      ->check(CLI::ExistingFile);
  train->add_option("--layers", train_c.layers, "Layers");
  train->add_option("--heads", train_c.heads, "Heads per layer");
  train->add_option("--d-model", train_c.d_model, "Residual width");
  train->add_option("--d-ff", train_c.d_ff, "MLP width");
  train->add_option("--max-seq-len", train_c.max_seq_len, "Context length");
  train->add_option("--activation", train_c.activation, "gelu | relu")->check(CLI::IsMember({"gelu", "relu"}));
  train->add_option("--steps", train_c.steps, "SGD steps");
  train->add_option("--batch", train_c.batch, "Batch size");
  train->add_option("--lr", train_c.lr, "Learning rate");
  train->add_option("--weight-std", train_c.weight_std, "Init std of weight matrices");
  train->add_option("--embed-std", train_c.embed_std, "Init std of embeddings");
  train->add_option("--seed", train_c.seed, "Init and batching seed");
  train->add_option("--log-every", train_c.log_every, "Loss log interval (0 = silent)");
  train->add_option("--losses", train_c.losses, "Per-step batch losses JSON");
  train->add_flag("--f64", train_c.f64, "Train in 64-bit floating point");
  train->add_option("--out", train_c.out, "Weight file to write")->required();

  JudgeCmd judge_c;
  auto* judge = app.add_subcommand("judge", "LLM-judged quality score for constraint-satisfying outputs");
  judge->add_option("--report", judge_c.report, "Instruction-following eval report")->required()->check(CLI::ExistingFile);
  judge->add_option("--data", judge_c.data, "The samples the report was produced from")->required()
      ->check(CLI::ExistingFile);
  judge->add_option("--endpoint", judge_c.endpoint, "Chat-completions URL")->required();
  judge->add_option("--judge-model", judge_c.model, "Judge model name")->required();
  judge->add_option("--token-env", judge_c.token_env, "Environment variable holding the bearer token ('' = none)");
  judge->add_option("--timeout", judge_c.timeout, "Request timeout in seconds");
  judge->add_option("--retries", judge_c.retries, "Retries per request");
  judge->add_option("--backoff", judge_c.backoff, "Initial retry delay in seconds");
  judge->add_option("--in-flight", judge_c.in_flight, "Concurrent samples")->check(CLI::PositiveNumber);
  judge->add_option("--out", judge_c.out, "Judge report JSON (default stdout)");

  std::string replay_path;
  auto* replay = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  replay->add_option("manifest", replay_path, "Manifest JSON")->required()->check(CLI::ExistingFile);

  std::vector<std::string> args(argv.begin() + 1, argv.end());
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  if (replay->parsed()) {
    const auto m = read_json_file(replay_path);
    if (!m.contains("argv") || !m["argv"].is_array()) throw agd::DataError(replay_path + ": manifest has no argv");
    log("replaying ", m.value("subcommand", std::string("?")), " from ", replay_path);
    if (m.contains("cwd")) std::filesystem::current_path(m["cwd"].get<std::string>());
    return run_cli(m["argv"].get<std::vector<std::string>>());
  }

  Run run;
  const auto t0 = std::chrono::steady_clock::now();
  std::string primary_out;
  try {
    if (decode->parsed()) {
      if (decode_c.request.empty() && decode_c.prompt_text.empty())
        throw CLI::ValidationError("decode needs --request or --prompt");
      run.subcommand = "decode";
      primary_out = decode_c.out.empty() ? decode_c.result_out : decode_c.out;
      run_decode(decode_c, run);
    } else if (attribute->parsed()) {
      if (attr_c.request.empty() && attr_c.prompt_text.empty())
        throw CLI::ValidationError("attribute needs --request or --prompt");
      run.subcommand = "attribute";
      primary_out = attr_c.out;
      run_attribute(attr_c, run);
    } else if (eval->parsed()) {
      run.subcommand = "eval";
      primary_out = eval_c.out;
      run_eval(eval_c, run);
    } else if (heads->parsed()) {
      run.subcommand = "extract-heads";
      primary_out = heads_c.out;
      run_extract_heads(heads_c, run);
    } else if (tau->parsed()) {
      run.subcommand = "calibrate-tau";
      primary_out = tau_c.out;
      run_calibrate_tau(tau_c, run);
    } else if (gen->parsed()) {
      run.subcommand = "gen-task";
      primary_out = (std::filesystem::path(gen_c.out_dir) / "task.json").string();
      run_gen_task(gen_c, run);
    } else if (train->parsed()) {
      run.subcommand = "train-toy";
      primary_out = train_c.out;
      run_train_toy(train_c, run);
    } else if (judge->parsed()) {
      run.subcommand = "judge";
      primary_out = judge_c.out;
      run_judge(judge_c, run);
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  run.manifest_path = manifest.empty() ? default_manifest_path(run.subcommand, primary_out) : manifest;
  write_manifest(run, argv, wall);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  try {
    return run_cli(args);
  } catch (const agd::DataError& e) {
    log("error: ", e.what());
    return kData;
  } catch (const agd::RuntimeFailure& e) {
    log("error: ", e.what());
    return kRuntime;
  } catch (const std::exception& e) {
    log("error: ", e.what());
    return kRuntime;
  }
}
