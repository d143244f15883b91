#pragma once

/**
 * Next-token cross-entropy training of the toy model with plain minibatch SGD.
 * Loss is taken on completion tokens (and the closing EOS) only.
 */

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "agd/backward.hpp"
#include "agd/error.hpp"
#include "agd/forward.hpp"
#include "agd/model.hpp"
#include "agd/tokenizer.hpp"
#include "agd/toy_task.hpp"

namespace agd {

/// `predict[i]` marks that position i is trained to predict tokens[i + 1].
struct TrainExample {
  std::vector<TokenId> tokens;
  std::vector<bool> predict;
};

inline TrainExample make_train_example(const std::string& prompt, const std::string& completion) {
  TrainExample ex;
  ex.tokens = Tokenizer::encode_prompt(prompt);
  const std::size_t first = ex.tokens.size() - 1;
  for (unsigned char c : completion) ex.tokens.push_back(c);
  ex.tokens.push_back(Tokenizer::kEos);
  ex.predict.assign(ex.tokens.size(), false);
  for (std::size_t i = first; i + 1 < ex.tokens.size(); ++i) ex.predict[i] = true;
  return ex;
}

inline std::vector<TrainExample> make_train_examples(const std::vector<TrainText>& texts) {
  std::vector<TrainExample> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(make_train_example(t.prompt, t.completion));
  return out;
}

struct TrainOptions {
  std::size_t steps = 1000;
  double learning_rate = 0.1;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  InitOptions init;
  std::size_t log_every = 0;  // 0 = silent
  std::function<void(std::size_t step, double loss)> on_log;
};

struct TrainStats {
  std::vector<double> batch_losses;
};

/// Mean cross-entropy (nats per predicted token) of `ex`; adds d loss / d logits
/// scaled by `grad_scale` into `d_logits` when non-null. Returns {loss sum, count}.
template <typename T>
std::pair<double, std::size_t> example_loss(const ActivationCache<T>& cache, const TrainExample& ex,
                                            Tensor<T>* d_logits = nullptr, double grad_scale = 1.0) {
  const std::size_t V = cache.logits.cols();
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> p(V);
  for (std::size_t i = 0; i + 1 < ex.tokens.size(); ++i) {
    if (!ex.predict[i]) continue;
    const auto row = cache.logits.row(i);
    double mx = -INFINITY;
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (std::size_t t = 0; t < V; ++t) z += (p[t] = std::exp(static_cast<double>(row[t]) - mx));
    const TokenId y = ex.tokens[i + 1];
    total += -(static_cast<double>(row[y]) - mx - std::log(z));
    ++count;
    if (d_logits) {
      for (std::size_t t = 0; t < V; ++t) (*d_logits)(i, t) += static_cast<T>(grad_scale * p[t] / z);
      (*d_logits)(i, y) -= static_cast<T>(grad_scale);
    }
  }
  return {total, count};
}

/// Mean per-token cross-entropy over `examples`.
template <typename T>
double mean_loss(const Model<T>& m, const std::vector<TrainExample>& examples) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ex : examples) {
    const auto [l, c] = example_loss(forward(m, ex.tokens, &ex.predict), ex);
    total += l;
    count += c;
  }
  if (count == 0) throw DataError("mean_loss: no predicted tokens");
  return total / static_cast<double>(count);
}

/// Gradient of the mean per-token loss over `batch` with respect to every parameter.
template <typename T>
double batch_gradient(const Model<T>& m, const std::vector<const TrainExample*>& batch, Model<T>& grads) {
  std::size_t count = 0;
  for (const auto* ex : batch)
    for (std::size_t i = 0; i + 1 < ex->tokens.size(); ++i) count += ex->predict[i];
  if (count == 0) throw DataError("training batch has no predicted tokens");
  const double scale = 1.0 / static_cast<double>(count);
  double total = 0.0;
  for (const auto* ex : batch) {
    const auto cache = forward(m, ex->tokens, &ex->predict);
    Tensor<T> d_logits(ex->tokens.size(), m.config.vocab_size);
    total += example_loss(cache, *ex, &d_logits, scale).first;
    backward(m, cache, d_logits, &grads);
  }
  return total * scale;
}

/// Trains from init_model(config, seed). Zero steps returns the initialisation.
template <typename T>
Model<T> train_toy_model(const ModelConfig& config, const std::vector<TrainExample>& corpus, const TrainOptions& o,
                         TrainStats* stats = nullptr) {
  config.validate();
  if (o.steps > 0 && corpus.empty()) throw DataError("train_toy_model: empty corpus");
  if (!(o.learning_rate > 0.0)) throw ConfigError("train_toy_model: learning rate must be > 0");
  if (o.batch_size < 1) throw ConfigError("train_toy_model: batch size must be >= 1");
  for (const auto& ex : corpus) {
    if (ex.tokens.size() > config.max_seq_len)
      throw DataError("training example of " + std::to_string(ex.tokens.size()) + " tokens exceeds max_seq_len " +
                      std::to_string(config.max_seq_len));
    for (TokenId t : ex.tokens)
      if (t >= config.vocab_size) throw DataError("training example token id out of vocabulary");
  }
  Model<T> m = init_model<T>(config, o.seed, o.init);
  std::mt19937_64 rng(o.seed + 1);
  std::vector<const TrainExample*> batch(o.batch_size);
  for (std::size_t step = 0; step < o.steps; ++step) {
    for (auto& b : batch) b = &corpus[rng() % corpus.size()];
    Model<T> grads = Model<T>::zeros(config);
    const double loss = batch_gradient(m, batch, grads);
    if (!std::isfinite(loss)) throw NumericError("training loss is not finite at step " + std::to_string(step), step);
    const T lr = static_cast<T>(o.learning_rate);
    zip_tensors(m, grads, [&](const std::string&, Tensor<T>& w, const Tensor<T>& g) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    });
    if (stats) stats->batch_losses.push_back(loss);
    if (o.on_log && o.log_every && (step + 1) % o.log_every == 0) o.on_log(step + 1, loss);
  }
  if (!all_finite(m)) throw NumericError("trained parameters are not finite", o.steps);
  return m;
}

}  // namespace agd
