#include <gtest/gtest.h>

#include <random>

#include "agd/attribution.hpp"
#include "support/fixtures.hpp"

using namespace agd;
using agd::testing::random_model;
using agd::testing::small_config;

namespace {

template <typename T>
double conservation_error(const AttributionMap<T>& map) {
  double s = map.absorbed;
  for (T v : map.input_relevance) s += v;
  return std::abs(s - double(map.target_logit)) / std::abs(double(map.target_logit));
}

ModelConfig linear_config() {
  ModelConfig c = small_config(0, 1, 6);
  c.final_norm = false;
  return c;
}

}  // namespace

TEST(Attribution, IxgOnLinearModelIsExactContribution) {
  const auto m = random_model<double>(linear_config(), 1);
  const std::vector<TokenId> toks{Tokenizer::kBos, 'a', 'b'};
  const auto cache = forward(m, toks);
  const auto map = attribute(m, cache, 'z', AttributionMethod::ixg);
  double expected = 0;
  for (std::size_t k = 0; k < 6; ++k) expected += cache.embed(2, k) * m.unembed(k, 'z');
  EXPECT_NEAR(map.input_relevance[2], expected, 1e-12);
  EXPECT_EQ(map.input_relevance[0], 0.0);
  EXPECT_NEAR(map.target_logit, cache.logits(2, 'z'), 1e-12);
}

TEST(Attribution, IxgAndLrpAgreeOnLinearModels) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = random_model<double>(linear_config(), 50 + trial);
    const auto toks = agd::testing::random_tokens(rng, 4, 260);
    const auto cache = forward(m, toks);
    const TokenId target = rng() % 260;
    const auto a = attribute(m, cache, target, AttributionMethod::ixg);
    const auto b = attribute(m, cache, target, AttributionMethod::lrp);
    for (std::size_t i = 0; i < toks.size(); ++i) EXPECT_NEAR(a.input_relevance[i], b.input_relevance[i], 1e-6);
  }
}

TEST(Attribution, LrpConservesTheTargetLogit64) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    ModelConfig cfg = small_config(1 + trial % 4, trial % 2 ? 2 : 4, 16);
    cfg.activation = trial % 3 ? Activation::gelu : Activation::relu;
    const auto m = random_model<double>(cfg, 200 + trial);
    const auto toks = agd::testing::random_tokens(rng, 1 + rng() % 12, 260);
    const auto cache = forward(m, toks);
    const auto map = attribute(m, cache, rng() % 260, AttributionMethod::lrp);
    EXPECT_LE(conservation_error(map), 1e-4) << "trial " << trial;
  }
}

TEST(Attribution, LrpConservesTheTargetLogit32) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_model<float>(small_config(2, 2, 16), 300 + trial);
    const auto toks = agd::testing::random_tokens(rng, 1 + rng() % 12, 260);
    const auto map = attribute(m, forward(m, toks), rng() % 260, AttributionMethod::lrp);
    EXPECT_LE(conservation_error(map), 1e-3) << "trial " << trial;
  }
}

TEST(Attribution, IxgIsLinearInTheReadoutDirection) {
  std::mt19937_64 rng(7);
  const auto m = random_model<double>(small_config(2, 2, 8), 8);
  const auto toks = agd::testing::random_tokens(rng, 6, 260);
  const auto cache = forward(m, toks);
  const auto a = attribute(m, cache, 'a', AttributionMethod::ixg);
  const auto b = attribute(m, cache, 'b', AttributionMethod::ixg);
  std::vector<double> dir(260, 0.0);
  dir['a'] = dir['b'] = 1.0;
  const auto ab = attribute_direction<double>(m, cache, dir, AttributionMethod::ixg);
  for (std::size_t i = 0; i < toks.size(); ++i)
    EXPECT_NEAR(a.input_relevance[i] + b.input_relevance[i], ab.input_relevance[i], 1e-6);
  for (std::size_t h = 0; h < 2; ++h)
    EXPECT_NEAR(head_relevance(a, 1, h) + head_relevance(b, 1, h), head_relevance(ab, 1, h), 1e-6);
}

TEST(Attribution, ResidualRowZeroIsTheInputRelevance) {
  const auto m = random_model<double>(small_config(3, 2, 8), 9);
  const std::vector<TokenId> toks{Tokenizer::kBos, 'q', 'w', 'e'};
  for (auto method : {AttributionMethod::ixg, AttributionMethod::lrp}) {
    const auto map = attribute(m, forward(m, toks), 'r', method);
    ASSERT_EQ(map.residual_relevance.rows(), 4u);
    for (std::size_t i = 0; i < toks.size(); ++i)
      EXPECT_NEAR(map.residual_relevance(0, i), map.input_relevance[i], 1e-12);
  }
}

TEST(Attribution, LrpResidualRowsEachConserveUpToAbsorption) {
  // Relevance reaching the final residual equals the logit minus what the
  // unembedding and final norm absorbed; each earlier row loses only biases.
  const auto m = random_model<double>(small_config(2, 2, 8), 10);
  const std::vector<TokenId> toks{Tokenizer::kBos, 'a', 'b', 'c'};
  const auto map = attribute(m, forward(m, toks), 'd', AttributionMethod::lrp);
  double top = 0;
  for (std::size_t i = 0; i < toks.size(); ++i) top += map.residual_relevance(2, i);
  EXPECT_TRUE(std::isfinite(top));
  EXPECT_NE(top, 0.0);
}

TEST(HeadRelevance, StoredSumMatchesPerElementRelevance) {
  const auto m = random_model<double>(small_config(2, 2, 8), 11);
  const std::vector<TokenId> toks{Tokenizer::kBos, 'a', 'b', 'c', 'd'};
  for (auto method : {AttributionMethod::ixg, AttributionMethod::lrp}) {
    const auto map = attribute(m, forward(m, toks), 'e', method);
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t h = 0; h < 2; ++h) {
        double s = 0;
        for (std::size_t i = 0; i < toks.size(); ++i)
          for (std::size_t k = h * 4; k < (h + 1) * 4; ++k) s += map.z_relevance[l](i, k);
        EXPECT_DOUBLE_EQ(head_relevance(map, l, h), s);
      }
  }
}

TEST(HeadRelevance, HandBuiltSums) {
  ModelConfig cfg = small_config(1, 1, 2);
  AttributionMap<double> map;
  map.input_relevance = {0.0, 0.0};
  map.z_relevance = {Tensor<double>(2, 2)};
  map.head_relevance = Tensor<double>(1, 1);
  detail::fill_head_sums(cfg, map);
  EXPECT_EQ(head_relevance(map, 0, 0), 0.0);
  map.z_relevance[0](0, 0) = 0.2;
  map.z_relevance[0](0, 1) = -0.1;
  map.z_relevance[0](1, 0) = 0.05;
  detail::fill_head_sums(cfg, map);
  EXPECT_NEAR(head_relevance(map, 0, 0), 0.15, 1e-15);
  EXPECT_THROW(head_relevance(map, 1, 0), RangeError);
  EXPECT_THROW(head_relevance(map, 0, 1), RangeError);
}

TEST(HeadRelevance, HeadsSumToRelevanceAtAttentionOutput) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    auto m = random_model<double>(small_config(2, 4, 16), 400 + trial);
    for (auto& l : m.layers) l.bo.fill(0.0);  // nothing for the output bias to absorb
    const auto toks = agd::testing::random_tokens(rng, 3 + rng() % 8, 260);
    const auto map = attribute(m, forward(m, toks), rng() % 260, AttributionMethod::lrp);
    for (std::size_t l = 0; l < 2; ++l) {
      double heads = 0, entering = 0;
      for (std::size_t h = 0; h < 4; ++h) heads += head_relevance(map, l, h);
      for (std::size_t i = 0; i < toks.size(); ++i) entering += map.attn_out_relevance(l, i);
      EXPECT_NEAR(heads, entering, 1e-5 * std::max(1.0, std::abs(entering)));
    }
  }
}

TEST(RoiScore, SumsSelectedComponents) {
  AttributionMap<double> map;
  map.input_relevance = {0.4, -0.1, 0.3};
  map.head_relevance = Tensor<double>(1, 2);
  map.head_relevance(0, 0) = 0.5;
  map.head_relevance(0, 1) = -2.0;
  EXPECT_NEAR(roi_score(map, RoiSpec::input_span({{0, 2}})), 0.3, 1e-15);
  EXPECT_EQ(roi_score(map, RoiSpec::input_span({})), 0.0);
  EXPECT_EQ(roi_score(map, RoiSpec::head_set({})), 0.0);
  EXPECT_NEAR(roi_score(map, RoiSpec::all_inputs()), 0.6, 1e-15);
  // overlapping ranges count each position once
  EXPECT_NEAR(roi_score(map, RoiSpec::input_span({{0, 2}, {1, 3}})), 0.6, 1e-15);
  EXPECT_NEAR(roi_score(map, RoiSpec::head_set({{0, 1}, {0, 0}, {0, 1}})), -1.5, 1e-15);
  EXPECT_THROW(roi_score(map, RoiSpec::input_span({{2, 4}})), RangeError);
  EXPECT_THROW(roi_score(map, RoiSpec::input_span({{1, 1}})), RangeError);
  EXPECT_THROW(roi_score(map, RoiSpec::head_set({{1, 0}})), RangeError);
}

TEST(RoiScore, AllInputsEqualsLogitMinusAbsorbed) {
  std::mt19937_64 rng(13);
  const auto m = random_model<double>(small_config(2, 2, 8), 14);
  const auto toks = agd::testing::random_tokens(rng, 7, 260);
  const auto map = attribute(m, forward(m, toks), 'k', AttributionMethod::lrp);
  const double expected = map.target_logit - map.absorbed;
  EXPECT_LE(std::abs(roi_score(map, RoiSpec::all_inputs()) - expected), 1e-4 * std::abs(map.target_logit));
}

TEST(Attribution, BilinearSplitModeProducesFiniteMaps) {
  std::mt19937_64 rng(15);
  const auto m = random_model<double>(small_config(2, 2, 8), 16);
  const auto toks = agd::testing::random_tokens(rng, 6, 260);
  const auto cache = forward(m, toks);
  LrpConfig cfg;
  cfg.attention_rule = AttentionRule::bilinear_split;
  const auto split = attribute(m, cache, 'x', AttributionMethod::lrp, cfg);
  const auto value = attribute(m, cache, 'x', AttributionMethod::lrp);
  bool differs = false;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    EXPECT_TRUE(std::isfinite(split.input_relevance[i]));
    differs = differs || split.input_relevance[i] != value.input_relevance[i];
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(split.target_logit, value.target_logit);
}

TEST(Attribution, BilinearSplitModeConserves) {
  std::mt19937_64 rng(16);
  LrpConfig cfg;
  cfg.attention_rule = AttentionRule::bilinear_split;
  for (int trial = 0; trial < 30; ++trial) {
    const auto m = random_model<double>(small_config(1 + trial % 4, trial % 2 ? 2 : 4, 16), 400 + trial);
    const auto toks = agd::testing::random_tokens(rng, 1 + rng() % 12, 260);
    const auto map = attribute(m, forward(m, toks), rng() % 260, AttributionMethod::lrp, cfg);
    EXPECT_LE(conservation_error(map), 1e-4) << "trial " << trial;
  }
}

TEST(Attribution, RejectsBadArguments) {
  const auto m = random_model<double>(small_config(), 17);
  const auto other = random_model<double>(small_config(), 18);
  const std::vector<TokenId> toks{1, 2, 3};
  const auto cache = forward(m, toks);
  EXPECT_THROW(attribute(m, cache, 260, AttributionMethod::lrp), RangeError);
  EXPECT_THROW(attribute(other, cache, 1, AttributionMethod::lrp), StaleCacheError);
  LrpConfig bad;
  bad.epsilon = 0;
  EXPECT_THROW(attribute(m, cache, 1, AttributionMethod::lrp, bad), ConfigError);
  EXPECT_THROW(attribution_method_from_string("shap"), DataError);
}

TEST(Attribution, IsDeterministic) {
  const auto m = random_model<float>(small_config(), 19);
  const std::vector<TokenId> toks{1, 2, 3, 4};
  const auto a = attribute(m, forward(m, toks), 7, AttributionMethod::lrp);
  const auto b = attribute(m, forward(m, toks), 7, AttributionMethod::lrp);
  EXPECT_EQ(a.input_relevance, b.input_relevance);
  EXPECT_EQ(a.head_relevance, b.head_relevance);
}

TEST(Attribution, LrpWithoutBiasesAbsorbsAlmostNothing) {
  // With all biases and norm shifts zeroed, the only absorption left is the
  // epsilon leak, so the input relevance alone explains the logit.
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = random_model<double>(small_config(2, 2, 16), 500 + trial);
    m.for_each_tensor([](const std::string& name, Tensor<double>& t) {
      if (t.shape.size() == 1 && name.back() != 'g') t.fill(0.0);
    });
    const auto toks = agd::testing::random_tokens(rng, 2 + rng() % 8, 260);
    const auto map = attribute(m, forward(m, toks), rng() % 260, AttributionMethod::lrp);
    double mass = 0;
    for (double r : map.input_relevance) mass += std::abs(r);
    EXPECT_LE(std::abs(map.absorbed), 1e-4 * mass) << "trial " << trial;
  }
}
