#include <cmath>
#include <random>

#include "camalab/cama.hpp"
#include "camalab/error.hpp"
#include "camalab/report.hpp"
#include "common.hpp"
#include "oracle/oracle.hpp"

using namespace camalab;
using testutil::TempDir;

namespace {

const ModelDims kDims{8, 4, 16, 4, 16};

CamaConfig small_config() {
  CamaConfig c;
  c.stage1_layers = {2, 3};
  c.stage2_layers = {5, 7};
  return c;
}

TokenizedSequence make_seq(std::uint64_t seed, std::size_t shots = 3, bool caption = false) {
  SyntheticTaskSpec s;
  s.n_shots = shots;
  s.image_tokens_per_icd = 10;
  s.question_len = caption ? 0 : 3;
  s.answer_len = 2;
  s.embed_dim = kDims.model_dim;
  s.caption_mode = caption;
  s.seed = seed;
  return generate_synthetic(s);
}

// Hand-built trace with only logits filled in.
ForwardTrace blank_trace(std::size_t layers, std::size_t heads, std::size_t S) {
  ForwardTrace t;
  t.dims = {layers, heads, heads * 2, 2, 4};
  t.seq_len = S;
  t.prompt_len = S;
  t.logits.assign(layers * heads * S * S, 0.0f);
  return t;
}

void set_logit(ForwardTrace& t, std::size_t l, std::size_t h, std::size_t r, std::size_t c, float v) {
  t.logits[t.matrix_offset(l, h) + r * t.seq_len + c] = v;
}

}  // namespace

TEST(CamaConfigTest, Validation) {
  EXPECT_NO_THROW(small_config().validate(kDims));
  EXPECT_NO_THROW(CamaConfig{}.validate(ModelDims{}));
  auto bad = small_config();
  bad.stage1_layers = {};
  EXPECT_THROW(bad.validate(kDims), InvalidArgument);
  bad = small_config();
  bad.stage1_layers = {3, 2};
  EXPECT_THROW(bad.validate(kDims), InvalidArgument);
  bad = small_config();
  bad.stage2_layers = {3, 7};
  EXPECT_THROW(bad.validate(kDims), InvalidArgument);
  bad = small_config();
  bad.stage2_layers = {9};
  EXPECT_THROW(bad.validate(kDims), InvalidArgument);
  bad = small_config();
  bad.stage1_layers = {0, 2};
  EXPECT_THROW(bad.validate(kDims), InvalidArgument);
  bad = small_config();
  bad.k1_pct = 0;
  EXPECT_THROW(bad.validate(kDims), InvalidArgument);
  bad = small_config();
  bad.k2_pct = 101;
  EXPECT_THROW(bad.validate(kDims), InvalidArgument);
  bad = small_config();
  bad.epsilon = 0;
  EXPECT_THROW(bad.validate(kDims), InvalidArgument);
}

TEST(CamaConfigTest, EnumNamesRoundTrip) {
  for (auto v : {RhoSource::raw_logits, RhoSource::softmax_weights})
    EXPECT_EQ(parse_rho_source(to_string(v)), v);
  for (auto v : {QueryPositionFactor::clamp_to_1_over_n, QueryPositionFactor::one})
    EXPECT_EQ(parse_query_position_factor(to_string(v)), v);
  for (auto v : {PrefillMode::two_pass, PrefillMode::cumulative_single_pass})
    EXPECT_EQ(parse_prefill_mode(to_string(v)), v);
  EXPECT_THROW(parse_rho_source("logits"), InvalidArgument);
}

TEST(StageOne, ForwardGainExample) {
  const ProbVector before{{0.25, 0.75}, {0, 1}};
  const ProbVector after{{0.75, 0.25}, {0, 1}};
  const auto g = forward_gain(before, after);
  EXPECT_NEAR(g[0], 0.5 * std::log(3.0), 1e-15);
  EXPECT_EQ(g[1], 0.0);
  const auto same = forward_gain(after, after);
  EXPECT_EQ(same, (std::vector<double>{0.0, 0.0}));
}

TEST(StageOne, GainsOmitSecondTermWithoutLastAnchor) {
  const ProbVector a{{0.5, 0.5}, {3, 4}};
  const ProbVector b{{0.9, 0.1}, {3, 4}};
  const auto with = forward_gains(a, b, a);
  ASSERT_TRUE(with.c2);
  EXPECT_EQ((*with.c2)[0], 0.0);
  EXPECT_GT((*with.c2)[1], 0.0);
  EXPECT_FALSE(forward_gains(a, b, std::nullopt).c2);
  EXPECT_EQ(token_scores({with, with}).size(), 2u);
  EXPECT_NEAR(token_scores({with, with})[1], 2 * (with.c1[1] + (*with.c2)[1]), 1e-15);
}

TEST(StageOne, KeyTokenSelection) {
  const Span image{30, 40};
  std::vector<double> s(10, 0.0);
  s[3] = 2;
  s[7] = 5;
  s[8] = 1;
  EXPECT_EQ(select_key_tokens(s, image, 20), (IndexSet{33, 37}));
  EXPECT_EQ(select_key_tokens(std::vector<double>(10, 0.0), image, 20), (IndexSet{30, 31}));
  EXPECT_THROW(select_key_tokens(std::vector<double>(9, 0.0), image, 20), InvalidArgument);
}

TEST(StageOne, PositionFactor) {
  EXPECT_DOUBLE_EQ(position_factor(0, 4, QueryPositionFactor::one), 1.0);
  EXPECT_DOUBLE_EQ(position_factor(3, 4, QueryPositionFactor::one), 0.25);
  EXPECT_DOUBLE_EQ(position_factor(4, 4, QueryPositionFactor::clamp_to_1_over_n), 0.25);
  EXPECT_DOUBLE_EQ(position_factor(4, 4, QueryPositionFactor::one), 1.0);
}

TEST(StageOne, BiasUsesEpsilonNormalisedScores) {
  const std::vector<ElementLengths> lens{{2, 1, 1}, {2, 1, 1}};
  const auto layout = layout_from_lengths(lens, false);
  KeyTokenReport report;
  report.elements.resize(2);
  report.elements[0].scores = {2.0, 1.0};
  report.elements[0].key_set = {0, 1};
  report.elements[0].max_score = 2.0;
  report.elements[1].element = 1;
  report.elements[1].scores = {0.0, 0.0};
  report.elements[1].key_set = {4};
  auto config = small_config();
  config.stage1_layers = {2};
  const auto plan = stage1_bias(report, layout, config);
  EXPECT_EQ(plan.size(), 3u);
  EXPECT_NEAR(plan.bias_at(1, 0, 1, 0), 2.0 / (2.0 + 1e-6), 1e-15);
  EXPECT_NEAR(plan.bias_at(1, 3, 2, 1), 1.0 / (2.0 + 1e-6), 1e-15);
  EXPECT_EQ(plan.bias_at(1, 0, 0, 0), 0.0);  // row j itself is not biased
  EXPECT_EQ(plan.bias_at(0, 0, 5, 0), 0.0);
  EXPECT_EQ(plan.bias_at(1, 0, 7, 4), 0.0);
}

TEST(StageOne, ScoresIgnoreRowConstantShifts) {
  const std::vector<ElementLengths> lens{{4, 1, 2}, {4, 1, 1}};
  const auto layout = layout_from_lengths(lens, false);
  const std::size_t S = layout.total_len;
  auto a = blank_trace(2, 2, S);
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> q(-64, 64);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t r = 0; r < S; ++r)
        for (std::size_t c = 0; c <= r; ++c) set_logit(a, l, h, r, c, q(rng) / 32.0f);
  auto b = a;
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t r = 0; r < S; ++r)
        for (std::size_t c = 0; c <= r; ++c)
          set_logit(b, l, h, r, c, a.logit(l, h, r, c) + static_cast<float>(r + 3 * h));
  const auto ra = compute_key_tokens(a, layout, {0, 1}, 50);
  const auto rb = compute_key_tokens(b, layout, {0, 1}, 50);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(ra.elements[e].key_set, rb.elements[e].key_set);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(ra.elements[e].scores[j], rb.elements[e].scores[j], 1e-12);
    for (double s : ra.elements[e].scores) EXPECT_GE(s, 0.0);
  }
  EXPECT_FALSE(ra.elements[1].layers[0].gains.c2);
  EXPECT_TRUE(ra.elements[0].layers[0].gains.c2);
}

TEST(StageTwo, ConstantLogitFlow) {
  const std::vector<ElementLengths> lens{{3, 2, 1}, {3, 2, 1}, {2, 2, 1}};
  const auto layout = layout_from_lengths(lens, false);
  const std::size_t S = layout.total_len;
  auto t = blank_trace(1, 3, S);
  const float kappa = 0.75f;
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t r = 0; r < S; ++r)
      for (std::size_t c = 0; c <= r; ++c) set_logit(t, 0, h, r, c, kappa);
  const std::size_t ctx = layout.query().image.begin;
  const auto rho = head_flow(t, layout, 0, RhoSource::raw_logits);
  for (double v : rho) EXPECT_NEAR(v, ctx * kappa, 1e-12);
  // Uniform causal rows put ctx / (r + 1) on the context.
  double expect = 0.0;
  const auto& q = layout.query();
  for (std::size_t r = q.question.begin; r < q.answer.end; ++r) expect += double(ctx) / double(r + 1);
  expect /= double(q.answer.end - q.question.begin);
  for (double v : head_flow(t, layout, 0, RhoSource::softmax_weights)) EXPECT_NEAR(v, expect, 1e-12);
}

TEST(StageTwo, HeadSelectionTiesToLowerIndex) {
  EXPECT_EQ(select_heads(std::vector<double>(8, 1.5), 20), (IndexSet{0, 1}));
  EXPECT_EQ(select_heads({0.1, 0.9, 0.3, 0.9}, 50), (IndexSet{1, 3}));
}

TEST(StageTwo, QueryWeightsExample) {
  const auto e1 = l2_normalize(std::vector<double>{1, 0});
  const auto e2 = l2_normalize(std::vector<double>{0, 1});
  const auto w = query_weights({e1, e2}, e1);
  EXPECT_NEAR(w[0], 0.7310585786300049, 1e-12);
  EXPECT_NEAR(w[1], 0.2689414213699951, 1e-12);
  EXPECT_NEAR(w[0] + w[1], 1.0, 1e-15);
}

TEST(StageTwo, LayerBiasValuesAndColumns) {
  const std::vector<ElementLengths> lens{{3, 2, 1}, {3, 2, 1}, {3, 2, 1}};
  const auto layout = layout_from_lengths(lens, false);
  const std::vector<IndexSet> keys{{1}, {7}, {13}};
  const auto plan = stage2_layer_bias(6, {1, 3}, {0.5, 0.5}, keys, layout);
  // One key plus three text columns per ICD, two heads.
  EXPECT_EQ(plan.size(), 2u * 2u * 4u);
  EXPECT_DOUBLE_EQ(plan.bias_at(6, 1, 6, 1), 0.5);
  EXPECT_DOUBLE_EQ(plan.bias_at(6, 3, 12, 7), 0.25);
  EXPECT_DOUBLE_EQ(plan.bias_at(6, 3, 12, 9), 0.25);
  EXPECT_EQ(plan.bias_at(6, 1, 5, 1), 0.0);   // before the ICD ends
  EXPECT_EQ(plan.bias_at(6, 0, 17, 1), 0.0);  // unselected head
  EXPECT_EQ(plan.bias_at(6, 1, 17, 0), 0.0);  // non-key image token
  EXPECT_EQ(plan.bias_at(6, 1, 17, 13), 0.0); // query tokens never biased
  for (const auto& e : plan.entries()) EXPECT_LT(e.column, layout.query().image.begin);

  const std::vector<ElementLengths> one{{3, 2, 1}, {3, 2, 1}};
  const auto single = stage2_layer_bias(0, {0}, {1.0}, {{0}, {6}}, layout_from_lengths(one, false));
  for (const auto& e : single.entries()) EXPECT_DOUBLE_EQ(e.value, 1.0);
}

struct CamaRun : ::testing::Test {
  ModelParams params = init_params(kDims, 21);
};

TEST_F(CamaRun, FullPercentagesGiveCompletePlan) {
  auto config = small_config();
  config.k1_pct = 100;
  config.k2_pct = 100;
  for (auto mode : {PrefillMode::two_pass, PrefillMode::cumulative_single_pass}) {
    config.prefill_mode = mode;
    const auto seq = make_seq(5);
    const auto r = run_cama(seq, params, config);
    std::size_t image_total = 0, icd_total = 0;
    for (std::size_t k = 0; k < seq.layout.elements.size(); ++k) {
      const auto& e = seq.layout.elements[k];
      image_total += e.image.size();
      if (k < seq.layout.n_shots) icd_total += e.whole().size();
    }
    const std::size_t expected = config.stage1_layers.size() * image_total +
                                 config.stage2_layers.size() * kDims.n_heads * icd_total;
    EXPECT_EQ(r.plan.size(), expected);
    EXPECT_EQ(r.trace_clean.has_value(), mode == PrefillMode::two_pass);
    EXPECT_EQ(r.trace_modulated.applied_plan, r.plan);
  }
}

TEST_F(CamaRun, PlanPropertiesOverRandomSequences) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 12; ++trial) {
    auto config = small_config();
    config.prefill_mode = trial % 2 ? PrefillMode::cumulative_single_pass : PrefillMode::two_pass;
    config.rho_source = trial % 3 ? RhoSource::raw_logits : RhoSource::softmax_weights;
    const bool caption = trial % 4 == 3;
    config.caption_mode = caption;
    const auto seq = make_seq(rng(), 2 + trial % 3, caption);
    const auto r = run_cama(seq, params, config);
    const auto s1 = config.stage1_zero_based();
    const auto s2 = config.stage2_zero_based();
    const std::size_t query_begin = seq.layout.query().image.begin;
    double wsum = 0.0;
    for (double w : r.weight_report.weights) wsum += w;
    EXPECT_NEAR(wsum, 1.0, 1e-12);
    for (const auto& e : r.plan.entries()) {
      EXPECT_GE(e.value, 0.0);
      const bool stage1 = std::find(s1.begin(), s1.end(), e.layer) != s1.end();
      const bool stage2 = std::find(s2.begin(), s2.end(), e.layer) != s2.end();
      ASSERT_TRUE(stage1 || stage2) << e.layer;
      if (stage1) {
        EXPECT_EQ(e.head, kAllHeads);
        EXPECT_EQ(e.row_from, e.column + 1);
      } else {
        EXPECT_NE(e.head, kAllHeads);
        EXPECT_LT(e.column, query_begin);
        const auto& sel = r.head_report.layers[std::find(s2.begin(), s2.end(), e.layer) - s2.begin()].selected;
        EXPECT_TRUE(sel.contains(static_cast<std::size_t>(e.head)));
      }
    }
    EXPECT_EQ(r.head_report.layers.size(), s2.size());
    for (const auto& k : r.key_report.key_sets()) EXPECT_EQ(k.size(), top_pct_count(10, config.k1_pct));
  }
}

TEST_F(CamaRun, CaptionModeMismatchIsRejected) {
  auto config = small_config();
  config.caption_mode = true;
  EXPECT_THROW(run_cama(make_seq(1), params, config), InvalidArgument);
}

TEST_F(CamaRun, MatchesIndependentOracle) {
  TempDir tmp("cama_oracle");
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 6; ++trial) {
    auto config = small_config();
    config.prefill_mode = trial % 2 ? PrefillMode::cumulative_single_pass : PrefillMode::two_pass;
    config.rho_source = trial % 3 == 2 ? RhoSource::softmax_weights : RhoSource::raw_logits;
    config.query_position_factor = trial == 4 ? QueryPositionFactor::one : QueryPositionFactor::clamp_to_1_over_n;
    config.caption_mode = trial == 5;
    const auto seq = make_seq(rng(), 2 + trial % 2, config.caption_mode);
    const auto r = run_cama(seq, params, config);
    const auto report = cama_report(r, seq.layout, config);
    const auto dir = tmp / std::to_string(trial);
    export_trace(r.trace_modulated, dir / "modulated");
    std::optional<oracle::TraceFile> clean;
    if (r.trace_clean) {
      export_trace(*r.trace_clean, dir / "clean");
      clean.emplace(dir / "clean");
    }
    const oracle::TraceFile modulated(dir / "modulated");
    const auto expected = oracle::recompute(clean ? &*clean : nullptr, modulated, report);
    const auto cmp = oracle::compare(expected, report);
    EXPECT_TRUE(cmp.mismatches.empty()) << (cmp.mismatches.empty() ? "" : cmp.mismatches.front());
    EXPECT_GT(cmp.values, 100u);
    EXPECT_LE(cmp.max_abs_diff, 1e-9L);
  }
}
