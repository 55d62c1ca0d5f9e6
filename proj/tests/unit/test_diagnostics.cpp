#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "camalab/diagnostics.hpp"
#include "camalab/error.hpp"
#include "common.hpp"

using namespace camalab;
using testutil::TempDir;

namespace {

// ICD: image 4, question 1, answer 1; query: image 2, question 1, answer 1.
SegmentLayout small_layout() {
  const std::vector<ElementLengths> lens{{4, 1, 1}, {4, 1, 1}, {2, 1, 1}};
  return layout_from_lengths(lens, false);
}

ForwardTrace weight_trace(std::size_t layers, std::size_t heads, std::size_t S, std::size_t prompt) {
  ForwardTrace t;
  t.dims = {layers, heads, heads * 2, 2, 4};
  t.seq_len = S;
  t.prompt_len = prompt;
  t.logits.assign(layers * heads * S * S, 0.0f);
  t.weights.assign(layers * heads * S * S, 0.0f);
  return t;
}

void fill_uniform_causal(ForwardTrace& t) {
  const std::size_t S = t.seq_len;
  for (std::size_t l = 0; l < t.dims.n_layers; ++l)
    for (std::size_t h = 0; h < t.dims.n_heads; ++h)
      for (std::size_t r = 0; r < S; ++r)
        for (std::size_t c = 0; c <= r; ++c)
          t.weights[t.matrix_offset(l, h) + r * S + c] = 1.0f / float(r + 1);
}

Saliency constant_saliency(std::size_t layers, std::size_t heads, std::size_t S, double v) {
  Saliency s;
  s.dims = {layers, heads, heads * 2, 2, 4};
  s.seq_len = S;
  s.values.assign(layers * heads * S * S, v);
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Heat, UniformRowsGiveUnitHeat) {
  const auto layout = small_layout();
  auto t = weight_trace(2, 3, layout.total_len + 2, layout.total_len);
  fill_uniform_causal(t);
  for (std::size_t e = 0; e < 3; ++e)
    for (double v : token_heat(t, layout, 1, e)) EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(Heat, SingleGeneratedRowIsNormalisedByRowMax) {
  const auto layout = small_layout();
  const std::size_t S = layout.total_len + 1;
  auto t = weight_trace(1, 2, S, layout.total_len);
  const std::size_t r = S - 1;
  const float row[] = {0.1f, 0.4f, 0.2f, 0.0f};
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t c = 0; c < 4; ++c) t.weights[t.matrix_offset(0, h) + r * S + c] = row[c];
    t.weights[t.matrix_offset(0, h) + r * S + 6] = h == 0 ? 0.3f : 0.8f;  // not an image token
  }
  const auto heat = token_heat(t, layout, 0, 0);
  ASSERT_EQ(heat.size(), 4u);
  // Head 0 divides by 0.4, head 1 by 0.8; then heads are averaged.
  EXPECT_NEAR(heat[0], 0.5 * (0.1 / 0.4 + 0.1 / 0.8), 1e-7);
  EXPECT_NEAR(heat[1], 0.5 * (1.0 + 0.5), 1e-7);
  EXPECT_NEAR(heat[3], 0.0, 1e-12);
}

TEST(Heat, NeedsGeneratedRows) {
  const auto layout = small_layout();
  auto t = weight_trace(1, 1, layout.total_len, layout.total_len);
  fill_uniform_causal(t);
  EXPECT_THROW(token_heat(t, layout, 0, 0), InvalidArgument);
}

TEST(Align, IouExample) {
  std::vector<double> heat(10, 0.0);
  heat[0] = 0.9;
  heat[1] = 0.8;
  EXPECT_DOUBLE_EQ(alignment_score(heat, {20, 30}, {21, 22, 23}), 0.25);
  EXPECT_DOUBLE_EQ(alignment_score(heat, {20, 30}, {20, 21}), 1.0);
  EXPECT_THROW(alignment_score(heat, {20, 30}, {31}), InvalidArgument);
  EXPECT_THROW(alignment_score(std::vector<double>(9, 0.0), {20, 30}, {21}), InvalidArgument);
}

TEST(SaliencyTest, ElementwiseAbsoluteProduct) {
  auto t = weight_trace(2, 2, 3, 3);
  fill_uniform_causal(t);
  AttentionGrads g;
  g.dims = t.dims;
  g.seq_len = 3;
  g.grads.assign(t.weights.size(), 0.0);
  g.grads[g.offset(1, 1, 2, 0)] = -6.0;
  g.grads[g.offset(0, 0, 1, 1)] = 2.0;
  const auto s = saliency_matrix(t, g);
  EXPECT_NEAR(s.at(1, 1, 2, 0), 2.0, 1e-6);
  EXPECT_NEAR(s.at(0, 0, 1, 1), 1.0, 1e-6);
  EXPECT_EQ(s.at(0, 1, 1, 1), 0.0);
  g.seq_len = 4;
  EXPECT_THROW(saliency_matrix(t, g), InvalidArgument);
}

TEST(Contribution, UniformSaliencyGivesTokenShare) {
  const auto layout = small_layout();
  const std::size_t S = layout.total_len + 1;
  const auto s = constant_saliency(2, 2, S, 0.5);
  const std::vector<std::size_t> answer{layout.total_len - 1, layout.total_len};
  EXPECT_EQ(visual_tokens(layout).size(), 10u);
  EXPECT_NEAR(contribution_score(s, layout, 1, answer, 1), 0.4, 1e-15);
  EXPECT_NEAR(contribution_score(s, layout, 1, answer, 2), 0.4, 1e-15);
  EXPECT_THROW(contribution_score(s, layout, 1, answer, 3), InvalidArgument);
  EXPECT_THROW(contribution_score(s, layout, 2, answer, 1), InvalidArgument);
  EXPECT_NEAR(saliency_mass(s, 0, answer, visual_tokens(layout)), 2 * 2 * 10 * 0.5, 1e-12);
}

TEST(Contribution, SharesPartitionVisualMass) {
  const auto layout = small_layout();
  const std::size_t S = layout.total_len;
  auto s = constant_saliency(1, 2, S, 0.0);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : s.values) v = u(rng);
  const std::vector<std::size_t> answer{S - 1};
  const auto& q = layout.query().image;
  std::vector<std::size_t> query_cols;
  for (std::size_t c = q.begin; c < q.end; ++c) query_cols.push_back(c);
  const double total = saliency_mass(s, 0, answer, visual_tokens(layout));
  const double sum = contribution_score(s, layout, 0, answer, 1) +
                     contribution_score(s, layout, 0, answer, 2) +
                     saliency_mass(s, 0, answer, query_cols) / total;
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(Contribution, ZeroDenominatorIsNumericError) {
  const auto layout = small_layout();
  const auto s = constant_saliency(1, 1, layout.total_len, 0.0);
  const std::vector<std::size_t> answer{layout.total_len - 1};
  EXPECT_THROW(contribution_score(s, layout, 0, answer, 1), NumericError);
}

TEST(Heatmap, GraymapBytes) {
  TempDir tmp("pgm");
  export_heatmap(std::vector<double>{0, 1, 1, 0}, 2, 2, tmp / "a.pgm");
  EXPECT_EQ(slurp(tmp / "a.pgm"), std::string("P5\n2 2\n255\n") + std::string("\x00\xff\xff\x00", 4));
  export_heatmap(std::vector<double>(6, 3.5), 2, 3, tmp / "b.pgm");
  EXPECT_EQ(slurp(tmp / "b.pgm"), std::string("P5\n3 2\n255\n") + std::string(6, '\x80'));
  EXPECT_THROW(export_heatmap(std::vector<double>{1, 2, 3}, 2, 2, tmp / "c.pgm"), InvalidArgument);
  EXPECT_THROW(export_heatmap(std::vector<double>{1, NAN}, 1, 2, tmp / "c.pgm"), InvalidArgument);
}

TEST(Alignment, FillCoversEveryLayerAndElement) {
  const auto layout = small_layout();
  auto t = weight_trace(3, 2, layout.total_len + 2, layout.total_len);
  fill_uniform_causal(t);
  GroundTruth truth;
  for (const auto& e : layout.elements) truth.key_region_masks.push_back({e.image.begin});
  truth.key_region_masks[0] = {0, 1};
  DiagnosticsReport report;
  fill_alignment(report, t, layout, truth);
  ASSERT_EQ(report.s_align.size(), 3u);
  for (const auto& row : report.s_align) {
    ASSERT_EQ(row.size(), 3u);
    for (double v : row) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  // Uniform heat selects the single lowest image token.
  EXPECT_DOUBLE_EQ(report.s_align[0][2], 1.0);
  EXPECT_DOUBLE_EQ(report.s_align[0][0], 0.5);
  truth.key_region_masks.pop_back();
  EXPECT_THROW(fill_alignment(report, t, layout, truth), InvalidArgument);
}
