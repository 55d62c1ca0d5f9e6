#include <cmath>

#include "camalab/baselines.hpp"
#include "camalab/error.hpp"
#include "common.hpp"

using namespace camalab;

namespace {

const ModelDims kDims{6, 2, 16, 8, 16};

TokenizedSequence make_seq(std::uint64_t seed = 4) {
  SyntheticTaskSpec s;
  s.n_shots = 2;
  s.image_tokens_per_icd = 6;
  s.question_len = 2;
  s.answer_len = 2;
  s.embed_dim = kDims.model_dim;
  s.seed = seed;
  return generate_synthetic(s);
}

bool row_is_zero(std::span<const float> row) {
  return std::all_of(row.begin(), row.end(), [](float v) { return v == 0.0f; });
}

}  // namespace

TEST(Blank, OnlyIcdImagesAreZeroed) {
  const auto seq = make_seq();
  const auto blank = blank_icd_images(seq);
  EXPECT_EQ(blank.layout, seq.layout);
  for (std::size_t k = 0; k < seq.layout.elements.size(); ++k) {
    const auto& e = seq.layout.elements[k];
    for (std::size_t r = e.image.begin; r < e.answer.end; ++r) {
      const bool zeroed = k < seq.layout.n_shots && e.image.contains(r);
      if (zeroed) {
        EXPECT_TRUE(row_is_zero(blank.row(r))) << r;
      } else {
        const auto a = seq.row(r), b = blank.row(r);
        EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << r;
      }
    }
  }
}

TEST(Contrast, Formula) {
  const std::vector<double> a{1.0, -2.0, 0.5}, b{0.5, 1.0, 0.5};
  EXPECT_EQ(contrastive_decode(a, b, 0.0), a);
  EXPECT_EQ(contrastive_decode(a, a, 0.7), a);
  const auto c = contrastive_decode(a, b, 0.4);
  EXPECT_NEAR(c[0], 1.4 * 1.0 - 0.4 * 0.5, 1e-15);
  EXPECT_NEAR(c[1], 1.4 * -2.0 - 0.4 * 1.0, 1e-15);
  EXPECT_NEAR(c[2], 0.5, 1e-15);
  EXPECT_THROW(contrastive_decode(a, std::vector<double>{1.0}, 0.4), InvalidArgument);
}

TEST(Contrast, UnitVectors) {
  const auto c = contrastive_decode(std::vector<double>{1, 0}, std::vector<double>{0, 1}, 0.4);
  EXPECT_NEAR(c[0], 1.4, 1e-15);
  EXPECT_NEAR(c[1], -0.4, 1e-15);
}

TEST(Contrast, LinearInAlpha) {
  const std::vector<double> a{0.3, 2.0}, b{-1.0, 0.25};
  const auto c1 = contrastive_decode(a, b, 0.2);
  const auto c2 = contrastive_decode(a, b, 0.6);
  const auto c3 = contrastive_decode(a, b, 1.0);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(c2[i] - c1[i], c3[i] - c2[i], 1e-14);
}

TEST(Contrast, ConfigValidation) {
  EXPECT_NO_THROW(CdConfig{}.validate());
  EXPECT_THROW((CdConfig{-0.1}.validate()), InvalidArgument);
  EXPECT_THROW((CdConfig{NAN}.validate()), InvalidArgument);
}

TEST(Contrast, RunUsesTwoPrefillsAndLastRow) {
  const auto params = init_params(kDims, 2);
  const auto seq = make_seq();
  const auto before = forward_pass_count();
  const auto r = run_cd(seq, params, CdConfig{});
  EXPECT_EQ(forward_pass_count() - before, 2u);
  const auto last = r.trace.vocab_row(seq.rows() - 1);
  EXPECT_EQ(r.original, std::vector<double>(last.begin(), last.end()));
  const auto distorted = prefill(blank_icd_images(seq), params);
  const auto dlast = distorted.vocab_row(seq.rows() - 1);
  EXPECT_EQ(r.distorted, std::vector<double>(dlast.begin(), dlast.end()));
  EXPECT_EQ(r.contrasted, contrastive_decode(r.original, r.distorted, 0.4));
  EXPECT_EQ(r.next_token, std::max_element(r.contrasted.begin(), r.contrasted.end()) - r.contrasted.begin());
  EXPECT_EQ(run_cd(seq, params, CdConfig{0.0}).contrasted, r.original);
}

TEST(SoftMask, Matrices) {
  EXPECT_EQ(sofa_mask(0.0, 2), (std::vector<double>{1, 0, 1, 1}));
  EXPECT_EQ(sofa_mask(1.0, 2), (std::vector<double>{1, 1, 1, 1}));
  EXPECT_EQ(sofa_mask(0.5, 3), (std::vector<double>{1, 0.5, 0.5, 1, 1, 0.5, 1, 1, 1}));
  EXPECT_THROW(sofa_mask(1.5, 3), InvalidArgument);
}

TEST(SoftMask, Schedule) {
  const auto s = sofa_schedule(SofaConfig{0.5, 2}, kDims);
  EXPECT_EQ(s.layers, (std::vector<bool>{false, true, false, true, false, true}));
  EXPECT_EQ(s.sigma, 0.5);
  const auto every = sofa_schedule(SofaConfig{0.2, 1}, kDims);
  EXPECT_EQ(every.layers, std::vector<bool>(6, true));
  EXPECT_THROW((SofaConfig{0.5, 0}.validate()), InvalidArgument);
  EXPECT_THROW((SofaConfig{-0.5, 2}.validate()), InvalidArgument);
}

TEST(SoftMask, ZeroSigmaIsVanilla) {
  const auto params = init_params(kDims, 2);
  const auto seq = make_seq();
  const auto a = prefill(seq, params);
  const auto b = sofa_forward(seq, params, SofaConfig{0.0, 2});
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.hidden, b.hidden);
  EXPECT_EQ(a.vocab_logits, b.vocab_logits);
}

TEST(SoftMask, ScheduledLayersMixCausalAndBidirectional) {
  const auto params = init_params(kDims, 2);
  const auto seq = make_seq();
  const double sigma = 0.3;
  const auto t = sofa_forward(seq, params, SofaConfig{sigma, 2});
  const std::size_t S = t.seq_len;
  for (std::size_t l = 0; l < kDims.n_layers; ++l) {
    const bool scheduled = (l + 1) % 2 == 0;
    for (std::size_t h = 0; h < kDims.n_heads; ++h)
      for (std::size_t r = 0; r < S; r += 2) {
        double causal_z = 0, full_z = 0, mx = -1e300, sum = 0;
        for (std::size_t c = 0; c < S; ++c) mx = std::max<double>(mx, t.logit(l, h, r, c));
        for (std::size_t c = 0; c < S; ++c) {
          const double e = std::exp(t.logit(l, h, r, c) - mx);
          full_z += e;
          if (c <= r) causal_z += e;
        }
        for (std::size_t c = 0; c < S; ++c) {
          const double w = t.weight(l, h, r, c);
          sum += w;
          if (!scheduled) {
            if (c > r) {
              EXPECT_EQ(w, 0.0f);
            }
            continue;
          }
          const double e = std::exp(t.logit(l, h, r, c) - mx);
          const double expect = (1 - sigma) * (c <= r ? e / causal_z : 0.0) + sigma * e / full_z;
          EXPECT_NEAR(w, expect, 1e-6);
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
      }
  }
}
