#include <cmath>

#include "camalab/binary_io.hpp"
#include "camalab/decoder.hpp"
#include "camalab/error.hpp"
#include "common.hpp"
#include "oracle/oracle.hpp"

using namespace camalab;
using testutil::TempDir;

namespace {

struct TraceIo : ::testing::Test {
  ModelParams params = init_params({3, 2, 16, 8, 16}, 5);
  TokenizedSequence seq = [] {
    SyntheticTaskSpec s;
    s.n_shots = 1;
    s.image_tokens_per_icd = 5;
    s.question_len = 2;
    s.answer_len = 2;
    s.embed_dim = 16;
    s.seed = 12;
    return generate_synthetic(s);
  }();
  TempDir tmp{"trace"};

  ForwardTrace biased_trace() {
    BiasPlan plan;
    plan.add({1, kAllHeads, 2, 6, 0.7});
    plan.add({2, 1, 3, 8, -0.2});
    PrefillOptions o;
    o.plan = &plan;
    return prefill(seq, params, o);
  }
};

FormatErrc import_code(const std::filesystem::path& dir) {
  try {
    import_trace(dir);
  } catch (const FormatError& e) {
    return e.code();
  }
  ADD_FAILURE() << "import accepted a corrupt trace";
  return FormatErrc::io_failure;
}

}  // namespace

TEST_F(TraceIo, RoundTripIsBitExact) {
  const auto t = biased_trace();
  export_trace(t, tmp.path());
  const auto back = import_trace(tmp.path());
  EXPECT_EQ(back.dims, t.dims);
  EXPECT_EQ(back.seq_len, t.seq_len);
  EXPECT_EQ(back.prompt_len, t.prompt_len);
  EXPECT_EQ(back.logits, t.logits);
  EXPECT_EQ(back.weights, t.weights);
  EXPECT_EQ(back.hidden, t.hidden);
  EXPECT_EQ(back.applied_plan, t.applied_plan);
}

TEST_F(TraceIo, IndependentReaderSeesSameValues) {
  const auto t = biased_trace();
  export_trace(t, tmp.path());
  const oracle::TraceFile f(tmp.path());
  ASSERT_EQ(f.layers(), 3u);
  ASSERT_EQ(f.seq_len(), t.seq_len);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t r = 0; r < t.seq_len; r += 3)
      for (std::size_t c = 0; c <= r; ++c) {
        EXPECT_EQ(f.logit(l, 1, r, c), t.logit(l, 1, r, c));
        EXPECT_EQ(f.weight(l, 0, r, c), t.weight(l, 0, r, c));
      }
  EXPECT_EQ(f.hidden(2, 4, 7), t.hidden_row(2, 4)[7]);
}

TEST_F(TraceIo, OptionalTensorsCanBeOmitted) {
  export_trace(prefill(seq, params), tmp.path(), {false, false});
  const auto back = import_trace(tmp.path());
  EXPECT_TRUE(back.weights.empty());
  EXPECT_TRUE(back.hidden.empty());
  EXPECT_FALSE(back.logits.empty());
}

TEST_F(TraceIo, MissingLayerBlob) {
  export_trace(prefill(seq, params), tmp.path());
  std::filesystem::remove(tmp / "layer_2.bin");
  EXPECT_EQ(import_code(tmp.path()), FormatErrc::inconsistent_manifest);
}

TEST_F(TraceIo, ExtraLayerBlob) {
  export_trace(prefill(seq, params), tmp.path());
  std::filesystem::copy_file(tmp / "layer_3.bin", tmp / "layer_4.bin");
  EXPECT_EQ(import_code(tmp.path()), FormatErrc::inconsistent_manifest);
}

TEST_F(TraceIo, TruncatedBlob) {
  export_trace(prefill(seq, params), tmp.path());
  const auto blob = tmp / "weights_1.bin";
  std::filesystem::resize_file(blob, std::filesystem::file_size(blob) - 8);
  EXPECT_EQ(import_code(tmp.path()), FormatErrc::blob_length_mismatch);
}

TEST_F(TraceIo, NonFiniteValue) {
  const auto t = prefill(seq, params);
  export_trace(t, tmp.path());
  const std::size_t per = t.dims.n_heads * t.seq_len * t.seq_len;
  std::vector<float> layer(t.logits.begin(), t.logits.begin() + per);
  layer[1] = NAN;
  io::write_f32_le(tmp / "layer_1.bin", layer);
  EXPECT_EQ(import_code(tmp.path()), FormatErrc::non_finite_values);
}

TEST_F(TraceIo, PlanDigestMismatch) {
  export_trace(biased_trace(), tmp.path());
  auto m = io::read_json(tmp / "manifest.json");
  m["plan"][0]["value"] = 0.8;
  io::write_json(tmp / "manifest.json", m);
  EXPECT_EQ(import_code(tmp.path()), FormatErrc::inconsistent_manifest);
}

TEST_F(TraceIo, BadDims) {
  export_trace(prefill(seq, params), tmp.path());
  auto m = io::read_json(tmp / "manifest.json");
  m["dims"]["model_dim"] = 17;
  io::write_json(tmp / "manifest.json", m);
  EXPECT_EQ(import_code(tmp.path()), FormatErrc::malformed_header);
}
