#pragma once

// Comparison methods: contrastive decoding against a visually distorted copy
// of the input, and a soft-masked (SoFA-style) attention variant.

#include <vector>

#include "camalab/decoder.hpp"
#include "camalab/sequence.hpp"

namespace camalab {

enum class Distortion { blank_images };

struct CdConfig {
  double alpha = 0.4;
  Distortion distortion = Distortion::blank_images;

  void validate() const;
};

/// Copy of `seq` with every ICD image row zeroed; the query image and all
/// text rows are untouched.
TokenizedSequence blank_icd_images(const TokenizedSequence& seq);

/// (1 + alpha) * original - alpha * distorted. Throws InvalidArgument on a
/// length mismatch.
std::vector<double> contrastive_decode(std::span<const double> original,
                                       std::span<const double> distorted, double alpha);

struct CdResult {
  std::vector<double> original;   // next-token logits at the last prompt row
  std::vector<double> distorted;
  std::vector<double> contrasted;
  int next_token = 0;
  ForwardTrace trace;  // prefill of the original input
};

/// Two prefills (original and distorted), then the contrast at row S-1.
CdResult run_cd(const TokenizedSequence& seq, const ModelParams& params, const CdConfig& config);

struct SofaConfig {
  double sigma = 0.5;
  std::size_t layer_stride = 2;

  void validate() const;
};

/// S x S row-major soft mask: 1 on and below the diagonal, sigma above.
std::vector<double> sofa_mask(double sigma, std::size_t seq_len);

/// Scheduled on 1-based layers stride, 2*stride, ...
SoftMaskSchedule sofa_schedule(const SofaConfig& config, const ModelDims& dims);

ForwardTrace sofa_forward(const TokenizedSequence& seq, const ModelParams& params,
                      const SofaConfig& config);

}  // namespace camalab
