#include "camalab/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "camalab/error.hpp"

namespace camalab {

void CdConfig::validate() const {
  if (!std::isfinite(alpha) || alpha < 0.0) throw InvalidArgument("cd alpha must be finite and >= 0");
}

TokenizedSequence blank_icd_images(const TokenizedSequence& seq) {
  TokenizedSequence out = seq;
  const std::size_t D = seq.embed_dim;
  for (std::size_t i = 0; i < seq.layout.n_shots; ++i) {
    const Span image = seq.layout.elements[i].image;
    std::fill(out.embeddings.begin() + static_cast<std::ptrdiff_t>(image.begin * D),
              out.embeddings.begin() + static_cast<std::ptrdiff_t>(image.end * D), 0.0f);
  }
  return out;
}

std::vector<double> contrastive_decode(std::span<const double> original,
                                       std::span<const double> distorted, double alpha) {
  if (original.size() != distorted.size()) {
    throw InvalidArgument("contrastive_decode: dimension mismatch");
  }
  std::vector<double> out(original.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (1.0 + alpha) * original[i] - alpha * distorted[i];
  }
  return out;
}

CdResult run_cd(const TokenizedSequence& seq, const ModelParams& params, const CdConfig& config) {
  config.validate();
  CdResult r;
  r.trace = prefill(seq, params);
  const ForwardTrace distorted = prefill(blank_icd_images(seq), params);
  const std::size_t row = seq.rows() - 1;
  const auto a = r.trace.vocab_row(row);
  const auto b = distorted.vocab_row(row);
  r.original.assign(a.begin(), a.end());
  r.distorted.assign(b.begin(), b.end());
  r.contrasted = contrastive_decode(r.original, r.distorted, config.alpha);
  r.next_token = static_cast<int>(std::max_element(r.contrasted.begin(), r.contrasted.end()) -
                                  r.contrasted.begin());
  return r;
}

void SofaConfig::validate() const {
  if (!(sigma >= 0.0 && sigma <= 1.0)) throw InvalidArgument("sofa sigma must be in [0, 1]");
  if (layer_stride == 0) throw InvalidArgument("sofa layer_stride must be >= 1");
}

std::vector<double> sofa_mask(double sigma, std::size_t seq_len) {
  if (!(sigma >= 0.0 && sigma <= 1.0)) throw InvalidArgument("sofa sigma must be in [0, 1]");
  std::vector<double> m(seq_len * seq_len, 1.0);
  for (std::size_t r = 0; r < seq_len; ++r) {
    for (std::size_t c = r + 1; c < seq_len; ++c) m[r * seq_len + c] = sigma;
  }
  return m;
}

SoftMaskSchedule sofa_schedule(const SofaConfig& config, const ModelDims& dims) {
  config.validate();
  SoftMaskSchedule s;
  s.sigma = config.sigma;
  s.layers.assign(dims.n_layers, false);
  for (std::size_t l = 1; l <= dims.n_layers; ++l) {
    if (l % config.layer_stride == 0) s.layers[l - 1] = true;
  }
  return s;
}

ForwardTrace sofa_forward(const TokenizedSequence& seq, const ModelParams& params,
                      const SofaConfig& config) {
  const SoftMaskSchedule schedule = sofa_schedule(config, params.dims);
  PrefillOptions options;
  options.soft_mask = &schedule;
  return prefill(seq, params, options);
}

}  // namespace camalab
