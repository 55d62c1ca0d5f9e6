#include "camalab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "camalab/error.hpp"

namespace camalab {

std::vector<double> token_heat(const ForwardTrace& trace, const SegmentLayout& layout,
                               std::size_t layer, std::size_t element) {
  if (trace.seq_len <= trace.prompt_len) throw InvalidArgument("token_heat: no generated tokens");
  if (element >= layout.elements.size() || layer >= trace.dims.n_layers) {
    throw InvalidArgument("token_heat: index outside trace");
  }
  if (trace.weights.empty()) throw InvalidArgument("token_heat: trace has no weights");
  const Span image = layout.elements[element].image;
  std::vector<double> heat(image.size(), 0.0);
  const std::size_t H = trace.dims.n_heads;
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t r = trace.prompt_len; r < trace.seq_len; ++r) {
      const auto row = trace.weight_row(layer, h, r);
      const double mx = *std::max_element(row.begin(), row.end());
      if (mx <= 0.0) continue;
      for (std::size_t j = 0; j < image.size(); ++j) heat[j] += row[image.begin + j] / mx;
    }
  }
  const double count = static_cast<double>(H * (trace.seq_len - trace.prompt_len));
  for (double& v : heat) v /= count;
  return heat;
}

double alignment_score(std::span<const double> heat, const Span& image, const IndexSet& annotation) {
  if (heat.size() != image.size()) throw InvalidArgument("alignment_score: heat must cover the image span");
  for (std::size_t a : annotation) {
    if (!image.contains(a)) throw InvalidArgument("alignment_score: annotation outside image span");
  }
  std::vector<std::size_t> top;
  for (std::size_t j : top_pct_indices(heat, kAlignTopPct)) top.push_back(image.begin + j);
  return set_iou(IndexSet(std::move(top)), annotation);
}

Saliency saliency_matrix(const ForwardTrace& trace, const AttentionGrads& grads) {
  if (!(trace.dims == grads.dims) || trace.seq_len != grads.seq_len ||
      trace.weights.size() != grads.grads.size()) {
    throw InvalidArgument("saliency_matrix: shape mismatch between trace and gradients");
  }
  Saliency s;
  s.dims = trace.dims;
  s.seq_len = trace.seq_len;
  s.values.resize(grads.grads.size());
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    s.values[i] = std::abs(static_cast<double>(trace.weights[i]) * grads.grads[i]);
  }
  return s;
}

double saliency_mass(const Saliency& saliency, std::size_t layer,
                     std::span<const std::size_t> rows, std::span<const std::size_t> columns) {
  double total = 0.0;
  for (std::size_t h = 0; h < saliency.dims.n_heads; ++h) {
    for (std::size_t r : rows) {
      for (std::size_t c : columns) total += saliency.at(layer, h, r, c);
    }
  }
  return total;
}

std::vector<std::size_t> visual_tokens(const SegmentLayout& layout) {
  std::vector<std::size_t> out;
  for (const auto& e : layout.elements) {
    for (std::size_t j = e.image.begin; j < e.image.end; ++j) out.push_back(j);
  }
  return out;
}

double contribution_score(const Saliency& saliency, const SegmentLayout& layout,
                          std::size_t layer, std::span<const std::size_t> answer_rows,
                          std::size_t position) {
  if (position < 1 || position > layout.n_shots) {
    throw InvalidArgument("contribution_score: key position outside [1, n]");
  }
  if (layer >= saliency.dims.n_layers) throw InvalidArgument("contribution_score: no such layer");
  for (std::size_t r : answer_rows) {
    if (r >= saliency.seq_len) throw InvalidArgument("contribution_score: answer row outside trace");
  }
  const double denom = saliency_mass(saliency, layer, answer_rows, visual_tokens(layout));
  if (!(denom > 0.0)) throw NumericError("no answer-directed saliency");
  const Span key = layout.elements[position - 1].image;
  std::vector<std::size_t> columns;
  for (std::size_t j = key.begin; j < key.end; ++j) columns.push_back(j);
  return saliency_mass(saliency, layer, answer_rows, columns) / denom;
}

void export_heatmap(std::span<const double> values, std::size_t rows, std::size_t cols,
                    const std::filesystem::path& path) {
  if (rows == 0 || cols == 0 || values.size() != rows * cols) {
    throw InvalidArgument("export_heatmap: values do not match rows x cols");
  }
  double lo = INFINITY, hi = -INFINITY;
  for (double v : values) {
    if (!std::isfinite(v)) throw InvalidArgument("export_heatmap: non-finite value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::string pixels(values.size(), '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double scaled = hi > lo ? (values[i] - lo) / (hi - lo) * 255.0 : 128.0;
    pixels[i] = static_cast<char>(static_cast<unsigned char>(std::lround(scaled)));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatErrc::io_failure, "cannot open " + path.string());
  out << "P5\n" << cols << ' ' << rows << "\n255\n";
  out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw FormatError(FormatErrc::io_failure, "cannot write " + path.string());
}

void fill_alignment(DiagnosticsReport& report, const ForwardTrace& decoded,
                    const SegmentLayout& layout, const GroundTruth& truth) {
  if (truth.key_region_masks.size() != layout.elements.size()) {
    throw InvalidArgument("ground truth does not cover every element");
  }
  report.layers.clear();
  report.s_align.clear();
  report.heat.clear();
  for (std::size_t l = 0; l < decoded.dims.n_layers; ++l) {
    report.layers.push_back(l);
    std::vector<double> align;
    std::vector<std::vector<double>> heats;
    for (std::size_t i = 0; i < layout.elements.size(); ++i) {
      heats.push_back(token_heat(decoded, layout, l, i));
      align.push_back(alignment_score(heats.back(), layout.elements[i].image,
                                      truth.key_region_masks[i]));
    }
    report.s_align.push_back(std::move(align));
    report.heat.push_back(std::move(heats));
  }
}

}  // namespace camalab
