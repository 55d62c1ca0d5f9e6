#pragma once

// Measurement apparatus: token heat, intra-ICD alignment (s_align), attention
// saliency |A * dL/dA| and the key-ICD contribution share (s_contrib), plus
// graymap export.

#include <filesystem>
#include <span>
#include <vector>

#include "camalab/decoder.hpp"
#include "camalab/numerics.hpp"
#include "camalab/sequence.hpp"

namespace camalab {

inline constexpr double kAlignTopPct = 20.0;

/// Heat over element `element`'s image tokens at `layer`: every generated row
/// (rows >= prompt_len) is divided by its max, then columns are averaged over
/// those rows and over heads. Throws InvalidArgument when the trace holds no
/// generated rows.
std::vector<double> token_heat(const ForwardTrace& trace, const SegmentLayout& layout,
                               std::size_t layer, std::size_t element);

/// IoU of the top-20% heat tokens and the annotation. Heat is indexed over
/// `image`; the annotation holds absolute indices inside it.
double alignment_score(std::span<const double> heat, const Span& image, const IndexSet& annotation);

struct Saliency {
  ModelDims dims;
  std::size_t seq_len = 0;
  std::vector<double> values;  // [N][H][S][S]

  double at(std::size_t l, std::size_t h, std::size_t r, std::size_t c) const {
    return values[((l * dims.n_heads + h) * seq_len + r) * seq_len + c];
  }
};

/// |A * G| elementwise, A from the trace's recorded weights. Throws
/// InvalidArgument when the two disagree in dims or length.
Saliency saliency_matrix(const ForwardTrace& trace, const AttentionGrads& grads);

/// Head-summed saliency over rows x columns at one layer.
double saliency_mass(const Saliency& saliency, std::size_t layer,
                     std::span<const std::size_t> rows, std::span<const std::size_t> columns);

/// Every image token of every element (ICDs and query), ascending.
std::vector<std::size_t> visual_tokens(const SegmentLayout& layout);

/// Share of answer-directed saliency on the image tokens of 1-based ICD
/// `position`. Throws NumericError("no answer-directed saliency") when the
/// denominator is zero.
double contribution_score(const Saliency& saliency, const SegmentLayout& layout,
                          std::size_t layer, std::span<const std::size_t> answer_rows,
                          std::size_t position);

/// Binary 8-bit portable graymap, min-max scaled; a constant input renders
/// as 128 everywhere.
void export_heatmap(std::span<const double> values, std::size_t rows, std::size_t cols,
                    const std::filesystem::path& path);

struct DiagnosticsReport {
  std::vector<std::size_t> layers;                      // 0-based
  std::vector<std::vector<double>> s_align;             // [layer][element]
  std::vector<std::vector<double>> s_contrib;           // [layer][position - 1]
  std::vector<std::vector<std::vector<double>>> heat;   // [layer][element][token]
};

/// s_align and heat for every layer and element of a decoded trace.
void fill_alignment(DiagnosticsReport& report, const ForwardTrace& decoded,
                    const SegmentLayout& layout, const GroundTruth& truth);

}  // namespace camalab
