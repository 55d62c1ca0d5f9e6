#pragma once

// Context-aware modulated attention: Stage I key-image-token grounding inside
// each demonstration and Stage II query-centric head routing, realised as an
// additive BiasPlan over the decoder's attention logits.
//
// CamaConfig carries 1-based layer numbers (as users write them); every
// function taking a `layer` argument expects the 0-based index.

#include <optional>
#include <vector>

#include "camalab/decoder.hpp"
#include "camalab/numerics.hpp"
#include "camalab/sequence.hpp"

namespace camalab {

enum class RhoSource { raw_logits, softmax_weights };
enum class QueryPositionFactor { clamp_to_1_over_n, one };
enum class PrefillMode { two_pass, cumulative_single_pass };

struct CamaConfig {
  std::vector<std::size_t> stage1_layers{2, 3};
  std::vector<std::size_t> stage2_layers{7, 9, 11, 13, 15, 17, 19};
  double k1_pct = 20.0;
  double k2_pct = 20.0;
  double epsilon = 1e-6;
  RhoSource rho_source = RhoSource::raw_logits;
  QueryPositionFactor query_position_factor = QueryPositionFactor::clamp_to_1_over_n;
  PrefillMode prefill_mode = PrefillMode::two_pass;
  bool caption_mode = false;

  /// Throws InvalidArgument when a layer is out of [1, N], the stages overlap
  /// or are out of order, or a percentage/epsilon is out of range.
  void validate(const ModelDims& dims) const;
  std::vector<std::size_t> stage1_zero_based() const;
  std::vector<std::size_t> stage2_zero_based() const;
};

const char* to_string(RhoSource v);
const char* to_string(QueryPositionFactor v);
const char* to_string(PrefillMode v);
RhoSource parse_rho_source(const std::string& s);
QueryPositionFactor parse_query_position_factor(const std::string& s);
PrefillMode parse_prefill_mode(const std::string& s);

// ---------------------------------------------------------------------------
// Stage I

/// Softmax over the element's image tokens of the head-averaged pre-bias
/// logits in row `anchor`. Support holds absolute token indices.
ProbVector anchor_distribution(const ForwardTrace& trace, const SegmentLayout& layout,
                               std::size_t layer, std::size_t anchor, std::size_t element);

/// [after - before]_+ * ln(after / before), exactly 0 where the bracket is 0.
std::vector<double> forward_gain(const ProbVector& before, const ProbVector& after);

struct Gains {
  std::vector<double> c1;
  std::optional<std::vector<double>> c2;  // absent for the query / caption mode
};

/// c1 from first-question to first-answer anchor, c2 from first to last
/// answer anchor (omitted when `answer_last` is absent).
Gains forward_gains(const ProbVector& question_first, const ProbVector& answer_first,
                    const std::optional<ProbVector>& answer_last);

struct LayerGains {
  std::size_t layer = 0;
  std::optional<ProbVector> question_first;
  ProbVector answer_first;
  ProbVector answer_last;
  Gains gains;
};

/// Anchor distributions and gains of one element at one layer. Caption-mode
/// elements have no question anchor, so c1 runs from the first to the last
/// answer token instead; the query never gets c2.
LayerGains element_layer_gains(const ForwardTrace& trace, const SegmentLayout& layout,
                               std::size_t layer, std::size_t element);

/// Sum of c1 + c2 over the given layers.
std::vector<double> token_scores(const std::vector<Gains>& per_layer);

/// Top k1_pct of the element's image tokens, as absolute indices.
IndexSet select_key_tokens(const std::vector<double>& scores, const Span& image_span,
                           double k1_pct);

struct ElementKeyTokens {
  std::size_t element = 0;
  std::vector<LayerGains> layers;
  std::vector<double> scores;  // over the element's image tokens, in order
  IndexSet key_set;            // absolute token indices
  double max_score = 0.0;      // max of scores over key_set
};

struct KeyTokenReport {
  std::vector<ElementKeyTokens> elements;  // n ICDs followed by the query

  std::vector<IndexSet> key_sets() const;
};

/// Stage I scoring over `layers` (0-based) for every element.
KeyTokenReport compute_key_tokens(const ForwardTrace& trace, const SegmentLayout& layout,
                                  const std::vector<std::size_t>& layers, double k1_pct);

/// (n - i + 1) / n for ICD i = element + 1; the query uses the configured
/// policy (1/n or 1).
double position_factor(std::size_t element, std::size_t n_shots, QueryPositionFactor policy);

/// Stage I bias on the given layers: every head, every key token j of every
/// element, rows after j.
BiasPlan stage1_bias(const KeyTokenReport& report, const SegmentLayout& layout,
                     const CamaConfig& config, const std::vector<std::size_t>& layers);
BiasPlan stage1_bias(const KeyTokenReport& report, const SegmentLayout& layout,
                     const CamaConfig& config);

// ---------------------------------------------------------------------------
// Stage II

/// Mean over the query's text rows of the summed query->context flow, per
/// head. Flow is the pre-bias logit or its causal softmax.
std::vector<double> head_flow(const ForwardTrace& trace, const SegmentLayout& layout,
                              std::size_t layer, RhoSource source);

IndexSet select_heads(const std::vector<double>& rho, double k2_pct);

struct LayerHeadSelection {
  std::size_t layer = 0;
  std::vector<double> rho;
  IndexSet selected;
};

struct HeadSelectionReport {
  std::vector<LayerHeadSelection> layers;
};

/// l2-normalised concat(mean hidden over key tokens, mean hidden over text
/// tokens) per element, read from the trace's hidden state at `layer`.
std::vector<Normalized> joint_representation(const ForwardTrace& trace, std::size_t layer,
                                             const SegmentLayout& layout,
                                             const std::vector<IndexSet>& key_sets);

/// Softmax over ICDs of <p_i, p_query>.
std::vector<double> query_weights(const std::vector<Normalized>& icds, const Normalized& query);

struct QueryWeightReport {
  std::vector<Normalized> icd_repr;
  Normalized query_repr;
  std::vector<double> similarity;
  std::vector<double> weights;
};

QueryWeightReport compute_query_weights(const ForwardTrace& trace, std::size_t layer,
                                        const SegmentLayout& layout,
                                        const std::vector<IndexSet>& key_sets);

/// Stage II entries for one layer: each selected head, each ICD column in
/// K_I ∪ question ∪ answer, rows after the ICD ends.
BiasPlan stage2_layer_bias(std::size_t layer, const IndexSet& heads,
                           const std::vector<double>& weights,
                           const std::vector<IndexSet>& key_sets, const SegmentLayout& layout);

BiasPlan stage2_bias(const QueryWeightReport& weights, const HeadSelectionReport& heads,
                     const std::vector<IndexSet>& key_sets, const SegmentLayout& layout);

// ---------------------------------------------------------------------------
// Orchestration

struct CamaRunResult {
  KeyTokenReport key_report;
  HeadSelectionReport head_report;
  QueryWeightReport weight_report;
  BiasPlan plan;
  std::optional<ForwardTrace> trace_clean;  // absent in cumulative_single_pass
  ForwardTrace trace_modulated;
};

/// two_pass: a clean prefill scores Stage I; a second prefill runs with the
/// Stage I bias installed and selects heads / installs Stage II bias at each
/// Stage II layer from that layer's own pre-bias logits.
/// cumulative_single_pass: one prefill; each Stage I layer is scored from the
/// layers seen so far and modulated immediately.
CamaRunResult run_cama(const TokenizedSequence& seq, const ModelParams& params,
                       const CamaConfig& config);

}  // namespace camalab
