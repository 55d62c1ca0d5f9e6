#include "camalab/cama.hpp"

#include <algorithm>
#include <cmath>

#include "camalab/error.hpp"

namespace camalab {

// ---------------------------------------------------------------------------
// Config

void CamaConfig::validate(const ModelDims& dims) const {
  auto check_layers = [&](const std::vector<std::size_t>& layers, const char* name) {
    if (layers.empty()) throw InvalidArgument(std::string(name) + " must not be empty");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i] < 1 || layers[i] > dims.n_layers) {
        throw InvalidArgument(std::string(name) + " layer " + std::to_string(layers[i]) +
                              " outside [1, " + std::to_string(dims.n_layers) + "]");
      }
      if (i > 0 && layers[i - 1] >= layers[i]) {
        throw InvalidArgument(std::string(name) + " must be strictly ascending");
      }
    }
  };
  check_layers(stage1_layers, "stage1_layers");
  check_layers(stage2_layers, "stage2_layers");
  if (stage1_layers.back() >= stage2_layers.front()) {
    throw InvalidArgument("every stage1 layer must precede every stage2 layer");
  }
  for (double pct : {k1_pct, k2_pct}) {
    if (!(pct > 0.0 && pct <= 100.0)) throw InvalidArgument("invalid percentage");
  }
  if (!(std::isfinite(epsilon) && epsilon > 0.0)) throw InvalidArgument("epsilon must be positive");
}

namespace {

std::vector<std::size_t> to_zero_based(const std::vector<std::size_t>& layers) {
  std::vector<std::size_t> out;
  for (std::size_t l : layers) out.push_back(l - 1);
  return out;
}

}  // namespace

std::vector<std::size_t> CamaConfig::stage1_zero_based() const { return to_zero_based(stage1_layers); }
std::vector<std::size_t> CamaConfig::stage2_zero_based() const { return to_zero_based(stage2_layers); }

const char* to_string(RhoSource v) {
  return v == RhoSource::raw_logits ? "raw_logits" : "softmax_weights";
}
const char* to_string(QueryPositionFactor v) {
  return v == QueryPositionFactor::clamp_to_1_over_n ? "clamp_to_1_over_n" : "one";
}
const char* to_string(PrefillMode v) {
  return v == PrefillMode::two_pass ? "two_pass" : "cumulative_single_pass";
}

RhoSource parse_rho_source(const std::string& s) {
  if (s == "raw_logits") return RhoSource::raw_logits;
  if (s == "softmax_weights") return RhoSource::softmax_weights;
  throw InvalidArgument("unknown rho_source: " + s);
}
QueryPositionFactor parse_query_position_factor(const std::string& s) {
  if (s == "clamp_to_1_over_n") return QueryPositionFactor::clamp_to_1_over_n;
  if (s == "one") return QueryPositionFactor::one;
  throw InvalidArgument("unknown query_position_factor: " + s);
}
PrefillMode parse_prefill_mode(const std::string& s) {
  if (s == "two_pass") return PrefillMode::two_pass;
  if (s == "cumulative_single_pass") return PrefillMode::cumulative_single_pass;
  throw InvalidArgument("unknown prefill_mode: " + s);
}

// ---------------------------------------------------------------------------
// Stage I

ProbVector anchor_distribution(const ForwardTrace& trace, const SegmentLayout& layout,
                               std::size_t layer, std::size_t anchor, std::size_t element) {
  if (element >= layout.elements.size()) throw InvalidArgument("anchor_distribution: no such element");
  const Span image = layout.elements[element].image;
  if (anchor < image.end) throw InvalidArgument("non-causal anchor");
  if (anchor >= trace.seq_len || layer >= trace.dims.n_layers) {
    throw InvalidArgument("anchor_distribution: index outside trace");
  }
  const std::size_t H = trace.dims.n_heads;
  std::vector<double> averaged(image.size(), 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    const auto row = trace.logit_row(layer, h, anchor);
    for (std::size_t j = 0; j < image.size(); ++j) averaged[j] += row[image.begin + j];
  }
  for (double& a : averaged) a /= static_cast<double>(H);
  ProbVector p = masked_softmax(averaged, std::vector<bool>(averaged.size(), true));
  for (std::size_t& s : p.support) s += image.begin;
  return p;
}

std::vector<double> forward_gain(const ProbVector& before, const ProbVector& after) {
  if (before.support != after.support || before.values.size() != after.values.size()) {
    throw InvalidArgument("forward_gain: support mismatch");
  }
  std::vector<double> out(after.values.size(), 0.0);
  for (std::size_t j = 0; j < out.size(); ++j) {
    const double diff = after.values[j] - before.values[j];
    if (diff > 0.0) out[j] = diff * std::log(after.values[j] / before.values[j]);
  }
  return out;
}

Gains forward_gains(const ProbVector& question_first, const ProbVector& answer_first,
                    const std::optional<ProbVector>& answer_last) {
  Gains g;
  g.c1 = forward_gain(question_first, answer_first);
  if (answer_last) g.c2 = forward_gain(answer_first, *answer_last);
  return g;
}

LayerGains element_layer_gains(const ForwardTrace& trace, const SegmentLayout& layout,
                               std::size_t layer, std::size_t element) {
  const Anchors a = anchors(layout, element);
  const bool is_query = element == layout.query_index();
  LayerGains out;
  out.layer = layer;
  out.answer_first = anchor_distribution(trace, layout, layer, a.answer_first, element);
  out.answer_last = a.answer_last == a.answer_first
                        ? out.answer_first
                        : anchor_distribution(trace, layout, layer, a.answer_last, element);
  if (a.question_first) {
    out.question_first = anchor_distribution(trace, layout, layer, *a.question_first, element);
    out.gains = forward_gains(*out.question_first, out.answer_first,
                              is_query ? std::nullopt : std::optional<ProbVector>(out.answer_last));
  } else {
    // No question anchor: c1 spans the answer alone.
    out.gains.c1 = forward_gain(out.answer_first, out.answer_last);
  }
  return out;
}

std::vector<double> token_scores(const std::vector<Gains>& per_layer) {
  if (per_layer.empty()) return {};
  std::vector<double> s(per_layer.front().c1.size(), 0.0);
  for (const Gains& g : per_layer) {
    if (g.c1.size() != s.size() || (g.c2 && g.c2->size() != s.size())) {
      throw InvalidArgument("token_scores: gain length mismatch");
    }
    for (std::size_t j = 0; j < s.size(); ++j) {
      s[j] += g.c1[j] + (g.c2 ? (*g.c2)[j] : 0.0);
    }
  }
  return s;
}

IndexSet select_key_tokens(const std::vector<double>& scores, const Span& image_span,
                           double k1_pct) {
  if (image_span.empty() || scores.size() != image_span.size()) {
    throw InvalidArgument("select_key_tokens: scores must cover the image span");
  }
  const IndexSet local = top_pct_indices(scores, k1_pct);
  std::vector<std::size_t> absolute;
  for (std::size_t j : local) absolute.push_back(image_span.begin + j);
  return IndexSet(std::move(absolute));
}

std::vector<IndexSet> KeyTokenReport::key_sets() const {
  std::vector<IndexSet> out;
  for (const auto& e : elements) out.push_back(e.key_set);
  return out;
}

namespace {

void finalize_scores(ElementKeyTokens& e, const SegmentLayout& layout, double k1_pct) {
  std::vector<Gains> gains;
  for (const auto& lg : e.layers) gains.push_back(lg.gains);
  e.scores = token_scores(gains);
  const Span image = layout.elements[e.element].image;
  e.key_set = select_key_tokens(e.scores, image, k1_pct);
  e.max_score = 0.0;
  for (std::size_t j : e.key_set) e.max_score = std::max(e.max_score, e.scores[j - image.begin]);
}

}  // namespace

KeyTokenReport compute_key_tokens(const ForwardTrace& trace, const SegmentLayout& layout,
                                  const std::vector<std::size_t>& layers, double k1_pct) {
  KeyTokenReport report;
  for (std::size_t i = 0; i < layout.elements.size(); ++i) {
    ElementKeyTokens e;
    e.element = i;
    for (std::size_t l : layers) e.layers.push_back(element_layer_gains(trace, layout, l, i));
    finalize_scores(e, layout, k1_pct);
    report.elements.push_back(std::move(e));
  }
  return report;
}

double position_factor(std::size_t element, std::size_t n_shots, QueryPositionFactor policy) {
  if (n_shots == 0 || element > n_shots) throw InvalidArgument("position_factor: no such element");
  const auto n = static_cast<double>(n_shots);
  if (element == n_shots) {
    return policy == QueryPositionFactor::one ? 1.0 : 1.0 / n;
  }
  const auto i = static_cast<double>(element + 1);
  return (n - i + 1.0) / n;
}

BiasPlan stage1_bias(const KeyTokenReport& report, const SegmentLayout& layout,
                     const CamaConfig& config, const std::vector<std::size_t>& layers) {
  BiasPlan plan;
  for (const auto& e : report.elements) {
    if (e.key_set.empty()) throw InvalidArgument("stage1_bias: empty key set");
    const Span image = layout.elements[e.element].image;
    const double factor =
        position_factor(e.element, layout.n_shots, config.query_position_factor);
    for (std::size_t j : e.key_set) {
      const double value = factor * e.scores[j - image.begin] / (e.max_score + config.epsilon);
      for (std::size_t l : layers) {
        plan.add({l, kAllHeads, j, j + 1, value});
      }
    }
  }
  return plan;
}

BiasPlan stage1_bias(const KeyTokenReport& report, const SegmentLayout& layout,
                     const CamaConfig& config) {
  return stage1_bias(report, layout, config, config.stage1_zero_based());
}

// ---------------------------------------------------------------------------
// Stage II

std::vector<double> head_flow(const ForwardTrace& trace, const SegmentLayout& layout,
                              std::size_t layer, RhoSource source) {
  const auto& query = layout.query();
  const std::size_t ctx_end = query.image.begin;  // every ICD token precedes the query
  const Span text{query.question.empty() ? query.answer.begin : query.question.begin,
                  query.answer.end};
  const std::size_t H = trace.dims.n_heads;
  std::vector<double> rho(H, 0.0);
  std::vector<double> probs;
  for (std::size_t h = 0; h < H; ++h) {
    double total = 0.0;
    for (std::size_t q = text.begin; q < text.end; ++q) {
      const auto row = trace.logit_row(layer, h, q);
      if (source == RhoSource::raw_logits) {
        for (std::size_t c = 0; c < ctx_end; ++c) total += row[c];
      } else {
        double mx = -INFINITY;
        for (std::size_t c = 0; c <= q; ++c) mx = std::max(mx, static_cast<double>(row[c]));
        probs.assign(q + 1, 0.0);
        double sum = 0.0;
        for (std::size_t c = 0; c <= q; ++c) {
          probs[c] = std::exp(static_cast<double>(row[c]) - mx);
          sum += probs[c];
        }
        for (std::size_t c = 0; c < ctx_end; ++c) total += probs[c] / sum;
      }
    }
    rho[h] = total / static_cast<double>(text.size());
  }
  return rho;
}

IndexSet select_heads(const std::vector<double>& rho, double k2_pct) {
  if (rho.empty()) throw InvalidArgument("select_heads: no heads");
  return top_pct_indices(rho, k2_pct);
}

std::vector<Normalized> joint_representation(const ForwardTrace& trace, std::size_t layer,
                                             const SegmentLayout& layout,
                                             const std::vector<IndexSet>& key_sets) {
  if (key_sets.size() != layout.elements.size()) {
    throw InvalidArgument("joint_representation: one key set per element required");
  }
  if (trace.hidden.empty()) throw InvalidArgument("joint_representation: trace has no hidden states");
  const std::size_t D = trace.dims.model_dim;
  std::vector<Normalized> out;
  for (std::size_t i = 0; i < layout.elements.size(); ++i) {
    const auto& e = layout.elements[i];
    std::vector<double> joint(2 * D, 0.0);
    for (std::size_t r : key_sets[i]) {
      const auto h = trace.hidden_row(layer, r);
      for (std::size_t d = 0; d < D; ++d) joint[d] += h[d];
    }
    for (std::size_t d = 0; d < D; ++d) joint[d] /= static_cast<double>(key_sets[i].size());
    const Span text{e.question.empty() ? e.answer.begin : e.question.begin, e.answer.end};
    for (std::size_t r = text.begin; r < text.end; ++r) {
      const auto h = trace.hidden_row(layer, r);
      for (std::size_t d = 0; d < D; ++d) joint[D + d] += h[d];
    }
    for (std::size_t d = 0; d < D; ++d) joint[D + d] /= static_cast<double>(text.size());
    out.push_back(l2_normalize(joint));
  }
  return out;
}

std::vector<double> query_weights(const std::vector<Normalized>& icds, const Normalized& query) {
  if (icds.empty()) throw InvalidArgument("query_weights: no ICDs");
  std::vector<double> sims;
  for (const auto& p : icds) sims.push_back(cosine(p, query));
  const double mx = *std::max_element(sims.begin(), sims.end());
  std::vector<double> w(sims.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < sims.size(); ++i) {
    w[i] = std::exp(sims[i] - mx);
    sum += w[i];
  }
  for (double& x : w) x /= sum;
  return w;
}

QueryWeightReport compute_query_weights(const ForwardTrace& trace, std::size_t layer,
                                        const SegmentLayout& layout,
                                        const std::vector<IndexSet>& key_sets) {
  QueryWeightReport r;
  auto reps = joint_representation(trace, layer, layout, key_sets);
  r.query_repr = std::move(reps.back());
  reps.pop_back();
  r.icd_repr = std::move(reps);
  for (const auto& p : r.icd_repr) r.similarity.push_back(cosine(p, r.query_repr));
  r.weights = query_weights(r.icd_repr, r.query_repr);
  return r;
}

BiasPlan stage2_layer_bias(std::size_t layer, const IndexSet& heads,
                           const std::vector<double>& weights,
                           const std::vector<IndexSet>& key_sets, const SegmentLayout& layout) {
  const std::size_t n = layout.n_shots;
  if (weights.size() != n || key_sets.size() < n) {
    throw InvalidArgument("stage2_layer_bias: one weight and key set per ICD required");
  }
  BiasPlan plan;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = layout.elements[i];
    const double value = position_factor(i, n, QueryPositionFactor::one) * weights[i];
    std::vector<std::size_t> columns(key_sets[i].begin(), key_sets[i].end());
    const std::size_t text_begin = e.question.empty() ? e.answer.begin : e.question.begin;
    for (std::size_t c = text_begin; c < e.answer.end; ++c) columns.push_back(c);
    const std::size_t row_from = e.answer.end;
    for (std::size_t h : heads) {
      for (std::size_t c : columns) plan.add({layer, static_cast<int>(h), c, row_from, value});
    }
  }
  return plan;
}

BiasPlan stage2_bias(const QueryWeightReport& weights, const HeadSelectionReport& heads,
                     const std::vector<IndexSet>& key_sets, const SegmentLayout& layout) {
  BiasPlan plan;
  for (const auto& sel : heads.layers) {
    plan.merge(stage2_layer_bias(sel.layer, sel.selected, weights.weights, key_sets, layout));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Orchestration

namespace {

// Installs Stage II entries layer by layer; in single-pass mode it also scores
// and installs Stage I from the running trace.
class CamaHook final : public PrefillHook {
 public:
  CamaHook(const CamaConfig& config, const SegmentLayout& layout, bool single_pass,
           KeyTokenReport& keys, HeadSelectionReport& heads, QueryWeightReport& weights)
      : config_(config),
        layout_(layout),
        single_pass_(single_pass),
        stage1_(config.stage1_zero_based()),
        stage2_(config.stage2_zero_based()),
        keys_(keys),
        heads_(heads),
        weights_(weights) {
    if (single_pass_) {
      keys_.elements.clear();
      for (std::size_t i = 0; i < layout_.elements.size(); ++i) {
        ElementKeyTokens e;
        e.element = i;
        keys_.elements.push_back(std::move(e));
      }
    }
  }

  void before_softmax(std::size_t layer, const ForwardTrace& partial, BiasPlan& plan) override {
    if (single_pass_ && std::find(stage1_.begin(), stage1_.end(), layer) != stage1_.end()) {
      for (auto& e : keys_.elements) {
        e.layers.push_back(element_layer_gains(partial, layout_, layer, e.element));
        finalize_scores(e, layout_, config_.k1_pct);
      }
      plan.merge(stage1_bias(keys_, layout_, config_, {layer}));
    }
    if (std::find(stage2_.begin(), stage2_.end(), layer) != stage2_.end()) {
      if (!weights_ready_) {
        weights_ = compute_query_weights(partial, stage1_.back(), layout_, keys_.key_sets());
        weights_ready_ = true;
      }
      LayerHeadSelection sel;
      sel.layer = layer;
      sel.rho = head_flow(partial, layout_, layer, config_.rho_source);
      sel.selected = select_heads(sel.rho, config_.k2_pct);
      plan.merge(stage2_layer_bias(layer, sel.selected, weights_.weights, keys_.key_sets(), layout_));
      heads_.layers.push_back(std::move(sel));
    }
  }

 private:
  const CamaConfig& config_;
  const SegmentLayout& layout_;
  bool single_pass_;
  std::vector<std::size_t> stage1_;
  std::vector<std::size_t> stage2_;
  KeyTokenReport& keys_;
  HeadSelectionReport& heads_;
  QueryWeightReport& weights_;
  bool weights_ready_ = false;
};

}  // namespace

CamaRunResult run_cama(const TokenizedSequence& seq, const ModelParams& params,
                       const CamaConfig& config) {
  config.validate(params.dims);
  if (config.caption_mode != seq.layout.caption_mode) {
    throw InvalidArgument("caption_mode of config and sequence differ");
  }
  CamaRunResult result;
  const bool single_pass = config.prefill_mode == PrefillMode::cumulative_single_pass;
  BiasPlan initial;
  if (!single_pass) {
    result.trace_clean = prefill(seq, params);
    result.key_report = compute_key_tokens(*result.trace_clean, seq.layout,
                                           config.stage1_zero_based(), config.k1_pct);
    initial = stage1_bias(result.key_report, seq.layout, config);
  }
  CamaHook hook(config, seq.layout, single_pass, result.key_report, result.head_report,
                result.weight_report);
  PrefillOptions options;
  options.plan = &initial;
  options.hook = &hook;
  result.trace_modulated = prefill(seq, params, options);
  result.plan = result.trace_modulated.applied_plan;
  return result;
}

}  // namespace camalab
