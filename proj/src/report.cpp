#include "camalab/report.hpp"

#include <set>

#include "camalab/binary_io.hpp"
#include "camalab/error.hpp"

namespace camalab {

using nlohmann::json;

namespace {

json one_based(const std::vector<std::size_t>& layers0) {
  json out = json::array();
  for (std::size_t l : layers0) out.push_back(l + 1);
  return out;
}

json index_set(const IndexSet& s) { return json(s.indices()); }

json span_json(const Span& s) { return json::array({s.begin, s.end}); }

json prob_json(const ProbVector& p) {
  return json{{"support", p.support}, {"values", p.values}};
}

template <typename T>
T require(const json& j, const char* key) {
  if (!j.contains(key)) throw InvalidArgument(std::string("cama config: missing key '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw InvalidArgument(std::string("cama config: bad value for '") + key + "'");
  }
}

}  // namespace

json cama_config_to_json(const CamaConfig& c) {
  return json{{"stage1_layers", c.stage1_layers},
              {"stage2_layers", c.stage2_layers},
              {"k1_pct", c.k1_pct},
              {"k2_pct", c.k2_pct},
              {"epsilon", c.epsilon},
              {"rho_source", to_string(c.rho_source)},
              {"query_position_factor", to_string(c.query_position_factor)},
              {"prefill_mode", to_string(c.prefill_mode)},
              {"caption_mode", c.caption_mode}};
}

CamaConfig cama_config_from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("cama config must be an object");
  static const std::set<std::string> known{"stage1_layers", "stage2_layers", "k1_pct",
                                           "k2_pct", "epsilon", "rho_source",
                                           "query_position_factor", "prefill_mode",
                                           "caption_mode"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw InvalidArgument("cama config: unknown key '" + key + "'");
  }
  CamaConfig c;
  c.stage1_layers = require<std::vector<std::size_t>>(j, "stage1_layers");
  c.stage2_layers = require<std::vector<std::size_t>>(j, "stage2_layers");
  c.k1_pct = require<double>(j, "k1_pct");
  c.k2_pct = require<double>(j, "k2_pct");
  c.epsilon = require<double>(j, "epsilon");
  c.rho_source = parse_rho_source(require<std::string>(j, "rho_source"));
  c.query_position_factor =
      parse_query_position_factor(require<std::string>(j, "query_position_factor"));
  c.prefill_mode = parse_prefill_mode(require<std::string>(j, "prefill_mode"));
  c.caption_mode = require<bool>(j, "caption_mode");
  return c;
}

json plan_to_json(const BiasPlan& plan) {
  json entries = json::array();
  for (const auto& e : plan.entries()) {
    entries.push_back(json{{"layer", e.layer + 1},
                           {"head", e.head == kAllHeads ? json("all") : json(e.head)},
                           {"column", e.column},
                           {"row_from", e.row_from},
                           {"value", e.value}});
  }
  return entries;
}

json layout_to_json(const SegmentLayout& layout) {
  json elements = json::array();
  for (const auto& e : layout.elements) {
    elements.push_back(json{{"image", span_json(e.image)},
                            {"question", span_json(e.question)},
                            {"answer", span_json(e.answer)}});
  }
  return json{{"n_shots", layout.n_shots},
              {"total_len", layout.total_len},
              {"caption_mode", layout.caption_mode},
              {"elements", elements}};
}

json cama_report(const CamaRunResult& result, const SegmentLayout& layout,
                 const CamaConfig& config) {
  json elements = json::array();
  for (const auto& e : result.key_report.elements) {
    json layers = json::array();
    for (const auto& lg : e.layers) {
      json g{{"layer", lg.layer + 1},
             {"P_answer_first", prob_json(lg.answer_first)},
             {"P_answer_last", prob_json(lg.answer_last)},
             {"c1", lg.gains.c1}};
      g["P_question_first"] = lg.question_first ? prob_json(*lg.question_first) : json(nullptr);
      g["c2"] = lg.gains.c2 ? json(*lg.gains.c2) : json(nullptr);
      layers.push_back(std::move(g));
    }
    elements.push_back(json{{"element", e.element + 1},
                            {"is_query", e.element == layout.query_index()},
                            {"scores", e.scores},
                            {"key_tokens", index_set(e.key_set)},
                            {"key_count", e.key_set.size()},
                            {"max_score", e.max_score},
                            {"layers", layers}});
  }
  json heads = json::array();
  for (const auto& sel : result.head_report.layers) {
    heads.push_back(json{{"layer", sel.layer + 1}, {"rho", sel.rho}, {"selected", index_set(sel.selected)}});
  }
  const auto& w = result.weight_report;
  json icd_repr = json::array();
  for (const auto& p : w.icd_repr) icd_repr.push_back(json{{"values", p.values}, {"degenerate", p.degenerate}});
  json weights{{"icd_repr", icd_repr},
               {"query_repr", json{{"values", w.query_repr.values}, {"degenerate", w.query_repr.degenerate}}},
               {"similarity", w.similarity},
               {"weights", w.weights}};
  const auto& t = result.trace_modulated;
  json next = json::array();
  if (t.prompt_len > 0) {
    const auto row = t.vocab_row(t.prompt_len - 1);
    next = json(std::vector<double>(row.begin(), row.end()));
  }
  return json{{"mode", "cama"},
              {"config", cama_config_to_json(config)},
              {"layout", layout_to_json(layout)},
              {"representation_layer", config.stage1_layers.back()},
              {"elements", elements},
              {"head_selection", heads},
              {"query_weights", weights},
              {"plan_digest", io::hex64(result.plan.digest())},
              {"plan", plan_to_json(result.plan)},
              {"next_token_logits", next}};
}

json cd_report(const CdResult& r, const CdConfig& config) {
  return json{{"mode", "cd"},
              {"alpha", config.alpha},
              {"distortion", "blank_images"},
              {"logits_original", r.original},
              {"logits_distorted", r.distorted},
              {"logits_calibrated", r.contrasted},
              {"next_token", r.next_token}};
}

json sofa_report(const ForwardTrace& trace, const SofaConfig& config) {
  json scheduled = json::array();
  for (std::size_t l = 1; l <= trace.dims.n_layers; ++l) {
    if (l % config.layer_stride == 0) scheduled.push_back(l);
  }
  const auto row = trace.vocab_row(trace.prompt_len - 1);
  return json{{"mode", "sofa"},
              {"sigma", config.sigma},
              {"layer_stride", config.layer_stride},
              {"scheduled_layers", scheduled},
              {"next_token_logits", std::vector<double>(row.begin(), row.end())}};
}

json diagnostics_to_json(const DiagnosticsReport& r) {
  return json{{"layers", one_based(r.layers)}, {"s_align", r.s_align}, {"s_contrib", r.s_contrib}};
}

}  // namespace camalab
