#pragma once

// JSON views of run results. Layers are written 1-based, token indices as
// absolute 0-based positions, heads 0-based.

#include "json.hpp"

#include "camalab/baselines.hpp"
#include "camalab/cama.hpp"
#include "camalab/diagnostics.hpp"

namespace camalab {

nlohmann::json cama_config_to_json(const CamaConfig& config);
/// Every key is required; unknown keys are rejected.
CamaConfig cama_config_from_json(const nlohmann::json& j);

nlohmann::json plan_to_json(const BiasPlan& plan);
nlohmann::json layout_to_json(const SegmentLayout& layout);

nlohmann::json cama_report(const CamaRunResult& result, const SegmentLayout& layout,
                           const CamaConfig& config);
nlohmann::json cd_report(const CdResult& result, const CdConfig& config);
nlohmann::json sofa_report(const ForwardTrace& trace, const SofaConfig& config);
nlohmann::json diagnostics_to_json(const DiagnosticsReport& report);

}  // namespace camalab
