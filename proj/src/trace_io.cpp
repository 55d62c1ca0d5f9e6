#include <regex>
#include <set>

#include "camalab/binary_io.hpp"
#include "camalab/decoder.hpp"
#include "camalab/error.hpp"

namespace camalab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kTraceFormat = "camalab.trace";
constexpr int kTraceVersion = 1;

std::string blob_name(const char* stem, std::size_t layer0) {
  return std::string(stem) + "_" + std::to_string(layer0 + 1) + ".bin";
}

}  // namespace

void export_trace(const ForwardTrace& trace, const fs::path& dir,
                  const TraceExportOptions& options) {
  const ModelDims& dims = trace.dims;
  const std::size_t S = trace.seq_len;
  const std::size_t per_layer = dims.n_heads * S * S;
  if (trace.logits.size() != dims.n_layers * per_layer) {
    throw InvalidArgument("export_trace: trace has no recorded logits");
  }
  const bool with_weights = options.include_weights && !trace.weights.empty();
  const bool with_hidden = options.include_hidden && !trace.hidden.empty();

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FormatError(FormatErrc::io_failure, "cannot create " + dir.string());

  for (std::size_t l = 0; l < dims.n_layers; ++l) {
    io::write_f32_le(dir / blob_name("layer", l),
                     std::span(trace.logits).subspan(l * per_layer, per_layer));
    if (with_weights) {
      io::write_f32_le(dir / blob_name("weights", l),
                       std::span(trace.weights).subspan(l * per_layer, per_layer));
    }
    if (with_hidden) {
      const std::size_t hs = S * dims.model_dim;
      io::write_f32_le(dir / blob_name("hidden", l), std::span(trace.hidden).subspan(l * hs, hs));
    }
  }

  json plan = json::array();
  for (const auto& e : trace.applied_plan.entries()) {
    plan.push_back({{"layer", e.layer + 1},
                    {"head", e.head == kAllHeads ? json("all") : json(e.head)},
                    {"column", e.column},
                    {"row_from", e.row_from},
                    {"value", e.value}});
  }
  json manifest = {
      {"format", kTraceFormat},
      {"version", kTraceVersion},
      {"dims",
       {{"n_layers", dims.n_layers},
        {"n_heads", dims.n_heads},
        {"model_dim", dims.model_dim},
        {"head_dim", dims.head_dim},
        {"vocab_size", dims.vocab_size}}},
      {"seq_len", S},
      {"prompt_len", trace.prompt_len},
      {"layout", "[H,S,S] float32-le, row-major, pre-bias logits"},
      {"has_weights", with_weights},
      {"has_hidden", with_hidden},
      {"plan_digest", io::hex64(trace.applied_plan.digest())},
      {"plan", std::move(plan)},
  };
  io::write_json(dir / "manifest.json", manifest);
}

ForwardTrace import_trace(const fs::path& dir) {
  const json manifest = io::read_json(dir / "manifest.json");
  ForwardTrace trace;
  bool has_weights = false;
  bool has_hidden = false;
  std::string digest;
  try {
    if (manifest.at("format").get<std::string>() != kTraceFormat ||
        manifest.at("version").get<int>() != kTraceVersion) {
      throw FormatError(FormatErrc::malformed_header, "unsupported trace format tag/version");
    }
    const json& d = manifest.at("dims");
    trace.dims.n_layers = d.at("n_layers").get<std::size_t>();
    trace.dims.n_heads = d.at("n_heads").get<std::size_t>();
    trace.dims.model_dim = d.at("model_dim").get<std::size_t>();
    trace.dims.head_dim = d.at("head_dim").get<std::size_t>();
    trace.dims.vocab_size = d.at("vocab_size").get<std::size_t>();
    trace.dims.validate();
    trace.seq_len = manifest.at("seq_len").get<std::size_t>();
    trace.prompt_len = manifest.at("prompt_len").get<std::size_t>();
    has_weights = manifest.at("has_weights").get<bool>();
    has_hidden = manifest.at("has_hidden").get<bool>();
    digest = manifest.at("plan_digest").get<std::string>();
    for (const auto& e : manifest.at("plan")) {
      BiasEntry entry;
      entry.layer = e.at("layer").get<std::size_t>() - 1;
      entry.head = e.at("head").is_string() ? kAllHeads : e.at("head").get<int>();
      entry.column = e.at("column").get<std::size_t>();
      entry.row_from = e.at("row_from").get<std::size_t>();
      entry.value = e.at("value").get<double>();
      trace.applied_plan.add(entry);
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatErrc::malformed_header, e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(FormatErrc::malformed_header, e.what());
  }
  if (io::hex64(trace.applied_plan.digest()) != digest) {
    throw FormatError(FormatErrc::inconsistent_manifest, "plan digest does not match plan entries");
  }

  // The manifest's layer count must match the logits blobs on disk exactly.
  const std::regex layer_blob(R"(layer_(\d+)\.bin)");
  std::set<std::size_t> present;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, layer_blob)) present.insert(std::stoul(m[1].str()));
  }
  const std::size_t N = trace.dims.n_layers;
  if (present.size() != N || (N > 0 && (*present.begin() != 1 || *present.rbegin() != N))) {
    throw FormatError(FormatErrc::inconsistent_manifest,
                      "manifest declares " + std::to_string(N) + " layers, found " +
                          std::to_string(present.size()) + " layer blobs");
  }

  const std::size_t S = trace.seq_len;
  const std::size_t per_layer = trace.dims.n_heads * S * S;
  const std::size_t hs = S * trace.dims.model_dim;
  trace.logits.reserve(N * per_layer);
  if (has_weights) trace.weights.reserve(N * per_layer);
  if (has_hidden) trace.hidden.reserve(N * hs);
  for (std::size_t l = 0; l < N; ++l) {
    auto logits = io::read_f32_le(dir / blob_name("layer", l), per_layer);
    trace.logits.insert(trace.logits.end(), logits.begin(), logits.end());
    if (has_weights) {
      auto w = io::read_f32_le(dir / blob_name("weights", l), per_layer);
      trace.weights.insert(trace.weights.end(), w.begin(), w.end());
    }
    if (has_hidden) {
      auto h = io::read_f32_le(dir / blob_name("hidden", l), hs);
      trace.hidden.insert(trace.hidden.end(), h.begin(), h.end());
    }
  }
  return trace;
}

}  // namespace camalab
