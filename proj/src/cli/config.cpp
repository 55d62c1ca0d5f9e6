#include <set>

#include "camalab/binary_io.hpp"
#include "camalab/cli.hpp"
#include "camalab/error.hpp"
#include "camalab/report.hpp"

namespace camalab::cli {

using nlohmann::json;

namespace {

// Every key of `section` must be known and every known key present.
void check_keys(const json& j, const char* section, const std::set<std::string>& keys) {
  if (!j.is_object()) throw UsageError(std::string("config section '") + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!keys.count(key)) throw UsageError(std::string("config: unknown key '") + section + "." + key + "'");
  }
  for (const auto& key : keys) {
    if (!j.contains(key)) throw UsageError(std::string("config: missing key '") + section + "." + key + "'");
  }
}

template <typename T>
T get(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError(std::string("config: bad value for '") + key + "'");
  }
}

json dims_json(const ModelDims& d) {
  return json{{"n_layers", d.n_layers}, {"n_heads", d.n_heads}, {"model_dim", d.model_dim},
              {"head_dim", d.head_dim}, {"vocab_size", d.vocab_size}};
}

const std::set<std::string> kDimKeys{"n_layers", "n_heads", "model_dim", "head_dim", "vocab_size"};

ModelDims dims_from(const json& j) {
  ModelDims d;
  d.n_layers = get<std::size_t>(j, "n_layers");
  d.n_heads = get<std::size_t>(j, "n_heads");
  d.model_dim = get<std::size_t>(j, "model_dim");
  d.head_dim = get<std::size_t>(j, "head_dim");
  d.vocab_size = get<std::size_t>(j, "vocab_size");
  return d;
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    task.validate();
    cama.validate(model);
    cd.validate();
    sofa.validate();
    gradcheck.dims.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  if (task.embed_dim != model.model_dim) {
    throw UsageError("task.embed_dim (" + std::to_string(task.embed_dim) +
                     ") must equal model.model_dim (" + std::to_string(model.model_dim) + ")");
  }
  if (task.caption_mode != cama.caption_mode) {
    throw UsageError("task.caption_mode and cama.caption_mode differ");
  }
  if (decode_steps == 0) throw UsageError("decode_steps must be >= 1");
  if (gradcheck.samples < 100) throw UsageError("gradcheck.samples must be >= 100");
  if (!(gradcheck.threshold > 0.0) || !(gradcheck.step > 0.0)) {
    throw UsageError("gradcheck threshold and step must be positive");
  }
  if (gradcheck.n_shots == 0 || gradcheck.image_tokens == 0) {
    throw UsageError("gradcheck n_shots and image_tokens must be >= 1");
  }
  if (bench.runs < 20) throw UsageError("bench.runs must be >= 20");
}

json run_config_to_json(const RunConfig& c) {
  json model = dims_json(c.model);
  model["seed"] = c.model_seed;
  json gc = dims_json(c.gradcheck.dims);
  gc["image_tokens"] = c.gradcheck.image_tokens;
  gc["n_shots"] = c.gradcheck.n_shots;
  gc["samples"] = c.gradcheck.samples;
  gc["threshold"] = c.gradcheck.threshold;
  gc["step"] = c.gradcheck.step;
  const auto& t = c.task;
  return json{
      {"seed", c.seed},
      {"decode_steps", c.decode_steps},
      {"model", model},
      {"task", json{{"n_shots", t.n_shots},
                    {"image_tokens_per_icd", t.image_tokens_per_icd},
                    {"question_len", t.question_len},
                    {"answer_len", t.answer_len},
                    {"object_vocab_size", t.object_vocab_size},
                    {"embed_dim", t.embed_dim},
                    {"noise_scale", t.noise_scale},
                    {"caption_mode", t.caption_mode}}},
      {"cama", cama_config_to_json(c.cama)},
      {"cd", json{{"alpha", c.cd.alpha}, {"distortion", "blank_images"}}},
      {"sofa", json{{"sigma", c.sofa.sigma}, {"layer_stride", c.sofa.layer_stride}}},
      {"gradcheck", gc},
      {"bench", json{{"runs", c.bench.runs}}}};
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  static const std::set<std::string> top{"seed", "decode_steps", "model", "task", "cama",
                                         "cd", "sofa", "gradcheck", "bench"};
  for (const auto& [key, _] : j.items()) {
    if (!top.count(key)) throw UsageError("config: unknown key '" + key + "'");
  }
  RunConfig c;
  if (j.contains("seed")) c.seed = get<std::uint64_t>(j, "seed");
  if (j.contains("decode_steps")) c.decode_steps = get<std::size_t>(j, "decode_steps");
  if (j.contains("model")) {
    const json& m = j.at("model");
    auto keys = kDimKeys;
    keys.insert("seed");
    check_keys(m, "model", keys);
    c.model = dims_from(m);
    c.model_seed = get<std::uint64_t>(m, "seed");
  }
  if (j.contains("task")) {
    const json& t = j.at("task");
    check_keys(t, "task", {"n_shots", "image_tokens_per_icd", "question_len", "answer_len",
                           "object_vocab_size", "embed_dim", "noise_scale", "caption_mode"});
    c.task.n_shots = get<std::size_t>(t, "n_shots");
    c.task.image_tokens_per_icd = get<std::size_t>(t, "image_tokens_per_icd");
    c.task.question_len = get<std::size_t>(t, "question_len");
    c.task.answer_len = get<std::size_t>(t, "answer_len");
    c.task.object_vocab_size = get<std::size_t>(t, "object_vocab_size");
    c.task.embed_dim = get<std::size_t>(t, "embed_dim");
    c.task.noise_scale = get<double>(t, "noise_scale");
    c.task.caption_mode = get<bool>(t, "caption_mode");
  }
  if (j.contains("cama")) {
    try {
      c.cama = cama_config_from_json(j.at("cama"));
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }
  }
  if (j.contains("cd")) {
    const json& d = j.at("cd");
    check_keys(d, "cd", {"alpha", "distortion"});
    c.cd.alpha = get<double>(d, "alpha");
    if (get<std::string>(d, "distortion") != "blank_images") {
      throw UsageError("cd.distortion must be \"blank_images\"");
    }
  }
  if (j.contains("sofa")) {
    const json& s = j.at("sofa");
    check_keys(s, "sofa", {"sigma", "layer_stride"});
    c.sofa.sigma = get<double>(s, "sigma");
    c.sofa.layer_stride = get<std::size_t>(s, "layer_stride");
  }
  if (j.contains("gradcheck")) {
    const json& g = j.at("gradcheck");
    auto keys = kDimKeys;
    keys.insert({"image_tokens", "n_shots", "samples", "threshold", "step"});
    check_keys(g, "gradcheck", keys);
    c.gradcheck.dims = dims_from(g);
    c.gradcheck.image_tokens = get<std::size_t>(g, "image_tokens");
    c.gradcheck.n_shots = get<std::size_t>(g, "n_shots");
    c.gradcheck.samples = get<std::size_t>(g, "samples");
    c.gradcheck.threshold = get<double>(g, "threshold");
    c.gradcheck.step = get<double>(g, "step");
  }
  if (j.contains("bench")) {
    const json& b = j.at("bench");
    check_keys(b, "bench", {"runs"});
    c.bench.runs = get<std::size_t>(b, "runs");
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = io::read_json(path);
  } catch (const FormatError& e) {
    throw UsageError(std::string("cannot load config: ") + e.what());
  }
  return run_config_from_json(j);
}

Mode parse_mode(const std::string& s) {
  if (s == "vanilla") return Mode::vanilla;
  if (s == "cama") return Mode::cama;
  if (s == "cd") return Mode::cd;
  if (s == "sofa") return Mode::sofa;
  throw UsageError("unknown mode '" + s + "' (expected vanilla|cama|cd|sofa)");
}

const char* to_string(Mode m) {
  switch (m) {
    case Mode::cama: return "cama";
    case Mode::cd: return "cd";
    case Mode::sofa: return "sofa";
    case Mode::vanilla: return "vanilla";
  }
  return "?";
}

Which parse_which(const std::string& s) {
  if (s == "align") return Which::align;
  if (s == "contrib") return Which::contrib;
  if (s == "both") return Which::both;
  throw UsageError("unknown diagnostic '" + s + "' (expected align|contrib|both)");
}

}  // namespace camalab::cli
