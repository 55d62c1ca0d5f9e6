#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <thread>

#include "camalab/binary_io.hpp"
#include "camalab/cli.hpp"
#include "camalab/diagnostics.hpp"
#include "camalab/report.hpp"

namespace camalab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first failure in
// index order is rethrown after every worker has stopped.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, n));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string seq_dir_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%04zu", index);
  return buf;
}

TokenizedSequence load_input(const fs::path& dir, const RunConfig& config) {
  TokenizedSequence seq = read_sequence(dir);
  if (seq.embed_dim != config.model.model_dim) {
    throw DataError(dir.string() + ": embed_dim " + std::to_string(seq.embed_dim) +
                    " does not match model_dim " + std::to_string(config.model.model_dim));
  }
  if (seq.layout.caption_mode != config.cama.caption_mode) {
    throw UsageError(dir.string() + ": sequence caption_mode differs from cama.caption_mode");
  }
  return seq;
}

std::vector<std::string> input_names(const std::vector<fs::path>& dirs) {
  std::vector<std::string> names;
  std::set<std::string> seen;
  for (const auto& d : dirs) {
    std::string name = d.filename().string();
    if (name.empty()) name = d.parent_path().filename().string();
    if (!seen.insert(name).second) throw UsageError("two inputs share the name '" + name + "'");
    names.push_back(name);
  }
  return names;
}

std::vector<double> row_vector(const ForwardTrace& t, std::size_t row) {
  const auto r = t.vocab_row(row);
  return {r.begin(), r.end()};
}

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<fs::path> expand_inputs(const std::vector<fs::path>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    if (!fs::exists(in)) throw DataError("input not found: " + in.string());
    if (fs::exists(in / "manifest.json")) {
      out.push_back(in);
      continue;
    }
    std::vector<fs::path> children;
    for (const auto& entry : fs::directory_iterator(in)) {
      if (entry.is_directory() && entry.path().filename().string().rfind("seq_", 0) == 0) {
        children.push_back(entry.path());
      }
    }
    if (children.empty()) throw DataError("no sequences under " + in.string());
    std::sort(children.begin(), children.end());
    out.insert(out.end(), children.begin(), children.end());
  }
  return out;
}

int cmd_gen(const RunConfig& config, std::size_t count, const fs::path& out, std::ostream& log) {
  config.validate();
  if (count == 0) {
    log << "warning: count is 0, nothing generated\n";
    return kOk;
  }
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw FormatError(FormatErrc::io_failure, "cannot create " + out.string() + ": " + ec.message());
  json entries = json::array();
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticTaskSpec spec = config.task;
    spec.seed = config.seed + i;
    const TokenizedSequence seq = generate_synthetic(spec);
    const std::string name = seq_dir_name(i);
    write_sequence(seq, out / name);
    const auto key = seq.ground_truth ? seq.ground_truth->key_icd_index : std::nullopt;
    entries.push_back(json{{"name", name},
                           {"seed", spec.seed},
                           {"seq_len", seq.rows()},
                           {"key_icd_index", key ? json(*key) : json(nullptr)}});
    log << name << " seed=" << spec.seed << " S=" << seq.rows()
        << " key_icd=" << (key ? std::to_string(*key) : "-") << '\n';
  }
  io::write_json(out / "corpus.json", json{{"count", count}, {"task", run_config_to_json(config)["task"]},
                                           {"sequences", entries}});
  log << "generated " << count << " sequences in " << out.string() << '\n';
  return kOk;
}

int cmd_run(const RunConfig& config, const std::vector<fs::path>& inputs, const fs::path& out,
            const RunOptions& options, std::ostream& log) {
  config.validate();
  const auto dirs = expand_inputs(inputs);
  const auto names = input_names(dirs);
  const ModelParams params = init_params(config.model, config.model_seed);
  std::vector<json> summaries(dirs.size());

  parallel_for(dirs.size(), options.jobs, [&](std::size_t i) {
    const TokenizedSequence seq = load_input(dirs[i], config);
    const fs::path dst = out / names[i];
    std::error_code ec;
    fs::create_directories(dst, ec);
    if (ec) throw FormatError(FormatErrc::io_failure, "cannot create " + dst.string());
    json report;
    switch (options.mode) {
      case Mode::vanilla: {
        const ForwardTrace trace = prefill(seq, params);
        const GreedyResult decoded = decode_greedy(seq, params, nullptr, config.decode_steps);
        report = json{{"mode", "vanilla"},
                      {"layout", layout_to_json(seq.layout)},
                      {"next_token_logits", row_vector(trace, seq.rows() - 1)},
                      {"decoded_tokens", decoded.tokens}};
        if (options.emit_traces) export_trace(trace, dst / "trace");
        break;
      }
      case Mode::cama: {
        const CamaRunResult result = run_cama(seq, params, config.cama);
        const GreedyResult decoded = decode_greedy(seq, params, &result.plan, config.decode_steps);
        report = cama_report(result, seq.layout, config.cama);
        report["decoded_tokens"] = decoded.tokens;
        if (options.emit_traces) {
          if (result.trace_clean) export_trace(*result.trace_clean, dst / "trace_clean");
          export_trace(result.trace_modulated, dst / "trace_modulated");
        }
        break;
      }
      case Mode::cd: {
        const CdResult result = run_cd(seq, params, config.cd);
        report = cd_report(result, config.cd);
        if (options.emit_traces) export_trace(result.trace, dst / "trace");
        break;
      }
      case Mode::sofa: {
        const ForwardTrace trace = sofa_forward(seq, params, config.sofa);
        report = sofa_report(trace, config.sofa);
        if (options.emit_traces) export_trace(trace, dst / "trace");
        break;
      }
    }
    report["input"] = names[i];
    io::write_json(dst / "report.json", report);
    summaries[i] = json{{"name", names[i]}, {"report", names[i] + "/report.json"}};
  });

  io::write_json(out / "index.json", json{{"mode", to_string(options.mode)},
                                          {"config", run_config_to_json(config)},
                                          {"runs", summaries}});
  log << to_string(options.mode) << ": " << dirs.size() << " sequence(s) -> " << out.string() << '\n';
  return kOk;
}

namespace {

struct SequenceDiagnostics {
  DiagnosticsReport clean;
  DiagnosticsReport modulated;
};

void fill_contribution(DiagnosticsReport& clean, DiagnosticsReport& modulated,
                       const TokenizedSequence& seq, const ModelParams& params,
                       const RunConfig& config) {
  const std::size_t n = seq.layout.n_shots;
  const std::size_t N = params.dims.n_layers;
  clean.s_contrib.assign(N, std::vector<double>(n, 0.0));
  modulated.s_contrib.assign(N, std::vector<double>(n, 0.0));
  for (std::size_t p = 1; p <= n; ++p) {
    const TokenizedSequence variant = perturb_key_position(seq, p, io::mix_seed(config.seed, p));
    const LossSpec loss = answer_loss(variant);
    const std::vector<int>& cont = variant.ground_truth->answer_token_ids;
    const CamaRunResult cama = run_cama(variant, params, config.cama);
    for (int pass = 0; pass < 2; ++pass) {
      const BiasPlan* plan = pass == 0 ? nullptr : &cama.plan;
      PrefillOptions options;
      options.plan = plan;
      const ForwardTrace trace = prefill(variant, params, options, cont);
      const Saliency sal = saliency_matrix(trace, attention_grads(variant, params, plan, loss, cont));
      auto& table = pass == 0 ? clean.s_contrib : modulated.s_contrib;
      for (std::size_t l = 0; l < N; ++l) {
        table[l][p - 1] = contribution_score(sal, variant.layout, l, loss.target_positions, p);
      }
    }
  }
}

}  // namespace

int cmd_diagnose(const RunConfig& config, const std::vector<fs::path>& inputs, const fs::path& out,
                 Which which, std::size_t jobs, std::ostream& log) {
  config.validate();
  const auto dirs = expand_inputs(inputs);
  const auto names = input_names(dirs);
  const ModelParams params = init_params(config.model, config.model_seed);
  const bool align = which != Which::contrib;
  const bool contrib = which != Which::align;
  std::vector<SequenceDiagnostics> results(dirs.size());

  parallel_for(dirs.size(), jobs, [&](std::size_t i) {
    const TokenizedSequence seq = load_input(dirs[i], config);
    if (!seq.ground_truth) throw DataError(names[i] + ": sequence has no ground truth");
    SequenceDiagnostics& r = results[i];
    if (align) {
      const CamaRunResult cama = run_cama(seq, params, config.cama);
      fill_alignment(r.clean, decode_greedy(seq, params, nullptr, config.decode_steps).trace,
                     seq.layout, *seq.ground_truth);
      fill_alignment(r.modulated, decode_greedy(seq, params, &cama.plan, config.decode_steps).trace,
                     seq.layout, *seq.ground_truth);
    }
    if (contrib) {
      if (!seq.ground_truth->key_icd_index) throw DataError(names[i] + ": no key ICD designated");
      if (!seq.origin) throw DataError(names[i] + ": contribution needs a generated sequence");
      fill_contribution(r.clean, r.modulated, seq, params, config);
    }
    for (auto* rep : {&r.clean, &r.modulated}) {
      rep->layers.clear();
      for (std::size_t l = 0; l < params.dims.n_layers; ++l) rep->layers.push_back(l);
    }
  });

  json sequences = json::array();
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    sequences.push_back(json{{"name", names[i]},
                             {"clean", diagnostics_to_json(results[i].clean)},
                             {"modulated", diagnostics_to_json(results[i].modulated)}});
  }
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw FormatError(FormatErrc::io_failure, "cannot create " + out.string());
  io::write_json(out / "diagnostics.json",
                 json{{"which", which == Which::align ? "align" : which == Which::contrib ? "contrib" : "both"},
                      {"sequences", sequences}});

  // Means over inputs, one row per (metric, layer, index).
  std::ofstream csv(out / "diagnostics.csv", std::ios::binary);
  if (!csv) throw FormatError(FormatErrc::io_failure, "cannot write diagnostics.csv");
  csv << "metric,layer,index,clean,modulated\n";
  const double count = static_cast<double>(dirs.size());
  auto emit = [&](const char* metric, auto table_of) {
    if (dirs.empty()) return;
    const auto& first = table_of(results[0].clean);
    for (std::size_t l = 0; l < first.size(); ++l) {
      for (std::size_t k = 0; k < first[l].size(); ++k) {
        double c = 0.0, m = 0.0;
        for (const auto& r : results) {
          c += table_of(r.clean)[l][k];
          m += table_of(r.modulated)[l][k];
        }
        csv << metric << ',' << l + 1 << ',' << k + 1 << ',' << format_number(c / count) << ','
            << format_number(m / count) << '\n';
      }
    }
  };
  if (align) emit("s_align", [](const DiagnosticsReport& r) -> const auto& { return r.s_align; });
  if (contrib) emit("s_contrib", [](const DiagnosticsReport& r) -> const auto& { return r.s_contrib; });
  log << "diagnostics for " << dirs.size() << " sequence(s) -> " << out.string() << '\n';
  return kOk;
}

GradcheckResult gradcheck(const RunConfig& config) {
  config.validate();
  const GradcheckConfig& gc = config.gradcheck;
  const ModelParams params = init_params(gc.dims, config.model_seed);
  SyntheticTaskSpec spec = config.task;
  spec.n_shots = gc.n_shots;
  spec.image_tokens_per_icd = gc.image_tokens;
  spec.embed_dim = gc.dims.model_dim;
  spec.seed = config.seed;
  const TokenizedSequence seq = generate_synthetic(spec);
  const LossSpec loss = answer_loss(seq);
  const std::vector<int>& cont = seq.ground_truth->answer_token_ids;
  const std::size_t S = seq.rows() + cont.size();
  if (S > 96) throw UsageError("gradcheck sequence length " + std::to_string(S) + " exceeds 96");

  const AttentionGrads grads = attention_grads(seq, params, nullptr, loss, cont);
  const std::size_t last_row = *std::max_element(loss.target_positions.begin(), loss.target_positions.end());
  std::mt19937_64 rng(io::mix_seed(config.seed, 0x67726164ULL));
  auto uniform = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

  struct Worst {
    double rel = -1.0;
    json entry;
  };
  std::vector<Worst> worst(gc.dims.n_layers);
  GradcheckResult result;
  result.seq_len = S;
  for (std::size_t k = 0; k < gc.samples; ++k) {
    AttentionPerturbation pert;
    pert.layer = uniform(gc.dims.n_layers);
    pert.head = uniform(gc.dims.n_heads);
    pert.row = uniform(last_row + 1);
    pert.column = uniform(pert.row + 1);
    pert.delta = gc.step;
    const double up = loss_with_perturbation(seq, params, nullptr, loss, cont, pert);
    pert.delta = -gc.step;
    const double down = loss_with_perturbation(seq, params, nullptr, loss, cont, pert);
    const double numeric = (up - down) / (2.0 * gc.step);
    const double analytic = grads.grad(pert.layer, pert.head, pert.row, pert.column);
    const double rel = std::abs(analytic - numeric) /
                       std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
    if (!std::isfinite(rel)) throw NumericError("non-finite gradient comparison");
    result.max_rel_error = std::max(result.max_rel_error, rel);
    ++result.samples;
    Worst& w = worst[pert.layer];
    if (rel > w.rel) {
      w.rel = rel;
      w.entry = json{{"head", pert.head}, {"row", pert.row}, {"column", pert.column},
                     {"analytic", analytic}, {"numeric", numeric}, {"rel_error", rel}};
    }
  }
  json per_layer = json::array();
  for (std::size_t l = 0; l < worst.size(); ++l) {
    per_layer.push_back(json{{"layer", l + 1}, {"worst", worst[l].rel < 0 ? json(nullptr) : worst[l].entry}});
  }
  result.report = json{{"samples", result.samples},
                       {"seq_len", S},
                       {"step", gc.step},
                       {"threshold", gc.threshold},
                       {"denominator_floor", kGradcheckFloor},
                       {"max_rel_error", result.max_rel_error},
                       {"pass", result.max_rel_error <= gc.threshold},
                       {"per_layer", per_layer}};
  return result;
}

int cmd_gradcheck(const RunConfig& config, const std::optional<fs::path>& out, std::ostream& log) {
  const GradcheckResult r = gradcheck(config);
  for (const auto& l : r.report["per_layer"]) {
    log << "layer " << l["layer"].get<std::size_t>() << " worst rel error "
        << (l["worst"].is_null() ? std::string("-") : format_number(l["worst"]["rel_error"].get<double>()))
        << '\n';
  }
  const bool pass = r.max_rel_error <= config.gradcheck.threshold;
  log << "samples=" << r.samples << " S=" << r.seq_len << " max_rel_error=" << format_number(r.max_rel_error)
      << " threshold=" << format_number(config.gradcheck.threshold) << (pass ? " PASS" : " FAIL") << '\n';
  if (out) {
    std::error_code ec;
    fs::create_directories(*out, ec);
    io::write_json(*out / "gradcheck.json", r.report);
  }
  return pass ? kOk : kNumeric;
}

std::vector<BenchRow> bench(const RunConfig& config) {
  config.validate();
  const ModelParams params = init_params(config.model, config.model_seed);
  SyntheticTaskSpec spec = config.task;
  spec.seed = config.seed;
  const TokenizedSequence seq = generate_synthetic(spec);
  CamaConfig two = config.cama;
  two.prefill_mode = PrefillMode::two_pass;
  CamaConfig single = config.cama;
  single.prefill_mode = PrefillMode::cumulative_single_pass;

  const std::map<std::string, std::function<void()>> modes{
      {"cama_single_pass", [&] { run_cama(seq, params, single); }},
      {"cama_two_pass", [&] { run_cama(seq, params, two); }},
      {"cd", [&] { run_cd(seq, params, config.cd); }},
      {"sofa", [&] { sofa_forward(seq, params, config.sofa); }},
      {"vanilla", [&] { prefill(seq, params); }},
  };
  // Modes are timed round-robin so that drift in machine speed hits every
  // mode alike.
  std::map<std::string, std::vector<double>> times;
  std::map<std::string, std::uint64_t> passes;
  for (const auto& [name, fn] : modes) fn();  // warm-up
  for (std::size_t r = 0; r < config.bench.runs; ++r) {
    for (const auto& [name, fn] : modes) {
      const std::uint64_t before = forward_pass_count();
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      times[name].push_back(
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
      passes[name] += forward_pass_count() - before;
    }
  }
  std::vector<BenchRow> rows;
  for (const auto& [name, fn] : modes) {
    BenchRow row;
    row.mode = name;
    row.median_ms = median(times[name]);
    row.prefills_per_run = passes[name] / config.bench.runs;
    rows.push_back(row);
  }
  const double vanilla =
      std::find_if(rows.begin(), rows.end(), [](const BenchRow& r) { return r.mode == "vanilla"; })->median_ms;
  for (auto& r : rows) r.ratio_to_vanilla = r.median_ms / vanilla;
  return rows;
}

int cmd_bench(const RunConfig& config, const std::optional<fs::path>& out, std::ostream& log) {
  const auto rows = bench(config);
  json table = json::array();
  char line[128];
  std::snprintf(line, sizeof line, "%-18s %12s %10s %9s\n", "mode", "median_ms", "ratio", "prefills");
  log << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-18s %12.3f %10.3f %9llu\n", r.mode.c_str(), r.median_ms,
                  r.ratio_to_vanilla, static_cast<unsigned long long>(r.prefills_per_run));
    log << line;
    table.push_back(json{{"mode", r.mode}, {"median_ms", r.median_ms},
                         {"ratio_to_vanilla", r.ratio_to_vanilla}, {"prefills_per_run", r.prefills_per_run}});
  }
  if (out) {
    std::error_code ec;
    fs::create_directories(*out, ec);
    io::write_json(*out / "bench.json", json{{"runs", config.bench.runs}, {"modes", table}});
  }
  return kOk;
}

int guarded(std::ostream& err, const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  }
}

}  // namespace camalab::cli
