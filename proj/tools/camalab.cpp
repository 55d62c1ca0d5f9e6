// camalab: generate synthetic ICL corpora, run vanilla / CAMA / CD / SoFA
// passes on the toy decoder, and compute diagnostics.

#include <iostream>

#include "CLI11.hpp"
#include "camalab/cli.hpp"

using namespace camalab;
using namespace camalab::cli;

int main(int argc, char** argv) {
  CLI::App app{"camalab: context-aware modulated attention on a toy decoder"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = 1;
  bool emit_traces = false;
  std::string mode = "cama";
  std::optional<double> alpha;
  std::optional<double> sigma;
  std::size_t count = 0;
  std::vector<std::string> inputs;
  std::string which = "both";
  std::optional<double> threshold;
  std::optional<std::size_t> samples;
  std::optional<std::size_t> runs;

  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "base seed (overrides config)");

  auto* gen = app.add_subcommand("gen", "write synthetic sequences");
  gen->add_option("--count", count, "number of sequences")->required();
  gen->add_option("--out", out, "output directory")->required();

  auto* run = app.add_subcommand("run", "run a decoding mode over sequences");
  run->add_option("--mode", mode, "vanilla|cama|cd|sofa");
  run->add_option("--out", out, "output directory")->required();
  run->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  run->add_flag("--emit-traces", emit_traces, "export attention traces");
  run->add_option("--alpha", alpha, "contrastive decoding alpha");
  run->add_option("--sigma", sigma, "SoFA sigma");
  run->add_option("inputs", inputs, "sequence or corpus directories")->required();

  auto* diagnose = app.add_subcommand("diagnose", "alignment and contribution diagnostics");
  diagnose->add_option("--which", which, "align|contrib|both");
  diagnose->add_option("--out", out, "output directory")->required();
  diagnose->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  diagnose->add_option("inputs", inputs, "sequence or corpus directories")->required();

  auto* grad = app.add_subcommand("gradcheck", "analytic vs finite-difference dL/dA");
  grad->add_option("--threshold", threshold, "max relative error");
  grad->add_option("--samples", samples, "sampled attention entries");
  grad->add_option("--out", out, "directory for gradcheck.json");

  auto* bench_cmd = app.add_subcommand("bench", "prefill micro-benchmark");
  bench_cmd->add_option("--runs", runs, "timed runs per mode");
  bench_cmd->add_option("--alpha", alpha, "contrastive decoding alpha");
  bench_cmd->add_option("--sigma", sigma, "SoFA sigma");
  bench_cmd->add_option("--out", out, "directory for bench.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  return guarded(std::cerr, [&]() -> int {
    RunConfig config = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed) config.seed = *seed;
    if (alpha) config.cd.alpha = *alpha;
    if (sigma) config.sofa.sigma = *sigma;
    if (threshold) config.gradcheck.threshold = *threshold;
    if (samples) config.gradcheck.samples = *samples;
    if (runs) config.bench.runs = *runs;
    const std::optional<std::filesystem::path> out_dir =
        out.empty() ? std::nullopt : std::optional<std::filesystem::path>(out);
    std::vector<std::filesystem::path> in(inputs.begin(), inputs.end());

    if (*gen) return cmd_gen(config, count, out, std::cout);
    if (*run) {
      RunOptions options;
      options.mode = parse_mode(mode);
      options.jobs = jobs;
      options.emit_traces = emit_traces;
      if (alpha && options.mode != Mode::cd) throw UsageError("--alpha applies to --mode cd only");
      if (sigma && options.mode != Mode::sofa) throw UsageError("--sigma applies to --mode sofa only");
      return cmd_run(config, in, out, options, std::cout);
    }
    if (*diagnose) return cmd_diagnose(config, in, out, parse_which(which), jobs, std::cout);
    if (*grad) return cmd_gradcheck(config, out_dir, std::cout);
    if (*bench_cmd) return cmd_bench(config, out_dir, std::cout);
    return kUsage;
  });
}
