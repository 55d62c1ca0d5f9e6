#pragma once

// Command implementations behind the `camalab` executable. Each command
// returns a process exit code and writes human-readable progress to `log`.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "camalab/baselines.hpp"
#include "camalab/cama.hpp"
#include "camalab/decoder.hpp"
#include "camalab/error.hpp"
#include "camalab/sequence.hpp"
#include "json.hpp"

namespace camalab::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

/// Bad flags or an inconsistent configuration.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Missing or unsuitable input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Lower bound on the relative-error denominator in gradient checks.
inline constexpr double kGradcheckFloor = 1e-8;

struct GradcheckConfig {
  ModelDims dims{6, 4, 32, 8, 64};
  std::size_t image_tokens = 8;
  std::size_t n_shots = 2;
  std::size_t samples = 128;
  double threshold = 1e-4;
  double step = 1e-5;
};

struct BenchConfig {
  std::size_t runs = 20;
};

struct RunConfig {
  ModelDims model;
  std::uint64_t model_seed = 0;
  SyntheticTaskSpec task;
  CamaConfig cama;
  CdConfig cd;
  SofaConfig sofa;
  GradcheckConfig gradcheck;
  BenchConfig bench;
  std::size_t decode_steps = 2;
  std::uint64_t seed = 0;

  /// Throws UsageError: stage layers beyond N, D != task.embed_dim, caption
  /// modes that differ, or any per-section violation.
  void validate() const;
};

nlohmann::json run_config_to_json(const RunConfig& config);
/// Missing sections take their defaults; a present section must list every
/// key and unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

enum class Mode { cama, cd, sofa, vanilla };
Mode parse_mode(const std::string& s);
const char* to_string(Mode m);

enum class Which { align, contrib, both };
Which parse_which(const std::string& s);

/// Sequence directories named by `inputs`, expanding any directory that
/// holds `seq_*` subdirectories instead of a manifest.
std::vector<std::filesystem::path> expand_inputs(const std::vector<std::filesystem::path>& inputs);

int cmd_gen(const RunConfig& config, std::size_t count, const std::filesystem::path& out,
            std::ostream& log);

struct RunOptions {
  Mode mode = Mode::cama;
  std::size_t jobs = 1;
  bool emit_traces = false;
};

/// Per input: `<out>/<name>/report.json` (+ traces), then `<out>/index.json`.
int cmd_run(const RunConfig& config, const std::vector<std::filesystem::path>& inputs,
            const std::filesystem::path& out, const RunOptions& options, std::ostream& log);

/// Writes `<out>/diagnostics.json` and `<out>/diagnostics.csv`. CSV columns:
/// metric,layer,index,clean,modulated (means over inputs; index is the
/// 1-based element for s_align and the key position for s_contrib).
int cmd_diagnose(const RunConfig& config, const std::vector<std::filesystem::path>& inputs,
                 const std::filesystem::path& out, Which which, std::size_t jobs,
                 std::ostream& log);

struct GradcheckResult {
  std::size_t samples = 0;
  double max_rel_error = 0.0;
  std::size_t seq_len = 0;
  nlohmann::json report;
};

GradcheckResult gradcheck(const RunConfig& config);
int cmd_gradcheck(const RunConfig& config, const std::optional<std::filesystem::path>& out,
                  std::ostream& log);

struct BenchRow {
  std::string mode;
  double median_ms = 0.0;
  double ratio_to_vanilla = 0.0;
  std::uint64_t prefills_per_run = 0;
};

std::vector<BenchRow> bench(const RunConfig& config);
int cmd_bench(const RunConfig& config, const std::optional<std::filesystem::path>& out,
              std::ostream& log);

/// Runs `fn`, mapping library exceptions to exit codes with a message on
/// `err`.
int guarded(std::ostream& err, const std::function<int()>& fn);

}  // namespace camalab::cli
