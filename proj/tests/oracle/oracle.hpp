#pragma once

// Brute-force re-derivations used only by tests. Nothing here calls into the
// library's math: traces are read straight from their exported files and
// every formula is recomputed in long double.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

namespace oracle {

struct Seg {
  std::size_t begin = 0, end = 0;
  std::size_t size() const { return end - begin; }
};

struct Element {
  Seg image, question, answer;
};

struct Layout {
  std::size_t n = 0;
  std::vector<Element> elements;
  bool caption = false;
};

Layout layout_from_report(const nlohmann::json& layout);

/// Exported trace read with plain stdio; layers load on first use.
class TraceFile {
 public:
  explicit TraceFile(std::filesystem::path dir);
  std::size_t layers() const { return layers_; }
  std::size_t heads() const { return heads_; }
  std::size_t seq_len() const { return seq_len_; }
  std::size_t model_dim() const { return model_dim_; }
  double logit(std::size_t l, std::size_t h, std::size_t r, std::size_t c) const;
  double weight(std::size_t l, std::size_t h, std::size_t r, std::size_t c) const;
  double hidden(std::size_t l, std::size_t r, std::size_t d) const;
  const nlohmann::json& manifest() const { return manifest_; }

 private:
  const std::vector<float>& blob(const std::string& stem, std::size_t l, std::size_t count) const;
  std::filesystem::path dir_;
  nlohmann::json manifest_;
  std::size_t layers_ = 0, heads_ = 0, seq_len_ = 0, model_dim_ = 0;
  mutable std::map<std::string, std::vector<float>> cache_;
};

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p);
std::vector<float> decode_f32_le(const std::vector<std::uint8_t>& bytes);

/// exp(x - max) / sum, floored at 1e-12 and renormalised.
std::vector<long double> softmax(const std::vector<long double>& x);

/// Smallest k with 100 k >= pct n, clamped to [1, n].
std::size_t count_for(std::size_t n, double pct);

/// Repeated arg-max with lowest-index ties, returned ascending.
std::vector<std::size_t> top_indices(const std::vector<long double>& s, double pct);

long double gain(long double before, long double after);

struct PlanKey {
  std::size_t layer;  // 1-based
  int head;           // -1 for every head
  std::size_t column;
  auto operator<=>(const PlanKey&) const = default;
};
struct PlanValue {
  std::size_t row_from;
  long double value;
};
using Plan = std::map<PlanKey, PlanValue>;

Plan plan_from_report(const nlohmann::json& entries);

struct ElementResult {
  // per stage1 layer: distributions and gains
  std::vector<std::optional<std::vector<long double>>> p_q0;
  std::vector<std::vector<long double>> p_a0, p_alast;
  std::vector<std::vector<long double>> c1;
  std::vector<std::optional<std::vector<long double>>> c2;
  std::vector<long double> scores;
  std::vector<std::size_t> keys;  // absolute
  long double max_score = 0;
};

struct CamaResult {
  std::vector<ElementResult> elements;
  std::vector<std::vector<long double>> rho;        // per stage2 layer
  std::vector<std::vector<std::size_t>> heads;      // per stage2 layer
  std::vector<std::vector<long double>> repr;       // n + 1 joint vectors
  std::vector<long double> similarity, weights;
  Plan plan;
};

/// Full recomputation from the exported traces and the report's echoed
/// config and layout. `clean` is absent for cumulative single-pass runs.
CamaResult recompute(const TraceFile* clean, const TraceFile& modulated,
                     const nlohmann::json& report);

struct Comparison {
  std::size_t values = 0;
  long double max_abs_diff = 0;
  std::vector<std::string> mismatches;  // structural disagreements
  void value(const std::string& what, long double expected, long double actual);
  void structural(const std::string& what);
};

/// Every reported quantity against the oracle.
Comparison compare(const CamaResult& expected, const nlohmann::json& report);

}  // namespace oracle
