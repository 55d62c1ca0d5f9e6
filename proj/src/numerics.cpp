#include "camalab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "camalab/error.hpp"

namespace camalab {

const char* to_string(FormatErrc code) {
  switch (code) {
    case FormatErrc::io_failure:
      return "io failure";
    case FormatErrc::malformed_header:
      return "malformed header";
    case FormatErrc::blob_length_mismatch:
      return "blob length mismatch";
    case FormatErrc::inconsistent_manifest:
      return "inconsistent manifest";
    case FormatErrc::non_finite_values:
      return "non-finite values";
  }
  return "unknown format error";
}

IndexSet::IndexSet(std::vector<std::size_t> sorted) : indices_(std::move(sorted)) {
  for (std::size_t i = 1; i < indices_.size(); ++i) {
    if (indices_[i - 1] >= indices_[i]) {
      throw InvalidArgument("IndexSet requires strictly ascending indices");
    }
  }
}

IndexSet IndexSet::from_unsorted(std::vector<std::size_t> indices) {
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  return IndexSet(std::move(indices));
}

bool IndexSet::contains(std::size_t index) const {
  return std::binary_search(indices_.begin(), indices_.end(), index);
}

ProbVector masked_softmax(std::span<const double> logits,
                          const std::vector<bool>& visible) {
  if (visible.size() != logits.size()) {
    throw InvalidArgument("masked_softmax: mask length differs from logits");
  }
  ProbVector out;
  double max_logit = -INFINITY;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!visible[i]) continue;
    if (!std::isfinite(logits[i])) throw NumericError("non-finite logits");
    out.support.push_back(i);
    max_logit = std::max(max_logit, logits[i]);
  }
  if (out.support.empty()) throw InvalidArgument("empty support");

  out.values.reserve(out.support.size());
  double sum = 0.0;
  for (std::size_t idx : out.support) {
    const double e = std::exp(logits[idx] - max_logit);
    out.values.push_back(e);
    sum += e;
  }
  double clamped_sum = 0.0;
  for (double& v : out.values) {
    v = std::max(v / sum, kProbabilityFloor);
    clamped_sum += v;
  }
  for (double& v : out.values) v /= clamped_sum;
  return out;
}

std::size_t top_pct_count(std::size_t n, double pct) {
  if (!(pct > 0.0) || pct > 100.0) throw InvalidArgument("invalid percentage");
  // pct * n is exact for the integral percentages used in practice; the
  // slack keeps e.g. 20% of 10 at 2 rather than 3 after rounding noise.
  const double raw = pct * static_cast<double>(n) / 100.0;
  auto count = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::clamp<std::size_t>(count, n == 0 ? 0 : 1, n);
}

IndexSet top_pct_indices(std::span<const double> scores, double pct) {
  const std::size_t k = top_pct_count(scores.size(), pct);
  if (scores.empty()) throw InvalidArgument("top_pct_indices: empty scores");
  for (double s : scores) {
    if (!std::isfinite(s)) throw NumericError("top_pct_indices: non-finite score");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return IndexSet(std::move(order));
}

Normalized l2_normalize(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  Normalized out;
  out.values.assign(v.begin(), v.end());
  if (sq == 0.0 || !std::isfinite(sq)) {
    if (sq == 0.0) {
      out.degenerate = true;
      std::fill(out.values.begin(), out.values.end(), 0.0);
      return out;
    }
    throw NumericError("l2_normalize: non-finite input");
  }
  const double norm = std::sqrt(sq);
  for (double& x : out.values) x /= norm;
  return out;
}

double cosine(const Normalized& a, const Normalized& b) {
  if (a.values.size() != b.values.size()) {
    throw InvalidArgument("cosine: dimension mismatch");
  }
  if (a.degenerate || b.degenerate) return 0.0;
  double dot = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) dot += a.values[i] * b.values[i];
  return dot;
}

double set_iou(const IndexSet& a, const IndexSet& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t inter = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++inter;
      ++ia;
      ++ib;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace camalab
