#pragma once

// Small dense-math kernel shared by every module. All functions are pure and
// operate in double precision.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace camalab {

/// Floor applied to probabilities before renormalisation so that log ratios
/// between two distributions stay finite.
inline constexpr double kProbabilityFloor = 1e-12;

/// Sorted set of distinct indices (token positions or head numbers).
class IndexSet {
 public:
  IndexSet() = default;
  /// Throws InvalidArgument unless `sorted` is strictly ascending.
  explicit IndexSet(std::vector<std::size_t> sorted);
  IndexSet(std::initializer_list<std::size_t> sorted)
      : IndexSet(std::vector<std::size_t>(sorted)) {}

  static IndexSet from_unsorted(std::vector<std::size_t> indices);

  const std::vector<std::size_t>& indices() const noexcept { return indices_; }
  std::size_t size() const noexcept { return indices_.size(); }
  bool empty() const noexcept { return indices_.empty(); }
  bool contains(std::size_t index) const;
  auto begin() const noexcept { return indices_.begin(); }
  auto end() const noexcept { return indices_.end(); }

  friend bool operator==(const IndexSet&, const IndexSet&) = default;

 private:
  std::vector<std::size_t> indices_;
};

/// Probability distribution over an explicit support of token indices.
struct ProbVector {
  std::vector<double> values;
  std::vector<std::size_t> support;
};

/// Softmax over the entries whose `visible` flag is set. The result is
/// floored at kProbabilityFloor and renormalised, and its support lists the
/// positions (within `logits`) that were visible.
///
/// Throws InvalidArgument("empty support") when nothing is visible and
/// NumericError("non-finite logits") when a visible logit is NaN/Inf.
ProbVector masked_softmax(std::span<const double> logits,
                          const std::vector<bool>& visible);

/// Indices of the ceil(pct/100 * n) largest scores, ties to the lower index.
/// Returned in ascending index order.
IndexSet top_pct_indices(std::span<const double> scores, double pct);

/// Number of elements selected by top_pct_indices for `n` scores.
std::size_t top_pct_count(std::size_t n, double pct);

struct Normalized {
  std::vector<double> values;
  bool degenerate = false;  // input had zero norm; values are all zero
};

Normalized l2_normalize(std::span<const double> v);

/// Inner product of two normalised vectors; 0 if either is degenerate.
double cosine(const Normalized& a, const Normalized& b);

/// |a ∩ b| / |a ∪ b|, with 1.0 for two empty sets.
double set_iou(const IndexSet& a, const IndexSet& b);

}  // namespace camalab
