#pragma once

// Interleaved image/text in-context sequences: segment layout, anchor
// tokens, the synthetic task generator and the on-disk sequence container.
//
// Elements are stored 0-based; element n (the last) is the query sample.
// ICD positions exposed to users (key_icd_index, perturbation slots) are
// 1-based.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "camalab/numerics.hpp"

namespace camalab {

/// Half-open token index range [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end > begin ? end - begin : 0; }
  bool empty() const noexcept { return end <= begin; }
  bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct ElementLayout {
  Span image;
  Span question;  // empty in caption mode
  Span answer;    // for the query: the answer-prefix token(s) only

  Span whole() const noexcept { return {image.begin, answer.end}; }
  std::size_t last_token() const noexcept { return answer.end - 1; }
  friend bool operator==(const ElementLayout&, const ElementLayout&) = default;
};

struct SegmentLayout {
  std::size_t n_shots = 0;
  std::vector<ElementLayout> elements;  // n_shots ICDs followed by the query
  std::size_t total_len = 0;
  bool caption_mode = false;

  const ElementLayout& query() const { return elements.back(); }
  std::size_t query_index() const noexcept { return n_shots; }
  friend bool operator==(const SegmentLayout&, const SegmentLayout&) = default;
};

/// Builds a contiguous layout from per-element segment lengths.
struct ElementLengths {
  std::size_t image = 0;
  std::size_t question = 0;
  std::size_t answer = 0;
};
SegmentLayout layout_from_lengths(std::span<const ElementLengths> lengths,
                                  bool caption_mode);

struct LayoutViolation {
  std::optional<std::size_t> element;  // 0-based, when attributable
  std::string message;
};

/// Every violated layout invariant; empty means the layout is well formed.
std::vector<LayoutViolation> validate_layout(const SegmentLayout& layout);

struct Anchors {
  std::optional<std::size_t> question_first;  // absent in caption mode
  std::size_t answer_first = 0;
  std::size_t answer_last = 0;
};

/// First question token, first and last answer token of element `element`.
Anchors anchors(const SegmentLayout& layout, std::size_t element);

struct SyntheticTaskSpec {
  std::size_t n_shots = 3;
  std::size_t image_tokens_per_icd = 20;
  std::size_t question_len = 4;
  std::size_t answer_len = 3;
  std::size_t object_vocab_size = 32;
  std::size_t embed_dim = 64;
  double noise_scale = 0.3;
  bool caption_mode = false;
  std::uint64_t seed = 0;

  /// Throws InvalidArgument naming the first bad field.
  void validate() const;
  friend bool operator==(const SyntheticTaskSpec&, const SyntheticTaskSpec&) = default;
};

struct GroundTruth {
  std::vector<IndexSet> key_region_masks;   // per element, absolute indices
  std::optional<std::size_t> key_icd_index; // 1-based ICD position
  std::vector<int> answer_token_ids;        // targets for the query answer
  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

struct TokenizedSequence {
  std::size_t embed_dim = 0;
  std::vector<float> embeddings;  // row-major total_len x embed_dim
  SegmentLayout layout;
  std::optional<GroundTruth> ground_truth;
  std::optional<SyntheticTaskSpec> origin;  // generator spec, when synthetic

  std::size_t rows() const noexcept { return layout.total_len; }
  std::span<const float> row(std::size_t r) const {
    return {embeddings.data() + r * embed_dim, embed_dim};
  }
  friend bool operator==(const TokenizedSequence&, const TokenizedSequence&) = default;
};

/// Deterministic in spec.seed. ICD images carry an object embedding on the
/// annotated key region plus a clutter object elsewhere; text tokens mix the
/// element's target object with marker embeddings. One ICD (the key ICD)
/// shares its target object with the query.
TokenizedSequence generate_synthetic(const SyntheticTaskSpec& spec);

/// Moves the key ICD to 1-based slot `position` and replaces every other ICD
/// with a distractor drawn from the disjoint half of the object vocabulary.
/// Query rows are copied bit-exactly.
TokenizedSequence perturb_key_position(const TokenizedSequence& seq,
                                       std::size_t position,
                                       std::uint64_t distractor_seed);

/// Sequence container: `<dir>/manifest.json` + `<dir>/embeddings.bin`
/// (little-endian float32, row-major S x D).
void write_sequence(const TokenizedSequence& seq, const std::filesystem::path& dir);
TokenizedSequence read_sequence(const std::filesystem::path& dir);

}  // namespace camalab
