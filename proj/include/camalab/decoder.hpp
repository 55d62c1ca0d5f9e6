#pragma once

// From-scratch pre-norm multi-head causal decoder with an additive
// attention-logit bias hook, greedy decoding and an analytic gradient of the
// answer loss with respect to post-softmax attention.
//
// Layer indices are 0-based in this API. The forward pass runs in double
// precision; the trace records every tensor as float32, which is also the
// on-disk trace format, so anything computed from a trace can be recomputed
// bit-for-bit from its export.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

#include "camalab/sequence.hpp"

namespace camalab {

struct ModelDims {
  std::size_t n_layers = 24;
  std::size_t n_heads = 8;
  std::size_t model_dim = 64;
  std::size_t head_dim = 8;
  std::size_t vocab_size = 64;

  /// Throws InvalidArgument when H * D_k != D or a count is zero.
  void validate() const;
  std::size_t ffn_dim() const noexcept { return 4 * model_dim; }
  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct LayerParams {
  std::vector<double> wq, wk, wv, wo;  // D x D, row-vector convention (x * W)
  std::vector<double> w1, b1;          // D x F, F
  std::vector<double> w2, b2;          // F x D, D
  std::vector<double> ln1_scale, ln1_offset;
  std::vector<double> ln2_scale, ln2_offset;
};

struct ModelParams {
  ModelDims dims;
  std::uint64_t seed = 0;
  std::vector<LayerParams> layers;
  std::vector<double> final_scale, final_offset;
  std::vector<double> token_embedding;  // V x D, for generated tokens
  std::vector<double> unembedding;      // D x V
};

/// Deterministic in `seed`; every matrix drawn N(0, 1/fan_in).
ModelParams init_params(const ModelDims& dims, std::uint64_t seed);

inline constexpr int kAllHeads = -1;

/// One additive logit bias: added to logits(layer, head, r, column) for every
/// row r >= row_from (head == kAllHeads targets every head).
struct BiasEntry {
  std::size_t layer = 0;
  int head = kAllHeads;
  std::size_t column = 0;
  std::size_t row_from = 0;
  double value = 0.0;
  friend bool operator==(const BiasEntry&, const BiasEntry&) = default;
};

/// Keyed by (layer, head, column); a second registration on the same key
/// accumulates into the existing value.
class BiasPlan {
 public:
  /// Throws InvalidArgument for a non-finite value, row_from <= column, or a
  /// row_from that disagrees with an existing entry on the same key.
  void add(const BiasEntry& entry);
  void merge(const BiasPlan& other);

  /// Entries in (layer, head, column) order.
  std::vector<BiasEntry> entries() const;
  std::vector<BiasEntry> entries_for_layer(std::size_t layer) const;
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  bool touches_layer(std::size_t layer) const;

  /// Total bias added to logits(layer, head, row, column).
  double bias_at(std::size_t layer, std::size_t head, std::size_t row, std::size_t column) const;

  /// FNV-1a over the canonical entry encoding.
  std::uint64_t digest() const;

  friend bool operator==(const BiasPlan&, const BiasPlan&) = default;

 private:
  using Key = std::tuple<std::size_t, int, std::size_t>;
  std::map<Key, BiasEntry> entries_;
};

/// Recorded prefill. `logits` holds the model's own pre-bias logits
/// Q K^T / sqrt(D_k); the logits actually fed to softmax are
/// logits + applied_plan (see biased_logit). Entries above the diagonal are 0
/// in both tensors unless the layer ran bidirectionally (SoFA).
struct ForwardTrace {
  ModelDims dims;
  std::size_t seq_len = 0;     // rows recorded, prompt + continuation
  std::size_t prompt_len = 0;  // rows belonging to the input sequence
  std::vector<float> logits;   // [N][H][S][S]
  std::vector<float> weights;  // [N][H][S][S]
  std::vector<float> hidden;   // [N][S][D], output of each layer
  std::vector<double> vocab_logits;  // [S][V]; not part of the on-disk format
  BiasPlan applied_plan;

  std::size_t matrix_offset(std::size_t layer, std::size_t head) const noexcept {
    return (layer * dims.n_heads + head) * seq_len * seq_len;
  }
  float logit(std::size_t l, std::size_t h, std::size_t r, std::size_t c) const {
    return logits[matrix_offset(l, h) + r * seq_len + c];
  }
  float weight(std::size_t l, std::size_t h, std::size_t r, std::size_t c) const {
    return weights[matrix_offset(l, h) + r * seq_len + c];
  }
  std::span<const float> logit_row(std::size_t l, std::size_t h, std::size_t r) const {
    return {logits.data() + matrix_offset(l, h) + r * seq_len, seq_len};
  }
  std::span<const float> weight_row(std::size_t l, std::size_t h, std::size_t r) const {
    return {weights.data() + matrix_offset(l, h) + r * seq_len, seq_len};
  }
  std::span<const float> hidden_row(std::size_t l, std::size_t r) const {
    return {hidden.data() + (l * seq_len + r) * dims.model_dim, dims.model_dim};
  }
  std::span<const double> vocab_row(std::size_t r) const {
    return {vocab_logits.data() + r * dims.vocab_size, dims.vocab_size};
  }
  /// Logit after the applied plan's bias.
  double biased_logit(std::size_t l, std::size_t h, std::size_t r, std::size_t c) const {
    return static_cast<double>(logit(l, h, r, c)) + applied_plan.bias_at(l, h, r, c);
  }
};

/// Called once per layer after that layer's pre-bias logits are recorded into
/// the partial trace and before bias, masking and softmax. Entries added to
/// `plan` for the current layer take effect immediately.
class PrefillHook {
 public:
  virtual ~PrefillHook() = default;
  virtual void before_softmax(std::size_t layer, const ForwardTrace& partial, BiasPlan& plan) = 0;
};

/// Soft-mask schedule applied by the SoFA baseline. Scheduled layers use
/// (1 - sigma) * causal_softmax + sigma * bidirectional_softmax.
struct SoftMaskSchedule {
  double sigma = 0.0;
  std::vector<bool> layers;  // per layer, true when scheduled
};

struct PrefillOptions {
  const BiasPlan* plan = nullptr;
  PrefillHook* hook = nullptr;
  const SoftMaskSchedule* soft_mask = nullptr;
};

/// Single forward pass over `seq` plus any continuation token ids.
/// Throws InvalidArgument when the plan references a missing layer or a row
/// beyond the sequence, and NumericError("numeric blow-up") on NaN/Inf.
ForwardTrace prefill(const TokenizedSequence& seq, const ModelParams& params,
                     const PrefillOptions& options = {},
                     std::span<const int> continuation = {});

/// Number of forward passes executed by this process (all threads).
std::uint64_t forward_pass_count();

struct GreedyResult {
  std::vector<int> tokens;
  ForwardTrace trace;  // covers S + steps rows
};

/// Argmax decoding; plan entries are column-keyed and keep applying to every
/// generated row.
GreedyResult decode_greedy(const TokenizedSequence& seq, const ModelParams& params,
                           const BiasPlan* plan, std::size_t steps);

/// Mean cross-entropy of vocab logits at `target_positions` against
/// `target_ids` (row t predicts the token at t + 1).
struct LossSpec {
  std::vector<std::size_t> target_positions;
  std::vector<int> target_ids;
};

/// Teacher-forced loss over the query answer: the ground-truth answer ids are
/// appended as continuation and row S-1+k predicts id k.
LossSpec answer_loss(const TokenizedSequence& seq);

struct AttentionGrads {
  ModelDims dims;
  std::size_t seq_len = 0;
  std::vector<double> grads;    // dL/dA, [N][H][S][S]
  std::vector<double> weights;  // A itself, same layout
  double loss = 0.0;

  std::size_t offset(std::size_t l, std::size_t h, std::size_t r, std::size_t c) const noexcept {
    return ((l * dims.n_heads + h) * seq_len + r) * seq_len + c;
  }
  double grad(std::size_t l, std::size_t h, std::size_t r, std::size_t c) const {
    return grads[offset(l, h, r, c)];
  }
  double weight(std::size_t l, std::size_t h, std::size_t r, std::size_t c) const {
    return weights[offset(l, h, r, c)];
  }
};

/// Reverse-mode gradient of the loss with respect to every post-softmax
/// attention matrix, A treated as the independent variable.
AttentionGrads attention_grads(const TokenizedSequence& seq, const ModelParams& params,
                               const BiasPlan* plan, const LossSpec& loss,
                               std::span<const int> continuation = {});

/// Loss with A(layer, head, row, column) replaced by A + delta after softmax
/// (no renormalisation). Used by finite-difference checks.
struct AttentionPerturbation {
  std::size_t layer = 0, head = 0, row = 0, column = 0;
  double delta = 0.0;
};
double loss_with_perturbation(const TokenizedSequence& seq, const ModelParams& params,
                              const BiasPlan* plan, const LossSpec& loss,
                              std::span<const int> continuation,
                              const std::optional<AttentionPerturbation>& perturbation);

struct TraceExportOptions {
  bool include_weights = true;
  bool include_hidden = true;
};

/// Trace directory: `manifest.json` + `layer_<l>.bin` (pre-bias logits,
/// float32 LE, [H, S, S], l 1-based), optional `weights_<l>.bin` and
/// `hidden_<l>.bin` ([S, D]).
void export_trace(const ForwardTrace& trace, const std::filesystem::path& dir,
                  const TraceExportOptions& options = {});
ForwardTrace import_trace(const std::filesystem::path& dir);

}  // namespace camalab
