#include "camalab/decoder.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <random>

#include "camalab/binary_io.hpp"
#include "camalab/error.hpp"

namespace camalab {

void ModelDims::validate() const {
  if (n_layers == 0 || n_heads == 0 || model_dim == 0 || head_dim == 0 || vocab_size == 0) {
    throw InvalidArgument("model dims must all be positive");
  }
  if (n_heads * head_dim != model_dim) {
    throw InvalidArgument("n_heads * head_dim must equal model_dim");
  }
}

ModelParams init_params(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  ModelParams p;
  p.dims = dims;
  p.seed = seed;
  std::mt19937_64 rng(io::mix_seed(seed, 0x6d6f64656cULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto matrix = [&](std::size_t rows, std::size_t cols, double scale) {
    std::vector<double> m(rows * cols);
    for (double& v : m) v = scale * normal(rng);
    return m;
  };
  auto around = [&](std::size_t n, double center, double spread) {
    std::vector<double> v(n);
    for (double& x : v) x = center + spread * normal(rng);
    return v;
  };
  const std::size_t d = dims.model_dim;
  const std::size_t f = dims.ffn_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_sqrt_f = 1.0 / std::sqrt(static_cast<double>(f));
  for (std::size_t l = 0; l < dims.n_layers; ++l) {
    LayerParams lp;
    lp.wq = matrix(d, d, inv_sqrt_d);
    lp.wk = matrix(d, d, inv_sqrt_d);
    lp.wv = matrix(d, d, inv_sqrt_d);
    lp.wo = matrix(d, d, inv_sqrt_d);
    lp.w1 = matrix(d, f, inv_sqrt_d);
    lp.b1 = around(f, 0.0, 0.02);
    lp.w2 = matrix(f, d, inv_sqrt_f);
    lp.b2 = around(d, 0.0, 0.02);
    lp.ln1_scale = around(d, 1.0, 0.1);
    lp.ln1_offset = around(d, 0.0, 0.1);
    lp.ln2_scale = around(d, 1.0, 0.1);
    lp.ln2_offset = around(d, 0.0, 0.1);
    p.layers.push_back(std::move(lp));
  }
  p.final_scale = around(d, 1.0, 0.1);
  p.final_offset = around(d, 0.0, 0.1);
  p.token_embedding = matrix(dims.vocab_size, d, 1.0);
  p.unembedding = matrix(d, dims.vocab_size, inv_sqrt_d);
  return p;
}

// ---------------------------------------------------------------------------
// BiasPlan

void BiasPlan::add(const BiasEntry& entry) {
  if (!std::isfinite(entry.value)) throw InvalidArgument("bias value must be finite");
  if (entry.row_from <= entry.column) {
    throw InvalidArgument("bias row_from must be after its column");
  }
  if (entry.head < kAllHeads) throw InvalidArgument("bias head index is negative");
  const Key key{entry.layer, entry.head, entry.column};
  auto [it, inserted] = entries_.try_emplace(key, entry);
  if (!inserted) {
    if (it->second.row_from != entry.row_from) {
      throw InvalidArgument("conflicting row_from for accumulated bias entry");
    }
    it->second.value += entry.value;
  }
}

void BiasPlan::merge(const BiasPlan& other) {
  for (const auto& [key, e] : other.entries_) add(e);
}

std::vector<BiasEntry> BiasPlan::entries() const {
  std::vector<BiasEntry> out;
  out.reserve(entries_.size());
  for (const auto& [key, e] : entries_) out.push_back(e);
  return out;
}

std::vector<BiasEntry> BiasPlan::entries_for_layer(std::size_t layer) const {
  std::vector<BiasEntry> out;
  auto it = entries_.lower_bound(Key{layer, kAllHeads, 0});
  for (; it != entries_.end() && std::get<0>(it->first) == layer; ++it) out.push_back(it->second);
  return out;
}

bool BiasPlan::touches_layer(std::size_t layer) const {
  auto it = entries_.lower_bound(Key{layer, kAllHeads, 0});
  return it != entries_.end() && std::get<0>(it->first) == layer;
}

double BiasPlan::bias_at(std::size_t layer, std::size_t head, std::size_t row,
                         std::size_t column) const {
  double total = 0.0;
  for (int h : {kAllHeads, static_cast<int>(head)}) {
    auto it = entries_.find(Key{layer, h, column});
    if (it != entries_.end() && row >= it->second.row_from) total += it->second.value;
  }
  return total;
}

std::uint64_t BiasPlan::digest() const {
  io::Fnv1a h;
  for (const auto& [key, e] : entries_) {
    h.update_value(static_cast<std::uint64_t>(e.layer));
    h.update_value(static_cast<std::int64_t>(e.head));
    h.update_value(static_cast<std::uint64_t>(e.column));
    h.update_value(static_cast<std::uint64_t>(e.row_from));
    h.update_value(e.value);
  }
  return h.value();
}

// ---------------------------------------------------------------------------
// Forward pass

namespace {

std::atomic<std::uint64_t> g_forward_passes{0};

constexpr double kLayerNormEps = 1e-5;

// out[S x N] = in[S x K] * w[K x N]
void matmul(const std::vector<double>& in, const std::vector<double>& w, std::size_t rows,
            std::size_t inner, std::size_t cols, std::vector<double>& out) {
  out.assign(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * cols;
    const double* x = in.data() + r * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const double a = x[k];
      const double* wr = w.data() + k * cols;
      for (std::size_t c = 0; c < cols; ++c) o[c] += a * wr[c];
    }
  }
}

// out[S x K] += g[S x N] * w[K x N]^T
void matmul_transposed_accumulate(const std::vector<double>& g, const std::vector<double>& w,
                                  std::size_t rows, std::size_t inner, std::size_t cols,
                                  std::vector<double>& out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* gr = g.data() + r * cols;
    double* o = out.data() + r * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const double* wr = w.data() + k * cols;
      double acc = 0.0;
      for (std::size_t c = 0; c < cols; ++c) acc += gr[c] * wr[c];
      o[k] += acc;
    }
  }
}

struct LayerNormState {
  std::vector<double> xhat;  // S x D
  std::vector<double> rstd;  // S
};

void layer_norm(const std::vector<double>& x, std::size_t rows, std::size_t dim,
                const std::vector<double>& scale, const std::vector<double>& offset,
                std::vector<double>& y, LayerNormState& state) {
  y.resize(rows * dim);
  state.xhat.resize(rows * dim);
  state.rstd.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * dim;
    double mean = 0.0;
    for (std::size_t d = 0; d < dim; ++d) mean += xr[d];
    mean /= static_cast<double>(dim);
    double var = 0.0;
    for (std::size_t d = 0; d < dim; ++d) var += (xr[d] - mean) * (xr[d] - mean);
    var /= static_cast<double>(dim);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    state.rstd[r] = rstd;
    for (std::size_t d = 0; d < dim; ++d) {
      const double xh = (xr[d] - mean) * rstd;
      state.xhat[r * dim + d] = xh;
      y[r * dim + d] = scale[d] * xh + offset[d];
    }
  }
}

// Adds dL/dx to `gx` given dL/dy.
void layer_norm_backward(const std::vector<double>& gy, const LayerNormState& state,
                         const std::vector<double>& scale, std::size_t rows, std::size_t dim,
                         std::vector<double>& gx) {
  std::vector<double> gxh(dim);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean_g = 0.0;
    double mean_gx = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      gxh[d] = gy[r * dim + d] * scale[d];
      mean_g += gxh[d];
      mean_gx += gxh[d] * state.xhat[r * dim + d];
    }
    mean_g /= static_cast<double>(dim);
    mean_gx /= static_cast<double>(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      gx[r * dim + d] +=
          state.rstd[r] * (gxh[d] - mean_g - state.xhat[r * dim + d] * mean_gx);
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct LayerCache {
  LayerNormState ln1, ln2;
  std::vector<double> q, k, v;  // S x D
  std::vector<double> attn;     // H x S x S post-softmax (after any perturbation)
  std::vector<double> h1;       // S x F pre-activation
  bool bidirectional = false;
};

struct ForwardRun {
  ForwardTrace trace;
  std::vector<LayerCache> caches;
  LayerNormState final_ln;
  std::vector<double> vocab_logits;  // S x V
};

struct ForwardRequest {
  const std::vector<double>* input = nullptr;  // S x D
  std::size_t rows = 0;
  std::size_t prompt_len = 0;
  PrefillOptions options;
  bool record = true;
  bool keep_caches = false;
  std::optional<AttentionPerturbation> perturbation;
};

void check_plan_bounds(const BiasPlan& plan, const ModelDims& dims, std::size_t rows) {
  for (const auto& e : plan.entries()) {
    if (e.layer >= dims.n_layers) throw InvalidArgument("bias plan references layer beyond model depth");
    if (e.head != kAllHeads && static_cast<std::size_t>(e.head) >= dims.n_heads) {
      throw InvalidArgument("bias plan references a missing head");
    }
    if (e.row_from > rows) throw InvalidArgument("bias plan row_from beyond sequence length");
  }
}

struct HeadBias {
  std::size_t column, row_from;
  double value;
};

ForwardRun run_forward(const ModelParams& params, const ForwardRequest& req) {
  g_forward_passes.fetch_add(1, std::memory_order_relaxed);
  const ModelDims& dims = params.dims;
  const std::size_t S = req.rows;
  const std::size_t D = dims.model_dim;
  const std::size_t H = dims.n_heads;
  const std::size_t dk = dims.head_dim;
  const std::size_t F = dims.ffn_dim();
  const std::size_t V = dims.vocab_size;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  if (req.options.hook && !req.record) throw InvalidArgument("prefill hooks need a recorded trace");
  const SoftMaskSchedule* soft = req.options.soft_mask;
  if (soft) {
    if (!(soft->sigma >= 0.0 && soft->sigma <= 1.0)) throw InvalidArgument("soft mask sigma must be in [0, 1]");
    if (soft->layers.size() != dims.n_layers) throw InvalidArgument("soft mask schedule length differs from depth");
  }

  BiasPlan plan = req.options.plan ? *req.options.plan : BiasPlan{};
  check_plan_bounds(plan, dims, S);

  ForwardRun run;
  ForwardTrace& trace = run.trace;
  trace.dims = dims;
  trace.seq_len = S;
  trace.prompt_len = req.prompt_len;
  if (req.record) {
    trace.logits.assign(dims.n_layers * H * S * S, 0.0f);
    trace.weights.assign(dims.n_layers * H * S * S, 0.0f);
    trace.hidden.assign(dims.n_layers * S * D, 0.0f);
  }
  if (req.keep_caches) run.caches.resize(dims.n_layers);

  std::vector<double> x = *req.input;
  std::vector<double> u, q, k, v, o(S * D), attn_out, h1, act, ffn_out;
  std::vector<double> logits_row(S), probs(S), probs_bi(S);
  std::vector<double> attn;  // H x S x S, only when caching

  for (std::size_t l = 0; l < dims.n_layers; ++l) {
    const LayerParams& lp = params.layers[l];
    LayerNormState ln1;
    layer_norm(x, S, D, lp.ln1_scale, lp.ln1_offset, u, ln1);
    matmul(u, lp.wq, S, D, D, q);
    matmul(u, lp.wk, S, D, D, k);
    matmul(u, lp.wv, S, D, D, v);

    const bool bidirectional = soft && soft->layers[l] && soft->sigma > 0.0;
    const double sigma = bidirectional ? soft->sigma : 0.0;

    // Pre-bias logits are recorded first so hooks can read this layer.
    std::vector<double> raw(H * S * S, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t r = 0; r < S; ++r) {
        const double* qr = q.data() + r * D + h * dk;
        const std::size_t c_end = bidirectional ? S : r + 1;
        double* out = raw.data() + (h * S + r) * S;
        for (std::size_t c = 0; c < c_end; ++c) {
          const double* kc = k.data() + c * D + h * dk;
          double dot = 0.0;
          for (std::size_t d = 0; d < dk; ++d) dot += qr[d] * kc[d];
          out[c] = dot * inv_sqrt_dk;
        }
      }
    }
    if (req.record) {
      float* dst = trace.logits.data() + trace.matrix_offset(l, 0);
      for (std::size_t i = 0; i < H * S * S; ++i) dst[i] = static_cast<float>(raw[i]);
    }
    if (req.options.hook) {
      req.options.hook->before_softmax(l, trace, plan);
      check_plan_bounds(plan, dims, S);
    }

    std::vector<std::vector<HeadBias>> head_bias(H);
    for (const auto& e : plan.entries_for_layer(l)) {
      for (std::size_t h = 0; h < H; ++h) {
        if (e.head == kAllHeads || static_cast<std::size_t>(e.head) == h) {
          head_bias[h].push_back({e.column, e.row_from, e.value});
        }
      }
    }

    if (req.keep_caches) attn.assign(H * S * S, 0.0);
    std::fill(o.begin(), o.end(), 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t r = 0; r < S; ++r) {
        const double* zr = raw.data() + (h * S + r) * S;
        const std::size_t c_end = bidirectional ? S : r + 1;
        for (std::size_t c = 0; c < c_end; ++c) logits_row[c] = zr[c];
        for (const HeadBias& b : head_bias[h]) {
          if (r >= b.row_from) logits_row[b.column] += b.value;
        }

        // Causal softmax over [0, r].
        double mx = -INFINITY;
        for (std::size_t c = 0; c <= r; ++c) mx = std::max(mx, logits_row[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c <= r; ++c) {
          probs[c] = std::exp(logits_row[c] - mx);
          sum += probs[c];
        }
        for (std::size_t c = 0; c <= r; ++c) probs[c] /= sum;
        for (std::size_t c = r + 1; c < S; ++c) probs[c] = 0.0;

        if (bidirectional) {
          double mxb = -INFINITY;
          for (std::size_t c = 0; c < S; ++c) mxb = std::max(mxb, logits_row[c]);
          double sumb = 0.0;
          for (std::size_t c = 0; c < S; ++c) {
            probs_bi[c] = std::exp(logits_row[c] - mxb);
            sumb += probs_bi[c];
          }
          for (std::size_t c = 0; c < S; ++c) {
            probs[c] = (1.0 - sigma) * probs[c] + sigma * (probs_bi[c] / sumb);
          }
        }

        if (req.perturbation && req.perturbation->layer == l && req.perturbation->head == h &&
            req.perturbation->row == r) {
          probs[req.perturbation->column] += req.perturbation->delta;
        }

        // Entries to the right of the diagonal stay out of the value mix in
        // causal layers, so a perturbation there has no effect.
        double* orow = o.data() + r * D + h * dk;
        for (std::size_t c = 0; c < c_end; ++c) {
          const double a = probs[c];
          const double* vc = v.data() + c * D + h * dk;
          for (std::size_t d = 0; d < dk; ++d) orow[d] += a * vc[d];
        }
        if (req.record) {
          float* wdst = trace.weights.data() + trace.matrix_offset(l, h) + r * S;
          for (std::size_t c = 0; c < c_end; ++c) wdst[c] = static_cast<float>(probs[c]);
        }
        if (req.keep_caches) {
          std::copy(probs.begin(), probs.begin() + static_cast<std::ptrdiff_t>(c_end),
                    attn.begin() + static_cast<std::ptrdiff_t>((h * S + r) * S));
        }
      }
    }

    matmul(o, lp.wo, S, D, D, attn_out);
    for (std::size_t i = 0; i < S * D; ++i) x[i] += attn_out[i];

    LayerNormState ln2;
    std::vector<double> u2;
    layer_norm(x, S, D, lp.ln2_scale, lp.ln2_offset, u2, ln2);
    matmul(u2, lp.w1, S, D, F, h1);
    act.resize(S * F);
    for (std::size_t r = 0; r < S; ++r) {
      for (std::size_t j = 0; j < F; ++j) {
        h1[r * F + j] += lp.b1[j];
        act[r * F + j] = gelu(h1[r * F + j]);
      }
    }
    matmul(act, lp.w2, S, F, D, ffn_out);
    for (std::size_t r = 0; r < S; ++r) {
      for (std::size_t d = 0; d < D; ++d) x[r * D + d] += ffn_out[r * D + d] + lp.b2[d];
    }

    for (double val : x) {
      if (!std::isfinite(val)) throw NumericError("numeric blow-up");
    }
    if (req.record) {
      float* hdst = trace.hidden.data() + l * S * D;
      for (std::size_t i = 0; i < S * D; ++i) hdst[i] = static_cast<float>(x[i]);
    }
    if (req.keep_caches) {
      LayerCache& cache = run.caches[l];
      cache.ln1 = std::move(ln1);
      cache.ln2 = std::move(ln2);
      cache.q = q;
      cache.k = k;
      cache.v = v;
      cache.attn = std::move(attn);
      cache.h1 = h1;
      cache.bidirectional = bidirectional;
    }
  }

  std::vector<double> y;
  layer_norm(x, S, D, params.final_scale, params.final_offset, y, run.final_ln);
  matmul(y, params.unembedding, S, D, V, run.vocab_logits);
  for (double val : run.vocab_logits) {
    if (!std::isfinite(val)) throw NumericError("numeric blow-up");
  }
  trace.vocab_logits = run.vocab_logits;
  trace.applied_plan = std::move(plan);
  return run;
}

std::vector<double> build_input(const TokenizedSequence& seq, const ModelParams& params,
                                std::span<const int> continuation) {
  const ModelDims& dims = params.dims;
  if (seq.embed_dim != dims.model_dim) {
    throw InvalidArgument("sequence embedding width differs from model_dim");
  }
  if (seq.embeddings.size() != seq.rows() * seq.embed_dim) {
    throw InvalidArgument("sequence embeddings do not match its layout");
  }
  const std::size_t D = dims.model_dim;
  const std::size_t S = seq.rows() + continuation.size();
  std::vector<double> x(S * D);
  for (std::size_t i = 0; i < seq.rows() * D; ++i) {
    const float e = seq.embeddings[i];
    if (!std::isfinite(e)) throw NumericError("non-finite input embedding");
    x[i] = e;
  }
  for (std::size_t t = 0; t < continuation.size(); ++t) {
    const int id = continuation[t];
    if (id < 0 || static_cast<std::size_t>(id) >= dims.vocab_size) {
      throw InvalidArgument("continuation token id outside vocabulary");
    }
    std::copy_n(params.token_embedding.begin() + static_cast<std::ptrdiff_t>(id * D), D,
                x.begin() + static_cast<std::ptrdiff_t>((seq.rows() + t) * D));
  }
  // Fixed sinusoidal positions.
  for (std::size_t pos = 0; pos < S; ++pos) {
    for (std::size_t i = 0; i < D; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(D));
      x[pos * D + i] += std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < D) x[pos * D + i + 1] += std::cos(static_cast<double>(pos) * freq);
    }
  }
  return x;
}

double cross_entropy(const std::vector<double>& vocab_logits, std::size_t V, const LossSpec& loss,
                     std::vector<double>* grad) {
  const std::size_t n = loss.target_positions.size();
  double total = 0.0;
  if (grad) grad->assign(vocab_logits.size(), 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const double* row = vocab_logits.data() + loss.target_positions[k] * V;
    const double mx = *std::max_element(row, row + V);
    double sum = 0.0;
    for (std::size_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
    const auto target = static_cast<std::size_t>(loss.target_ids[k]);
    total += -(row[target] - mx - std::log(sum));
    if (grad) {
      double* g = grad->data() + loss.target_positions[k] * V;
      for (std::size_t j = 0; j < V; ++j) {
        g[j] += (std::exp(row[j] - mx) / sum - (j == target ? 1.0 : 0.0)) / static_cast<double>(n);
      }
    }
  }
  return total / static_cast<double>(n);
}

void check_loss(const LossSpec& loss, std::size_t rows, std::size_t vocab) {
  if (loss.target_positions.empty() || loss.target_positions.size() != loss.target_ids.size()) {
    throw InvalidArgument("loss needs matching, non-empty positions and ids");
  }
  for (std::size_t k = 0; k < loss.target_positions.size(); ++k) {
    if (loss.target_positions[k] >= rows) throw InvalidArgument("loss target position out of range");
    if (loss.target_ids[k] < 0 || static_cast<std::size_t>(loss.target_ids[k]) >= vocab) {
      throw InvalidArgument("loss target id out of range");
    }
  }
}

}  // namespace

std::uint64_t forward_pass_count() { return g_forward_passes.load(std::memory_order_relaxed); }

ForwardTrace prefill(const TokenizedSequence& seq, const ModelParams& params,
                     const PrefillOptions& options, std::span<const int> continuation) {
  const std::vector<double> input = build_input(seq, params, continuation);
  ForwardRequest req;
  req.input = &input;
  req.rows = seq.rows() + continuation.size();
  req.prompt_len = seq.rows();
  req.options = options;
  return std::move(run_forward(params, req).trace);
}

GreedyResult decode_greedy(const TokenizedSequence& seq, const ModelParams& params,
                           const BiasPlan* plan, std::size_t steps) {
  if (steps < 1) throw InvalidArgument("steps must be >= 1");
  const std::size_t V = params.dims.vocab_size;
  GreedyResult result;
  for (std::size_t step = 0; step < steps; ++step) {
    const std::vector<double> input = build_input(seq, params, result.tokens);
    ForwardRequest req;
    req.input = &input;
    req.rows = seq.rows() + result.tokens.size();
    req.prompt_len = seq.rows();
    req.options.plan = plan;
    req.record = false;
    const ForwardRun run = run_forward(params, req);
    const double* last = run.vocab_logits.data() + (req.rows - 1) * V;
    result.tokens.push_back(static_cast<int>(std::max_element(last, last + V) - last));
  }
  PrefillOptions options;
  options.plan = plan;
  result.trace = prefill(seq, params, options, result.tokens);
  return result;
}

LossSpec answer_loss(const TokenizedSequence& seq) {
  if (!seq.ground_truth || seq.ground_truth->answer_token_ids.empty()) {
    throw InvalidArgument("sequence has no answer token ids");
  }
  LossSpec loss;
  const auto& ids = seq.ground_truth->answer_token_ids;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    loss.target_positions.push_back(seq.rows() - 1 + k);
    loss.target_ids.push_back(ids[k]);
  }
  return loss;
}

AttentionGrads attention_grads(const TokenizedSequence& seq, const ModelParams& params,
                               const BiasPlan* plan, const LossSpec& loss,
                               std::span<const int> continuation) {
  const ModelDims& dims = params.dims;
  const std::size_t S = seq.rows() + continuation.size();
  check_loss(loss, S, dims.vocab_size);
  const std::size_t D = dims.model_dim;
  const std::size_t H = dims.n_heads;
  const std::size_t dk = dims.head_dim;
  const std::size_t F = dims.ffn_dim();
  const std::size_t V = dims.vocab_size;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  const std::vector<double> input = build_input(seq, params, continuation);
  ForwardRequest req;
  req.input = &input;
  req.rows = S;
  req.prompt_len = seq.rows();
  req.options.plan = plan;
  req.record = false;
  req.keep_caches = true;
  ForwardRun run = run_forward(params, req);

  AttentionGrads out;
  out.dims = dims;
  out.seq_len = S;
  out.grads.assign(dims.n_layers * H * S * S, 0.0);
  out.weights.assign(dims.n_layers * H * S * S, 0.0);

  std::vector<double> g_logits;
  out.loss = cross_entropy(run.vocab_logits, V, loss, &g_logits);

  // g_y = g_logits * U^T, then back through the final norm.
  std::vector<double> g_y(S * D, 0.0);
  matmul_transposed_accumulate(g_logits, params.unembedding, S, D, V, g_y);
  std::vector<double> g(S * D, 0.0);
  layer_norm_backward(g_y, run.final_ln, params.final_scale, S, D, g);

  std::vector<double> g_act(S * F), g_u2(S * D), g_o(S * D), g_u(S * D);
  std::vector<double> g_q(S * D), g_k(S * D), g_v(S * D), g_a(S), g_z(S);
  for (std::size_t l = dims.n_layers; l-- > 0;) {
    const LayerParams& lp = params.layers[l];
    const LayerCache& cache = run.caches[l];

    // Feed-forward block: x_out = x_mid + gelu(LN2(x_mid) W1 + b1) W2 + b2.
    std::fill(g_act.begin(), g_act.end(), 0.0);
    matmul_transposed_accumulate(g, lp.w2, S, F, D, g_act);
    for (std::size_t i = 0; i < S * F; ++i) g_act[i] *= gelu_grad(cache.h1[i]);
    std::fill(g_u2.begin(), g_u2.end(), 0.0);
    matmul_transposed_accumulate(g_act, lp.w1, S, D, F, g_u2);
    layer_norm_backward(g_u2, cache.ln2, lp.ln2_scale, S, D, g);  // g is now dL/dx_mid

    // Attention block: x_mid = x_in + O Wo.
    std::fill(g_o.begin(), g_o.end(), 0.0);
    matmul_transposed_accumulate(g, lp.wo, S, D, D, g_o);
    std::fill(g_q.begin(), g_q.end(), 0.0);
    std::fill(g_k.begin(), g_k.end(), 0.0);
    std::fill(g_v.begin(), g_v.end(), 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t r = 0; r < S; ++r) {
        const std::size_t c_end = cache.bidirectional ? S : r + 1;
        const double* a_row = cache.attn.data() + (h * S + r) * S;
        const double* go = g_o.data() + r * D + h * dk;
        double dot = 0.0;
        for (std::size_t c = 0; c < c_end; ++c) {
          const double* vc = cache.v.data() + c * D + h * dk;
          double ga = 0.0;
          for (std::size_t d = 0; d < dk; ++d) ga += go[d] * vc[d];
          g_a[c] = ga;
          dot += a_row[c] * ga;
          double* gv = g_v.data() + c * D + h * dk;
          for (std::size_t d = 0; d < dk; ++d) gv[d] += a_row[c] * go[d];
        }
        const std::size_t base = out.offset(l, h, r, 0);
        for (std::size_t c = 0; c < c_end; ++c) {
          out.grads[base + c] = g_a[c];
          out.weights[base + c] = a_row[c];
        }
        // Softmax backward over the causal support.
        const double* qr = cache.q.data() + r * D + h * dk;
        double* gq = g_q.data() + r * D + h * dk;
        for (std::size_t c = 0; c <= r; ++c) {
          const double gz = a_row[c] * (g_a[c] - dot) * inv_sqrt_dk;
          if (gz == 0.0) continue;
          const double* kc = cache.k.data() + c * D + h * dk;
          double* gk = g_k.data() + c * D + h * dk;
          for (std::size_t d = 0; d < dk; ++d) {
            gq[d] += gz * kc[d];
            gk[d] += gz * qr[d];
          }
        }
      }
    }
    std::fill(g_u.begin(), g_u.end(), 0.0);
    matmul_transposed_accumulate(g_q, lp.wq, S, D, D, g_u);
    matmul_transposed_accumulate(g_k, lp.wk, S, D, D, g_u);
    matmul_transposed_accumulate(g_v, lp.wv, S, D, D, g_u);
    layer_norm_backward(g_u, cache.ln1, lp.ln1_scale, S, D, g);  // g is now dL/dx_in
  }
  return out;
}

double loss_with_perturbation(const TokenizedSequence& seq, const ModelParams& params,
                              const BiasPlan* plan, const LossSpec& loss,
                              std::span<const int> continuation,
                              const std::optional<AttentionPerturbation>& perturbation) {
  const std::size_t S = seq.rows() + continuation.size();
  check_loss(loss, S, params.dims.vocab_size);
  const std::vector<double> input = build_input(seq, params, continuation);
  ForwardRequest req;
  req.input = &input;
  req.rows = S;
  req.prompt_len = seq.rows();
  req.options.plan = plan;
  req.record = false;
  req.perturbation = perturbation;
  const ForwardRun run = run_forward(params, req);
  return cross_entropy(run.vocab_logits, params.dims.vocab_size, loss, nullptr);
}

}  // namespace camalab
