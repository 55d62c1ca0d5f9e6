#include "camalab/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "camalab/binary_io.hpp"
#include "camalab/error.hpp"

namespace camalab {

namespace fs = std::filesystem;
using nlohmann::json;

SegmentLayout layout_from_lengths(std::span<const ElementLengths> lengths,
                                  bool caption_mode) {
  if (lengths.size() < 2) throw InvalidArgument("layout needs at least one ICD and a query");
  SegmentLayout layout;
  layout.n_shots = lengths.size() - 1;
  layout.caption_mode = caption_mode;
  std::size_t cursor = 0;
  for (const auto& len : lengths) {
    ElementLayout e;
    e.image = {cursor, cursor + len.image};
    cursor += len.image;
    e.question = {cursor, cursor + len.question};
    cursor += len.question;
    e.answer = {cursor, cursor + len.answer};
    cursor += len.answer;
    layout.elements.push_back(e);
  }
  layout.total_len = cursor;
  return layout;
}

std::vector<LayoutViolation> validate_layout(const SegmentLayout& layout) {
  std::vector<LayoutViolation> out;
  auto report = [&](std::optional<std::size_t> element, const std::string& what) {
    std::string msg = what;
    if (element) msg += " at element " + std::to_string(*element + 1);
    out.push_back({element, std::move(msg)});
  };

  if (layout.n_shots < 1) report(std::nullopt, "shot count must be at least 1");
  if (layout.elements.size() != layout.n_shots + 1) {
    report(std::nullopt, "element count must equal shot count + 1");
  }

  std::size_t cursor = 0;
  for (std::size_t k = 0; k < layout.elements.size(); ++k) {
    const auto& e = layout.elements[k];
    const Span spans[] = {e.image, e.question, e.answer};
    for (const Span& s : spans) {
      if (s.end < s.begin) report(k, "inverted span");
    }
    if (e.image.empty()) report(k, "empty image span");
    if (e.answer.empty()) report(k, "empty answer span");
    if (e.question.empty() && !layout.caption_mode) report(k, "empty question span");

    for (const Span& s : spans) {
      if (s.begin < cursor) {
        report(k, "overlap");
      } else if (s.begin > cursor) {
        report(k, "coverage gap");
      }
      cursor = std::max(cursor, s.end);
    }
  }
  if (cursor < layout.total_len) report(std::nullopt, "coverage gap before end of sequence");
  if (cursor > layout.total_len) report(std::nullopt, "spans extend past total length");
  return out;
}

Anchors anchors(const SegmentLayout& layout, std::size_t element) {
  if (element >= layout.elements.size()) throw InvalidArgument("anchors: no such element");
  const auto& e = layout.elements[element];
  if (e.answer.empty()) throw InvalidArgument("malformed element");
  Anchors a;
  a.answer_first = e.answer.begin;
  a.answer_last = e.answer.end - 1;
  if (!e.question.empty()) {
    a.question_first = e.question.begin;
  } else if (!layout.caption_mode) {
    throw InvalidArgument("malformed element");
  }
  return a;
}

void SyntheticTaskSpec::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw InvalidArgument(std::string("synthetic task: ") + what);
  };
  need(n_shots >= 1, "n_shots must be >= 1");
  need(image_tokens_per_icd >= 1, "image_tokens_per_icd must be >= 1");
  need(caption_mode || question_len >= 1, "question_len must be >= 1");
  need(answer_len >= 1, "answer_len must be >= 1");
  need(object_vocab_size >= 4, "object_vocab_size must be >= 4");
  need(embed_dim >= 1, "embed_dim must be >= 1");
  need(std::isfinite(noise_scale) && noise_scale >= 0.0, "noise_scale must be finite and >= 0");
}

namespace {

// Object table plus the marker rows shared by every element of a sequence.
struct Vocabulary {
  std::size_t dim = 0;
  std::vector<std::vector<double>> objects;
  std::vector<double> question_marker;
  std::vector<double> answer_marker;
  std::vector<double> question_type;

  std::size_t primary_count() const { return objects.size() / 2; }
};

std::vector<double> gaussian_row(std::mt19937_64& rng, std::size_t dim, double scale) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> row(dim);
  for (double& v : row) v = scale * normal(rng);
  return row;
}

Vocabulary make_vocabulary(const SyntheticTaskSpec& spec) {
  std::mt19937_64 rng(io::mix_seed(spec.seed, 0x766f636162ULL));
  Vocabulary v;
  v.dim = spec.embed_dim;
  for (std::size_t o = 0; o < spec.object_vocab_size; ++o) {
    v.objects.push_back(gaussian_row(rng, spec.embed_dim, 1.0));
  }
  v.question_marker = gaussian_row(rng, spec.embed_dim, 1.0);
  v.answer_marker = gaussian_row(rng, spec.embed_dim, 1.0);
  v.question_type = gaussian_row(rng, spec.embed_dim, 1.0);
  return v;
}

struct BuiltElement {
  std::vector<float> rows;              // length x dim
  ElementLengths lengths;
  std::vector<std::size_t> key_region;  // relative to the element start
};

struct ElementRecipe {
  std::size_t target = 0;
  std::size_t clutter = 0;
  bool is_query = false;
};

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi_exclusive) {
  return std::uniform_int_distribution<std::size_t>(lo, hi_exclusive - 1)(rng);
}

BuiltElement build_element(std::mt19937_64& rng, const Vocabulary& vocab,
                           const SyntheticTaskSpec& spec, const ElementLengths& lengths,
                           const ElementRecipe& recipe) {
  BuiltElement out;
  out.lengths = lengths;
  const std::size_t dim = vocab.dim;
  auto emit = [&](const std::vector<double>& base, double weight,
                  const std::vector<double>* extra, double extra_weight) {
    auto noise = gaussian_row(rng, dim, spec.noise_scale);
    for (std::size_t d = 0; d < dim; ++d) {
      double v = weight * base[d] + noise[d];
      if (extra) v += extra_weight * (*extra)[d];
      out.rows.push_back(static_cast<float>(v));
    }
  };

  // Image: background noise, the target object on a contiguous key region and
  // a clutter object on a second region when there is room.
  const std::size_t n_img = lengths.image;
  const std::size_t region = std::max<std::size_t>(1, n_img / 4);
  const std::size_t key_start = pick(rng, 0, n_img - region + 1);
  std::vector<int> owner(n_img, -1);
  for (std::size_t t = key_start; t < key_start + region; ++t) {
    owner[t] = 0;
    out.key_region.push_back(t);
  }
  std::vector<std::size_t> free_slots;
  for (std::size_t t = 0; t < n_img; ++t) {
    if (owner[t] < 0) free_slots.push_back(t);
  }
  if (!free_slots.empty()) {
    const std::size_t clutter_len = std::min(region, free_slots.size());
    const std::size_t first = pick(rng, 0, free_slots.size() - clutter_len + 1);
    for (std::size_t k = first; k < first + clutter_len; ++k) owner[free_slots[k]] = 1;
  }
  const std::vector<double> zeros(dim, 0.0);
  for (std::size_t t = 0; t < n_img; ++t) {
    if (owner[t] == 0) {
      emit(vocab.objects[recipe.target], 1.0, nullptr, 0.0);
    } else if (owner[t] == 1) {
      emit(vocab.objects[recipe.clutter], 1.0, nullptr, 0.0);
    } else {
      emit(zeros, 0.0, nullptr, 0.0);
    }
  }

  for (std::size_t t = 0; t < lengths.question; ++t) {
    if (t == 0) {
      emit(vocab.question_marker, 1.0, nullptr, 0.0);
    } else {
      emit(vocab.objects[recipe.target], 0.6, &vocab.question_type, 0.4);
    }
  }
  for (std::size_t t = 0; t < lengths.answer; ++t) {
    if (t == 0) {
      emit(vocab.answer_marker, 1.0, nullptr, 0.0);
    } else {
      emit(vocab.objects[recipe.target], 1.0, nullptr, 0.0);
    }
  }
  return out;
}

ElementLengths icd_lengths(const SyntheticTaskSpec& spec) {
  return {spec.image_tokens_per_icd, spec.caption_mode ? 0 : spec.question_len, spec.answer_len};
}

ElementLengths query_lengths(const SyntheticTaskSpec& spec) {
  return {spec.image_tokens_per_icd, spec.caption_mode ? 0 : spec.question_len, 1};
}

TokenizedSequence assemble(const SyntheticTaskSpec& spec, std::vector<BuiltElement> parts,
                           std::optional<std::size_t> key_icd_index,
                           std::vector<int> answer_ids) {
  std::vector<ElementLengths> lengths;
  for (const auto& p : parts) lengths.push_back(p.lengths);
  TokenizedSequence seq;
  seq.embed_dim = spec.embed_dim;
  seq.layout = layout_from_lengths(lengths, spec.caption_mode);
  GroundTruth gt;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t base = seq.layout.elements[k].image.begin;
    std::vector<std::size_t> mask;
    for (std::size_t rel : parts[k].key_region) mask.push_back(base + rel);
    gt.key_region_masks.emplace_back(std::move(mask));
    seq.embeddings.insert(seq.embeddings.end(), parts[k].rows.begin(), parts[k].rows.end());
  }
  gt.key_icd_index = key_icd_index;
  gt.answer_token_ids = std::move(answer_ids);
  seq.ground_truth = std::move(gt);
  seq.origin = spec;
  return seq;
}

}  // namespace

TokenizedSequence generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  const Vocabulary vocab = make_vocabulary(spec);
  std::mt19937_64 rng(io::mix_seed(spec.seed, 1));
  const std::size_t primary = vocab.primary_count();

  const std::size_t query_target = pick(rng, 0, primary);
  const std::size_t key_icd = pick(rng, 1, spec.n_shots + 1);  // 1-based

  std::vector<BuiltElement> parts;
  for (std::size_t i = 1; i <= spec.n_shots + 1; ++i) {
    ElementRecipe recipe;
    recipe.is_query = i == spec.n_shots + 1;
    if (recipe.is_query || i == key_icd) {
      recipe.target = query_target;
    } else {
      recipe.target = pick(rng, 0, primary - 1);
      if (recipe.target >= query_target) ++recipe.target;
    }
    recipe.clutter = pick(rng, 0, primary - 1);
    if (recipe.clutter >= recipe.target) ++recipe.clutter;
    const ElementLengths lengths = recipe.is_query ? query_lengths(spec) : icd_lengths(spec);
    parts.push_back(build_element(rng, vocab, spec, lengths, recipe));
  }

  const std::size_t n_answer = std::max<std::size_t>(1, spec.answer_len - 1);
  std::vector<int> answer_ids(n_answer, static_cast<int>(query_target));
  return assemble(spec, std::move(parts), key_icd, std::move(answer_ids));
}

TokenizedSequence perturb_key_position(const TokenizedSequence& seq, std::size_t position,
                                       std::uint64_t distractor_seed) {
  if (!seq.ground_truth || !seq.ground_truth->key_icd_index) {
    throw InvalidArgument("perturb_key_position: sequence has no key ICD");
  }
  if (!seq.origin) throw InvalidArgument("perturb_key_position: sequence has no generator spec");
  const auto& layout = seq.layout;
  const std::size_t n = layout.n_shots;
  if (n < 2) throw InvalidArgument("perturb_key_position: needs at least two ICDs");
  if (position < 1 || position > n) throw InvalidArgument("perturb_key_position: position out of range");

  const SyntheticTaskSpec& spec = *seq.origin;
  const Vocabulary vocab = make_vocabulary(spec);
  const std::size_t primary = vocab.primary_count();
  const std::size_t distractor_count = vocab.objects.size() - primary;
  const std::size_t old_key = *seq.ground_truth->key_icd_index - 1;  // 0-based element

  auto copy_element = [&](std::size_t k) {
    const auto& e = layout.elements[k];
    BuiltElement b;
    b.lengths = {e.image.size(), e.question.size(), e.answer.size()};
    const auto first = seq.embeddings.begin() + static_cast<std::ptrdiff_t>(e.image.begin * seq.embed_dim);
    const auto last = seq.embeddings.begin() + static_cast<std::ptrdiff_t>(e.answer.end * seq.embed_dim);
    b.rows.assign(first, last);
    for (std::size_t idx : seq.ground_truth->key_region_masks[k]) {
      b.key_region.push_back(idx - e.image.begin);
    }
    return b;
  };

  // Non-key ICDs fill the remaining slots in their original order, each
  // replaced by a distractor with the same segment lengths.
  std::vector<std::size_t> others;
  for (std::size_t k = 0; k < n; ++k) {
    if (k != old_key) others.push_back(k);
  }
  std::vector<BuiltElement> parts;
  std::size_t next_other = 0;
  for (std::size_t slot = 0; slot < n; ++slot) {
    if (slot + 1 == position) {
      parts.push_back(copy_element(old_key));
      continue;
    }
    const auto& src = layout.elements[others[next_other++]];
    std::mt19937_64 rng(io::mix_seed(distractor_seed, slot));
    ElementRecipe recipe;
    recipe.target = primary + pick(rng, 0, distractor_count);
    recipe.clutter = primary + pick(rng, 0, distractor_count - 1);
    if (recipe.clutter >= recipe.target) ++recipe.clutter;
    const ElementLengths lengths{src.image.size(), src.question.size(), src.answer.size()};
    parts.push_back(build_element(rng, vocab, spec, lengths, recipe));
  }
  parts.push_back(copy_element(n));
  return assemble(spec, std::move(parts), position, seq.ground_truth->answer_token_ids);
}

// ---------------------------------------------------------------------------
// Container I/O

namespace {

constexpr const char* kSequenceFormat = "camalab.sequence";
constexpr int kSequenceVersion = 1;

json span_json(const Span& s) { return json::array({s.begin, s.end}); }

Span span_from(const json& j) {
  if (!j.is_array() || j.size() != 2) throw json::type_error::create(302, "span must be [begin, end]", &j);
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>()};
}

json spec_json(const SyntheticTaskSpec& s) {
  return {{"n_shots", s.n_shots},
          {"image_tokens_per_icd", s.image_tokens_per_icd},
          {"question_len", s.question_len},
          {"answer_len", s.answer_len},
          {"object_vocab_size", s.object_vocab_size},
          {"embed_dim", s.embed_dim},
          {"noise_scale", s.noise_scale},
          {"caption_mode", s.caption_mode},
          {"seed", s.seed}};
}

SyntheticTaskSpec spec_from(const json& j) {
  SyntheticTaskSpec s;
  s.n_shots = j.at("n_shots").get<std::size_t>();
  s.image_tokens_per_icd = j.at("image_tokens_per_icd").get<std::size_t>();
  s.question_len = j.at("question_len").get<std::size_t>();
  s.answer_len = j.at("answer_len").get<std::size_t>();
  s.object_vocab_size = j.at("object_vocab_size").get<std::size_t>();
  s.embed_dim = j.at("embed_dim").get<std::size_t>();
  s.noise_scale = j.at("noise_scale").get<double>();
  s.caption_mode = j.at("caption_mode").get<bool>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

}  // namespace

void write_sequence(const TokenizedSequence& seq, const fs::path& dir) {
  if (seq.embeddings.size() != seq.rows() * seq.embed_dim) {
    throw InvalidArgument("write_sequence: embedding size does not match layout");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FormatError(FormatErrc::io_failure, "cannot create " + dir.string());

  json manifest;
  manifest["format"] = kSequenceFormat;
  manifest["version"] = kSequenceVersion;
  manifest["total_len"] = seq.rows();
  manifest["embed_dim"] = seq.embed_dim;
  manifest["n_shots"] = seq.layout.n_shots;
  manifest["caption_mode"] = seq.layout.caption_mode;
  json elements = json::array();
  for (const auto& e : seq.layout.elements) {
    elements.push_back({{"image", span_json(e.image)},
                        {"question", span_json(e.question)},
                        {"answer", span_json(e.answer)}});
  }
  manifest["elements"] = std::move(elements);
  manifest["seed"] = seq.origin ? json(seq.origin->seed) : json(nullptr);
  manifest["origin"] = seq.origin ? spec_json(*seq.origin) : json(nullptr);
  if (seq.ground_truth) {
    const auto& gt = *seq.ground_truth;
    json masks = json::array();
    for (const auto& m : gt.key_region_masks) masks.push_back(m.indices());
    manifest["ground_truth"] = {
        {"key_region_masks", std::move(masks)},
        {"key_icd_index", gt.key_icd_index ? json(*gt.key_icd_index) : json(nullptr)},
        {"answer_token_ids", gt.answer_token_ids}};
  } else {
    manifest["ground_truth"] = nullptr;
  }
  manifest["blob"] = {{"file", "embeddings.bin"},
                      {"dtype", "float32-le"},
                      {"rows", seq.rows()},
                      {"cols", seq.embed_dim}};
  io::write_f32_le(dir / "embeddings.bin", seq.embeddings);
  io::write_json(dir / "manifest.json", manifest);
}

TokenizedSequence read_sequence(const fs::path& dir) {
  const json manifest = io::read_json(dir / "manifest.json");
  TokenizedSequence seq;
  std::size_t blob_rows = 0;
  std::size_t blob_cols = 0;
  std::string blob_file;
  try {
    if (manifest.at("format").get<std::string>() != kSequenceFormat ||
        manifest.at("version").get<int>() != kSequenceVersion) {
      throw FormatError(FormatErrc::malformed_header, "unsupported format tag/version");
    }
    seq.embed_dim = manifest.at("embed_dim").get<std::size_t>();
    seq.layout.total_len = manifest.at("total_len").get<std::size_t>();
    seq.layout.n_shots = manifest.at("n_shots").get<std::size_t>();
    seq.layout.caption_mode = manifest.at("caption_mode").get<bool>();
    for (const auto& e : manifest.at("elements")) {
      seq.layout.elements.push_back(
          {span_from(e.at("image")), span_from(e.at("question")), span_from(e.at("answer"))});
    }
    if (!manifest.at("origin").is_null()) seq.origin = spec_from(manifest.at("origin"));
    const json& gtj = manifest.at("ground_truth");
    if (!gtj.is_null()) {
      GroundTruth gt;
      for (const auto& m : gtj.at("key_region_masks")) {
        gt.key_region_masks.emplace_back(m.get<std::vector<std::size_t>>());
      }
      if (!gtj.at("key_icd_index").is_null()) {
        gt.key_icd_index = gtj.at("key_icd_index").get<std::size_t>();
      }
      gt.answer_token_ids = gtj.at("answer_token_ids").get<std::vector<int>>();
      seq.ground_truth = std::move(gt);
    }
    const json& blob = manifest.at("blob");
    blob_file = blob.at("file").get<std::string>();
    blob_rows = blob.at("rows").get<std::size_t>();
    blob_cols = blob.at("cols").get<std::size_t>();
    if (blob.at("dtype").get<std::string>() != "float32-le") {
      throw FormatError(FormatErrc::malformed_header, "unsupported dtype");
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatErrc::malformed_header, e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(FormatErrc::malformed_header, e.what());
  }

  if (blob_rows != seq.layout.total_len || blob_cols != seq.embed_dim) {
    throw FormatError(FormatErrc::inconsistent_manifest, "blob shape differs from declared S x D");
  }
  if (blob_file.find('/') != std::string::npos || blob_file.find('\\') != std::string::npos) {
    throw FormatError(FormatErrc::malformed_header, "blob file must be a plain file name");
  }
  if (auto violations = validate_layout(seq.layout); !violations.empty()) {
    throw FormatError(FormatErrc::inconsistent_manifest, violations.front().message);
  }
  if (seq.ground_truth && seq.ground_truth->key_region_masks.size() != seq.layout.elements.size()) {
    throw FormatError(FormatErrc::inconsistent_manifest, "mask count differs from element count");
  }
  seq.embeddings = io::read_f32_le(dir / blob_file, blob_rows * blob_cols);
  return seq;
}

}  // namespace camalab
