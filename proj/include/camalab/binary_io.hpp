#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace camalab::io {

/// Writes `values` as little-endian IEEE-754 binary32.
void write_f32_le(const std::filesystem::path& path, std::span<const float> values);

/// Reads exactly `expected` binary32 values; a size mismatch raises
/// FormatError(blob_length_mismatch), NaN/Inf raises non_finite_values.
std::vector<float> read_f32_le(const std::filesystem::path& path, std::size_t expected);

void write_json(const std::filesystem::path& path, const nlohmann::json& doc);

/// Parse failures map to FormatError(malformed_header).
nlohmann::json read_json(const std::filesystem::path& path);

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size);
  template <typename T>
  void update_value(const T& v) { update(&v, sizeof(T)); }
  std::uint64_t value() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);

/// splitmix64 step, used to derive independent RNG streams from one seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace camalab::io
