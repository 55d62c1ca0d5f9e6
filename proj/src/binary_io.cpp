#include "camalab/binary_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "camalab/error.hpp"

namespace camalab::io {

namespace {

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

}  // namespace

void write_f32_le(const std::filesystem::path& path, std::span<const float> values) {
  std::vector<std::uint32_t> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    words[i] = to_le(std::bit_cast<std::uint32_t>(values[i]));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrc::io_failure, "cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(words.data()),
            static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  if (!out) throw FormatError(FormatErrc::io_failure, "write failed: " + path.string());
}

std::vector<float> read_f32_le(const std::filesystem::path& path, std::size_t expected) {
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError(FormatErrc::io_failure, "cannot stat " + path.string());
  if (bytes != expected * sizeof(float)) {
    std::ostringstream msg;
    msg << path.string() << " holds " << bytes << " bytes, expected "
        << expected * sizeof(float);
    throw FormatError(FormatErrc::blob_length_mismatch, msg.str());
  }
  std::vector<std::uint32_t> words(expected);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrc::io_failure, "cannot open " + path.string());
  in.read(reinterpret_cast<char*>(words.data()),
          static_cast<std::streamsize>(expected * sizeof(std::uint32_t)));
  if (!in) throw FormatError(FormatErrc::blob_length_mismatch, "short read: " + path.string());

  std::vector<float> values(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    values[i] = std::bit_cast<float>(to_le(words[i]));
    if (!std::isfinite(values[i])) {
      throw FormatError(FormatErrc::non_finite_values,
                        path.string() + " at element " + std::to_string(i));
    }
  }
  return values;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& doc) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(FormatErrc::io_failure, "cannot open " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw FormatError(FormatErrc::io_failure, "write failed: " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrc::io_failure, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrc::malformed_header, path.string() + ": " + e.what());
  }
}

void Fnv1a::update(const void* data, std::size_t size) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    state_ ^= p[i];
    state_ *= 0x100000001b3ULL;
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace camalab::io
