#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sssm/types.hpp"

namespace sssm::io {

/// Thrown for unreadable, malformed or checksum-mismatched artifacts.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Serializes doubles as 64-bit little-endian IEEE-754, independent of host order.
std::vector<std::uint8_t> encode_f64le(std::span<const double> values);
std::vector<double> decode_f64le(std::span<const std::uint8_t> bytes);

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// CRC-32 (zlib polynomial) rendered as 8 lowercase hex digits.
std::string crc32_hex(std::span<const std::uint8_t> bytes);

/// Full-precision scientific notation (17 significant digits).
std::string format_real(double v);

/// A named set of dense matrices stored as `manifest.json` + `tensors.f64le`.
///
/// Each tensor is written row-major. The manifest records name, shape and
/// element offset for every tensor plus a CRC-32 of the payload, and carries
/// a free-form `meta` object for the owner's fields.
struct TensorContainer {
  std::string kind;
  std::string meta_json = "{}";
  std::vector<std::pair<std::string, Matrix>> tensors;

  void add(std::string name, Matrix m) { tensors.emplace_back(std::move(name), std::move(m)); }
  const Matrix& get(const std::string& name) const;
  bool has(const std::string& name) const;

  void save(const std::filesystem::path& dir) const;
  static TensorContainer load(const std::filesystem::path& dir);
};

inline constexpr int kContainerFormatVersion = 1;

}  // namespace sssm::io
