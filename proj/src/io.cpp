#include "sssm/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace sssm::io {

using nlohmann::json;

std::vector<std::uint8_t> encode_f64le(std::span<const double> values) {
  std::vector<std::uint8_t> out(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) out[i * 8 + static_cast<std::size_t>(b)] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return out;
}

std::vector<double> decode_f64le(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 8 != 0) throw FormatError("f64le payload size is not a multiple of 8");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed: " + path.string());
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path.string());
  f << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string crc32_hex(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = crc32(crc, bytes.data() + pos, chunk);
    pos += chunk;
  }
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc & 0xffffffffUL));
  return buf;
}

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.16e", v);
  return buf;
}

const Matrix& TensorContainer::get(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return m;
  throw FormatError("container has no tensor named '" + name + "'");
}

bool TensorContainer::has(const std::string& name) const {
  for (const auto& entry : tensors)
    if (entry.first == name) return true;
  return false;
}

void TensorContainer::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::vector<double> flat;
  json index = json::array();
  for (const auto& [name, m] : tensors) {
    index.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", flat.size()}});
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) flat.push_back(m(i, j));
  }
  const auto payload = encode_f64le(flat);
  json manifest = {{"kind", kind},
                   {"format_version", kContainerFormatVersion},
                   {"tensors", index},
                   {"checksum", crc32_hex(payload)},
                   {"meta", json::parse(meta_json)}};
  write_bytes(dir / "tensors.f64le", payload);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

TensorContainer TensorContainer::load(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest.json: ") + e.what());
  }
  const auto payload = read_bytes(dir / "tensors.f64le");
  if (manifest.value("format_version", -1) != kContainerFormatVersion)
    throw FormatError("unsupported container format version");
  if (manifest.value("checksum", std::string{}) != crc32_hex(payload))
    throw FormatError("container checksum mismatch in " + dir.string());
  const auto flat = decode_f64le(payload);
  TensorContainer out;
  out.kind = manifest.value("kind", std::string{});
  out.meta_json = manifest.contains("meta") ? manifest["meta"].dump() : "{}";
  for (const auto& t : manifest.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    const auto off = t.at("offset").get<std::size_t>();
    if (rows < 0 || cols < 0 || off + static_cast<std::size_t>(rows * cols) > flat.size())
      throw FormatError("tensor extends past payload: " + t.at("name").get<std::string>());
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = flat[off + static_cast<std::size_t>(i * cols + j)];
    out.add(t.at("name").get<std::string>(), std::move(m));
  }
  return out;
}

}  // namespace sssm::io
