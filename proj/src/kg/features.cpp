#include "mkbe/kg/features.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "mkbe/errors.hpp"
#include "mkbe/kg/tsv.hpp"

namespace mkbe::kg {

static_assert(std::endian::native == std::endian::little, "feature files are read by reinterpretation");

namespace {

std::uint32_t read_u32(const std::string& bytes, std::size_t offset) {
  std::uint32_t v;
  std::memcpy(&v, bytes.data() + offset, 4);
  return v;
}

void append_u32(std::string& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

}  // namespace

std::span<const float> FeatureMatrix::row(std::uint32_t i) const {
  if (i >= rows) throw std::out_of_range("feature row " + std::to_string(i) + " out of range");
  return {values.data() + static_cast<std::size_t>(i) * dim, dim};
}

FeatureMatrix read_features(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < kFeatureHeaderBytes || std::memcmp(bytes.data(), kFeatureMagic, 8) != 0)
    throw InputError(path + ": not a feature file (bad magic)");
  const auto version = read_u32(bytes, 8);
  if (version != kFeatureVersion)
    throw InputError(path + ": unsupported feature file version " + std::to_string(version));
  FeatureMatrix m;
  m.rows = read_u32(bytes, 12);
  m.dim = read_u32(bytes, 16);
  const std::size_t expected = kFeatureHeaderBytes + static_cast<std::size_t>(m.rows) * m.dim * 4;
  if (bytes.size() != expected) {
    throw InputError(path + ": dim mismatch, header declares " + std::to_string(m.rows) + "x" +
                     std::to_string(m.dim) + " (" + std::to_string(expected) + " bytes) but file has " +
                     std::to_string(bytes.size()) + " bytes");
  }
  if (m.rows > 0 && m.dim == 0) throw InputError(path + ": zero feature dim");
  m.values.resize(static_cast<std::size_t>(m.rows) * m.dim);
  std::memcpy(m.values.data(), bytes.data() + kFeatureHeaderBytes, m.values.size() * 4);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    if (!std::isfinite(m.values[i]))
      throw InputError(path + ": non-finite feature value in row " + std::to_string(i / m.dim));
  }
  return m;
}

std::string encode_features(const FeatureMatrix& m) {
  if (m.values.size() != static_cast<std::size_t>(m.rows) * m.dim)
    throw std::invalid_argument("feature matrix size does not match rows*dim");
  std::string out(kFeatureMagic, 8);
  append_u32(out, kFeatureVersion);
  append_u32(out, m.rows);
  append_u32(out, m.dim);
  out.append(reinterpret_cast<const char*>(m.values.data()), m.values.size() * 4);
  return out;
}

void write_features(const std::string& path, const FeatureMatrix& m) { write_file_atomic(path, encode_features(m)); }

std::vector<std::pair<std::string, std::uint32_t>> read_feature_map(const std::string& path) {
  const auto text = read_file(path);
  std::vector<std::pair<std::string, std::uint32_t>> out;
  for_each_line(text, [&](std::size_t lineno, std::string_view line) {
    if (line.empty()) return;
    const auto where = path + ":" + std::to_string(lineno);
    const auto f = split_tabs(line);
    if (f.size() != 2) throw InputError(where + ": expected 2 tab-separated fields");
    const auto row = parse_int(f[1], where);
    if (row < 0 || row > static_cast<long long>(UINT32_MAX)) throw InputError(where + ": bad row index");
    out.emplace_back(std::string(f[0]), static_cast<std::uint32_t>(row));
  });
  return out;
}

}  // namespace mkbe::kg
