#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mkbe::kg {

/// Row-major float matrix read from an image feature file.
struct FeatureMatrix {
  std::uint32_t rows = 0;
  std::uint32_t dim = 0;
  std::vector<float> values;

  std::span<const float> row(std::uint32_t i) const;
};

inline constexpr char kFeatureMagic[8] = {'M', 'K', 'B', 'E', 'F', 'E', 'A', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 8 + 3 * 4;

/// Binary layout: "MKBEFEAT", u32 version, u32 row_count, u32 dim (little-endian),
/// then row_count*dim little-endian f32 values.
FeatureMatrix read_features(const std::string& path);
std::string encode_features(const FeatureMatrix& m);
void write_features(const std::string& path, const FeatureMatrix& m);

/// Companion map, one `entity<TAB>row_index` per line.
std::vector<std::pair<std::string, std::uint32_t>> read_feature_map(const std::string& path);

}  // namespace mkbe::kg
