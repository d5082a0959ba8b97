#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mkbe/impute/impute.hpp"
#include "mkbe/kg/kb.hpp"
#include "mkbe/train/train.hpp"

namespace mkbe::cli {

/// Input files of a KB. Relative paths resolve against the config file.
struct KbSources {
  std::string schema;
  std::string train;
  std::string valid;
  std::string test;
  std::string numeric;
  std::string categorical;
  std::string text;
  std::string image_features;
  std::string image_map;
  bool year_filter = false;
  double attribute_holdout = 0.0;  // fraction of numeric/categorical train triples moved to test
  std::uint64_t attribute_holdout_seed = 0;

  nlohmann::json to_json() const;
};

struct EvalSettings {
  std::string task = "auto";  // auto | links | ratings
  std::string split = "test";
  std::vector<int> ks{1, 2, 3, 10};
  std::string rating_decoder = "expectation";
  std::size_t batch = 256;

  nlohmann::json to_json() const;
};

struct ImputeTarget {
  std::string relation;
  std::optional<int> lo;
  std::optional<int> hi;
};

struct ImputeSettings {
  std::vector<ImputeTarget> targets;
  std::vector<std::string> methods{"neural", "search"};
  impute::DecoderConfig decoder;

  nlohmann::json to_json() const;
};

/// Contents of a run config file plus the global seed.
struct RunConfig {
  std::string output_dir;
  KbSources kb;
  train::TrainConfig train;
  EvalSettings eval;
  ImputeSettings impute;
  std::uint64_t seed = 0;

  /// Strict: unknown keys are rejected and every referenced path must exist.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static RunConfig load(const std::string& path);
  nlohmann::json to_json() const;

  /// First 12 hex digits of the SHA-1 of the canonical config with input
  /// paths replaced by content hashes and without the seed or output dir.
  std::string hash() const;
  std::filesystem::path run_dir() const;
  std::filesystem::path prepared_path() const;
};

/// Git blob id: SHA-1 of "blob <size>\0" followed by the bytes.
std::string git_blob_sha1(std::string_view bytes);
/// Blob ids of every configured input file, keyed by config field.
nlohmann::json input_hashes(const KbSources& sources);

/// Loads schema, triples and attributes, applies the attribute holdout and
/// finalizes.
kg::MultimodalKB build_kb(const KbSources& sources);

/// Command-line overrides applied on top of a RunConfig.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  bool per_relation = false;
  std::optional<std::vector<std::string>> modalities;
  std::string checkpoint;
};

/// Runs prepare | train | eval | impute. Returns the process exit code:
/// 0 ok, 2 input error, 3 state error.
int run_command(std::string_view command, const std::string& config_path, const Overrides& overrides,
                std::ostream& out, std::ostream& err);

}  // namespace mkbe::cli
