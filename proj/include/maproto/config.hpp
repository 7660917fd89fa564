#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "maproto/metrics.hpp"
#include "maproto/training.hpp"

namespace maproto {

struct DataConfig {
  std::string source = "manifest";  // manifest | synthetic
  std::string manifest;
  std::size_t synth_count = 64;
  std::uint64_t synth_seed = 1;
  std::array<std::size_t, 3> crop{192, 192, 144};
  std::size_t folds = 5;
  std::string fold = "all";  // all | none | fold index held out for validation
  std::uint64_t fold_seed = 0;
};

/// Every tunable of a run. Keys are dotted paths such as `model.n_scale`.
struct RunConfig {
  NetworkConfig model;
  TrainConfig train;
  DataConfig data;
  EvalOptions eval;
  std::string out_dir = "runs/default";

  /// Sets one key from its text form. Unknown keys and malformed values throw
  /// std::invalid_argument naming the key.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// All keys in schema order.
  static std::vector<std::string> keys();
  /// One-line description of a key, for `--help-config`.
  static std::string describe(const std::string& key);

  /// `key = value` lines for every key; parsing the snapshot reproduces this config exactly.
  std::string snapshot() const;
  /// Cross-field checks (shapes, schedule, fold choice).
  void validate() const;

  /// Parses `key = value` lines; `#` starts a comment. Errors carry `source:line`.
  static RunConfig parse(const std::string& text, const std::string& source = "<config>");
  static RunConfig load(const std::filesystem::path& path);
};

/// Applies `key=value` override strings in order.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides);

/// Preprocessing options implied by the run (crop from data, target from the model input).
PreprocessOptions preprocess_options(const RunConfig& cfg);

}  // namespace maproto
