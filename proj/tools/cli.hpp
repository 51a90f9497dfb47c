#pragma once

// Command-line front end: synth | train | eval | decompose | ablate.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "drpca/scene_synth.hpp"
#include "drpca/train_eval.hpp"

namespace drpca::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kIoError = 3,
  kNumericAbort = 4,
  kCompatibility = 5,
};

/// Everything an INI file can set.
struct CliConfig {
  SceneSpec data;
  int count = 200;
  int n_train = 200;
  int n_test = 50;
  TrainConfig train;
  std::string axis = "components";
};

/// Sections [data] [model] [train] [loss] [ablation]; unknown sections or keys throw ConfigError.
CliConfig parse_config(std::istream& in);
CliConfig load_config(const std::filesystem::path& path);

/// DRPCA_SEED, when set, replaces both the data and the training seed.
void apply_seed_env(CliConfig& cfg);

/// 8-bit binary PGM (P5), min-max normalised. A constant image maps to black.
void write_pgm(const std::filesystem::path& path, const Tensor<float>& plane);
/// Reads a P5 image with maxval 255 into [0, 1].
Tensor<float> read_pgm(const std::filesystem::path& path);

/// u16 height | u16 width | float32 little-endian values.
void write_raw(const std::filesystem::path& path, const Tensor<float>& plane);

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace drpca::cli
