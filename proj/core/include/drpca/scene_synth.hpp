#pragma once

// Synthetic infrared scenes: a smooth low-rank background plus sparse Gaussian
// point targets, with exact ground truth and a bit-exact dataset file format.

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "drpca/rng.hpp"
#include "drpca/tensor.hpp"

namespace drpca {

using Mask = Tensor<std::uint8_t>;

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct SceneSpec {
  int height = 64;
  int width = 64;
  int bg_rank = 2;
  double bg_amplitude = 0.5;
  int n_targets = 3;
  Range target_amplitude{0.3, 0.7};
  /// Gaussian sigma in pixels; "small" targets keep this at or below 2.
  Range target_sigma{0.5, 1.5};
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;

  /// Throws ValidationError naming the first violated constraint.
  void validate() const;
};

/// One generated scene; every tensor is [1,1,H,W].
struct Scene {
  Tensor<float> image;
  Tensor<float> background;
  Tensor<float> target_layer;
  Mask mask;

  friend bool operator==(const Scene&, const Scene&) = default;
};

/// Low-pass filtered white noise, shifted to be strictly positive.
std::vector<double> smooth_profile(int length, Rng& rng);

/// Sum of outer products u_i v_i^T scaled so that the maximum equals `amplitude`.
Tensor<float> background_from_profiles(std::span<const std::vector<double>> rows,
                                       std::span<const std::vector<double>> cols, double amplitude);

Tensor<float> gen_background(const SceneSpec& spec, Rng& rng);

/// Additive target layer and its half-max mask. Throws PlacementError when the
/// requested targets cannot be placed without overlap.
std::pair<Tensor<float>, Mask> gen_targets(const SceneSpec& spec, Rng& rng);

Scene compose_scene(const SceneSpec& spec, Rng& rng);

/// `count` scenes drawn from one stream seeded with spec.seed.
std::vector<Scene> make_scenes(const SceneSpec& spec, int count);

/// Stack scene images (or masks) into one [N,1,H,W] batch.
Tensor<float> stack_images(std::span<const Scene> scenes);
Mask stack_masks(std::span<const Scene> scenes);

// Dataset file: "IRSD" | u16 version | u32 count | u16 H | u16 W, then per scene the
// image, background and target layer as H*W little-endian float32 (row-major)
// followed by the mask as H*W bytes holding 0 or 1.
inline constexpr std::uint16_t kDatasetVersion = 1;

void write_dataset(const std::filesystem::path& path, std::span<const Scene> scenes);
std::vector<Scene> read_dataset(const std::filesystem::path& path);

}  // namespace drpca
