#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <fstream>

#include "drpca/scene_synth.hpp"
#include "oracles.hpp"

using namespace drpca;

namespace {

Eigen::VectorXd singular_values(const Tensor<float>& plane) {
  const Shape s = plane.shape();
  Eigen::MatrixXd m(s.h, s.w);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) m(y, x) = plane.at(0, 0, y, x);
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues();
}

double mask_density(const std::vector<Scene>& scenes) {
  double on = 0.0;
  double total = 0.0;
  for (const Scene& s : scenes) {
    for (auto v : s.mask.values()) on += v;
    total += static_cast<double>(s.mask.size());
  }
  return on / total;
}

}  // namespace

TEST_CASE("spec validation names the violated constraint") {
  SceneSpec ok;
  CHECK_NOTHROW(ok.validate());
  SceneSpec s = ok;
  s.bg_rank = 65;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = ok;
  s.target_amplitude = {0.8, 0.2};
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = ok;
  s.target_sigma = {0.0, 1.0};
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = ok;
  s.height = 0;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = ok;
  s.noise_sigma = -1.0;
  CHECK_THROWS_AS(s.validate(), ValidationError);
}

TEST_CASE("constant rank-1 profiles give a constant rank-1 background") {
  const std::vector<std::vector<double>> rows{std::vector<double>(4, 0.5)};
  const std::vector<std::vector<double>> cols{std::vector<double>(4, 0.5)};
  const Tensor<float> bg = background_from_profiles(rows, cols, 0.8);
  CHECK(bg.shape() == Shape{1, 1, 4, 4});
  // 0.25 * (0.8 / 0.25): every entry equals the requested amplitude.
  for (float v : bg.values()) CHECK(v == doctest::Approx(0.8).epsilon(1e-7));
  const Eigen::VectorXd sv = singular_values(bg);
  CHECK(sv(1) < 1e-12 * sv(0));
}

TEST_CASE("generated backgrounds are numerically low rank") {
  for (int rank : {1, 2, 3}) {
    SceneSpec spec;
    spec.bg_rank = rank;
    Rng rng(rank);
    const Eigen::VectorXd sv = singular_values(gen_background(spec, rng));
    CHECK(sv(rank) < 1e-6 * sv(0));
    CHECK(sv(rank - 1) > 1e-3 * sv(0));
  }
}

TEST_CASE("smooth profiles are positive") {
  Rng rng(4);
  for (int len : {1, 2, 17, 64}) {
    for (double v : smooth_profile(len, rng)) CHECK(v > 0.0);
  }
}

TEST_CASE("same spec and seed give bit-identical scenes") {
  SceneSpec spec;
  spec.seed = 42;
  const auto a = make_scenes(spec, 3);
  const auto b = make_scenes(spec, 3);
  CHECK(a == b);
  spec.seed = 43;
  CHECK_FALSE(make_scenes(spec, 3) == a);
}

TEST_CASE("no targets gives empty layer and mask") {
  SceneSpec spec;
  spec.n_targets = 0;
  Rng rng(1);
  const auto [layer, mask] = gen_targets(spec, rng);
  for (float v : layer.values()) CHECK(v == 0.0f);
  for (auto v : mask.values()) CHECK(v == 0);
}

TEST_CASE("a sigma 0.5 target has a half-max mask of 1 to 9 pixels") {
  SceneSpec spec;
  spec.n_targets = 1;
  spec.target_sigma = {0.5, 0.5};
  spec.target_amplitude = {1.0, 1.0};
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const auto [layer, mask] = gen_targets(spec, rng);
    int area = 0;
    for (auto v : mask.values()) area += v;
    CHECK(area >= 1);
    CHECK(area <= 9);
  }
}

TEST_CASE("mask marks exactly the pixels at or above half the blob peak") {
  SceneSpec spec;
  spec.n_targets = 1;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto [layer, mask] = gen_targets(spec, rng);
    const float peak = *std::max_element(layer.values().begin(), layer.values().end());
    for (std::size_t i = 0; i < layer.size(); ++i) {
      if (std::abs(layer[i] - 0.5f * peak) < 1e-6f) continue;
      CHECK(mask[i] == (layer[i] >= 0.5f * peak ? 1 : 0));
    }
  }
}

TEST_CASE("separated targets give one mask component each") {
  SceneSpec spec;
  spec.n_targets = 4;
  spec.target_sigma = {0.5, 2.0};
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    const auto [layer, mask] = gen_targets(spec, rng);
    CHECK(oracle::count_components(mask) == 4);
  }
}

TEST_CASE("default scenes are sparse") {
  SceneSpec spec;
  CHECK(mask_density(make_scenes(spec, 50)) < 0.01);
  // At sigma 2 the half-max disc alone holds about 21 pixels, so three targets
  // cover roughly 1.5% of a 64x64 frame.
  spec.target_sigma = {2.0, 2.0};
  int disc = 0;
  for (int y = -4; y <= 4; ++y)
    for (int x = -4; x <= 4; ++x) disc += std::exp(-(x * x + y * y) / 8.0) >= 0.5;
  CHECK(mask_density(make_scenes(spec, 50)) <= 3.0 * disc / 4096.0);
}

TEST_CASE("impossible placement raises PlacementError") {
  SceneSpec spec;
  spec.height = 8;
  spec.width = 8;
  spec.bg_rank = 1;
  spec.n_targets = 30;
  spec.target_sigma = {2.0, 2.0};
  Rng rng(0);
  CHECK_THROWS_AS(gen_targets(spec, rng), PlacementError);
}

TEST_CASE("a point target on a dark noiseless background lights one pixel") {
  SceneSpec spec;
  spec.bg_amplitude = 0.0;
  spec.n_targets = 1;
  spec.target_amplitude = {1.0, 1.0};
  spec.target_sigma = {0.3, 0.3};
  spec.noise_sigma = 0.0;
  Rng rng(8);
  const Scene s = compose_scene(spec, rng);
  int nonzero = 0;
  for (float v : s.image.values()) nonzero += v != 0.0f;
  CHECK(nonzero == 1);
}

TEST_CASE("noiseless composition is the plain sum before clipping") {
  SceneSpec spec;
  spec.noise_sigma = 0.0;
  spec.bg_amplitude = 0.3;
  spec.target_amplitude = {0.2, 0.6};
  Rng rng(2);
  const Scene s = compose_scene(spec, rng);
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    const float sum = s.background[i] + s.target_layer[i];
    CHECK(s.image[i] == std::clamp(sum, 0.0f, 1.0f));
  }
}

TEST_CASE("noise has the expected mean absolute deviation") {
  SceneSpec spec;
  spec.noise_sigma = 0.01;
  Rng rng(6);
  double acc = 0.0;
  std::size_t n = 0;
  for (int k = 0; k < 5; ++k) {
    const Scene s = compose_scene(spec, rng);
    for (std::size_t i = 0; i < s.image.size(); ++i) {
      const float clean = s.background[i] + s.target_layer[i];
      if (s.image[i] <= 0.0f || s.image[i] >= 1.0f) continue;
      acc += std::abs(s.image[i] - clean);
      ++n;
    }
  }
  const double mad = acc / static_cast<double>(n);
  CHECK(mad >= 0.005);
  CHECK(mad <= 0.012);
  CHECK(mad == doctest::Approx(0.01 * std::sqrt(2.0 / M_PI)).epsilon(0.05));
}

TEST_CASE("dataset files round trip") {
  oracle::TempDir dir("synth");
  SceneSpec spec;
  spec.height = 16;
  spec.width = 24;
  const auto scenes = make_scenes(spec, 10);
  write_dataset(dir / "d.irsd", scenes);
  CHECK(read_dataset(dir / "d.irsd") == scenes);
  CHECK(std::filesystem::file_size(dir / "d.irsd") == 14 + 10 * 16 * 24 * 13);

  write_dataset(dir / "empty.irsd", std::vector<Scene>{});
  CHECK(read_dataset(dir / "empty.irsd").empty());
}

TEST_CASE("corrupted dataset files are rejected") {
  oracle::TempDir dir("corrupt");
  SceneSpec spec;
  spec.height = 8;
  spec.width = 8;
  spec.bg_rank = 1;
  spec.n_targets = 1;
  write_dataset(dir / "d.irsd", make_scenes(spec, 2));
  std::string bytes;
  {
    std::ifstream in(dir / "d.irsd", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(read_dataset(write("magic", bad_magic)), FormatError);
  CHECK_THROWS_AS(read_dataset(write("trunc", bytes.substr(0, bytes.size() - 1))), FormatError);
  CHECK_THROWS_AS(read_dataset(write("long", bytes + "x")), FormatError);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(read_dataset(write("ver", bad_version)), FormatError);
  std::string bad_mask = bytes;
  bad_mask.back() = 2;
  CHECK_THROWS_AS(read_dataset(write("mask", bad_mask)), FormatError);
  CHECK_THROWS_AS(read_dataset(dir / "missing"), IoError);
}

TEST_CASE("stacking scenes builds a batch") {
  SceneSpec spec;
  spec.height = 8;
  spec.width = 8;
  spec.bg_rank = 1;
  spec.n_targets = 1;
  const auto scenes = make_scenes(spec, 3);
  CHECK(stack_images(scenes).shape() == Shape{3, 1, 8, 8});
  CHECK(stack_masks(scenes).shape() == Shape{3, 1, 8, 8});
}
