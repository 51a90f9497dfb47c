#include "drpca/scene_synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "binary_io.hpp"
#include "file_io.hpp"

namespace drpca {
namespace {

constexpr char kDatasetMagic[] = "IRSD";
// Blobs are cut off where they fall below this fraction of their peak.
constexpr double kBlobCutoff = 0.01;
constexpr int kPlacementAttempts = 1000;

void check(bool ok, const std::string& what) {
  if (!ok) throw ValidationError("invalid SceneSpec: " + what);
}

}  // namespace

void SceneSpec::validate() const {
  check(height >= 1 && width >= 1, "height and width must be positive");
  check(height <= std::numeric_limits<std::uint16_t>::max() && width <= std::numeric_limits<std::uint16_t>::max(),
        "height and width must fit in 16 bits");
  check(bg_rank >= 1 && bg_rank <= std::min(height, width), "bg_rank must lie in [1, min(height, width)]");
  check(bg_amplitude >= 0.0 && bg_amplitude <= 1.0, "bg_amplitude must lie in [0, 1]");
  check(n_targets >= 0, "n_targets must be non-negative");
  check(target_amplitude.lo > 0.0 && target_amplitude.lo <= target_amplitude.hi && target_amplitude.hi <= 1.0,
        "target_amplitude must satisfy 0 < lo <= hi <= 1");
  check(target_sigma.lo > 0.0 && target_sigma.lo <= target_sigma.hi, "target_sigma must satisfy 0 < lo <= hi");
  check(noise_sigma >= 0.0 && std::isfinite(noise_sigma), "noise_sigma must be finite and non-negative");
}

std::vector<double> smooth_profile(int length, Rng& rng) {
  const double sigma = std::max(length / 8.0, 0.5);
  const int half = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * half + 1);
  double ksum = 0.0;
  for (int i = -half; i <= half; ++i) {
    kernel[i + half] = std::exp(-0.5 * (i / sigma) * (i / sigma));
    ksum += kernel[i + half];
  }
  for (double& k : kernel) k /= ksum;

  std::vector<double> noise(length + 2 * half);
  for (double& v : noise) v = rng.normal();
  std::vector<double> out(length, 0.0);
  for (int i = 0; i < length; ++i) {
    for (int j = 0; j <= 2 * half; ++j) out[i] += kernel[j] * noise[i + j];
  }

  double mean = 0.0;
  for (double v : out) mean += v;
  mean /= length;
  double var = 0.0;
  for (double v : out) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / length);
  const double lo = *std::min_element(out.begin(), out.end());
  for (double& v : out) v = sd > 0.0 ? (v - lo) / sd + 0.5 : 1.0;
  return out;
}

Tensor<float> background_from_profiles(std::span<const std::vector<double>> rows,
                                       std::span<const std::vector<double>> cols, double amplitude) {
  if (rows.empty() || rows.size() != cols.size()) throw ValidationError("profile lists must be nonempty and paired");
  const int height = static_cast<int>(rows.front().size());
  const int width = static_cast<int>(cols.front().size());
  std::vector<double> acc(static_cast<std::size_t>(height) * width, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<int>(rows[r].size()) != height || static_cast<int>(cols[r].size()) != width) {
      throw ValidationError("profile lengths differ");
    }
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) acc[static_cast<std::size_t>(y) * width + x] += rows[r][y] * cols[r][x];
  }
  const double peak = *std::max_element(acc.begin(), acc.end());
  const double scale = peak > 0.0 ? amplitude / peak : 0.0;
  Tensor<float> out({1, 1, height, width});
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] * scale);
  return out;
}

Tensor<float> gen_background(const SceneSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<std::vector<double>> rows;
  std::vector<std::vector<double>> cols;
  for (int r = 0; r < spec.bg_rank; ++r) {
    rows.push_back(smooth_profile(spec.height, rng));
    cols.push_back(smooth_profile(spec.width, rng));
  }
  return background_from_profiles(rows, cols, spec.bg_amplitude);
}

std::pair<Tensor<float>, Mask> gen_targets(const SceneSpec& spec, Rng& rng) {
  spec.validate();
  const int height = spec.height;
  const int width = spec.width;
  Tensor<float> layer({1, 1, height, width});
  Mask mask({1, 1, height, width});

  struct Placed {
    int y;
    int x;
    double sigma;
  };
  std::vector<Placed> placed;
  int attempts = 0;
  while (static_cast<int>(placed.size()) < spec.n_targets) {
    if (attempts++ >= kPlacementAttempts) {
      throw PlacementError("could not place " + std::to_string(spec.n_targets) + " non-overlapping targets in " +
                           std::to_string(height) + "x" + std::to_string(width) + " after " +
                           std::to_string(kPlacementAttempts) + " attempts");
    }
    const double amplitude = rng.uniform(spec.target_amplitude.lo, spec.target_amplitude.hi);
    const double sigma = rng.uniform(spec.target_sigma.lo, spec.target_sigma.hi);
    const int cy = static_cast<int>(rng.below(static_cast<std::uint64_t>(height)));
    const int cx = static_cast<int>(rng.below(static_cast<std::uint64_t>(width)));
    // Centers stay 4 sigma apart, and never closer than 2 px so half-max masks cannot touch.
    const bool clear = std::all_of(placed.begin(), placed.end(), [&](const Placed& p) {
      const double min_dist = std::max(4.0 * std::max(sigma, p.sigma), 2.0);
      return std::hypot(cy - p.y, cx - p.x) >= min_dist;
    });
    if (!clear) continue;
    placed.push_back({cy, cx, sigma});

    const double radius = sigma * std::sqrt(-2.0 * std::log(kBlobCutoff));
    const int r = static_cast<int>(std::floor(radius));
    for (int y = std::max(0, cy - r); y <= std::min(height - 1, cy + r); ++y) {
      for (int x = std::max(0, cx - r); x <= std::min(width - 1, cx + r); ++x) {
        const double d2 = static_cast<double>((y - cy) * (y - cy) + (x - cx) * (x - cx));
        const double g = std::exp(-d2 / (2.0 * sigma * sigma));
        if (g < kBlobCutoff) continue;
        layer.at(0, 0, y, x) += static_cast<float>(amplitude * g);
        if (g >= 0.5) mask.at(0, 0, y, x) = 1;
      }
    }
  }
  return {std::move(layer), std::move(mask)};
}

Scene compose_scene(const SceneSpec& spec, Rng& rng) {
  spec.validate();
  Scene s;
  s.background = gen_background(spec, rng);
  auto [layer, mask] = gen_targets(spec, rng);
  s.target_layer = std::move(layer);
  s.mask = std::move(mask);
  s.image = Tensor<float>(s.background.shape());
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    const float noise = spec.noise_sigma > 0.0 ? static_cast<float>(rng.normal(0.0, spec.noise_sigma)) : 0.0f;
    const float sum = s.background[i] + s.target_layer[i] + noise;
    s.image[i] = std::clamp(sum, 0.0f, 1.0f);
  }
  return s;
}

std::vector<Scene> make_scenes(const SceneSpec& spec, int count) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) out.push_back(compose_scene(spec, rng));
  return out;
}

Tensor<float> stack_images(std::span<const Scene> scenes) {
  std::vector<Tensor<float>> parts;
  parts.reserve(scenes.size());
  for (const auto& s : scenes) parts.push_back(s.image);
  return concat_batch<float>(parts);
}

Mask stack_masks(std::span<const Scene> scenes) {
  std::vector<Mask> parts;
  parts.reserve(scenes.size());
  for (const auto& s : scenes) parts.push_back(s.mask);
  return concat_batch<std::uint8_t>(parts);
}

void write_dataset(const std::filesystem::path& path, std::span<const Scene> scenes) {
  int height = 0;
  int width = 0;
  if (!scenes.empty()) {
    height = scenes.front().image.shape().h;
    width = scenes.front().image.shape().w;
  }
  const Shape expected{1, 1, height, width};
  for (const auto& s : scenes) {
    for (const Shape sh : {s.image.shape(), s.background.shape(), s.target_layer.shape(), s.mask.shape()}) {
      if (sh != expected) throw ShapeError("write_dataset: scene tensor " + to_string(sh) + " vs " + to_string(expected));
    }
  }
  if (scenes.size() > std::numeric_limits<std::uint32_t>::max()) throw FormatError("too many scenes");

  detail::ByteWriter w;
  w.bytes(std::string_view(kDatasetMagic, 4));
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(scenes.size()));
  w.u16(static_cast<std::uint16_t>(height));
  w.u16(static_cast<std::uint16_t>(width));
  for (const auto& s : scenes) {
    for (const Tensor<float>* t : {&s.image, &s.background, &s.target_layer}) {
      for (float v : t->values()) w.f32(v);
    }
    for (std::uint8_t m : s.mask.values()) w.u8(m);
  }
  detail::write_file(path, w.buffer());
}

std::vector<Scene> read_dataset(const std::filesystem::path& path) {
  const std::string raw = detail::read_file(path);
  detail::ByteReader r(raw);
  if (r.remaining() < 4 || r.bytes(4) != std::string_view(kDatasetMagic, 4)) {
    throw FormatError("'" + path.string() + "' is not an IRSD dataset (bad magic)");
  }
  const std::uint16_t version = r.u16();
  if (version != kDatasetVersion) {
    throw FormatError("unsupported IRSD version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  const int height = r.u16();
  const int width = r.u16();
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  const std::size_t per_scene = plane * (3 * sizeof(float) + 1);
  if (per_scene == 0 ? count != 0 && r.remaining() != 0 : r.remaining() != per_scene * count) {
    throw FormatError("IRSD payload size " + std::to_string(r.remaining()) + " does not match " +
                      std::to_string(count) + " scenes of " + std::to_string(height) + "x" + std::to_string(width));
  }

  std::vector<Scene> scenes;
  scenes.reserve(count);
  const Shape shape{1, 1, height, width};
  for (std::uint32_t i = 0; i < count; ++i) {
    Scene s;
    for (Tensor<float>* t : {&s.image, &s.background, &s.target_layer}) {
      *t = Tensor<float>(shape);
      for (float& v : t->values()) v = r.f32();
    }
    s.mask = Mask(shape);
    for (std::uint8_t& m : s.mask.values()) {
      m = r.u8();
      if (m > 1) throw FormatError("IRSD mask byte outside {0,1}");
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace drpca
