#pragma once

// Training loss and evaluation metrics: pixel IoU/F1, object-level Pd/Fa and ROC.

#include <iosfwd>
#include <vector>

#include "drpca/scene_synth.hpp"
#include "drpca/tensor.hpp"
#include "drpca/unfold_net.hpp"

namespace drpca {

struct LossConfig {
  double lambda_rec = 0.1;
  double smooth_eps = 1e-6;

  void validate() const;
};

/// 1 - (sum p g + eps) / (sum p + sum g - sum p g + eps), p = sigmoid(logits), averaged over the batch.
template <typename T>
double soft_iou_loss(const Tensor<T>& logits, const Mask& gt, const LossConfig& cfg = {});

/// Mean of squared differences.
template <typename T>
double recon_loss(const Tensor<T>& d_final, const Tensor<T>& d_input);

struct LossParts {
  double seg = 0.0;
  double rec = 0.0;
  double total = 0.0;
};

template <typename T>
LossParts total_loss(const DecompositionTrace<T>& trace, const Mask& gt, const Tensor<T>& x_input,
                     const LossConfig& cfg = {});

/// Graph-level loss used for training; returns the scalar node plus its two parts.
template <typename T>
struct LossVars {
  Var<T> total;
  Var<T> seg;
  Var<T> rec;
};
template <typename T>
LossVars<T> total_loss(const std::vector<StageVars<T>>& stages, const Tensor<T>& gt, Var<T> x_input,
                       const LossConfig& cfg = {});

struct PixelCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  PixelCounts& operator+=(const PixelCounts& o);
  /// Empty prediction and empty truth count as a perfect match.
  [[nodiscard]] double iou() const;
  [[nodiscard]] double f1() const;
};

PixelCounts pixel_counts(const Mask& pred, const Mask& gt);

struct PixelMetrics {
  double iou;
  double f1;
};

PixelMetrics pixel_metrics(const Mask& pred, const Mask& gt);

/// Connected components of a binary plane with 8-connectivity. Labels are 1..count, 0 is background.
struct Components {
  std::vector<int> labels;
  int count = 0;
  int height = 0;
  int width = 0;
};
Components connected_components(const Mask& m, int n = 0);

struct ObjectCounts {
  std::uint64_t gt_objects = 0;
  std::uint64_t detected = 0;
  std::uint64_t false_pixels = 0;
  std::uint64_t pixels = 0;

  ObjectCounts& operator+=(const ObjectCounts& o);
  /// Defined as 1 when there are no ground-truth objects.
  [[nodiscard]] double pd() const;
  /// False-alarm pixels per 10^6 pixels.
  [[nodiscard]] double fa() const;
};

/// Greedy one-to-one matching by descending IoU, matched when IoU >= 0.5. Every sample of the batch is scored.
ObjectCounts object_counts(const Mask& pred, const Mask& gt);

struct ObjectMetrics {
  double pd;
  double fa;
};

ObjectMetrics object_metrics(const Mask& pred, const Mask& gt);

struct RocPoint {
  double threshold;
  double fa;
  double pd;
};

/// Thresholds i/(n-1), i = 0..n-1. Points are sorted by fa; pd is carried forward as a running
/// maximum so the curve never decreases.
std::vector<RocPoint> roc_curve(const Tensor<float>& scores, const Mask& gt, int n_thresholds);

/// Per-threshold object counts, for aggregating a curve over several batches.
std::vector<ObjectCounts> roc_counts(const Tensor<float>& scores, const Mask& gt, int n_thresholds);
std::vector<RocPoint> roc_from_counts(const std::vector<ObjectCounts>& counts);

Mask threshold_scores(const Tensor<float>& scores, double threshold);

struct MetricReport {
  double iou = 0.0;
  double f1 = 0.0;
  double pd = 0.0;
  double fa = 0.0;
  std::vector<RocPoint> roc;
};

/// "threshold,fa_per_1e6,pd" rows.
void write_roc_csv(std::ostream& os, const std::vector<RocPoint>& roc);

}  // namespace drpca
