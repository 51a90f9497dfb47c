#pragma once

// Adam training with a polynomial learning-rate decay, evaluation, gradient checking
// and the ablation grids.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "drpca/losses_metrics.hpp"
#include "drpca/scene_synth.hpp"
#include "drpca/unfold_net.hpp"

namespace drpca {

enum class Precision { f32, f64 };

/// Defaults are the desk-scale setup; paper_scale() returns the full-size one.
struct TrainConfig {
  int stages = 3;
  int c_int = 16;
  int rcsab_n = 5;
  int gen_width = 3;
  double lr = 1e-4;
  int batch = 8;
  int epochs = 50;
  double lambda_rec = 0.1;
  bool use_gamma_gen = true;
  bool use_eps_gen = true;
  bool use_drg = true;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;

  void validate() const;
  [[nodiscard]] NetConfig net_config() const;
  [[nodiscard]] LossConfig loss_config() const;
  static TrainConfig paper_scale();
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// base * (1 - iter/total)^0.9.
double poly_lr(std::int64_t iter, std::int64_t total, double base);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double seg_loss = 0.0;
  double rec_loss = 0.0;
  /// Rate used by the last iteration of the epoch.
  double lr = 0.0;
  double iou = 0.0;
  double f1 = 0.0;
  double pd = 0.0;
  double fa = 0.0;
  std::vector<double> gamma_mean;
  std::vector<double> eps_mean;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  /// Rate applied at every optimizer step, in order.
  std::vector<double> step_lr;
  std::int64_t total_iters = 0;

  void write_csv(std::ostream& os) const;
};

template <typename T>
struct TrainResult {
  Model<T> model;
  TrainLog log;
  /// Set when training stopped on a non-finite loss; `model` then holds the last good weights.
  std::optional<std::string> abort_reason;
};

struct TrainOptions {
  /// Written after every epoch and on abort.
  std::optional<std::filesystem::path> checkpoint;
  /// Evaluate on the validation set after every epoch.
  bool eval_each_epoch = true;
  std::function<void(const EpochRecord&)> on_epoch;
};

template <typename T>
TrainResult<T> train(const TrainConfig& config, std::span<const Scene> train_set, std::span<const Scene> val_set,
                     const TrainOptions& options = {});

/// Adam with beta1 0.9, beta2 0.999, eps 1e-8.
template <typename T>
class Adam {
 public:
  explicit Adam(const ParameterStore<T>& store);
  void step(ParameterStore<T>& store, const std::vector<Tensor<T>>& grads, double lr);
  [[nodiscard]] std::int64_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::int64_t t_ = 0;
};

// --- evaluation ------------------------------------------------------------

inline constexpr int kRocThresholds = 64;

/// Scores in [0,1] per scene, same shapes as the masks.
MetricReport evaluate_scores(std::span<const Tensor<float>> scores, std::span<const Mask> masks,
                             int n_thresholds = kRocThresholds);

template <typename T>
MetricReport evaluate(const Model<T>& model, std::span<const Scene> test_set, int n_thresholds = kRocThresholds,
                      int batch = 8);

/// Loads a checkpoint and checks it against the data before evaluating.
MetricReport evaluate_checkpoint(const std::filesystem::path& ckpt, std::span<const Scene> test_set,
                                 int n_thresholds = kRocThresholds);

/// Checkpoint metadata JSON recording what a model was trained on.
std::string training_metadata(const TrainConfig& config, int height, int width);

// --- gradient check ---------------------------------------------------------

using LossClosure = std::function<Var<double>(Tape<double>&)>;

struct ParamEntry {
  ParamId id;
  std::size_t index;
};

/// `count` entries drawn uniformly over all scalars of the store.
std::vector<ParamEntry> sample_param_entries(const ParameterStore<double>& store, std::size_t count,
                                             std::uint64_t seed);

/// Central differences against reverse-mode gradients of `closure`, which must build its
/// graph on a tape bound to `store`. Relative error |a - n| / max(|a|, |n|, 1e-6).
double finite_diff_gradcheck(const LossClosure& closure, ParameterStore<double>& store,
                             std::span<const ParamEntry> entries, double eps = 1e-4);

// --- ablation ----------------------------------------------------------------

enum class AblationAxis { components, stages, rcsab, lambda, gen_width };

AblationAxis parse_axis(const std::string& name);
std::string axis_name(AblationAxis axis);

struct AblationPoint {
  std::string label;
  TrainConfig config;
};

/// Grid points for one axis, every point trained with the base seed.
std::vector<AblationPoint> ablation_grid(const TrainConfig& base, AblationAxis axis);

struct AblationRow {
  AblationPoint point;
  MetricReport report;
};

std::vector<AblationRow> ablate(const TrainConfig& base, AblationAxis axis, std::span<const Scene> train_set,
                                std::span<const Scene> test_set,
                                const std::function<void(const AblationRow&)>& on_row = {});

/// FNV-1a over the canonical config text, as 16 hex digits.
std::string config_fingerprint(const TrainConfig& config);

void write_ablation_csv(std::ostream& os, std::span<const AblationRow> rows);

std::string to_string(Precision p);

}  // namespace drpca
