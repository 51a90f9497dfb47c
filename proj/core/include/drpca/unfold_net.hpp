#pragma once

// K-stage unfolded low-rank + sparse decomposition network.
//
// Stage k maps (D^{k-1}, T^{k-1}) to (B^k, T^k, D^k):
//   B^k       = r + G_k(r),  r = D^{k-1} - T^{k-1}                 (background update)
//   T_interim = g T^{k-1} + (1 - g)(D^{k-1} - B^k),  g = P_g(T^{k-1})
//   T^k       = T_interim - e S_k(T_interim),        e = P_e(T_interim)
//   D^k       = B^k + T^k + out(DRG(in([B^k, T^k])))                (reconstruction)
// with D^0 = X and T^0 = 0.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "drpca/drg_attention.hpp"
#include "drpca/dynamic_params.hpp"
#include "drpca/scene_synth.hpp"

namespace drpca {

struct NetConfig {
  int stages = 6;
  int channels = 16;
  int lbem_blocks = 6;
  int dtem_blocks = 3;
  int rcsab_blocks = 5;
  int gen_width = 3;
  int dsa_kernel = 3;
  int ca_reduction = 4;
  bool use_gamma_gen = true;
  bool use_eps_gen = true;
  /// When off, reconstruction uses one plain residual conv block instead of the DRG.
  bool use_drg = true;
  /// Add B^k + T^k to the reconstruction output.
  bool dirm_residual_base = true;

  void validate() const;
  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

inline constexpr int kMinSpatial = 8;

/// conv3x3 -> ReLU -> conv3x3, plus identity skip.
struct ResBlockWeights {
  ParamId conv1_weight = 0;
  ParamId conv1_bias = 0;
  ParamId conv2_weight = 0;
  ParamId conv2_bias = 0;
};

/// 1-channel -> C (1x1 lift) -> residual blocks -> 1-channel (1x1 project).
struct ConvNetWeights {
  ParamId lift_weight = 0;
  ParamId lift_bias = 0;
  std::vector<ResBlockWeights> blocks;
  ParamId project_weight = 0;
  ParamId project_bias = 0;
};

struct DirmWeights {
  ParamId in_weight = 0;  // [C, 2, 1, 1]
  ParamId in_bias = 0;
  std::optional<DrgWeights> drg;
  std::optional<ResBlockWeights> plain;
  ParamId out_weight = 0;  // [1, C, 1, 1]
  ParamId out_bias = 0;
};

struct StageWeights {
  ConvNetWeights lbem;
  ConvNetWeights sparsity;
  std::optional<ParamGenWeights> gamma_gen;
  std::optional<ParamGenWeights> eps_gen;
  /// Pre-sigmoid learnable scalars used when the matching generator is off.
  std::optional<ParamId> static_gamma;
  std::optional<ParamId> static_eps;
  DirmWeights dirm;
};

template <typename T>
struct Model {
  NetConfig config;
  ParameterStore<T> params;
  std::vector<StageWeights> stages;
};

/// Deterministic initialisation from `seed`; registration order is the checkpoint order.
template <typename T>
Model<T> build_model(const NetConfig& config, std::uint64_t seed);

template <typename To, typename From>
Model<To> model_cast(const Model<From>& m);

// --- stage modules (graph level) -------------------------------------------

template <typename T>
Var<T> conv_net_forward(Var<T> x, const ConvNetWeights& w);

/// B^k = (D^{k-1} - T^{k-1}) + G(D^{k-1} - T^{k-1}).
template <typename T>
Var<T> lbem_forward(Var<T> d_prev, Var<T> t_prev, const ConvNetWeights& w);

/// Fixed values that replace the generated (or static) gamma / epsilon.
struct ScalarOverride {
  std::optional<double> gamma;
  std::optional<double> epsilon;
};

template <typename T>
using SparsityFn = std::function<Var<T>(Var<T>)>;

template <typename T>
struct DtemOutputs {
  Var<T> gamma;  // [B,1,1,1]
  Var<T> interim;
  Var<T> epsilon;  // [B,1,1,1]
  Var<T> t;
};

/// Target update. `sparsity` replaces S^k when given.
template <typename T>
DtemOutputs<T> dtem_forward(Var<T> d_prev, Var<T> b_k, Var<T> t_prev, const StageWeights& w,
                            const ScalarOverride& overrides = {}, const SparsityFn<T>& sparsity = {});

/// D^k from (B^k, T^k).
template <typename T>
Var<T> dirm_forward(Var<T> b_k, Var<T> t_k, const DirmWeights& w, bool residual_base);

template <typename T>
struct StageVars {
  Var<T> b;
  Var<T> t;
  Var<T> d;
  Var<T> gamma;
  Var<T> epsilon;
};

/// Runs all stages on a tape already bound to `model.params`. Throws NumericError
/// naming the first stage whose outputs are not finite.
template <typename T>
std::vector<StageVars<T>> net_forward(Var<T> x, const Model<T>& model);

// --- value level -------------------------------------------------------------

template <typename T>
struct StageRecord {
  Tensor<T> b;
  Tensor<T> t;
  Tensor<T> d;
  std::vector<T> gamma;
  std::vector<T> epsilon;
};

template <typename T>
struct DecompositionTrace {
  std::vector<StageRecord<T>> stages;
  /// Number of hypernetwork evaluations (gamma, epsilon and DSA generators).
  std::size_t generator_calls = 0;

  [[nodiscard]] const Tensor<T>& final_target() const { return stages.back().t; }
};

template <typename T>
DecompositionTrace<T> run_network(const Tensor<T>& x, const Model<T>& model);

/// mask = [sigmoid(T^K) >= threshold]. At threshold 0.5 a zero map is all ones.
template <typename T>
Mask predict_mask(const Tensor<T>& t_final, double threshold = 0.5);
template <typename T>
Mask predict_mask(const DecompositionTrace<T>& trace, double threshold = 0.5);

/// sigmoid(T^K), the per-pixel target score in (0,1).
template <typename T>
Tensor<T> target_scores(const Tensor<T>& t_final);

// --- checkpoint ---------------------------------------------------------------
//
// "DRPW" | u16 version | u32 n | n bytes of JSON config | u32 array count |
// per array in registration order: u16 name length | name | u8 rank (4) |
// 4 x u32 dims | float32 little-endian values.

inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const std::string& extra_json = "{}");

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path);

/// JSON header of a checkpoint, without reading the arrays.
std::string read_checkpoint_header(const std::filesystem::path& path);

std::string to_json(const NetConfig& c);
NetConfig net_config_from_json(const std::string& json);

}  // namespace drpca
