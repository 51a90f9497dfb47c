#pragma once

// Dynamic Residual Group: N residual channel-spatial attention blocks under a long skip.

#include <string>
#include <vector>

#include "drpca/dynamic_params.hpp"

namespace drpca {

/// Shared two-layer MLP (1x1 convs, no bias) applied to GAP and GMP descriptors.
struct ChannelAttentionWeights {
  ParamId fc1 = 0;  // [hidden, C, 1, 1]
  ParamId fc2 = 0;  // [C, hidden, 1, 1]
  int channels = 0;
  int hidden = 0;
};

struct RcsabWeights {
  ParamId conv1_weight = 0;
  ParamId conv1_bias = 0;
  ParamId conv2_weight = 0;
  ParamId conv2_bias = 0;
  ChannelAttentionWeights channel_attention;
  /// Emits kernel_size^2 values per sample.
  ParamGenWeights dsa_gen;
  int kernel_size = 3;
};

struct DrgWeights {
  std::vector<RcsabWeights> blocks;
  ParamId out_weight = 0;  // 1x1 conv
  ParamId out_bias = 0;
  int channels = 0;
};

struct DrgShape {
  int channels = 16;
  int blocks = 5;
  int ca_reduction = 4;
  int gen_width = 3;
  int dsa_kernel = 3;
};

template <typename T>
ChannelAttentionWeights add_channel_attention(ParameterStore<T>& store, const std::string& prefix, int channels,
                                              int reduction, Rng& rng);
template <typename T>
RcsabWeights add_rcsab(ParameterStore<T>& store, const std::string& prefix, const DrgShape& shape, Rng& rng);
template <typename T>
DrgWeights add_drg(ParameterStore<T>& store, const std::string& prefix, const DrgShape& shape, Rng& rng);

/// Per-sample k x k kernels [B,1,k,k] with entries in (0,1).
template <typename T>
Var<T> dsa_kernel(Var<T> f, const ParamGenWeights& gen, int kernel_size);

/// sigmoid(dynamic_conv(channel_mean(f), W_ds)), shape [B,1,H,W].
template <typename T>
Var<T> dsa_attention_map(Var<T> f, const ParamGenWeights& gen, int kernel_size);

/// f scaled by its dynamic spatial attention map (broadcast over channels).
template <typename T>
Var<T> dsa_apply(Var<T> f, const ParamGenWeights& gen, int kernel_size);

/// sigmoid(MLP(GAP(f)) + MLP(GMP(f))), shape [B,C,1,1].
template <typename T>
Var<T> channel_attention_weights(Var<T> f, const ChannelAttentionWeights& w);

template <typename T>
Var<T> channel_attention(Var<T> f, const ChannelAttentionWeights& w);

/// f + DSA(CA(conv(relu(conv(f))))).
template <typename T>
Var<T> rcsab_forward(Var<T> f, const RcsabWeights& w);

/// f + conv_out(RCSAB_N(...RCSAB_1(f))).
template <typename T>
Var<T> drg_forward(Var<T> f, const DrgWeights& w);

}  // namespace drpca
