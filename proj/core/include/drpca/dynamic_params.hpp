#pragma once

// Per-stage scalar generators P(z) = sigmoid(conv2(relu(conv1(GAP(z))))).
//
// Weight structs in this library hold ParamIds into a ParameterStore; forward
// functions read the matching leaves from the tape the store was bound to.

#include <string>

#include "drpca/autograd.hpp"
#include "drpca/rng.hpp"

namespace drpca {

struct ParamGenWeights {
  ParamId conv1_weight = 0;  // [mid, in, 1, 1]
  ParamId conv1_bias = 0;    // [mid]
  ParamId conv2_weight = 0;  // [out, mid, 1, 1]
  ParamId conv2_bias = 0;    // [out]
  int in_channels = 1;
  int mid_channels = 3;
  int out_channels = 1;
};

/// Uniform(+-1/sqrt(fan_in)) weights, zero biases: a zero input therefore maps to 0.5.
template <typename T>
ParamGenWeights add_param_gen(ParameterStore<T>& store, const std::string& prefix, int in_channels,
                              int mid_channels, int out_channels, Rng& rng);

/// [B, in, H, W] -> [B, out, 1, 1], every entry in (0, 1).
template <typename T>
Var<T> param_gen_forward(Var<T> z, const ParamGenWeights& w);

/// gamma^k = P_gamma(T^{k-1}), shape [B,1,1,1].
template <typename T>
Var<T> gamma_for_stage(Var<T> t_prev, const ParamGenWeights& w);

/// gamma * T^{k-1} + (1 - gamma) * (D^{k-1} - B^k), gamma broadcast per sample.
template <typename T>
Var<T> interim_estimate(Var<T> t_prev, Var<T> d_prev, Var<T> b_k, Var<T> gamma);

/// epsilon^k = P_eps(T_interim), shape [B,1,1,1].
template <typename T>
Var<T> epsilon_for_stage(Var<T> t_interim, const ParamGenWeights& w);

/// Convenience for inspection: run a generator on a plain tensor and return one value per output entry.
template <typename T>
Tensor<T> eval_param_gen(const Tensor<T>& z, const ParameterStore<T>& store, const ParamGenWeights& w);

}  // namespace drpca
