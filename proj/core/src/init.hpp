#pragma once

#include <cmath>

#include "drpca/rng.hpp"
#include "drpca/tensor.hpp"

namespace drpca::detail {

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = in_channels * k * k of a conv weight.
template <typename T>
Tensor<T> uniform_fan_in(Shape weight_shape, Rng& rng) {
  const double fan_in = static_cast<double>(weight_shape.c) * weight_shape.h * weight_shape.w;
  const double bound = 1.0 / std::sqrt(fan_in);
  Tensor<T> out(weight_shape);
  for (T& v : out.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

/// Bias vector [n,1,1,1] drawn like the weights of a layer with the given fan-in.
template <typename T>
Tensor<T> uniform_bias(int n, double fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  Tensor<T> out({n, 1, 1, 1});
  for (T& v : out.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

}  // namespace drpca::detail
