#pragma once

// Register-blocked kernels for same-padded 3x3 convolution on one sample.
//
// Inputs are zero padded to `rows + 2` rows of `padded_width` columns per channel,
// where padded_width = row_width + 2 and row_width is the image width rounded up to
// conv_chunk<T>() columns. Columns past the image width are scratch.

#include <cstddef>

namespace drpca::detail {

template <typename T>
constexpr int conv_chunk() {
  return 128 / static_cast<int>(sizeof(T));
}

struct ConvGeometry {
  int height;
  int width;
  int row_width;
  int padded_width;

  ConvGeometry(int h, int w, int chunk)
      : height(h), width(w), row_width((w + chunk - 1) / chunk * chunk), padded_width(row_width + 2) {}

  [[nodiscard]] std::size_t padded_plane() const { return static_cast<std::size_t>(height + 2) * padded_width; }
  [[nodiscard]] std::size_t out_plane() const { return static_cast<std::size_t>(height) * row_width; }
};

/// out[o] (height x row_width) = bias[o] + sum_{i,ky,kx} w[o][i][ky][kx] in[i][y+ky][x+kx].
/// `w` is [cout, cin, 3, 3]; bias may be null.
template <typename T>
void conv3x3_forward(const T* padded, int cin, const T* w, const T* bias, int cout, const ConvGeometry& g, T* out);

/// dw[o][i][ky][kx] += sum_{y,x} grad[o][y][x] in[i][y+ky][x+kx]; `grad` is cout planes of
/// height x row_width with zero scratch columns.
template <typename T>
void conv3x3_weight_grad(const T* padded, int cin, const T* grad, int cout, const ConvGeometry& g, T* dw);

}  // namespace drpca::detail
