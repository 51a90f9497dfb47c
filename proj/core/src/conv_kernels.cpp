#include "conv_kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace drpca::detail {
namespace {

typedef float VecF __attribute__((vector_size(64)));
typedef double VecD __attribute__((vector_size(64)));

template <typename T>
struct VecOf;
template <>
struct VecOf<float> {
  using type = VecF;
};
template <>
struct VecOf<double> {
  using type = VecD;
};
template <typename T>
using Vec = typename VecOf<T>::type;

template <typename T>
constexpr int kLanes = 64 / static_cast<int>(sizeof(T));

template <typename T>
Vec<T> load(const T* p) {
  Vec<T> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <typename T, typename V>
void store(T* p, V v) {
  std::memcpy(p, &v, sizeof(v));
}

template <typename T, typename V>
T lane_sum(V v) {
  T s = 0;
  for (int l = 0; l < kLanes<T>; ++l) s += v[l];
  return s;
}

constexpr int kOutBlock = 8;
constexpr int kGradBlock = 4;

}  // namespace

template <typename T>
void conv3x3_forward(const T* padded, int cin, const T* w, const T* bias, int cout, const ConvGeometry& g, T* out) {
  constexpr int L = kLanes<T>;
  static_assert(conv_chunk<T>() == 2 * L);
  const std::size_t pplane = g.padded_plane();
  const std::size_t oplane = g.out_plane();
  // Weights regrouped as [block][cin][3][3][kOutBlock], zero for missing outputs.
  const int blocks = (cout + kOutBlock - 1) / kOutBlock;
  std::vector<T> packed(static_cast<std::size_t>(blocks) * cin * 9 * kOutBlock, T(0));
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < cin; ++i)
      for (int t = 0; t < 9; ++t)
        packed[((static_cast<std::size_t>(o / kOutBlock) * cin + i) * 9 + t) * kOutBlock + o % kOutBlock] =
            w[(static_cast<std::size_t>(o) * cin + i) * 9 + t];

  for (int b = 0; b < blocks; ++b) {
    const int o0 = b * kOutBlock;
    const int nb = std::min(kOutBlock, cout - o0);
    const T* wb = packed.data() + static_cast<std::size_t>(b) * cin * 9 * kOutBlock;
    T bv[kOutBlock] = {};
    for (int o = 0; o < nb; ++o) bv[o] = bias != nullptr ? bias[o0 + o] : T(0);
    for (int y = 0; y < g.height; ++y) {
      for (int x0 = 0; x0 < g.row_width; x0 += 2 * L) {
        // Named accumulators keep all sixteen vectors in registers.
        Vec<T> a0 = Vec<T>{} + bv[0], a1 = Vec<T>{} + bv[1], a2 = Vec<T>{} + bv[2], a3 = Vec<T>{} + bv[3];
        Vec<T> a4 = Vec<T>{} + bv[4], a5 = Vec<T>{} + bv[5], a6 = Vec<T>{} + bv[6], a7 = Vec<T>{} + bv[7];
        Vec<T> c0 = a0, c1 = a1, c2 = a2, c3 = a3, c4 = a4, c5 = a5, c6 = a6, c7 = a7;
        for (int i = 0; i < cin; ++i) {
          const T* base = padded + i * pplane + static_cast<std::size_t>(y) * g.padded_width + x0;
          const T* wt = wb + static_cast<std::size_t>(i) * 9 * kOutBlock;
          for (int ky = 0; ky < 3; ++ky) {
            const T* row = base + static_cast<std::size_t>(ky) * g.padded_width;
            for (int kx = 0; kx < 3; ++kx, wt += kOutBlock) {
              const Vec<T> p0 = load<T>(row + kx);
              const Vec<T> p1 = load<T>(row + kx + L);
              a0 += wt[0] * p0; c0 += wt[0] * p1;
              a1 += wt[1] * p0; c1 += wt[1] * p1;
              a2 += wt[2] * p0; c2 += wt[2] * p1;
              a3 += wt[3] * p0; c3 += wt[3] * p1;
              a4 += wt[4] * p0; c4 += wt[4] * p1;
              a5 += wt[5] * p0; c5 += wt[5] * p1;
              a6 += wt[6] * p0; c6 += wt[6] * p1;
              a7 += wt[7] * p0; c7 += wt[7] * p1;
            }
          }
        }
        const Vec<T> lo[kOutBlock] = {a0, a1, a2, a3, a4, a5, a6, a7};
        const Vec<T> hi[kOutBlock] = {c0, c1, c2, c3, c4, c5, c6, c7};
        for (int o = 0; o < nb; ++o) {
          T* dst = out + (o0 + o) * oplane + static_cast<std::size_t>(y) * g.row_width + x0;
          store(dst, lo[o]);
          store(dst + L, hi[o]);
        }
      }
    }
  }
}

template <typename T>
void conv3x3_weight_grad(const T* padded, int cin, const T* grad, int cout, const ConvGeometry& g, T* dw) {
  constexpr int L = kLanes<T>;
  const std::size_t pplane = g.padded_plane();
  const std::size_t oplane = g.out_plane();
  const std::vector<T> zero_row(static_cast<std::size_t>(g.row_width), T(0));
  for (int o0 = 0; o0 < cout; o0 += kGradBlock) {
    const int nb = std::min(kGradBlock, cout - o0);
    const T* gp[kGradBlock];
    for (int o = 0; o < kGradBlock; ++o) gp[o] = o < nb ? grad + (o0 + o) * oplane : nullptr;
    for (int i = 0; i < cin; ++i) {
      for (int ky = 0; ky < 3; ++ky) {
        Vec<T> a00{}, a01{}, a02{}, a10{}, a11{}, a12{}, a20{}, a21{}, a22{}, a30{}, a31{}, a32{};
        for (int y = 0; y < g.height; ++y) {
          const std::size_t off = static_cast<std::size_t>(y) * g.row_width;
          const T* r0 = gp[0] + off;
          const T* r1 = gp[1] != nullptr ? gp[1] + off : zero_row.data();
          const T* r2 = gp[2] != nullptr ? gp[2] + off : zero_row.data();
          const T* r3 = gp[3] != nullptr ? gp[3] + off : zero_row.data();
          const T* row = padded + i * pplane + static_cast<std::size_t>(y + ky) * g.padded_width;
          for (int x0 = 0; x0 < g.row_width; x0 += L) {
            const Vec<T> g0 = load<T>(r0 + x0), g1 = load<T>(r1 + x0), g2 = load<T>(r2 + x0), g3 = load<T>(r3 + x0);
            const Vec<T> p0 = load<T>(row + x0), p1 = load<T>(row + x0 + 1), p2 = load<T>(row + x0 + 2);
            a00 += g0 * p0; a01 += g0 * p1; a02 += g0 * p2;
            a10 += g1 * p0; a11 += g1 * p1; a12 += g1 * p2;
            a20 += g2 * p0; a21 += g2 * p1; a22 += g2 * p2;
            a30 += g3 * p0; a31 += g3 * p1; a32 += g3 * p2;
          }
        }
        const Vec<T> acc[kGradBlock][3] = {{a00, a01, a02}, {a10, a11, a12}, {a20, a21, a22}, {a30, a31, a32}};
        for (int o = 0; o < nb; ++o)
          for (int kx = 0; kx < 3; ++kx)
            dw[((static_cast<std::size_t>(o0 + o) * cin + i) * 3 + ky) * 3 + kx] += lane_sum<T>(acc[o][kx]);
      }
    }
  }
}

template void conv3x3_forward<float>(const float*, int, const float*, const float*, int, const ConvGeometry&, float*);
template void conv3x3_forward<double>(const double*, int, const double*, const double*, int, const ConvGeometry&,
                                      double*);
template void conv3x3_weight_grad<float>(const float*, int, const float*, int, const ConvGeometry&, float*);
template void conv3x3_weight_grad<double>(const double*, int, const double*, int, const ConvGeometry&, double*);

}  // namespace drpca::detail
