#include "drpca/autograd.hpp"

#include "conv_kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace drpca {

// ---------------------------------------------------------------------------
// ParameterStore

template <typename T>
ParamId ParameterStore<T>::add(std::string name, Tensor<T> init) {
  if (find(name)) throw ValidationError("duplicate parameter name '" + name + "'");
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(init));
  return static_cast<ParamId>(tensors_.size() - 1);
}

template <typename T>
std::optional<ParamId> ParameterStore<T>::find(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<ParamId>(it - names_.begin());
}

template <typename T>
std::size_t ParameterStore<T>::scalar_count() const {
  std::size_t total = 0;
  for (const auto& t : tensors_) total += t.size();
  return total;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, grad_enabled_});
  return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename T>
void Tape<T>::bind(const ParameterStore<T>& store) {
  param_nodes_.clear();
  param_nodes_.reserve(store.size());
  for (ParamId i = 0; i < store.size(); ++i) param_nodes_.push_back(variable(store.tensor(i)).id);
}

template <typename T>
Var<T> Tape<T>::param(ParamId id) const {
  return {const_cast<Tape*>(this), param_nodes_.at(id)};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  bool needs = false;
  if (grad_enabled_) {
    for (const auto& v : inputs) needs = needs || (v.valid() && nodes_[v.id].requires_grad);
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, needs});
  return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename T>
Tensor<T>& Tape<T>::grad(NodeId id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
const Tensor<T>* Tape<T>::grad_if(NodeId id) const {
  const Node& n = nodes_[id];
  return n.grad.size() == n.value.size() && !n.value.empty() ? &n.grad : nullptr;
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
  if (nodes_[root.id].value.size() != 1) {
    throw ShapeError("backward() needs a scalar root, got " + to_string(nodes_[root.id].value.shape()));
  }
  grad(root.id)[0] = T(1);
  for (NodeId id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.backward && n.grad.size() == n.value.size() && !n.value.empty()) n.backward(*this, id);
  }
}

template <typename T>
Tensor<T> Tape<T>::param_grad(ParamId id) const {
  const NodeId node = param_nodes_.at(id);
  if (const Tensor<T>* g = grad_if(node)) return *g;
  return Tensor<T>(nodes_[node].value.shape());
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Ops

namespace ag {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
Tape<T>& tape_of(Var<T> a) {
  if (!a.valid()) throw ShapeError("operation on an unbound variable");
  return *a.tape;
}

template <typename T>
void same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ShapeError("variables live on different tapes");
}

template <typename T>
T sigmoid_scalar(T x) {
  const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  // Keep the result strictly inside (0,1) even where it saturates.
  return std::clamp(s, std::numeric_limits<T>::min(), std::nextafter(T(1), T(0)));
}

// Same-padded convolution as k*k shifted GEMMs. Each channel is zero padded to
// (H + 2p) x (W + 2p); output pixel (y, x) then sits at column y * (W + 2p) + x of
// every shifted view, and the two columns per row past the image width are scratch.
struct PaddedGeometry {
  int channels, height, width, k, margin, pw, ph;
  std::size_t plane, padded_plane, span;

  PaddedGeometry(int c, int h, int w, int kernel)
      : channels(c), height(h), width(w), k(kernel), margin(kernel / 2), pw(w + 2 * margin), ph(h + 2 * margin),
        plane(static_cast<std::size_t>(h) * w), padded_plane(static_cast<std::size_t>(ph) * pw),
        span(static_cast<std::size_t>(h) * pw) {}

  // Views of the last channel run 2p elements past its plane.
  [[nodiscard]] std::size_t padded_size() const { return channels * padded_plane + 2 * margin; }

  template <typename T>
  void pad(const T* x, T* dst) const {
    std::fill(dst, dst + padded_size(), T(0));
    for (int c = 0; c < channels; ++c) {
      for (int y = 0; y < height; ++y) {
        const T* src = x + c * plane + static_cast<std::size_t>(y) * width;
        std::copy(src, src + width, dst + c * padded_plane + static_cast<std::size_t>(y + margin) * pw + margin);
      }
    }
  }

  template <typename T>
  void unpad_add(const T* src, T* dx) const {
    for (int c = 0; c < channels; ++c) {
      for (int y = 0; y < height; ++y) {
        const T* s = src + c * padded_plane + static_cast<std::size_t>(y + margin) * pw + margin;
        T* d = dx + c * plane + static_cast<std::size_t>(y) * width;
        for (int xx = 0; xx < width; ++xx) d[xx] += s[xx];
      }
    }
  }

  template <typename T>
  void crop(const T* acc, int rows, T* out) const {
    for (int r = 0; r < rows; ++r) {
      for (int y = 0; y < height; ++y) {
        const T* s = acc + r * span + static_cast<std::size_t>(y) * pw;
        std::copy(s, s + width, out + r * plane + static_cast<std::size_t>(y) * width);
      }
    }
  }

  template <typename T>
  void uncrop(const T* g, int rows, T* dst) const {
    for (int r = 0; r < rows; ++r) {
      for (int y = 0; y < height; ++y) {
        const T* s = g + r * plane + static_cast<std::size_t>(y) * width;
        std::copy(s, s + width, dst + r * span + static_cast<std::size_t>(y) * pw);
      }
    }
  }

  [[nodiscard]] std::size_t offset(int tap) const {
    return static_cast<std::size_t>(tap / k) * pw + static_cast<std::size_t>(tap % k);
  }

  template <typename T>
  Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>> shifted(const T* padded, int tap) const {
    return {padded + offset(tap), channels, static_cast<Eigen::Index>(span),
            Eigen::OuterStride<>(static_cast<Eigen::Index>(padded_plane))};
  }

  template <typename T>
  Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>> shifted_mut(T* padded, int tap) const {
    return {padded + offset(tap), channels, static_cast<Eigen::Index>(span),
            Eigen::OuterStride<>(static_cast<Eigen::Index>(padded_plane))};
  }
};

// [Cout, Cin, k, k] -> [k*k, Cout, Cin].
template <typename T>
std::vector<T> split_taps(const T* w, int cout, int cin, int k) {
  const int taps = k * k;
  std::vector<T> out(static_cast<std::size_t>(taps) * cout * cin);
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < cin; ++i)
      for (int t = 0; t < taps; ++t)
        out[(static_cast<std::size_t>(t) * cout + o) * cin + i] = w[(static_cast<std::size_t>(o) * cin + i) * taps + t];
  return out;
}

// Copy planes into the zero-padded layout of the 3x3 kernels.
template <typename T>
void pad_rows(const T* x, int channels, const detail::ConvGeometry& g, T* dst) {
  const std::size_t plane = static_cast<std::size_t>(g.height) * g.width;
  std::fill(dst, dst + channels * g.padded_plane(), T(0));
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < g.height; ++y)
      std::copy(x + c * plane + static_cast<std::size_t>(y) * g.width,
                x + c * plane + static_cast<std::size_t>(y + 1) * g.width,
                dst + c * g.padded_plane() + static_cast<std::size_t>(y + 1) * g.padded_width + 1);
}

template <typename T>
void crop_rows(const T* src, int channels, const detail::ConvGeometry& g, T* dst) {
  const std::size_t plane = static_cast<std::size_t>(g.height) * g.width;
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < g.height; ++y) {
      const T* s = src + c * g.out_plane() + static_cast<std::size_t>(y) * g.row_width;
      std::copy(s, s + g.width, dst + c * plane + static_cast<std::size_t>(y) * g.width);
    }
}

// Input gradient of a 3x3 same convolution is the same convolution of the output
// gradient with the kernel flipped in space and transposed in channels.
template <typename T>
void conv3x3_backward(Tape<T>& t, NodeId x, NodeId w, const Tensor<T>& g, Shape xs, int cout, bool need_x,
                      bool need_w) {
  const detail::ConvGeometry cg(xs.h, xs.w, detail::conv_chunk<T>());
  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  const bool direct = cg.row_width == xs.w;
  std::vector<T> padded(static_cast<std::size_t>(std::max(xs.c, cout)) * cg.padded_plane());
  std::vector<T> grow(direct ? 0 : static_cast<std::size_t>(cout) * cg.out_plane(), T(0));
  std::vector<T> dxbuf(need_x ? static_cast<std::size_t>(xs.c) * cg.out_plane() : 0);
  std::vector<T> flipped;
  if (need_x) {
    const T* wv = t.value(w).data();
    flipped.resize(static_cast<std::size_t>(cout) * xs.c * 9);
    for (int o = 0; o < cout; ++o)
      for (int i = 0; i < xs.c; ++i)
        for (int tap = 0; tap < 9; ++tap)
          flipped[(static_cast<std::size_t>(i) * cout + o) * 9 + (8 - tap)] =
              wv[(static_cast<std::size_t>(o) * xs.c + i) * 9 + tap];
  }
  for (int n = 0; n < xs.n; ++n) {
    const T* gn = g.sample(n).data();
    if (need_w) {
      const T* rows = gn;
      if (!direct) {
        for (int o = 0; o < cout; ++o)
          for (int y = 0; y < xs.h; ++y)
            std::copy(gn + o * plane + static_cast<std::size_t>(y) * xs.w,
                      gn + o * plane + static_cast<std::size_t>(y + 1) * xs.w,
                      grow.data() + o * cg.out_plane() + static_cast<std::size_t>(y) * cg.row_width);
        rows = grow.data();
      }
      pad_rows(t.value(x).sample(n).data(), xs.c, cg, padded.data());
      detail::conv3x3_weight_grad(padded.data(), xs.c, rows, cout, cg, t.grad(w).data());
    }
    if (need_x) {
      pad_rows(gn, cout, cg, padded.data());
      detail::conv3x3_forward(padded.data(), cout, flipped.data(), static_cast<const T*>(nullptr), xs.c, cg,
                              dxbuf.data());
      T* dx = t.grad(x).sample(n).data();
      for (int c = 0; c < xs.c; ++c)
        for (int y = 0; y < xs.h; ++y) {
          const T* s = dxbuf.data() + c * cg.out_plane() + static_cast<std::size_t>(y) * cg.row_width;
          T* d = dx + c * plane + static_cast<std::size_t>(y) * xs.w;
          for (int xx = 0; xx < xs.w; ++xx) d[xx] += s[xx];
        }
    }
  }
}

// Inverse layout of split_taps, accumulated into dw.
template <typename T>
void merge_taps(const T* taps_grad, int cout, int cin, int k, T* dw) {
  const int taps = k * k;
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < cin; ++i)
      for (int t = 0; t < taps; ++t)
        dw[(static_cast<std::size_t>(o) * cin + i) * taps + t] +=
            taps_grad[(static_cast<std::size_t>(t) * cout + o) * cin + i];
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  same_tape(a, b);
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  const auto av = a.value().values();
  const auto bv = b.value().values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  return tape_of(a).record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    for (NodeId target : {a, b}) {
      if (!t.requires_grad(target)) continue;
      auto d = t.grad(target).values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  same_tape(a, b);
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  const auto av = a.value().values();
  const auto bv = b.value().values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] - bv[i];
  return tape_of(a).record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(a)) {
      auto d = t.grad(a).values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto d = t.grad(b).values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  same_tape(a, b);
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  const auto av = a.value().values();
  const auto bv = b.value().values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  return tape_of(a).record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(a)) {
      const auto bv = t.value(b).values();
      auto d = t.grad(a).values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      const auto av = t.value(a).values();
      auto d = t.grad(b).values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out(a.shape());
  const auto av = a.value().values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * factor;
  return tape_of(a).record(std::move(out), {a}, [a = a.id, factor](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    auto d = t.grad(a).values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> one_minus(Var<T> a) {
  Tensor<T> out(a.shape());
  const auto av = a.value().values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = T(1) - av[i];
  return tape_of(a).record(std::move(out), {a}, [a = a.id](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    auto d = t.grad(a).values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
  });
}

template <typename T>
Var<T> bcast_mul(Var<T> x, Var<T> s) {
  same_tape(x, s);
  const Shape xs = x.shape();
  const Shape ss = s.shape();
  auto fits = [](int sd, int xd) { return sd == xd || sd == 1; };
  if (ss.n != xs.n || !fits(ss.c, xs.c) || !fits(ss.h, xs.h) || !fits(ss.w, xs.w)) {
    throw ShapeError("bcast_mul: cannot broadcast " + to_string(ss) + " onto " + to_string(xs));
  }
  // Broadcast index of s for element (n,c,h,w) of x.
  auto s_index = [xs, ss](int n, int c, int h, int w) {
    return ((static_cast<std::size_t>(n) * ss.c + (ss.c == 1 ? 0 : c)) * ss.h + (ss.h == 1 ? 0 : h)) * ss.w +
           (ss.w == 1 ? 0 : w);
  };
  Tensor<T> out(xs);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& sv = s.value();
  std::size_t i = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      for (int h = 0; h < xs.h; ++h)
        for (int w = 0; w < xs.w; ++w, ++i) out[i] = xv[i] * sv[s_index(n, c, h, w)];
  return tape_of(x).record(std::move(out), {x, s}, [x = x.id, s = s.id, xs, s_index](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& sv = t.value(s);
    Tensor<T>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
    Tensor<T>* gs = t.requires_grad(s) ? &t.grad(s) : nullptr;
    std::size_t i = 0;
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c)
        for (int h = 0; h < xs.h; ++h)
          for (int w = 0; w < xs.w; ++w, ++i) {
            const std::size_t j = s_index(n, c, h, w);
            if (gx) (*gx)[i] += g[i] * sv[j];
            if (gs) (*gs)[j] += g[i] * xv[i];
          }
  });
}

template <typename T>
Var<T> expand_batch(Var<T> x, int n) {
  const Shape xs = x.shape();
  if (xs.n != 1 || n < 1) throw ShapeError("expand_batch needs a batch-1 input, got " + to_string(xs));
  Tensor<T> out({n, xs.c, xs.h, xs.w});
  for (int i = 0; i < n; ++i) std::copy(x.value().values().begin(), x.value().values().end(), out.sample(i).begin());
  return tape_of(x).record(std::move(out), {x}, [x = x.id, n](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    auto d = t.grad(x).values();
    for (int i = 0; i < n; ++i) {
      const auto gi = g.sample(i);
      for (std::size_t j = 0; j < d.size(); ++j) d[j] += gi[j];
    }
  });
}


template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (T& v : out.values()) v = v > T(0) ? v : T(0);
  return tape_of(x).record(std::move(out), {x}, [x = x.id](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    const auto o = t.value(self).values();
    auto d = t.grad(x).values();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (o[i] > T(0)) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> out(x.shape());
  const auto in = x.value().values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = sigmoid_scalar(in[i]);
  return tape_of(x).record(std::move(out), {x}, [x = x.id](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    const auto s = t.value(self).values();
    auto d = t.grad(x).values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * s[i] * (T(1) - s[i]);
  });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias) {
  same_tape(x, w);
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  if (ws.c != xs.c || ws.h != ws.w || ws.h % 2 == 0) {
    throw ShapeError("conv2d: weight " + to_string(ws) + " incompatible with input " + to_string(xs));
  }
  const int k = ws.h;
  if (k > 1 && (xs.h < k || xs.w < k)) {
    throw ShapeError("conv2d: spatial size of " + to_string(xs) + " is smaller than kernel " + std::to_string(k));
  }
  if (bias.valid()) {
    same_tape(x, bias);
    if (bias.value().size() != static_cast<std::size_t>(ws.n)) {
      throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " for " + std::to_string(ws.n) + " outputs");
    }
  }
  const int cout = ws.n;
  const PaddedGeometry geo(xs.c, xs.h, xs.w, k);
  Tensor<T> out({xs.n, cout, xs.h, xs.w});
  if (k == 1) {
    const CMapR<T> wm(w.value().data(), cout, xs.c);
    for (int n = 0; n < xs.n; ++n) {
      MapR<T> om(out.sample(n).data(), cout, geo.plane);
      om.noalias() = wm * CMapR<T>(x.value().sample(n).data(), xs.c, geo.plane);
    }
  } else if (k == 3) {
    const detail::ConvGeometry cg(xs.h, xs.w, detail::conv_chunk<T>());
    std::vector<T> padded(static_cast<std::size_t>(xs.c) * cg.padded_plane());
    std::vector<T> buf(cg.row_width == xs.w ? 0 : static_cast<std::size_t>(cout) * cg.out_plane());
    const T* b = bias.valid() ? bias.value().data() : nullptr;
    for (int n = 0; n < xs.n; ++n) {
      pad_rows(x.value().sample(n).data(), xs.c, cg, padded.data());
      T* dst = buf.empty() ? out.sample(n).data() : buf.data();
      detail::conv3x3_forward(padded.data(), xs.c, w.value().data(), b, cout, cg, dst);
      if (!buf.empty()) crop_rows(buf.data(), cout, cg, out.sample(n).data());
    }
  } else {
    const std::vector<T> taps = split_taps(w.value().data(), cout, xs.c, k);
    std::vector<T> padded(geo.padded_size());
    std::vector<T> acc(static_cast<std::size_t>(cout) * geo.span);
    for (int n = 0; n < xs.n; ++n) {
      geo.pad(x.value().sample(n).data(), padded.data());
      MapR<T> am(acc.data(), cout, geo.span);
      am.setZero();
      for (int tap = 0; tap < k * k; ++tap) {
        am.noalias() += CMapR<T>(taps.data() + static_cast<std::size_t>(tap) * cout * xs.c, cout, xs.c) *
                        geo.shifted(padded.data(), tap);
      }
      geo.crop(acc.data(), cout, out.sample(n).data());
    }
  }
  if (bias.valid() && k != 3) {
    const T* b = bias.value().data();
    for (int n = 0; n < xs.n; ++n) {
      for (int o = 0; o < cout; ++o) {
        for (T& v : out.plane(n, o)) v += b[o];
      }
    }
  }
  Tape<T>& tape = tape_of(x);
  return tape.record(
      std::move(out), {x, w, bias},
      [x = x.id, w = w.id, b = bias.valid() ? bias.id : NodeId(-1), xs, k, cout, geo](Tape<T>& t, NodeId self) {
        const Tensor<T>& g = t.grad(self);
        const bool need_x = t.requires_grad(x);
        const bool need_w = t.requires_grad(w);
        const bool need_b = b != NodeId(-1) && t.requires_grad(b);
        if (need_b) {
          T* db = t.grad(b).data();
          for (int n = 0; n < xs.n; ++n) {
            for (int o = 0; o < cout; ++o) {
              T s = 0;
              for (T v : g.plane(n, o)) s += v;
              db[o] += s;
            }
          }
        }
        if (!need_x && !need_w) return;
        if (k == 1) {
          const CMapR<T> wm(t.value(w).data(), cout, xs.c);
          for (int n = 0; n < xs.n; ++n) {
            const CMapR<T> gm(g.sample(n).data(), cout, geo.plane);
            if (need_w) {
              MapR<T>(t.grad(w).data(), cout, xs.c).noalias() +=
                  gm * CMapR<T>(t.value(x).sample(n).data(), xs.c, geo.plane).transpose();
            }
            if (need_x) MapR<T>(t.grad(x).sample(n).data(), xs.c, geo.plane).noalias() += wm.transpose() * gm;
          }
          return;
        }
        if (k == 3) {
          conv3x3_backward(t, x, w, g, xs, cout, need_x, need_w);
          return;
        }
        const int taps_n = k * k;
        const std::vector<T> taps = split_taps(t.value(w).data(), cout, xs.c, k);
        std::vector<T> dtaps(need_w ? taps.size() : 0, T(0));
        std::vector<T> padded(geo.padded_size());
        std::vector<T> dpadded(geo.padded_size());
        // Gradient in the padded-row layout; the columns past the image width stay zero.
        std::vector<T> gspan(static_cast<std::size_t>(cout) * geo.span, T(0));
        for (int n = 0; n < xs.n; ++n) {
          geo.uncrop(g.sample(n).data(), cout, gspan.data());
          const CMapR<T> gm(gspan.data(), cout, geo.span);
          if (need_w) {
            geo.pad(t.value(x).sample(n).data(), padded.data());
            for (int tap = 0; tap < taps_n; ++tap) {
              MapR<T>(dtaps.data() + static_cast<std::size_t>(tap) * cout * xs.c, cout, xs.c).noalias() +=
                  gm * geo.shifted(padded.data(), tap).transpose();
            }
          }
          if (need_x) {
            std::fill(dpadded.begin(), dpadded.end(), T(0));
            for (int tap = 0; tap < taps_n; ++tap) {
              geo.shifted_mut(dpadded.data(), tap).noalias() +=
                  CMapR<T>(taps.data() + static_cast<std::size_t>(tap) * cout * xs.c, cout, xs.c).transpose() * gm;
            }
            geo.unpad_add(dpadded.data(), t.grad(x).sample(n).data());
          }
        }
        if (need_w) merge_taps(dtaps.data(), cout, xs.c, k, t.grad(w).data());
      });
}

template <typename T>
Var<T> dynamic_conv(Var<T> x, Var<T> kernels) {
  same_tape(x, kernels);
  const Shape xs = x.shape();
  const Shape ks = kernels.shape();
  if (xs.c != 1 || ks.n != xs.n || ks.c != 1 || ks.h != ks.w || ks.h % 2 == 0) {
    throw ShapeError("dynamic_conv: kernels " + to_string(ks) + " incompatible with input " + to_string(xs));
  }
  const int k = ks.h;
  if (xs.h < k || xs.w < k) {
    throw ShapeError("dynamic_conv: spatial size of " + to_string(xs) + " is smaller than kernel " +
                     std::to_string(k));
  }
  const int pad = k / 2;
  const int height = xs.h;
  const int width = xs.w;
  Tensor<T> out(xs);
  for (int n = 0; n < xs.n; ++n) {
    const T* src = x.value().plane(n, 0).data();
    const T* kn = kernels.value().plane(n, 0).data();
    T* dst = out.plane(n, 0).data();
    for (int y = 0; y < height; ++y) {
      for (int xx = 0; xx < width; ++xx) {
        T acc = T(0);
        for (int ky = 0; ky < k; ++ky) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= height) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int sx = xx + kx - pad;
            if (sx < 0 || sx >= width) continue;
            acc += kn[ky * k + kx] * src[sy * width + sx];
          }
        }
        dst[y * width + xx] = acc;
      }
    }
  }
  return tape_of(x).record(std::move(out), {x, kernels},
                           [x = x.id, kid = kernels.id, xs, k, pad](Tape<T>& t, NodeId self) {
                             const Tensor<T>& g = t.grad(self);
                             const bool need_x = t.requires_grad(x);
                             const bool need_k = t.requires_grad(kid);
                             for (int n = 0; n < xs.n; ++n) {
                               const T* src = t.value(x).plane(n, 0).data();
                               const T* kn = t.value(kid).plane(n, 0).data();
                               const T* gn = g.plane(n, 0).data();
                               T* dx = need_x ? t.grad(x).plane(n, 0).data() : nullptr;
                               T* dk = need_k ? t.grad(kid).plane(n, 0).data() : nullptr;
                               for (int y = 0; y < xs.h; ++y) {
                                 for (int xx = 0; xx < xs.w; ++xx) {
                                   const T gv = gn[y * xs.w + xx];
                                   for (int ky = 0; ky < k; ++ky) {
                                     const int sy = y + ky - pad;
                                     if (sy < 0 || sy >= xs.h) continue;
                                     for (int kx = 0; kx < k; ++kx) {
                                       const int sx = xx + kx - pad;
                                       if (sx < 0 || sx >= xs.w) continue;
                                       if (dx) dx[sy * xs.w + sx] += gv * kn[ky * k + kx];
                                       if (dk) dk[ky * k + kx] += gv * src[sy * xs.w + sx];
                                     }
                                   }
                                 }
                               }
                             }
                           });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const Shape xs = x.shape();
  Tensor<T> out({xs.n, xs.c, 1, 1});
  const T inv = T(1) / static_cast<T>(xs.plane());
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      T acc = T(0);
      for (T v : x.value().plane(n, c)) acc += v;
      out.at(n, c, 0, 0) = acc * inv;
    }
  return tape_of(x).record(std::move(out), {x}, [x = x.id, xs, inv](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& d = t.grad(x);
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c) {
        const T gv = g.at(n, c, 0, 0) * inv;
        for (T& v : d.plane(n, c)) v += gv;
      }
  });
}

template <typename T>
Var<T> global_max_pool(Var<T> x) {
  const Shape xs = x.shape();
  Tensor<T> out({xs.n, xs.c, 1, 1});
  std::vector<std::size_t> argmax(static_cast<std::size_t>(xs.n) * xs.c);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const auto p = x.value().plane(n, c);
      const auto it = std::max_element(p.begin(), p.end());
      argmax[static_cast<std::size_t>(n) * xs.c + c] = static_cast<std::size_t>(it - p.begin());
      out.at(n, c, 0, 0) = *it;
    }
  return tape_of(x).record(std::move(out), {x},
                           [x = x.id, xs, argmax = std::move(argmax)](Tape<T>& t, NodeId self) {
                             const Tensor<T>& g = t.grad(self);
                             Tensor<T>& d = t.grad(x);
                             for (int n = 0; n < xs.n; ++n)
                               for (int c = 0; c < xs.c; ++c) {
                                 d.plane(n, c)[argmax[static_cast<std::size_t>(n) * xs.c + c]] += g.at(n, c, 0, 0);
                               }
                           });
}

template <typename T>
Var<T> channel_mean(Var<T> x) {
  const Shape xs = x.shape();
  Tensor<T> out({xs.n, 1, xs.h, xs.w});
  const T inv = T(1) / static_cast<T>(xs.c);
  for (int n = 0; n < xs.n; ++n) {
    auto o = out.plane(n, 0);
    for (int c = 0; c < xs.c; ++c) {
      const auto p = x.value().plane(n, c);
      for (std::size_t i = 0; i < o.size(); ++i) o[i] += p[i];
    }
    for (T& v : o) v *= inv;
  }
  return tape_of(x).record(std::move(out), {x}, [x = x.id, xs, inv](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& d = t.grad(x);
    for (int n = 0; n < xs.n; ++n) {
      const auto gp = g.plane(n, 0);
      for (int c = 0; c < xs.c; ++c) {
        auto dp = d.plane(n, c);
        for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += gp[i] * inv;
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  same_tape(a, b);
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw ShapeError("concat_channels: " + to_string(as) + " vs " + to_string(bs));
  }
  Tensor<T> out({as.n, as.c + bs.c, as.h, as.w});
  for (int n = 0; n < as.n; ++n) {
    auto dst = out.sample(n);
    const auto sa = a.value().sample(n);
    const auto sb = b.value().sample(n);
    std::copy(sa.begin(), sa.end(), dst.begin());
    std::copy(sb.begin(), sb.end(), dst.begin() + static_cast<std::ptrdiff_t>(sa.size()));
  }
  return tape_of(a).record(std::move(out), {a, b}, [a = a.id, b = b.id, as](Tape<T>& t, NodeId self) {
    const Tensor<T>& g = t.grad(self);
    const bool need_a = t.requires_grad(a);
    const bool need_b = t.requires_grad(b);
    for (int n = 0; n < as.n; ++n) {
      const auto gs = g.sample(n);
      if (need_a) {
        auto d = t.grad(a).sample(n);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gs[i];
      }
      if (need_b) {
        auto d = t.grad(b).sample(n);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gs[as.sample() + i];
      }
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape s) {
  Tensor<T> out = x.value().reshaped(s);
  return tape_of(x).record(std::move(out), {x}, [x = x.id](Tape<T>& t, NodeId self) {
    const auto g = t.grad(self).values();
    auto d = t.grad(x).values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
  });
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  const auto v = x.value().values();
  T acc = T(0);
  for (T e : v) acc += e;
  const T inv = T(1) / static_cast<T>(v.size());
  Tensor<T> out({1, 1, 1, 1}, acc * inv);
  return tape_of(x).record(std::move(out), {x}, [x = x.id, inv](Tape<T>& t, NodeId self) {
    const T g = t.grad(self)[0] * inv;
    for (T& d : t.grad(x).values()) d += g;
  });
}

template <typename T>
Var<T> soft_iou_loss(Var<T> logits, const Tensor<T>& target, T smooth_eps) {
  const Shape s = logits.shape();
  require_same_shape(s, target.shape(), "soft_iou_loss");
  const int batch = s.n;
  std::vector<T> inter(batch), psum(batch), gsum(batch);
  Tensor<T> prob(s);
  for (int n = 0; n < batch; ++n) {
    const auto l = logits.value().sample(n);
    const auto g = target.sample(n);
    auto p = prob.sample(n);
    T si = 0, sp = 0, sg = 0;
    for (std::size_t i = 0; i < l.size(); ++i) {
      p[i] = sigmoid_scalar(l[i]);
      si += p[i] * g[i];
      sp += p[i];
      sg += g[i];
    }
    inter[n] = si;
    psum[n] = sp;
    gsum[n] = sg;
  }
  T total = 0;
  for (int n = 0; n < batch; ++n) {
    const T uni = psum[n] + gsum[n] - inter[n];
    total += T(1) - (inter[n] + smooth_eps) / (uni + smooth_eps);
  }
  Tensor<T> out({1, 1, 1, 1}, total / static_cast<T>(batch));
  return tape_of(logits).record(
      std::move(out), {logits},
      [lid = logits.id, target, prob = std::move(prob), inter, psum, gsum, smooth_eps, batch](Tape<T>& t,
                                                                                             NodeId self) {
        const T gscale = t.grad(self)[0] / static_cast<T>(batch);
        Tensor<T>& d = t.grad(lid);
        for (int n = 0; n < batch; ++n) {
          const T num = inter[n] + smooth_eps;
          const T den = psum[n] + gsum[n] - inter[n] + smooth_eps;
          const T inv_den2 = T(1) / (den * den);
          const auto g = target.sample(n);
          const auto p = prob.sample(n);
          auto dn = d.sample(n);
          for (std::size_t i = 0; i < dn.size(); ++i) {
            // d(num/den)/dp = (g*den - num*(1-g)) / den^2
            const T dratio = (g[i] * den - num * (T(1) - g[i])) * inv_den2;
            dn[i] += -gscale * dratio * p[i] * (T(1) - p[i]);
          }
        }
      });
}

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  same_tape(a, b);
  require_same_shape(a.shape(), b.shape(), "mse");
  const auto av = a.value().values();
  const auto bv = b.value().values();
  T acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T diff = av[i] - bv[i];
    acc += diff * diff;
  }
  const T inv = T(1) / static_cast<T>(av.size());
  Tensor<T> out({1, 1, 1, 1}, acc * inv);
  return tape_of(a).record(std::move(out), {a, b}, [a = a.id, b = b.id, inv](Tape<T>& t, NodeId self) {
    const T g = t.grad(self)[0] * T(2) * inv;
    const auto av = t.value(a).values();
    const auto bv = t.value(b).values();
    if (t.requires_grad(a)) {
      auto d = t.grad(a).values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * (av[i] - bv[i]);
    }
    if (t.requires_grad(b)) {
      auto d = t.grad(b).values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g * (av[i] - bv[i]);
    }
  });
}

#define DRPCA_INSTANTIATE_OPS(T)                                           \
  template Var<T> add(Var<T>, Var<T>);                                     \
  template Var<T> sub(Var<T>, Var<T>);                                     \
  template Var<T> mul(Var<T>, Var<T>);                                     \
  template Var<T> scale(Var<T>, T);                                        \
  template Var<T> one_minus(Var<T>);                                       \
  template Var<T> bcast_mul(Var<T>, Var<T>);                               \
  template Var<T> expand_batch(Var<T>, int);                               \
  template Var<T> relu(Var<T>);                                            \
  template Var<T> sigmoid(Var<T>);                                         \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>);                          \
  template Var<T> dynamic_conv(Var<T>, Var<T>);                            \
  template Var<T> global_avg_pool(Var<T>);                                 \
  template Var<T> global_max_pool(Var<T>);                                 \
  template Var<T> channel_mean(Var<T>);                                    \
  template Var<T> concat_channels(Var<T>, Var<T>);                         \
  template Var<T> reshape(Var<T>, Shape);                                  \
  template Var<T> mean_all(Var<T>);                                        \
  template Var<T> soft_iou_loss(Var<T>, const Tensor<T>&, T);              \
  template Var<T> mse(Var<T>, Var<T>);

DRPCA_INSTANTIATE_OPS(float)
DRPCA_INSTANTIATE_OPS(double)

#undef DRPCA_INSTANTIATE_OPS

}  // namespace ag
}  // namespace drpca
