#pragma once

// Reverse-mode differentiation over NCHW tensors.
//
// A Tape records every operation in execution order; node ids are therefore a
// topological order and backward() walks them in reverse. Every op computes
// each batch sample independently, so results for a sample never depend on
// what else shares its batch.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "drpca/tensor.hpp"

namespace drpca {

using NodeId = std::uint32_t;
using ParamId = std::uint32_t;

/// Named learnable arrays in a fixed registration order.
template <typename T>
class ParameterStore {
 public:
  ParamId add(std::string name, Tensor<T> init);

  [[nodiscard]] std::size_t size() const { return tensors_.size(); }
  [[nodiscard]] const std::string& name(ParamId id) const { return names_.at(id); }
  [[nodiscard]] Tensor<T>& tensor(ParamId id) { return tensors_.at(id); }
  [[nodiscard]] const Tensor<T>& tensor(ParamId id) const { return tensors_.at(id); }
  [[nodiscard]] std::optional<ParamId> find(const std::string& name) const;
  [[nodiscard]] std::size_t scalar_count() const;

  void zero(ParamId id) { tensors_.at(id).fill(T(0)); }

  friend bool operator==(const ParameterStore&, const ParameterStore&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
};

template <typename T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  NodeId id = 0;

  [[nodiscard]] bool valid() const { return tape != nullptr; }
  [[nodiscard]] const Tensor<T>& value() const { return tape->value(id); }
  [[nodiscard]] const Shape& shape() const { return tape->value(id).shape(); }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, NodeId)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> variable(Tensor<T> value);

  /// Register every array of `store` as a differentiable leaf.
  void bind(const ParameterStore<T>& store);
  [[nodiscard]] Var<T> param(ParamId id) const;
  [[nodiscard]] bool has_params() const { return !param_nodes_.empty(); }

  /// Append an op result. `fn` runs during backward() when any input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);

  [[nodiscard]] const Tensor<T>& value(NodeId id) const { return nodes_[id].value; }
  [[nodiscard]] bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  /// Gradient buffer for `id`, zero-allocated on first access.
  Tensor<T>& grad(NodeId id);
  [[nodiscard]] const Tensor<T>* grad_if(NodeId id) const;

  /// Seed d(root)/d(root) = 1 and propagate. `root` must hold a single element.
  void backward(Var<T> root);

  /// Accumulated gradient for a bound parameter (zeros when unreached).
  [[nodiscard]] Tensor<T> param_grad(ParamId id) const;

  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  [[nodiscard]] bool grad_enabled() const { return grad_enabled_; }
  [[nodiscard]] std::size_t node_count() const { return nodes_.size(); }

  /// Hypernetwork evaluations recorded on this tape.
  void count_generator_call() { ++generator_calls_; }
  [[nodiscard]] std::size_t generator_calls() const { return generator_calls_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<NodeId> param_nodes_;
  bool grad_enabled_ = true;
  std::size_t generator_calls_ = 0;
};

/// Differentiable operations. Shapes are checked eagerly and violations raise ShapeError.
namespace ag {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> one_minus(Var<T> a);

/// x * s where every dimension of s equals x's or is 1 (batch must match).
template <typename T> Var<T> bcast_mul(Var<T> x, Var<T> s);

/// Repeat a batch-1 tensor `n` times along the batch axis.
template <typename T> Var<T> expand_batch(Var<T> x, int n);

template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);

/// Same-padded 2-D cross-correlation. w: [Cout, Cin, k, k] with odd k; bias: [Cout] or invalid.
template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias);

/// Per-sample dynamic convolution: x [B,1,H,W] with kernels [B,1,k,k], zero padded, same size.
template <typename T> Var<T> dynamic_conv(Var<T> x, Var<T> kernels);

template <typename T> Var<T> global_avg_pool(Var<T> x);
template <typename T> Var<T> global_max_pool(Var<T> x);
template <typename T> Var<T> channel_mean(Var<T> x);
template <typename T> Var<T> concat_channels(Var<T> a, Var<T> b);
template <typename T> Var<T> reshape(Var<T> x, Shape s);

/// Mean over all elements; result shape [1,1,1,1].
template <typename T> Var<T> mean_all(Var<T> x);

/// Batch-mean of 1 - (sum(p*g) + eps) / (sum(p) + sum(g) - sum(p*g) + eps), p = sigmoid(logits).
template <typename T> Var<T> soft_iou_loss(Var<T> logits, const Tensor<T>& target, T smooth_eps);

/// Mean squared difference; result shape [1,1,1,1].
template <typename T> Var<T> mse(Var<T> a, Var<T> b);

}  // namespace ag

}  // namespace drpca
