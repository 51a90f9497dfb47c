#include "drpca/dynamic_params.hpp"

#include <cmath>

#include "init.hpp"

namespace drpca {

template <typename T>
ParamGenWeights add_param_gen(ParameterStore<T>& store, const std::string& prefix, int in_channels,
                              int mid_channels, int out_channels, Rng& rng) {
  if (in_channels < 1 || mid_channels < 1 || out_channels < 1) {
    throw ValidationError("parameter generator widths must be positive");
  }
  ParamGenWeights w;
  w.in_channels = in_channels;
  w.mid_channels = mid_channels;
  w.out_channels = out_channels;
  w.conv1_weight = store.add(prefix + ".conv1.weight", detail::uniform_fan_in<T>({mid_channels, in_channels, 1, 1}, rng));
  w.conv1_bias = store.add(prefix + ".conv1.bias", Tensor<T>({mid_channels, 1, 1, 1}));
  w.conv2_weight = store.add(prefix + ".conv2.weight", detail::uniform_fan_in<T>({out_channels, mid_channels, 1, 1}, rng));
  w.conv2_bias = store.add(prefix + ".conv2.bias", Tensor<T>({out_channels, 1, 1, 1}));
  return w;
}

template <typename T>
Var<T> param_gen_forward(Var<T> z, const ParamGenWeights& w) {
  if (z.shape().c != w.in_channels) {
    throw ShapeError("parameter generator expects " + std::to_string(w.in_channels) + " input channels, got " +
                     to_string(z.shape()));
  }
  Tape<T>& tape = *z.tape;
  tape.count_generator_call();
  Var<T> pooled = ag::global_avg_pool(z);
  Var<T> hidden = ag::relu(ag::conv2d(pooled, tape.param(w.conv1_weight), tape.param(w.conv1_bias)));
  return ag::sigmoid(ag::conv2d(hidden, tape.param(w.conv2_weight), tape.param(w.conv2_bias)));
}

template <typename T>
Var<T> gamma_for_stage(Var<T> t_prev, const ParamGenWeights& w) {
  return param_gen_forward(t_prev, w);
}

template <typename T>
Var<T> interim_estimate(Var<T> t_prev, Var<T> d_prev, Var<T> b_k, Var<T> gamma) {
  require_same_shape(t_prev.shape(), d_prev.shape(), "interim_estimate");
  require_same_shape(t_prev.shape(), b_k.shape(), "interim_estimate");
  Var<T> residual = ag::sub(d_prev, b_k);
  return ag::add(ag::bcast_mul(t_prev, gamma), ag::bcast_mul(residual, ag::one_minus(gamma)));
}

template <typename T>
Var<T> epsilon_for_stage(Var<T> t_interim, const ParamGenWeights& w) {
  return param_gen_forward(t_interim, w);
}

template <typename T>
Tensor<T> eval_param_gen(const Tensor<T>& z, const ParameterStore<T>& store, const ParamGenWeights& w) {
  Tape<T> tape;
  tape.set_grad_enabled(false);
  tape.bind(store);
  return param_gen_forward(tape.constant(z), w).value();
}

#define DRPCA_INSTANTIATE(T)                                                                              \
  template ParamGenWeights add_param_gen<T>(ParameterStore<T>&, const std::string&, int, int, int, Rng&); \
  template Var<T> param_gen_forward<T>(Var<T>, const ParamGenWeights&);                                   \
  template Var<T> gamma_for_stage<T>(Var<T>, const ParamGenWeights&);                                     \
  template Var<T> interim_estimate<T>(Var<T>, Var<T>, Var<T>, Var<T>);                                    \
  template Var<T> epsilon_for_stage<T>(Var<T>, const ParamGenWeights&);                                   \
  template Tensor<T> eval_param_gen<T>(const Tensor<T>&, const ParameterStore<T>&, const ParamGenWeights&);

DRPCA_INSTANTIATE(float)
DRPCA_INSTANTIATE(double)

}  // namespace drpca
