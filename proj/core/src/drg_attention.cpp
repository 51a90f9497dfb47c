#include "drpca/drg_attention.hpp"

#include <algorithm>

#include "init.hpp"

namespace drpca {

template <typename T>
ChannelAttentionWeights add_channel_attention(ParameterStore<T>& store, const std::string& prefix, int channels,
                                              int reduction, Rng& rng) {
  if (channels < 1 || reduction < 1) throw ValidationError("channel attention sizes must be positive");
  ChannelAttentionWeights w;
  w.channels = channels;
  w.hidden = std::max(1, channels / reduction);
  w.fc1 = store.add(prefix + ".fc1.weight", detail::uniform_fan_in<T>({w.hidden, channels, 1, 1}, rng));
  w.fc2 = store.add(prefix + ".fc2.weight", detail::uniform_fan_in<T>({channels, w.hidden, 1, 1}, rng));
  return w;
}

template <typename T>
RcsabWeights add_rcsab(ParameterStore<T>& store, const std::string& prefix, const DrgShape& shape, Rng& rng) {
  const int c = shape.channels;
  const double fan_in = 9.0 * c;
  RcsabWeights w;
  w.kernel_size = shape.dsa_kernel;
  w.conv1_weight = store.add(prefix + ".conv1.weight", detail::uniform_fan_in<T>({c, c, 3, 3}, rng));
  w.conv1_bias = store.add(prefix + ".conv1.bias", detail::uniform_bias<T>(c, fan_in, rng));
  w.conv2_weight = store.add(prefix + ".conv2.weight", detail::uniform_fan_in<T>({c, c, 3, 3}, rng));
  w.conv2_bias = store.add(prefix + ".conv2.bias", detail::uniform_bias<T>(c, fan_in, rng));
  w.channel_attention = add_channel_attention(store, prefix + ".ca", c, shape.ca_reduction, rng);
  w.dsa_gen = add_param_gen(store, prefix + ".dsa", c, shape.gen_width, shape.dsa_kernel * shape.dsa_kernel, rng);
  return w;
}

template <typename T>
DrgWeights add_drg(ParameterStore<T>& store, const std::string& prefix, const DrgShape& shape, Rng& rng) {
  if (shape.blocks < 0) throw ValidationError("DRG block count must be non-negative");
  if (shape.dsa_kernel < 1 || shape.dsa_kernel % 2 == 0) throw ValidationError("DSA kernel size must be odd");
  DrgWeights w;
  w.channels = shape.channels;
  for (int i = 0; i < shape.blocks; ++i) {
    w.blocks.push_back(add_rcsab(store, prefix + ".rcsab" + std::to_string(i), shape, rng));
  }
  const int c = shape.channels;
  w.out_weight = store.add(prefix + ".conv_out.weight", detail::uniform_fan_in<T>({c, c, 1, 1}, rng));
  w.out_bias = store.add(prefix + ".conv_out.bias", detail::uniform_bias<T>(c, c, rng));
  return w;
}

template <typename T>
Var<T> dsa_kernel(Var<T> f, const ParamGenWeights& gen, int kernel_size) {
  if (gen.out_channels != kernel_size * kernel_size) {
    throw ShapeError("DSA generator emits " + std::to_string(gen.out_channels) + " values, kernel needs " +
                     std::to_string(kernel_size * kernel_size));
  }
  Var<T> flat = param_gen_forward(f, gen);
  return ag::reshape(flat, Shape{f.shape().n, 1, kernel_size, kernel_size});
}

template <typename T>
Var<T> dsa_attention_map(Var<T> f, const ParamGenWeights& gen, int kernel_size) {
  const Shape s = f.shape();
  if (s.h < kernel_size || s.w < kernel_size) {
    throw ShapeError("DSA needs spatial size >= kernel " + std::to_string(kernel_size) + ", got " + to_string(s));
  }
  Var<T> kernels = dsa_kernel(f, gen, kernel_size);
  return ag::sigmoid(ag::dynamic_conv(ag::channel_mean(f), kernels));
}

template <typename T>
Var<T> dsa_apply(Var<T> f, const ParamGenWeights& gen, int kernel_size) {
  return ag::bcast_mul(f, dsa_attention_map(f, gen, kernel_size));
}

template <typename T>
Var<T> channel_attention_weights(Var<T> f, const ChannelAttentionWeights& w) {
  if (f.shape().c != w.channels) {
    throw ShapeError("channel attention built for " + std::to_string(w.channels) + " channels, got " +
                     to_string(f.shape()));
  }
  Tape<T>& tape = *f.tape;
  const Var<T> fc1 = tape.param(w.fc1);
  const Var<T> fc2 = tape.param(w.fc2);
  const Var<T> none{};
  auto mlp = [&](Var<T> v) { return ag::conv2d(ag::relu(ag::conv2d(v, fc1, none)), fc2, none); };
  return ag::sigmoid(ag::add(mlp(ag::global_avg_pool(f)), mlp(ag::global_max_pool(f))));
}

template <typename T>
Var<T> channel_attention(Var<T> f, const ChannelAttentionWeights& w) {
  return ag::bcast_mul(f, channel_attention_weights(f, w));
}

template <typename T>
Var<T> rcsab_forward(Var<T> f, const RcsabWeights& w) {
  Tape<T>& tape = *f.tape;
  Var<T> h = ag::conv2d(f, tape.param(w.conv1_weight), tape.param(w.conv1_bias));
  h = ag::conv2d(ag::relu(h), tape.param(w.conv2_weight), tape.param(w.conv2_bias));
  h = channel_attention(h, w.channel_attention);
  h = dsa_apply(h, w.dsa_gen, w.kernel_size);
  return ag::add(f, h);
}

template <typename T>
Var<T> drg_forward(Var<T> f, const DrgWeights& w) {
  if (f.shape().c != w.channels) {
    throw ShapeError("DRG built for " + std::to_string(w.channels) + " channels, got " + to_string(f.shape()));
  }
  Tape<T>& tape = *f.tape;
  Var<T> h = f;
  for (const auto& block : w.blocks) h = rcsab_forward(h, block);
  return ag::add(f, ag::conv2d(h, tape.param(w.out_weight), tape.param(w.out_bias)));
}

#define DRPCA_INSTANTIATE(T)                                                                                     \
  template ChannelAttentionWeights add_channel_attention<T>(ParameterStore<T>&, const std::string&, int, int,   \
                                                            Rng&);                                               \
  template RcsabWeights add_rcsab<T>(ParameterStore<T>&, const std::string&, const DrgShape&, Rng&);            \
  template DrgWeights add_drg<T>(ParameterStore<T>&, const std::string&, const DrgShape&, Rng&);                \
  template Var<T> dsa_kernel<T>(Var<T>, const ParamGenWeights&, int);                                            \
  template Var<T> dsa_attention_map<T>(Var<T>, const ParamGenWeights&, int);                                     \
  template Var<T> dsa_apply<T>(Var<T>, const ParamGenWeights&, int);                                             \
  template Var<T> channel_attention_weights<T>(Var<T>, const ChannelAttentionWeights&);                          \
  template Var<T> channel_attention<T>(Var<T>, const ChannelAttentionWeights&);                                  \
  template Var<T> rcsab_forward<T>(Var<T>, const RcsabWeights&);                                                 \
  template Var<T> drg_forward<T>(Var<T>, const DrgWeights&);

DRPCA_INSTANTIATE(float)
DRPCA_INSTANTIATE(double)

}  // namespace drpca
