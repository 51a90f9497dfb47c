#include "drpca/unfold_net.hpp"

#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "file_io.hpp"
#include "init.hpp"

namespace drpca {
namespace {

constexpr char kCheckpointMagic[] = "DRPW";

template <typename T>
ResBlockWeights add_res_block(ParameterStore<T>& store, const std::string& prefix, int c, Rng& rng) {
  const double fan_in = 9.0 * c;
  ResBlockWeights w;
  w.conv1_weight = store.add(prefix + ".conv1.weight", detail::uniform_fan_in<T>({c, c, 3, 3}, rng));
  w.conv1_bias = store.add(prefix + ".conv1.bias", detail::uniform_bias<T>(c, fan_in, rng));
  w.conv2_weight = store.add(prefix + ".conv2.weight", detail::uniform_fan_in<T>({c, c, 3, 3}, rng));
  w.conv2_bias = store.add(prefix + ".conv2.bias", detail::uniform_bias<T>(c, fan_in, rng));
  return w;
}

template <typename T>
ConvNetWeights add_conv_net(ParameterStore<T>& store, const std::string& prefix, int c, int blocks, Rng& rng) {
  ConvNetWeights w;
  w.lift_weight = store.add(prefix + ".lift.weight", detail::uniform_fan_in<T>({c, 1, 1, 1}, rng));
  w.lift_bias = store.add(prefix + ".lift.bias", detail::uniform_bias<T>(c, 1.0, rng));
  for (int i = 0; i < blocks; ++i) w.blocks.push_back(add_res_block(store, prefix + ".block" + std::to_string(i), c, rng));
  w.project_weight = store.add(prefix + ".project.weight", detail::uniform_fan_in<T>({1, c, 1, 1}, rng));
  w.project_bias = store.add(prefix + ".project.bias", detail::uniform_bias<T>(1, c, rng));
  return w;
}

template <typename T>
Var<T> res_block_forward(Var<T> x, const ResBlockWeights& w) {
  Tape<T>& tape = *x.tape;
  Var<T> h = ag::relu(ag::conv2d(x, tape.param(w.conv1_weight), tape.param(w.conv1_bias)));
  h = ag::conv2d(h, tape.param(w.conv2_weight), tape.param(w.conv2_bias));
  return ag::add(x, h);
}

// A [B,1,1,1] per-sample scalar: fixed override, static learnable scalar, or generator output.
template <typename T>
Var<T> constant_scalar(Tape<T>& tape, int batch, double value) {
  return tape.constant(Tensor<T>({batch, 1, 1, 1}, static_cast<T>(value)));
}

template <typename T>
Var<T> static_scalar(Tape<T>& tape, ParamId id, int batch) {
  return ag::expand_batch(ag::sigmoid(tape.param(id)), batch);
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
void check_input(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (s.c != 1) throw ShapeError("network input must be single-channel, got " + to_string(s));
  if (s.h < kMinSpatial || s.w < kMinSpatial) {
    throw ShapeError("network input must be at least 8x8, got " + to_string(s));
  }
  for (T v : x.values()) {
    if (!(v >= T(0) && v <= T(1))) throw DomainError("network input values must lie in [0, 1]");
  }
}

}  // namespace

void NetConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("invalid network config: ") + what);
  };
  need(stages >= 1, "stages must be >= 1");
  need(channels >= 1, "channels must be >= 1");
  need(lbem_blocks >= 0 && dtem_blocks >= 0 && rcsab_blocks >= 0, "block counts must be >= 0");
  need(gen_width >= 1, "gen_width must be >= 1");
  need(dsa_kernel >= 1 && dsa_kernel % 2 == 1, "dsa_kernel must be odd");
  need(ca_reduction >= 1, "ca_reduction must be >= 1");
}

template <typename T>
Model<T> build_model(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  Model<T> m;
  m.config = config;
  Rng rng(seed);
  const int c = config.channels;
  for (int k = 0; k < config.stages; ++k) {
    const std::string prefix = "stage" + std::to_string(k + 1);
    StageWeights s;
    s.lbem = add_conv_net(m.params, prefix + ".lbem", c, config.lbem_blocks, rng);
    if (config.use_gamma_gen) {
      s.gamma_gen = add_param_gen(m.params, prefix + ".gamma_gen", 1, config.gen_width, 1, rng);
    } else {
      s.static_gamma = m.params.add(prefix + ".static_gamma", Tensor<T>({1, 1, 1, 1}));
    }
    if (config.use_eps_gen) {
      s.eps_gen = add_param_gen(m.params, prefix + ".eps_gen", 1, config.gen_width, 1, rng);
    } else {
      s.static_eps = m.params.add(prefix + ".static_eps", Tensor<T>({1, 1, 1, 1}));
    }
    s.sparsity = add_conv_net(m.params, prefix + ".dtem", c, config.dtem_blocks, rng);
    s.dirm.in_weight = m.params.add(prefix + ".dirm.in.weight", detail::uniform_fan_in<T>({c, 2, 1, 1}, rng));
    s.dirm.in_bias = m.params.add(prefix + ".dirm.in.bias", detail::uniform_bias<T>(c, 2.0, rng));
    if (config.use_drg) {
      const DrgShape shape{c, config.rcsab_blocks, config.ca_reduction, config.gen_width, config.dsa_kernel};
      s.dirm.drg = add_drg(m.params, prefix + ".dirm.drg", shape, rng);
    } else {
      s.dirm.plain = add_res_block(m.params, prefix + ".dirm.plain", c, rng);
    }
    s.dirm.out_weight = m.params.add(prefix + ".dirm.out.weight", detail::uniform_fan_in<T>({1, c, 1, 1}, rng));
    s.dirm.out_bias = m.params.add(prefix + ".dirm.out.bias", detail::uniform_bias<T>(1, c, rng));
    m.stages.push_back(std::move(s));
  }
  return m;
}

template <typename To, typename From>
Model<To> model_cast(const Model<From>& m) {
  Model<To> out = build_model<To>(m.config, 0);
  for (ParamId i = 0; i < m.params.size(); ++i) out.params.tensor(i) = tensor_cast<To>(m.params.tensor(i));
  return out;
}

template <typename T>
Var<T> conv_net_forward(Var<T> x, const ConvNetWeights& w) {
  Tape<T>& tape = *x.tape;
  Var<T> h = ag::conv2d(x, tape.param(w.lift_weight), tape.param(w.lift_bias));
  for (const auto& block : w.blocks) h = res_block_forward(h, block);
  return ag::conv2d(h, tape.param(w.project_weight), tape.param(w.project_bias));
}

template <typename T>
Var<T> lbem_forward(Var<T> d_prev, Var<T> t_prev, const ConvNetWeights& w) {
  require_same_shape(d_prev.shape(), t_prev.shape(), "lbem_forward");
  Var<T> residual = ag::sub(d_prev, t_prev);
  return ag::add(residual, conv_net_forward(residual, w));
}

template <typename T>
DtemOutputs<T> dtem_forward(Var<T> d_prev, Var<T> b_k, Var<T> t_prev, const StageWeights& w,
                            const ScalarOverride& overrides, const SparsityFn<T>& sparsity) {
  Tape<T>& tape = *d_prev.tape;
  const int batch = d_prev.shape().n;
  DtemOutputs<T> out;
  if (overrides.gamma) {
    out.gamma = constant_scalar(tape, batch, *overrides.gamma);
  } else if (w.gamma_gen) {
    out.gamma = gamma_for_stage(t_prev, *w.gamma_gen);
  } else {
    out.gamma = static_scalar(tape, *w.static_gamma, batch);
  }
  out.interim = interim_estimate(t_prev, d_prev, b_k, out.gamma);
  if (overrides.epsilon) {
    out.epsilon = constant_scalar(tape, batch, *overrides.epsilon);
  } else if (w.eps_gen) {
    out.epsilon = epsilon_for_stage(out.interim, *w.eps_gen);
  } else {
    out.epsilon = static_scalar(tape, *w.static_eps, batch);
  }
  Var<T> correction = sparsity ? sparsity(out.interim) : conv_net_forward(out.interim, w.sparsity);
  require_same_shape(correction.shape(), out.interim.shape(), "sparsity module output");
  out.t = ag::sub(out.interim, ag::bcast_mul(correction, out.epsilon));
  return out;
}

template <typename T>
Var<T> dirm_forward(Var<T> b_k, Var<T> t_k, const DirmWeights& w, bool residual_base) {
  require_same_shape(b_k.shape(), t_k.shape(), "dirm_forward");
  Tape<T>& tape = *b_k.tape;
  Var<T> f = ag::conv2d(ag::concat_channels(b_k, t_k), tape.param(w.in_weight), tape.param(w.in_bias));
  if (w.drg) {
    f = drg_forward(f, *w.drg);
  } else if (w.plain) {
    f = res_block_forward(f, *w.plain);
  }
  Var<T> out = ag::conv2d(f, tape.param(w.out_weight), tape.param(w.out_bias));
  return residual_base ? ag::add(ag::add(b_k, t_k), out) : out;
}

template <typename T>
std::vector<StageVars<T>> net_forward(Var<T> x, const Model<T>& model) {
  check_input(x.value());
  Tape<T>& tape = *x.tape;
  if (!tape.has_params()) throw ValidationError("net_forward: tape is not bound to the model parameters");
  std::vector<StageVars<T>> trace;
  trace.reserve(model.stages.size());
  Var<T> d = x;
  Var<T> t = tape.constant(Tensor<T>(x.shape()));
  for (std::size_t k = 0; k < model.stages.size(); ++k) {
    const StageWeights& w = model.stages[k];
    StageVars<T> s;
    s.b = lbem_forward(d, t, w.lbem);
    const DtemOutputs<T> dt = dtem_forward(d, s.b, t, w);
    s.t = dt.t;
    s.gamma = dt.gamma;
    s.epsilon = dt.epsilon;
    s.d = dirm_forward(s.b, s.t, w.dirm, model.config.dirm_residual_base);
    for (const Var<T>& v : {s.b, s.t, s.d, s.gamma, s.epsilon}) {
      if (!all_finite(v.value())) {
        throw NumericError("non-finite values in the output of stage " + std::to_string(k + 1));
      }
    }
    d = s.d;
    t = s.t;
    trace.push_back(s);
  }
  return trace;
}

template <typename T>
DecompositionTrace<T> run_network(const Tensor<T>& x, const Model<T>& model) {
  Tape<T> tape;
  tape.set_grad_enabled(false);
  tape.bind(model.params);
  const auto stages = net_forward(tape.constant(x), model);
  DecompositionTrace<T> out;
  for (const auto& s : stages) {
    StageRecord<T> r{s.b.value(), s.t.value(), s.d.value(), {}, {}};
    r.gamma.assign(s.gamma.value().values().begin(), s.gamma.value().values().end());
    r.epsilon.assign(s.epsilon.value().values().begin(), s.epsilon.value().values().end());
    out.stages.push_back(std::move(r));
  }
  out.generator_calls = tape.generator_calls();
  return out;
}

template <typename T>
Tensor<T> target_scores(const Tensor<T>& t_final) {
  Tensor<T> out(t_final.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = t_final[i];
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  return out;
}

template <typename T>
Mask predict_mask(const Tensor<T>& t_final, double threshold) {
  const Tensor<T> scores = target_scores(t_final);
  Mask m(t_final.shape());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<double>(scores[i]) >= threshold ? 1 : 0;
  return m;
}

template <typename T>
Mask predict_mask(const DecompositionTrace<T>& trace, double threshold) {
  if (trace.stages.empty()) throw ValidationError("predict_mask: empty trace");
  return predict_mask(trace.final_target(), threshold);
}

// --- checkpoint --------------------------------------------------------------

std::string to_json(const NetConfig& c) {
  const nlohmann::ordered_json j = {
      {"stages", c.stages},
      {"channels", c.channels},
      {"lbem_blocks", c.lbem_blocks},
      {"dtem_blocks", c.dtem_blocks},
      {"rcsab_blocks", c.rcsab_blocks},
      {"gen_width", c.gen_width},
      {"dsa_kernel", c.dsa_kernel},
      {"ca_reduction", c.ca_reduction},
      {"use_gamma_gen", c.use_gamma_gen},
      {"use_eps_gen", c.use_eps_gen},
      {"use_drg", c.use_drg},
      {"dirm_residual_base", c.dirm_residual_base},
  };
  return j.dump();
}

NetConfig net_config_from_json(const std::string& json) {
  try {
    const auto j = nlohmann::json::parse(json);
    const auto& n = j.contains("net") ? j.at("net") : j;
    NetConfig c;
    c.stages = n.at("stages").get<int>();
    c.channels = n.at("channels").get<int>();
    c.lbem_blocks = n.at("lbem_blocks").get<int>();
    c.dtem_blocks = n.at("dtem_blocks").get<int>();
    c.rcsab_blocks = n.at("rcsab_blocks").get<int>();
    c.gen_width = n.at("gen_width").get<int>();
    c.dsa_kernel = n.at("dsa_kernel").get<int>();
    c.ca_reduction = n.at("ca_reduction").get<int>();
    c.use_gamma_gen = n.at("use_gamma_gen").get<bool>();
    c.use_eps_gen = n.at("use_eps_gen").get<bool>();
    c.use_drg = n.at("use_drg").get<bool>();
    c.dirm_residual_base = n.at("dirm_residual_base").get<bool>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const std::string& extra_json) {
  nlohmann::ordered_json header;
  header["format"] = "drpw";
  header["net"] = nlohmann::ordered_json::parse(to_json(model.config));
  header["extra"] = nlohmann::ordered_json::parse(extra_json);
  const std::string text = header.dump();

  detail::ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  w.u32(static_cast<std::uint32_t>(model.params.size()));
  for (ParamId i = 0; i < model.params.size(); ++i) {
    const std::string& name = model.params.name(i);
    const Tensor<T>& t = model.params.tensor(i);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(4);
    const Shape s = t.shape();
    for (int d : {s.n, s.c, s.h, s.w}) w.u32(static_cast<std::uint32_t>(d));
    for (T v : t.values()) w.f32(static_cast<float>(v));
  }
  detail::write_file(path, w.buffer());
}

namespace {

std::string parse_header(detail::ByteReader& r, const std::filesystem::path& path) {
  if (r.remaining() < 4 || r.bytes(4) != std::string_view(kCheckpointMagic, 4)) {
    throw FormatError("'" + path.string() + "' is not a DRPW checkpoint (bad magic)");
  }
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) throw FormatError("unsupported DRPW version " + std::to_string(version));
  const std::uint32_t len = r.u32();
  return std::string(r.bytes(len));
}

}  // namespace

std::string read_checkpoint_header(const std::filesystem::path& path) {
  const std::string raw = detail::read_file(path);
  detail::ByteReader r(raw);
  return parse_header(r, path);
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  const std::string raw = detail::read_file(path);
  detail::ByteReader r(raw);
  const NetConfig config = net_config_from_json(parse_header(r, path));
  Model<T> model = build_model<T>(config, 0);
  const std::uint32_t count = r.u32();
  if (count != model.params.size()) {
    throw CompatibilityError("checkpoint holds " + std::to_string(count) + " arrays, config implies " +
                             std::to_string(model.params.size()));
  }
  for (ParamId i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    const std::string name(r.bytes(name_len));
    if (name != model.params.name(i)) {
      throw CompatibilityError("checkpoint array " + std::to_string(i) + " is '" + name + "', expected '" +
                               model.params.name(i) + "'");
    }
    if (r.u8() != 4) throw FormatError("checkpoint arrays must be rank 4");
    Shape s;
    s.n = static_cast<int>(r.u32());
    s.c = static_cast<int>(r.u32());
    s.h = static_cast<int>(r.u32());
    s.w = static_cast<int>(r.u32());
    Tensor<T>& dst = model.params.tensor(i);
    if (s != dst.shape()) {
      throw CompatibilityError("checkpoint array '" + name + "' has shape " + to_string(s) + ", expected " +
                               to_string(dst.shape()));
    }
    for (T& v : dst.values()) v = static_cast<T>(r.f32());
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint arrays");
  return model;
}

#define DRPCA_INSTANTIATE(T)                                                                                  \
  template Model<T> build_model<T>(const NetConfig&, std::uint64_t);                                         \
  template Var<T> conv_net_forward<T>(Var<T>, const ConvNetWeights&);                                         \
  template Var<T> lbem_forward<T>(Var<T>, Var<T>, const ConvNetWeights&);                                     \
  template DtemOutputs<T> dtem_forward<T>(Var<T>, Var<T>, Var<T>, const StageWeights&, const ScalarOverride&, \
                                          const SparsityFn<T>&);                                              \
  template Var<T> dirm_forward<T>(Var<T>, Var<T>, const DirmWeights&, bool);                                  \
  template std::vector<StageVars<T>> net_forward<T>(Var<T>, const Model<T>&);                                 \
  template DecompositionTrace<T> run_network<T>(const Tensor<T>&, const Model<T>&);                           \
  template Tensor<T> target_scores<T>(const Tensor<T>&);                                                      \
  template Mask predict_mask<T>(const Tensor<T>&, double);                                                    \
  template Mask predict_mask<T>(const DecompositionTrace<T>&, double);                                        \
  template void save_checkpoint<T>(const std::filesystem::path&, const Model<T>&, const std::string&);        \
  template Model<T> load_checkpoint<T>(const std::filesystem::path&);

DRPCA_INSTANTIATE(float)
DRPCA_INSTANTIATE(double)

template Model<float> model_cast<float, double>(const Model<double>&);
template Model<double> model_cast<double, float>(const Model<float>&);
template Model<float> model_cast<float, float>(const Model<float>&);
template Model<double> model_cast<double, double>(const Model<double>&);

}  // namespace drpca
