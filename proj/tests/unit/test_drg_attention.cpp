#include <doctest.h>

#include "drpca/drg_attention.hpp"
#include "drpca/train_eval.hpp"
#include "oracles.hpp"

using namespace drpca;

namespace {

DrgShape small_shape(int channels = 4, int blocks = 2) {
  DrgShape s;
  s.channels = channels;
  s.blocks = blocks;
  s.ca_reduction = 2;
  s.gen_width = 3;
  s.dsa_kernel = 3;
  return s;
}

void randomize(ParameterStore<double>& store, Rng& rng, double scale = 1.0) {
  for (ParamId i = 0; i < store.size(); ++i) {
    store.tensor(i) = oracle::random_tensor<double>(store.tensor(i).shape(), rng, -scale, scale);
  }
}

template <typename Fn>
Tensor<double> eval(const ParameterStore<double>& store, const Tensor<double>& f, Fn fn) {
  Tape<double> tape;
  tape.set_grad_enabled(false);
  tape.bind(store);
  return fn(tape.constant(f)).value();
}

}  // namespace

TEST_CASE("DSA kernels are one half for zero input and zero biases") {
  ParameterStore<double> store;
  Rng rng(1);
  const RcsabWeights w = add_rcsab(store, "b", small_shape(), rng);
  const Tensor<double> k =
      eval(store, Tensor<double>({2, 4, 8, 8}), [&](Var<double> f) { return dsa_kernel(f, w.dsa_gen, 3); });
  CHECK(k.shape() == Shape{2, 1, 3, 3});
  for (double v : k.values()) CHECK(v == 0.5);
}

TEST_CASE("DSA kernels differ for inputs that differ by a constant shift") {
  ParameterStore<double> store;
  Rng rng(2);
  const RcsabWeights w = add_rcsab(store, "b", small_shape(), rng);
  randomize(store, rng);
  Tensor<double> f = oracle::random_tensor<double>({2, 4, 8, 8}, rng);
  for (std::size_t i = 0; i < f.sample(1).size(); ++i) f.sample(1)[i] = f.sample(0)[i] + 0.75;
  const Tensor<double> k = eval(store, f, [&](Var<double> v) { return dsa_kernel(v, w.dsa_gen, 3); });
  bool differ = false;
  for (int i = 0; i < 9; ++i) differ |= k.sample(0)[i] != k.sample(1)[i];
  CHECK(differ);
  for (double v : k.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("batched dynamic convolution equals a per-sample loop bitwise") {
  ParameterStore<double> store;
  Rng rng(3);
  const RcsabWeights w = add_rcsab(store, "b", small_shape(), rng);
  randomize(store, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const int batch = 1 + static_cast<int>(rng.below(5));
    const Tensor<double> f = oracle::random_tensor<double>({batch, 4, 8 + trial % 3, 9}, rng);
    Tape<double> tape;
    tape.set_grad_enabled(false);
    tape.bind(store);
    const Var<double> fv = tape.constant(f);
    const Var<double> kernels = dsa_kernel(fv, w.dsa_gen, 3);
    const Var<double> mean = ag::channel_mean(fv);
    const Tensor<double>& conv = ag::dynamic_conv(mean, kernels).value();
    const Shape s = f.shape();
    for (int n = 0; n < batch; ++n) {
      const std::vector<double> x(mean.value().sample(n).begin(), mean.value().sample(n).end());
      const std::vector<double> k(kernels.value().sample(n).begin(), kernels.value().sample(n).end());
      const std::vector<double> ref = oracle::plane_conv(x, s.h, s.w, k, 3);
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(conv.sample(n)[i] == ref[i]);
    }

    const Tensor<double> batched = dsa_apply(fv, w.dsa_gen, 3).value();
    for (int n = 0; n < batch; ++n) {
      const Tensor<double> single =
          eval(store, slice_batch(f, n, 1), [&](Var<double> v) { return dsa_apply(v, w.dsa_gen, 3); });
      CHECK(single == slice_batch(batched, n, 1));
    }
  }
}

TEST_CASE("DSA on a constant map has a closed form away from the border") {
  ParameterStore<double> store;
  Rng rng(4);
  const RcsabWeights w = add_rcsab(store, "b", small_shape(), rng);
  randomize(store, rng);
  const double c = 0.37;
  const Tensor<double> f({1, 4, 10, 10}, c);
  const Tensor<double> k = eval(store, f, [&](Var<double> v) { return dsa_kernel(v, w.dsa_gen, 3); });
  double ksum = 0.0;
  for (double v : k.values()) ksum += v;
  const Tensor<double> att = eval(store, f, [&](Var<double> v) { return dsa_attention_map(v, w.dsa_gen, 3); });
  for (int y = 1; y < 9; ++y)
    for (int x = 1; x < 9; ++x) CHECK(att.at(0, 0, y, x) == doctest::Approx(oracle::sigmoid(c * ksum)).epsilon(1e-14));
}

TEST_CASE("attention only attenuates") {
  ParameterStore<double> store;
  Rng rng(5);
  const RcsabWeights w = add_rcsab(store, "b", small_shape(), rng);
  randomize(store, rng, 2.0);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor<double> f = oracle::random_tensor<double>({2, 4, 8, 8}, rng, -5.0, 5.0);
    const Tensor<double> y = eval(store, f, [&](Var<double> v) { return dsa_apply(v, w.dsa_gen, 3); });
    const Tensor<double> z = eval(store, f, [&](Var<double> v) { return channel_attention(v, w.channel_attention); });
    const Tensor<double> s = eval(store, f, [&](Var<double> v) { return channel_attention_weights(v, w.channel_attention); });
    CHECK(s.shape() == Shape{2, 4, 1, 1});
    for (double v : s.values()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
    for (std::size_t i = 0; i < f.size(); ++i) {
      CHECK(std::abs(y[i]) <= std::abs(f[i]));
      CHECK(std::abs(z[i]) <= std::abs(f[i]));
    }
  }
}

TEST_CASE("channel attention is equivariant under a consistent channel permutation") {
  ParameterStore<double> store;
  Rng rng(6);
  const ChannelAttentionWeights w = add_channel_attention(store, "ca", 4, 2, rng);
  randomize(store, rng);
  const std::vector<int> perm{2, 0, 3, 1};
  ParameterStore<double> permuted = store;
  const Tensor<double>& fc1 = store.tensor(w.fc1);  // [hidden, C]
  const Tensor<double>& fc2 = store.tensor(w.fc2);  // [C, hidden]
  for (int h = 0; h < w.hidden; ++h)
    for (int c = 0; c < 4; ++c) permuted.tensor(w.fc1).at(h, c, 0, 0) = fc1.at(h, perm[c], 0, 0);
  for (int c = 0; c < 4; ++c)
    for (int h = 0; h < w.hidden; ++h) permuted.tensor(w.fc2).at(c, h, 0, 0) = fc2.at(perm[c], h, 0, 0);

  const Tensor<double> f = oracle::random_tensor<double>({2, 4, 8, 8}, rng);
  Tensor<double> fp(f.shape());
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 4; ++c) std::ranges::copy(f.plane(n, perm[c]), fp.plane(n, c).begin());
  const Tensor<double> y = eval(store, f, [&](Var<double> v) { return channel_attention(v, w); });
  const Tensor<double> yp = eval(permuted, fp, [&](Var<double> v) { return channel_attention(v, w); });
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < 64; ++i) CHECK(yp.plane(n, c)[i] == doctest::Approx(y.plane(n, perm[c])[i]).epsilon(1e-13));
}

TEST_CASE("RCSAB with a zero second conv is the identity") {
  ParameterStore<double> store;
  Rng rng(7);
  const RcsabWeights w = add_rcsab(store, "b", small_shape(), rng);
  randomize(store, rng);
  store.zero(w.conv2_weight);
  store.zero(w.conv2_bias);
  const Tensor<double> f = oracle::random_tensor<double>({2, 4, 8, 11}, rng);
  CHECK(eval(store, f, [&](Var<double> v) { return rcsab_forward(v, w); }) == f);
}

TEST_CASE("DRG with zero conv_out is the identity, and with no blocks adds conv_out(f)") {
  ParameterStore<double> store;
  Rng rng(8);
  const DrgWeights w = add_drg(store, "drg", small_shape(4, 3), rng);
  randomize(store, rng);
  store.zero(w.out_weight);
  store.zero(w.out_bias);
  const Tensor<double> f = oracle::random_tensor<double>({2, 4, 9, 8}, rng);
  CHECK(eval(store, f, [&](Var<double> v) { return drg_forward(v, w); }) == f);

  ParameterStore<double> empty;
  const DrgWeights w0 = add_drg(empty, "drg", small_shape(4, 0), rng);
  randomize(empty, rng);
  const Tensor<double> y = eval(empty, f, [&](Var<double> v) { return drg_forward(v, w0); });
  const Tensor<double> bias = empty.tensor(w0.out_bias);
  const Tensor<double> conv = oracle::conv2d(f, empty.tensor(w0.out_weight), &bias);
  for (std::size_t i = 0; i < f.size(); ++i) CHECK(y[i] == doctest::Approx(f[i] + conv[i]).epsilon(1e-14));
}

TEST_CASE("DRG preserves shape") {
  ParameterStore<double> store;
  Rng rng(9);
  const DrgWeights w = add_drg(store, "drg", small_shape(6, 2), rng);
  const Tensor<double> f = oracle::random_tensor<double>({3, 6, 12, 8}, rng);
  CHECK(eval(store, f, [&](Var<double> v) { return drg_forward(v, w); }).shape() == f.shape());
}

TEST_CASE("DSA, RCSAB and DRG gradients match central differences") {
  Rng rng(10);
  const Tensor<double> f = oracle::random_tensor<double>({1, 4, 8, 8}, rng);
  const Tensor<double> probe = oracle::random_tensor<double>({1, 4, 8, 8}, rng);
  auto loss = [&](Var<double> y) { return ag::mean_all(ag::mul(y, y.tape->constant(probe))); };

  SUBCASE("DSA") {
    ParameterStore<double> store;
    const RcsabWeights w = add_rcsab(store, "b", small_shape(), rng);
    randomize(store, rng);
    auto closure = [&](Tape<double>& t) { return loss(dsa_apply(t.constant(f), w.dsa_gen, 3)); };
    CHECK(finite_diff_gradcheck(closure, store, oracle::all_entries(store)) < 1e-4);
  }
  SUBCASE("RCSAB") {
    ParameterStore<double> store;
    const RcsabWeights w = add_rcsab(store, "b", small_shape(), rng);
    auto closure = [&](Tape<double>& t) { return loss(rcsab_forward(t.constant(f), w)); };
    CHECK(finite_diff_gradcheck(closure, store, sample_param_entries(store, 40, 1)) < 1e-4);
  }
  SUBCASE("DRG with five blocks") {
    ParameterStore<double> store;
    const DrgWeights w = add_drg(store, "drg", small_shape(4, 5), rng);
    auto closure = [&](Tape<double>& t) { return loss(drg_forward(t.constant(f), w)); };
    CHECK(finite_diff_gradcheck(closure, store, sample_param_entries(store, 40, 2)) < 1e-4);
  }
  SUBCASE("input gradient through RCSAB") {
    ParameterStore<double> store;
    const RcsabWeights w = add_rcsab(store, "b", small_shape(), rng);
    const ParamId x = store.add("x", f);
    auto closure = [&](Tape<double>& t) { return loss(rcsab_forward(t.param(x), w)); };
    std::vector<ParamEntry> entries;
    for (std::size_t i = 0; i < f.size(); i += 7) entries.push_back({x, i});
    CHECK(finite_diff_gradcheck(closure, store, entries) < 1e-4);
  }
}

TEST_CASE("attention modules reject mismatched inputs") {
  ParameterStore<double> store;
  Rng rng(11);
  const RcsabWeights w = add_rcsab(store, "b", small_shape(), rng);
  Tape<double> tape;
  tape.bind(store);
  CHECK_THROWS_AS(channel_attention(tape.constant(Tensor<double>({1, 3, 8, 8})), w.channel_attention), ShapeError);
  CHECK_THROWS_AS(dsa_apply(tape.constant(Tensor<double>({1, 4, 2, 2})), w.dsa_gen, 3), ShapeError);
  CHECK_THROWS_AS(dsa_kernel(tape.constant(Tensor<double>({1, 4, 8, 8})), w.dsa_gen, 5), ShapeError);
  DrgShape bad = small_shape();
  bad.dsa_kernel = 4;
  CHECK_THROWS_AS(add_drg(store, "x", bad, rng), ValidationError);
}
