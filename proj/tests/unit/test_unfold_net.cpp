#include <doctest.h>

#include <fstream>

#include "drpca/train_eval.hpp"
#include "drpca/unfold_net.hpp"
#include "oracles.hpp"

using namespace drpca;

namespace {

NetConfig tiny(int stages = 2) {
  NetConfig c;
  c.stages = stages;
  c.channels = 4;
  c.lbem_blocks = 1;
  c.dtem_blocks = 1;
  c.rcsab_blocks = 1;
  c.ca_reduction = 2;
  return c;
}

Tensor<double> image(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return oracle::random_tensor<double>(s, rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("config validation") {
  NetConfig c = tiny();
  CHECK_NOTHROW(c.validate());
  c.stages = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.dsa_kernel = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(net_config_from_json(to_json(tiny(3))) == tiny(3));
}

TEST_CASE("build_model is deterministic and names parameters by stage") {
  const Model<double> a = build_model<double>(tiny(), 4);
  const Model<double> b = build_model<double>(tiny(), 4);
  CHECK(a.params == b.params);
  CHECK_FALSE(build_model<double>(tiny(), 5).params == a.params);
  CHECK(a.params.find("stage1.gamma_gen.conv1.weight").has_value());
  CHECK(a.params.find("stage2.dirm.drg.conv_out.bias").has_value());
  NetConfig off = tiny();
  off.use_gamma_gen = false;
  off.use_eps_gen = false;
  off.use_drg = false;
  const Model<double> m = build_model<double>(off, 4);
  CHECK(m.params.find("stage1.static_gamma").has_value());
  CHECK(m.params.find("stage1.static_eps").has_value());
  CHECK(m.params.find("stage1.dirm.plain.conv1.weight").has_value());
  CHECK_FALSE(m.params.find("stage1.gamma_gen.conv1.weight").has_value());
}

TEST_CASE("zero LBEM network gives B = D - T exactly") {
  Model<double> m = build_model<double>(tiny(), 1);
  oracle::zero_params(m.params, ".lbem.");
  Tape<double> tape;
  tape.bind(m.params);
  const Var<double> d = tape.constant(image({2, 1, 8, 9}, 1));
  const Var<double> t = tape.constant(image({2, 1, 8, 9}, 2));
  const Tensor<double> b = lbem_forward(d, t, m.stages[0].lbem).value();
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(b[i] == d.value()[i] - t.value()[i]);
}

TEST_CASE("LBEM gradient matches central differences") {
  Model<double> m = build_model<double>(tiny(1), 3);
  const Tensor<double> x = image({1, 1, 8, 8}, 3);
  const Tensor<double> t0 = image({1, 1, 8, 8}, 4);
  auto closure = [&](Tape<double>& tape) {
    return ag::mean_all(lbem_forward(tape.constant(x), tape.constant(t0), m.stages[0].lbem));
  };
  std::vector<ParamEntry> entries;
  for (const auto& e : sample_param_entries(m.params, 400, 5)) {
    if (m.params.name(e.id).find(".lbem.") != std::string::npos) entries.push_back(e);
  }
  REQUIRE(entries.size() >= 10);
  CHECK(finite_diff_gradcheck(closure, m.params, entries) < 1e-4);
}

TEST_CASE("DTEM degeneracies") {
  Model<double> m = build_model<double>(tiny(), 6);
  Tape<double> tape;
  tape.bind(m.params);
  const Var<double> d = tape.constant(image({2, 1, 8, 8}, 7));
  const Var<double> b = tape.constant(image({2, 1, 8, 8}, 8));
  const Var<double> t = tape.constant(image({2, 1, 8, 8}, 9));

  SUBCASE("epsilon zero leaves the interim estimate") {
    const DtemOutputs<double> o = dtem_forward(d, b, t, m.stages[0], ScalarOverride{std::nullopt, 0.0});
    CHECK(o.t.value() == o.interim.value());
  }
  SUBCASE("gamma one and epsilon zero keep the previous target") {
    const DtemOutputs<double> o = dtem_forward(d, b, t, m.stages[0], ScalarOverride{1.0, 0.0});
    CHECK(o.t.value() == t.value());
  }
  SUBCASE("scalar arithmetic") {
    const Var<double> ts = tape.constant(Tensor<double>({1, 1, 1, 1}, 0.2));
    const Var<double> ds = tape.constant(Tensor<double>({1, 1, 1, 1}, 1.0));
    const Var<double> bs = tape.constant(Tensor<double>({1, 1, 1, 1}, 0.6));
    SparsityFn<double> s = [&](Var<double> v) { return v.tape->constant(Tensor<double>(v.shape(), 0.1)); };
    const DtemOutputs<double> o = dtem_forward(ds, bs, ts, m.stages[0], ScalarOverride{0.5, 0.5}, s);
    CHECK(o.interim.value()[0] == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(o.t.value()[0] == doctest::Approx(0.25).epsilon(1e-15));
  }
  SUBCASE("generated scalars lie in (0,1) per sample") {
    const DtemOutputs<double> o = dtem_forward(d, b, t, m.stages[0]);
    CHECK(o.gamma.shape() == Shape{2, 1, 1, 1});
    for (double v : o.gamma.value().values()) CHECK((v > 0.0 && v < 1.0));
    for (double v : o.epsilon.value().values()) CHECK((v > 0.0 && v < 1.0));
  }
}

TEST_CASE("zero DIRM output conv gives D = B + T exactly") {
  for (bool drg : {true, false}) {
    NetConfig c = tiny();
    c.use_drg = drg;
    Model<double> m = build_model<double>(c, 10);
    m.params.zero(m.stages[0].dirm.out_weight);
    m.params.zero(m.stages[0].dirm.out_bias);
    Tape<double> tape;
    tape.bind(m.params);
    const Var<double> b = tape.constant(image({2, 1, 8, 8}, 11));
    const Var<double> t = tape.constant(image({2, 1, 8, 8}, 12));
    const Tensor<double> d = dirm_forward(b, t, m.stages[0].dirm, true).value();
    CHECK(d.shape() == Shape{2, 1, 8, 8});
    for (std::size_t i = 0; i < d.size(); ++i) CHECK(d[i] == b.value()[i] + t.value()[i]);
  }
}

TEST_CASE("DIRM gradient matches central differences") {
  Model<double> m = build_model<double>(tiny(1), 13);
  const Tensor<double> b = image({1, 1, 8, 8}, 14);
  const Tensor<double> t = image({1, 1, 8, 8}, 15);
  auto closure = [&](Tape<double>& tape) {
    Var<double> d = dirm_forward(tape.constant(b), tape.constant(t), m.stages[0].dirm, true);
    return ag::mean_all(ag::mul(d, d));
  };
  std::vector<ParamEntry> entries;
  for (const auto& e : sample_param_entries(m.params, 400, 6)) {
    if (m.params.name(e.id).find(".dirm.") != std::string::npos) entries.push_back(e);
  }
  REQUIRE(entries.size() >= 10);
  CHECK(finite_diff_gradcheck(closure, m.params, entries) < 1e-4);
}

TEST_CASE("a zero single-stage network reproduces its input") {
  Model<double> m = build_model<double>(tiny(1), 16);
  for (ParamId i = 0; i < m.params.size(); ++i) m.params.zero(i);
  const Tensor<double> x = image({2, 1, 8, 8}, 17);
  const DecompositionTrace<double> tr = run_network(x, m);
  REQUIRE(tr.stages.size() == 1);
  CHECK(tr.stages[0].b == x);
  for (double v : tr.stages[0].t.values()) CHECK(v == 0.0);
  CHECK(tr.stages[0].d == x);
  for (double g : tr.stages[0].gamma) CHECK(g == 0.5);
  for (double e : tr.stages[0].epsilon) CHECK(e == 0.5);
}

TEST_CASE("trace has one record per stage with scalars in (0,1)") {
  for (int k : {1, 3}) {
    const Model<double> m = build_model<double>(tiny(k), 18);
    const DecompositionTrace<double> tr = run_network(image({2, 1, 8, 12}, 19), m);
    CHECK(tr.stages.size() == static_cast<std::size_t>(k));
    for (const auto& s : tr.stages) {
      CHECK(s.b.shape() == Shape{2, 1, 8, 12});
      CHECK(s.t.shape() == Shape{2, 1, 8, 12});
      CHECK(s.d.shape() == Shape{2, 1, 8, 12});
      for (double v : s.gamma) CHECK((v > 0.0 && v < 1.0));
      for (double v : s.epsilon) CHECK((v > 0.0 && v < 1.0));
    }
  }
}

TEST_CASE("a batch equals its samples processed separately, bitwise") {
  const Model<double> m = build_model<double>(tiny(2), 20);
  const Tensor<double> x = image({3, 1, 8, 10}, 21);
  const DecompositionTrace<double> joint = run_network(x, m);
  for (int n = 0; n < 3; ++n) {
    const DecompositionTrace<double> single = run_network(slice_batch(x, n, 1), m);
    for (std::size_t k = 0; k < joint.stages.size(); ++k) {
      CHECK(single.stages[k].b == slice_batch(joint.stages[k].b, n, 1));
      CHECK(single.stages[k].t == slice_batch(joint.stages[k].t, n, 1));
      CHECK(single.stages[k].d == slice_batch(joint.stages[k].d, n, 1));
      CHECK(single.stages[k].gamma[0] == joint.stages[k].gamma[n]);
      CHECK(single.stages[k].epsilon[0] == joint.stages[k].epsilon[n]);
    }
  }
}

TEST_CASE("static scalars behave as a fixed sigmoid(s) blend") {
  NetConfig c = tiny(1);
  c.use_gamma_gen = false;
  c.use_eps_gen = false;
  Model<double> m = build_model<double>(c, 22);
  const double s_gamma = 0.8;
  const double s_eps = 1.3;
  m.params.tensor(*m.stages[0].static_gamma).fill(s_gamma);
  m.params.tensor(*m.stages[0].static_eps).fill(s_eps);
  const Tensor<double> x = image({2, 1, 8, 8}, 23);
  const DecompositionTrace<double> tr = run_network(x, m);
  CHECK(tr.generator_calls == 1);  // the DSA generator of the single RCSAB

  Tape<double> tape;
  tape.bind(m.params);
  const Var<double> xv = tape.constant(x);
  const Var<double> t0 = tape.constant(Tensor<double>(x.shape()));
  const Var<double> b = lbem_forward(xv, t0, m.stages[0].lbem);
  const ScalarOverride fixed{oracle::sigmoid(s_gamma), oracle::sigmoid(s_eps)};
  const DtemOutputs<double> o = dtem_forward(xv, b, t0, m.stages[0], fixed);
  CHECK(tr.stages[0].t == o.t.value());
  for (double g : tr.stages[0].gamma) CHECK(g == oracle::sigmoid(s_gamma));
}

TEST_CASE("generator evaluations are counted") {
  NetConfig c = tiny(3);
  c.rcsab_blocks = 2;
  const Tensor<double> x = image({1, 1, 8, 8}, 24);
  CHECK(run_network(x, build_model<double>(c, 1)).generator_calls == 3 * 2 + 3 * 2);
  c.use_gamma_gen = false;
  c.use_eps_gen = false;
  c.use_drg = false;
  CHECK(run_network(x, build_model<double>(c, 1)).generator_calls == 0);
}

TEST_CASE("input validation") {
  const Model<double> m = build_model<double>(tiny(1), 25);
  CHECK_THROWS_AS(run_network(Tensor<double>({1, 1, 7, 8}), m), ShapeError);
  CHECK_THROWS_AS(run_network(Tensor<double>({1, 2, 8, 8}), m), ShapeError);
  CHECK_THROWS_AS(run_network(Tensor<double>({1, 1, 8, 8}, 1.5), m), DomainError);
  Tape<double> unbound;
  CHECK_THROWS_AS(net_forward(unbound.constant(Tensor<double>({1, 1, 8, 8})), m), ValidationError);
}

TEST_CASE("non-finite stage output names the stage") {
  Model<double> m = build_model<double>(tiny(2), 26);
  m.params.tensor(m.stages[1].lbem.project_bias).fill(std::numeric_limits<double>::infinity());
  try {
    run_network(image({1, 1, 8, 8}, 27), m);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("stage 2") != std::string::npos);
  }
}

TEST_CASE("prediction masks and scores") {
  const Tensor<double> zero({1, 1, 8, 8});
  const Mask all = predict_mask(zero, 0.5);
  for (auto v : all.values()) CHECK(v == 1);
  const Tensor<double> low({1, 1, 8, 8}, -10.0);
  const Mask none = predict_mask(low, 0.5);
  for (auto v : none.values()) CHECK(v == 0);
  const Tensor<double> t = image({2, 1, 8, 8}, 28);
  Tensor<double> logits = t;
  for (double& v : logits.values()) v = 8.0 * (v - 0.5);
  const Tensor<double> scores = target_scores(logits);
  for (double s : scores.values()) CHECK((s > 0.0 && s < 1.0));
  Mask prev = predict_mask(logits, 0.1);
  for (double th = 0.2; th < 0.95; th += 0.1) {
    const Mask cur = predict_mask(logits, th);
    for (std::size_t i = 0; i < cur.size(); ++i) CHECK(cur[i] <= prev[i]);
    prev = cur;
  }
}

TEST_CASE("checkpoints round trip and reject mismatches") {
  oracle::TempDir dir("ckpt");
  const Model<float> m = build_model<float>(tiny(2), 29);
  save_checkpoint(dir / "m.drpw", m, R"({"height":8})");
  const Model<float> back = load_checkpoint<float>(dir / "m.drpw");
  CHECK(back.config == m.config);
  CHECK(back.params == m.params);
  const Model<double> wide = load_checkpoint<double>(dir / "m.drpw");
  CHECK(wide.params.tensor(3)[0] == static_cast<double>(m.params.tensor(3)[0]));
  CHECK(read_checkpoint_header(dir / "m.drpw").find("\"height\":8") != std::string::npos);

  std::string bytes;
  {
    std::ifstream in(dir / "m.drpw", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  std::ofstream(dir / "long.drpw", std::ios::binary) << bytes << 'x';
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "long.drpw"), FormatError);
  std::ofstream(dir / "short.drpw", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "short.drpw"), FormatError);
  std::string magic = bytes;
  magic[1] = 'Q';
  std::ofstream(dir / "magic.drpw", std::ios::binary) << magic;
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "magic.drpw"), FormatError);
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "absent.drpw"), IoError);
}

TEST_CASE("float and double forward passes agree closely") {
  const Model<double> m = build_model<double>(tiny(2), 30);
  const Model<float> mf = model_cast<float>(m);
  const Tensor<double> x = image({1, 1, 16, 16}, 31);
  const auto a = run_network(x, m);
  const auto b = run_network(tensor_cast<float>(x), mf);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(b.final_target()[i] == doctest::Approx(a.final_target()[i]).epsilon(1e-4).scale(1.0));
}
