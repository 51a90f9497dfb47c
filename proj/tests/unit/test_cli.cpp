#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <sys/wait.h>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "drpca/scene_synth.hpp"
#include "oracles.hpp"

using namespace drpca;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "drpca");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int line_count(const std::filesystem::path& p) {
  std::ifstream in(p);
  int n = 0;
  for (std::string l; std::getline(in, l);) ++n;
  return n;
}

void write_text(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

// Small model and data so every command finishes in well under a second.
constexpr const char* kTinyIni =
    "[data]\nheight = 16\nwidth = 16\nbg_rank = 1\nn_targets = 1\ncount = 6\n"
    "[model]\nstages = 3\nc_int = 2\nrcsab_n = 1\ngen_width = 2\n"
    "[train]\nepochs = 1\nbatch = 3\nlr = 0.001\n";

// Minimal independent P5 reader: header tokens, then raw bytes.
std::vector<int> read_p5(const std::filesystem::path& p, int& w, int& h) {
  std::ifstream in(p, std::ios::binary);
  std::string magic;
  int maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  REQUIRE(magic == "P5");
  REQUIRE(maxval == 255);
  std::vector<int> px(static_cast<std::size_t>(w) * h);
  for (int& v : px) v = in.get();
  REQUIRE(in.good());
  CHECK(in.peek() == EOF);
  return px;
}

}  // namespace

TEST_CASE("config parsing") {
  std::istringstream ok(
      "[data]\ntarget_amplitude = 0.2,0.4\nseed = 5\nn_train = 20\n[model]\nuse_drg = false\n"
      "[train]\nprecision = f64\n[loss]\nlambda_rec = 0.5\n[ablation]\naxis = stages\n");
  const cli::CliConfig c = cli::parse_config(ok);
  CHECK(c.data.target_amplitude.lo == 0.2);
  CHECK(c.data.target_amplitude.hi == 0.4);
  CHECK(c.data.seed == 5);
  CHECK(c.n_train == 20);
  CHECK_FALSE(c.train.use_drg);
  CHECK(c.train.precision == Precision::f64);
  CHECK(c.train.lambda_rec == 0.5);
  CHECK(c.axis == "stages");

  for (const char* bad : {"[data]\nheigth = 5\n", "[dta]\nheight = 5\n", "[data]\nheight = five\n",
                          "[data]\nheight = 5x\n", "[model]\nuse_drg = maybe\n", "[train]\nprecision = f16\n",
                          "[data]\ntarget_amplitude = 0.3\n", "[data]\nbg_rank = 100\n", "[train]\nlr = -1\n",
                          "[data]\nseed = -3\n", "height = 5\n"}) {
    std::istringstream in(bad);
    CHECK_THROWS_AS(cli::parse_config(in), ConfigError);
  }

  std::istringstream full_size("[train]\npaper_scale = true\n");
  const cli::CliConfig p = cli::parse_config(full_size);
  CHECK(p.train.stages == 6);
  CHECK(p.train.epochs == 400);
}

TEST_CASE("DRPCA_SEED overrides both seeds") {
  cli::CliConfig c;
  ::setenv("DRPCA_SEED", "77", 1);
  cli::apply_seed_env(c);
  ::unsetenv("DRPCA_SEED");
  CHECK(c.data.seed == 77);
  CHECK(c.train.seed == 77);
  ::setenv("DRPCA_SEED", "x", 1);
  CHECK_THROWS_AS(cli::apply_seed_env(c), ConfigError);
  ::unsetenv("DRPCA_SEED");
}

TEST_CASE("synth writes a readable dataset and is reproducible") {
  oracle::TempDir dir("cli_synth");
  Result r = run({"synth", "--out", (dir / "a.irsd").string(), "--count", "4"});
  CHECK(r.code == 0);
  CHECK(r.out.find("scenes=4") != std::string::npos);
  CHECK(read_dataset(dir / "a.irsd").size() == 4);
  CHECK(run({"synth", "--out", (dir / "b.irsd").string(), "--count", "4"}).code == 0);
  CHECK(slurp(dir / "a.irsd") == slurp(dir / "b.irsd"));

  write_text(dir / "none.ini", "[data]\nn_targets = 0\n");
  r = run({"synth", "--config", (dir / "none.ini").string(), "--out", (dir / "c.irsd").string(), "--count", "2"});
  CHECK(r.code == 0);
  CHECK(r.out.find("mask_density=0.0000") != std::string::npos);

  write_text(dir / "bad.ini", "[data]\ncolour = red\n");
  r = run({"synth", "--config", (dir / "bad.ini").string(), "--out", (dir / "d.irsd").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("colour") != std::string::npos);
  CHECK(run({"synth", "--config", (dir / "missing.ini").string(), "--out", (dir / "e.irsd").string()}).code == 3);
}

TEST_CASE("train, eval and decompose") {
  oracle::TempDir dir("cli_train");
  const std::string ini = (dir / "tiny.ini").string();
  write_text(ini, kTinyIni);
  const std::string data = (dir / "d.irsd").string();
  REQUIRE(run({"synth", "--config", ini, "--out", data}).code == 0);

  Result r = run({"train", "--config", ini, "--data", data, "--out", (dir / "run").string(), "--epochs", "2"});
  REQUIRE(r.code == 0);
  CHECK(std::filesystem::exists(dir / "run" / "model.drpw"));
  CHECK(line_count(dir / "run" / "train_log.csv") == 3);
  CHECK(run({"train", "--config", ini, "--data", data, "--out", (dir / "run2").string(), "--epochs", "2"}).code == 0);
  CHECK(slurp(dir / "run" / "train_log.csv") == slurp(dir / "run2" / "train_log.csv"));
  CHECK(run({"train", "--config", ini, "--data", (dir / "nope.irsd").string(), "--out", (dir / "x").string()}).code == 3);

  const std::string ckpt = (dir / "run" / "model.drpw").string();
  r = run({"eval", "--ckpt", ckpt, "--data", data, "--report", (dir / "rep").string()});
  CHECK(r.code == 0);
  CHECK(r.out.rfind("IoU=", 0) == 0);
  CHECK(r.out.find(" F1=") != std::string::npos);
  CHECK(r.out.find(" Pd=") != std::string::npos);
  CHECK(r.out.find(" Fa=") != std::string::npos);
  CHECK(line_count(dir / "rep" / "roc.csv") == 65);
  CHECK(line_count(dir / "rep" / "report.csv") == 2);

  r = run({"eval", "--oracle", "--data", data, "--report", (dir / "orep").string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("IoU=1.0000") != std::string::npos);
  CHECK(r.out.find("Pd=1.0000") != std::string::npos);

  write_text(dir / "big.ini", "[data]\nheight = 24\nwidth = 24\ncount = 2\n");
  REQUIRE(run({"synth", "--config", (dir / "big.ini").string(), "--out", (dir / "big.irsd").string()}).code == 0);
  CHECK(run({"eval", "--ckpt", ckpt, "--data", (dir / "big.irsd").string(), "--report", (dir / "r3").string()}).code ==
        5);
  CHECK(run({"eval", "--data", data, "--report", (dir / "r4").string()}).code == 2);

  r = run({"decompose", "--ckpt", ckpt, "--image", data, "--index", "2", "--outdir", (dir / "dec").string()});
  CHECK(r.code == 0);
  int pgms = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "dec")) pgms += e.path().extension() == ".pgm";
  CHECK(pgms == 9);
  const std::string params = slurp(dir / "dec" / "params.txt");
  CHECK(params.find("stage3 gamma=") != std::string::npos);
  CHECK(params.find("generator_calls=9") != std::string::npos);
  CHECK(run({"decompose", "--ckpt", ckpt, "--image", data, "--index", "9", "--outdir", (dir / "d2").string()}).code == 2);
}

TEST_CASE("PGM dumps round trip through an independent reader") {
  oracle::TempDir dir("cli_pgm");
  Tensor<float> img({1, 1, 9, 12});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i % 17) * 0.25f - 1.0f;
  cli::write_pgm(dir / "a.pgm", img);
  int w = 0, h = 0;
  const std::vector<int> px = read_p5(dir / "a.pgm", w, h);
  CHECK(w == 12);
  CHECK(h == 9);
  const float lo = -1.0f, hi = 3.0f;
  for (std::size_t i = 0; i < px.size(); ++i) {
    CHECK(px[i] == static_cast<int>(std::lround((img[i] - lo) / (hi - lo) * 255.0f)));
  }
  const Tensor<float> back = cli::read_pgm(dir / "a.pgm");
  CHECK(back.shape() == img.shape());
  for (std::size_t i = 0; i < px.size(); ++i) CHECK(back[i] == static_cast<float>(px[i]) / 255.0f);

  cli::write_raw(dir / "a.f32", img);
  const std::string raw = slurp(dir / "a.f32");
  CHECK(raw.size() == 4 + 4 * img.size());
  float first = 0.0f;
  std::memcpy(&first, raw.data() + 4, 4);
  CHECK(first == img[0]);
}

TEST_CASE("classic solver on a zero image gives black outputs") {
  oracle::TempDir dir("cli_classic");
  cli::write_pgm(dir / "zero.pgm", Tensor<float>({1, 1, 16, 16}));
  const Result r = run({"decompose", "--solver", "classic", "--image", (dir / "zero.pgm").string(), "--outdir",
                        (dir / "out").string(), "--raw"});
  REQUIRE(r.code == 0);
  for (const char* name : {"B.pgm", "T.pgm"}) {
    int w = 0, h = 0;
    for (int v : read_p5(dir / "out" / name, w, h)) CHECK(v == 0);
  }
  CHECK(std::filesystem::exists(dir / "out" / "T.f32"));
  CHECK(slurp(dir / "out" / "params.txt").find("solver=classic") != std::string::npos);
  CHECK(run({"decompose", "--image", (dir / "zero.pgm").string(), "--outdir", (dir / "o2").string()}).code == 2);
}

TEST_CASE("ablate emits one row per grid point and is deterministic") {
  oracle::TempDir dir("cli_ablate");
  const std::string ini = (dir / "tiny.ini").string();
  write_text(ini, std::string(kTinyIni) + "[ablation]\naxis = components\n");
  const std::string data = (dir / "d.irsd").string();
  REQUIRE(run({"synth", "--config", ini, "--out", data, "--count", "3"}).code == 0);

  CHECK(run({"ablate", "--config", ini, "--data", data, "--test", data, "--out", (dir / "c.csv").string()}).code == 0);
  CHECK(line_count(dir / "c.csv") == 7);
  CHECK(run({"ablate", "--config", ini, "--data", data, "--test", data, "--out", (dir / "c2.csv").string()}).code == 0);
  CHECK(slurp(dir / "c.csv") == slurp(dir / "c2.csv"));

  CHECK(run({"ablate", "--config", ini, "--axis", "stages", "--data", data, "--test", data, "--out",
             (dir / "s.csv").string()})
            .code == 0);
  CHECK(line_count(dir / "s.csv") == 5);
  CHECK(run({"ablate", "--config", ini, "--axis", "depth", "--out", (dir / "x.csv").string()}).code == 2);
}

TEST_CASE("numeric blow-up exits with code 4") {
  oracle::TempDir dir("cli_nan");
  const std::string ini = (dir / "nan.ini").string();
  write_text(ini, std::string(kTinyIni) + "[loss]\nlambda_rec = 0.1\n");
  std::string text = slurp(ini);
  text.replace(text.find("lr = 0.001"), 10, "lr = 1e300");
  write_text(ini, text);
  const std::string data = (dir / "d.irsd").string();
  REQUIRE(run({"synth", "--config", ini, "--out", data}).code == 0);
  const Result r = run({"train", "--config", ini, "--data", data, "--out", (dir / "run").string(), "--epochs", "3"});
  CHECK(r.code == 4);
  CHECK(std::filesystem::exists(dir / "run" / "model.drpw"));
}

TEST_CASE("argument errors exit with code 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"synth"}).code == 2);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("the installed binary runs") {
  oracle::TempDir dir("cli_exe");
  const std::string cmd = std::string(DRPCA_EXE) + " synth --count 1 --out " + (dir / "a.irsd").string() + " > " +
                          (dir / "log.txt").string();
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(slurp(dir / "log.txt").rfind("scenes=1 mask_density=", 0) == 0);
  const std::string bad = std::string(DRPCA_EXE) + " eval --oracle --data " + (dir / "none").string() +
                          " --report " + (dir / "r").string() + " 2> /dev/null";
  CHECK(WEXITSTATUS(std::system(bad.c_str())) == 3);
}
