#include "cli.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "drpca/rpca_classic.hpp"

namespace drpca::cli {
namespace {

int parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  int out = 0;
  try {
    out = std::stoi(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("'" + key + "' expects a boolean, got '" + v + "'");
}

Range parse_range(const std::string& key, const std::string& v) {
  const auto comma = v.find(',');
  if (comma == std::string::npos) throw ConfigError("'" + key + "' expects 'lo,hi', got '" + v + "'");
  return {parse_double(key, v.substr(0, comma)), parse_double(key, v.substr(comma + 1))};
}

std::uint64_t parse_seed(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::uint64_t out = 0;
  try {
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || v.front() == '-') {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

using Setter = std::function<void(const std::string&)>;
using Section = std::map<std::string, Setter>;

std::map<std::string, Section> config_schema(CliConfig& c) {
  std::map<std::string, Section> s;
  s["data"] = {
      {"height", [&c](const std::string& v) { c.data.height = parse_int("height", v); }},
      {"width", [&c](const std::string& v) { c.data.width = parse_int("width", v); }},
      {"bg_rank", [&c](const std::string& v) { c.data.bg_rank = parse_int("bg_rank", v); }},
      {"bg_amplitude", [&c](const std::string& v) { c.data.bg_amplitude = parse_double("bg_amplitude", v); }},
      {"n_targets", [&c](const std::string& v) { c.data.n_targets = parse_int("n_targets", v); }},
      {"target_amplitude",
       [&c](const std::string& v) { c.data.target_amplitude = parse_range("target_amplitude", v); }},
      {"target_sigma", [&c](const std::string& v) { c.data.target_sigma = parse_range("target_sigma", v); }},
      {"noise_sigma", [&c](const std::string& v) { c.data.noise_sigma = parse_double("noise_sigma", v); }},
      {"seed", [&c](const std::string& v) { c.data.seed = parse_seed("seed", v); }},
      {"count", [&c](const std::string& v) { c.count = parse_int("count", v); }},
      {"n_train", [&c](const std::string& v) { c.n_train = parse_int("n_train", v); }},
      {"n_test", [&c](const std::string& v) { c.n_test = parse_int("n_test", v); }},
  };
  s["model"] = {
      {"stages", [&c](const std::string& v) { c.train.stages = parse_int("stages", v); }},
      {"c_int", [&c](const std::string& v) { c.train.c_int = parse_int("c_int", v); }},
      {"rcsab_n", [&c](const std::string& v) { c.train.rcsab_n = parse_int("rcsab_n", v); }},
      {"gen_width", [&c](const std::string& v) { c.train.gen_width = parse_int("gen_width", v); }},
      {"use_gamma_gen", [&c](const std::string& v) { c.train.use_gamma_gen = parse_bool("use_gamma_gen", v); }},
      {"use_eps_gen", [&c](const std::string& v) { c.train.use_eps_gen = parse_bool("use_eps_gen", v); }},
      {"use_drg", [&c](const std::string& v) { c.train.use_drg = parse_bool("use_drg", v); }},
  };
  s["train"] = {
      {"lr", [&c](const std::string& v) { c.train.lr = parse_double("lr", v); }},
      {"batch", [&c](const std::string& v) { c.train.batch = parse_int("batch", v); }},
      {"epochs", [&c](const std::string& v) { c.train.epochs = parse_int("epochs", v); }},
      {"seed", [&c](const std::string& v) { c.train.seed = parse_seed("seed", v); }},
      {"precision",
       [&c](const std::string& v) {
         if (v == "f32") {
           c.train.precision = Precision::f32;
         } else if (v == "f64") {
           c.train.precision = Precision::f64;
         } else {
           throw ConfigError("'precision' expects f32 or f64, got '" + v + "'");
         }
       }},
      {"paper_scale",
       [&c](const std::string& v) {
         if (parse_bool("paper_scale", v)) {
           const TrainConfig p = TrainConfig::paper_scale();
           c.train.stages = p.stages;
           c.train.epochs = p.epochs;
         }
       }},
  };
  s["loss"] = {
      {"lambda_rec", [&c](const std::string& v) { c.train.lambda_rec = parse_double("lambda_rec", v); }},
  };
  s["ablation"] = {
      {"axis", [&c](const std::string& v) { c.axis = v; }},
  };
  return s;
}

void validate(const CliConfig& c) {
  try {
    c.data.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  c.train.validate();
  if (c.count < 0 || c.n_train < 1 || c.n_test < 1) throw ConfigError("count must be >= 0, n_train and n_test >= 1");
}

std::vector<Scene> load_scenes(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("dataset '" + path.string() + "' does not exist");
  return read_dataset(path);
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  return os;
}

void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_f32(std::ostream& os, float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  const char b[4] = {static_cast<char>(u & 0xFF), static_cast<char>((u >> 8) & 0xFF),
                     static_cast<char>((u >> 16) & 0xFF), static_cast<char>(u >> 24)};
  os.write(b, 4);
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const CompatibilityError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return kCompatibility;
  if (dynamic_cast<const NumericError*>(&e)) return kNumericAbort;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kIoError;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
      dynamic_cast<const DomainError*>(&e) || dynamic_cast<const PlacementError*>(&e)) {
    return kConfigError;
  }
  return kFailure;
}

CliConfig config_from(const std::string& path) {
  CliConfig c = path.empty() ? CliConfig{} : load_config(path);
  apply_seed_env(c);
  return c;
}

template <typename T>
TrainResult<T> run_training(const TrainConfig& cfg, std::span<const Scene> train_set, std::span<const Scene> val,
                            const std::filesystem::path& ckpt, std::ostream& out) {
  TrainOptions opts;
  opts.checkpoint = ckpt;
  opts.on_epoch = [&out](const EpochRecord& r) {
    out << "epoch " << r.epoch << " loss=" << std::setprecision(6) << r.loss << " lr=" << r.lr << " iou=" << r.iou
        << " pd=" << r.pd << " fa=" << r.fa << '\n'
        << std::flush;
  };
  return train<T>(cfg, train_set, val, opts);
}

struct DecomposeMaps {
  std::vector<std::pair<std::string, Tensor<float>>> maps;
  std::string params;
};

DecomposeMaps decompose_network(const std::filesystem::path& ckpt, const Tensor<float>& image) {
  const Model<float> model = load_checkpoint<float>(ckpt);
  const DecompositionTrace<float> trace = run_network(image, model);
  DecomposeMaps out;
  std::ostringstream params;
  params << std::setprecision(9);
  for (std::size_t k = 0; k < trace.stages.size(); ++k) {
    const auto& s = trace.stages[k];
    const std::string stage = "stage" + std::to_string(k + 1);
    out.maps.emplace_back(stage + "_B", s.b);
    out.maps.emplace_back(stage + "_T", s.t);
    out.maps.emplace_back(stage + "_D", s.d);
    params << stage << " gamma=" << s.gamma.front() << " epsilon=" << s.epsilon.front() << '\n';
  }
  params << "generator_calls=" << trace.generator_calls << '\n';
  out.params = params.str();
  return out;
}

DecomposeMaps decompose_classic(const Tensor<float>& image, const RpcaConfig& cfg) {
  const RpcaResult r = rpca_solve(to_matrix(image), cfg);
  const StaticConstants sc = static_constants(cfg);
  DecomposeMaps out;
  out.maps.emplace_back("B", from_matrix(r.b));
  out.maps.emplace_back("T", from_matrix(r.t));
  std::ostringstream params;
  params << std::setprecision(9) << "solver=classic lambda=" << cfg.lambda_reg << " mu=" << cfg.mu
         << " gamma=" << sc.gamma << " epsilon=" << sc.epsilon << " iterations=" << r.iterations
         << " converged=" << (r.converged ? 1 : 0) << '\n';
  out.params = params.str();
  return out;
}

}  // namespace

CliConfig parse_config(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  CliConfig c;
  auto schema = config_schema(c);
  for (const auto& [section, body] : tree) {
    const auto sec = schema.find(section);
    if (sec == schema.end()) throw ConfigError("unknown config section [" + section + "]");
    if (!body.data().empty() && body.empty()) throw ConfigError("key '" + section + "' must sit inside a section");
    for (const auto& [key, value] : body) {
      const auto setter = sec->second.find(key);
      if (setter == sec->second.end()) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
      setter->second(value.data());
    }
  }
  validate(c);
  return c;
}

CliConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  return parse_config(in);
}

void apply_seed_env(CliConfig& cfg) {
  const char* env = std::getenv("DRPCA_SEED");
  if (env == nullptr || *env == '\0') return;
  const std::uint64_t seed = parse_seed("DRPCA_SEED", env);
  cfg.data.seed = seed;
  cfg.train.seed = seed;
}

void write_pgm(const std::filesystem::path& path, const Tensor<float>& plane) {
  const Shape s = plane.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("write_pgm expects a single plane, got " + to_string(s));
  float lo = 0.0f, hi = 0.0f;
  if (plane.size() > 0) {
    const auto [mn, mx] = std::minmax_element(plane.values().begin(), plane.values().end());
    lo = *mn;
    hi = *mx;
  }
  std::ofstream os = open_out(path);
  os << "P5\n" << s.w << ' ' << s.h << "\n255\n";
  const float range = hi - lo;
  for (float v : plane.values()) {
    const float u = range > 0.0f && std::isfinite(range) ? (v - lo) / range : 0.0f;
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(u, 0.0f, 1.0f) * 255.0f))));
  }
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

Tensor<float> read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  auto token = [&in]() {
    std::string t;
    while (in) {
      const int ch = in.get();
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(ch)) {
        if (!t.empty()) break;
      } else if (ch != EOF) {
        t.push_back(static_cast<char>(ch));
      }
    }
    return t;
  };
  if (token() != "P5") throw FormatError("'" + path.string() + "' is not a binary PGM");
  const int w = parse_int("width", token());
  const int h = parse_int("height", token());
  const int maxval = parse_int("maxval", token());
  if (w < 1 || h < 1 || maxval != 255) throw FormatError("unsupported PGM header in '" + path.string() + "'");
  Tensor<float> out({1, 1, h, w});
  for (float& v : out.values()) {
    const int ch = in.get();
    if (ch == EOF) throw FormatError("truncated PGM '" + path.string() + "'");
    v = static_cast<float>(ch) / 255.0f;
  }
  return out;
}

void write_raw(const std::filesystem::path& path, const Tensor<float>& plane) {
  const Shape s = plane.shape();
  std::ofstream os = open_out(path);
  put_u16(os, static_cast<std::uint16_t>(s.h));
  put_u16(os, static_cast<std::uint16_t>(s.w));
  for (float v : plane.values()) put_f32(os, v);
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deep unfolded low-rank + sparse decomposition for small-target detection"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_path;
  std::string data_path;
  std::string val_path;
  std::string ckpt_path;
  std::string report_dir;
  std::string image_path;
  std::string solver;
  std::string axis;
  int count = -1;
  int epochs = -1;
  int index = 0;
  bool oracle = false;
  bool raw = false;
  double lambda_reg = 0.0;
  double mu = 100.0;
  int max_iters = 500;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--config", config_path, "INI config");
  synth->add_option("--out", out_path, "dataset file")->required();
  synth->add_option("--count", count, "number of scenes");

  auto* trn = app.add_subcommand("train", "train a network");
  trn->add_option("--config", config_path, "INI config");
  trn->add_option("--data", data_path, "training dataset")->required();
  trn->add_option("--val", val_path, "validation dataset (defaults to the training data)");
  trn->add_option("--out", out_path, "output directory")->required();
  trn->add_option("--epochs", epochs, "override the epoch count");

  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint");
  evl->add_option("--ckpt", ckpt_path, "checkpoint");
  evl->add_flag("--oracle", oracle, "score with the ground-truth masks");
  evl->add_option("--data", data_path, "test dataset")->required();
  evl->add_option("--report", report_dir, "output directory")->required();

  auto* dec = app.add_subcommand("decompose", "dump per-stage decompositions");
  dec->add_option("--ckpt", ckpt_path, "checkpoint");
  dec->add_option("--solver", solver, "'classic' for the iterative solver")->check(CLI::IsMember({"classic"}));
  dec->add_option("--image", image_path, "PGM image or IRSD dataset")->required();
  dec->add_option("--index", index, "scene index inside a dataset");
  dec->add_option("--outdir", out_path, "output directory")->required();
  dec->add_flag("--raw", raw, "also write float32 dumps");
  dec->add_option("--lambda", lambda_reg, "classic solver sparsity weight (default 1/sqrt(max(H,W)))");
  dec->add_option("--mu", mu, "classic solver fidelity weight");
  dec->add_option("--max-iters", max_iters, "classic solver iteration cap");

  auto* abl = app.add_subcommand("ablate", "run an ablation grid");
  abl->add_option("--config", config_path, "INI config");
  abl->add_option("--axis", axis, "components | stages | rcsab | lambda | gen_width");
  abl->add_option("--out", out_path, "CSV file")->required();
  abl->add_option("--data", data_path, "training dataset (default: synthesised from [data])");
  abl->add_option("--test", val_path, "test dataset (default: synthesised from [data])");
  abl->add_option("--epochs", epochs, "override the epoch count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (synth->parsed()) {
      CliConfig cfg = config_from(config_path);
      if (count >= 0) cfg.count = count;
      const std::vector<Scene> scenes = make_scenes(cfg.data, cfg.count);
      write_dataset(out_path, scenes);
      double on = 0.0, total = 0.0;
      for (const Scene& s : scenes) {
        for (std::uint8_t m : s.mask.values()) on += m;
        total += static_cast<double>(s.mask.size());
      }
      out << "scenes=" << scenes.size() << " mask_density=" << std::fixed << std::setprecision(4)
          << (total > 0.0 ? on / total : 0.0) << '\n';
      return kOk;
    }

    if (trn->parsed()) {
      CliConfig cfg = config_from(config_path);
      if (epochs > 0) cfg.train.epochs = epochs;
      cfg.train.validate();
      const std::vector<Scene> train_set = load_scenes(data_path);
      const std::vector<Scene> val_set = val_path.empty() ? train_set : load_scenes(val_path);
      ensure_dir(out_path);
      const std::filesystem::path dir(out_path);
      std::optional<std::string> abort;
      TrainLog log;
      if (cfg.train.precision == Precision::f64) {
        auto r = run_training<double>(cfg.train, train_set, val_set, dir / "model.drpw", out);
        abort = r.abort_reason;
        log = std::move(r.log);
      } else {
        auto r = run_training<float>(cfg.train, train_set, val_set, dir / "model.drpw", out);
        abort = r.abort_reason;
        log = std::move(r.log);
      }
      std::ofstream csv = open_out(dir / "train_log.csv");
      log.write_csv(csv);
      if (abort) {
        err << "training aborted: " << *abort << " (last good weights saved)\n";
        return kNumericAbort;
      }
      return kOk;
    }

    if (evl->parsed()) {
      if (ckpt_path.empty() == !oracle) throw ConfigError("eval needs exactly one of --ckpt or --oracle");
      const std::vector<Scene> test_set = load_scenes(data_path);
      MetricReport report;
      if (oracle) {
        std::vector<Tensor<float>> scores;
        std::vector<Mask> masks;
        for (const Scene& s : test_set) {
          scores.push_back(tensor_cast<float>(s.mask));
          masks.push_back(s.mask);
        }
        report = evaluate_scores(scores, masks);
      } else {
        report = evaluate_checkpoint(ckpt_path, test_set);
      }
      ensure_dir(report_dir);
      const std::filesystem::path dir(report_dir);
      std::ofstream rep = open_out(dir / "report.csv");
      rep << "iou,f1,pd,fa_per_1e6\n" << std::setprecision(10) << report.iou << ',' << report.f1 << ',' << report.pd
          << ',' << report.fa << '\n';
      std::ofstream roc = open_out(dir / "roc.csv");
      write_roc_csv(roc, report.roc);
      out << std::fixed << std::setprecision(4) << "IoU=" << report.iou << " F1=" << report.f1
          << " Pd=" << report.pd << " Fa=" << std::setprecision(2) << report.fa << '\n';
      return kOk;
    }

    if (dec->parsed()) {
      if (ckpt_path.empty() == solver.empty()) throw ConfigError("decompose needs exactly one of --ckpt or --solver");
      Tensor<float> image;
      if (std::filesystem::path(image_path).extension() == ".pgm") {
        image = read_pgm(image_path);
      } else {
        const std::vector<Scene> scenes = load_scenes(image_path);
        if (index < 0 || static_cast<std::size_t>(index) >= scenes.size()) {
          throw ConfigError("--index " + std::to_string(index) + " outside dataset of " +
                            std::to_string(scenes.size()) + " scenes");
        }
        image = scenes[index].image;
      }
      DecomposeMaps maps;
      if (!ckpt_path.empty()) {
        maps = decompose_network(ckpt_path, image);
      } else {
        RpcaConfig rc;
        rc.lambda_reg = lambda_reg > 0.0 ? lambda_reg : 1.0 / std::sqrt(std::max(image.shape().h, image.shape().w));
        rc.mu = mu;
        rc.max_iters = max_iters;
        maps = decompose_classic(image, rc);
      }
      ensure_dir(out_path);
      const std::filesystem::path dir(out_path);
      for (const auto& [name, plane] : maps.maps) {
        write_pgm(dir / (name + ".pgm"), plane);
        if (raw) write_raw(dir / (name + ".f32"), plane);
      }
      std::ofstream params = open_out(dir / "params.txt");
      params << maps.params;
      out << "wrote " << maps.maps.size() << " maps to " << dir.string() << '\n';
      return kOk;
    }

    if (abl->parsed()) {
      CliConfig cfg = config_from(config_path);
      if (!axis.empty()) cfg.axis = axis;
      if (epochs > 0) cfg.train.epochs = epochs;
      const AblationAxis ax = parse_axis(cfg.axis);
      std::vector<Scene> train_set;
      std::vector<Scene> test_set;
      if (!data_path.empty()) {
        train_set = load_scenes(data_path);
      } else {
        train_set = make_scenes(cfg.data, cfg.n_train);
      }
      if (!val_path.empty()) {
        test_set = load_scenes(val_path);
      } else {
        SceneSpec test_spec = cfg.data;
        test_spec.seed = cfg.data.seed + 1;
        test_set = make_scenes(test_spec, cfg.n_test);
      }
      const auto rows = ablate(cfg.train, ax, train_set, test_set, [&out](const AblationRow& r) {
        out << r.point.label << " iou=" << r.report.iou << " f1=" << r.report.f1 << '\n' << std::flush;
      });
      std::ofstream csv = open_out(out_path);
      write_ablation_csv(csv, rows);
      return kOk;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e);
  }
  return kFailure;
}

}  // namespace drpca::cli
