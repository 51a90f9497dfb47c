#include "drpca/train_eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace drpca {
namespace {

template <typename T>
struct Batch {
  Tensor<T> images;
  Tensor<T> target;
};

template <typename T>
Batch<T> make_batch(std::span<const Scene> scenes, std::span<const std::size_t> indices) {
  const Shape s0 = scenes[indices.front()].image.shape();
  const Shape shape{static_cast<int>(indices.size()), 1, s0.h, s0.w};
  Batch<T> b{Tensor<T>(shape), Tensor<T>(shape)};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Scene& sc = scenes[indices[i]];
    if (sc.image.shape() != s0) throw ShapeError("scenes in a dataset must share one size");
    auto img = b.images.sample(static_cast<int>(i));
    auto tgt = b.target.sample(static_cast<int>(i));
    for (std::size_t k = 0; k < img.size(); ++k) {
      img[k] = static_cast<T>(sc.image[k]);
      tgt[k] = static_cast<T>(sc.mask[k]);
    }
  }
  return b;
}

template <typename T>
bool finite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(v); });
}

void check_datasets(std::span<const Scene> train_set) {
  if (train_set.empty()) throw ValidationError("training set is empty");
  const Shape s = train_set.front().image.shape();
  for (const Scene& sc : train_set) {
    if (sc.image.shape() != s || sc.mask.shape() != s) throw ShapeError("scenes in a dataset must share one size");
  }
}

template <typename T>
MetricReport evaluate_impl(const Model<T>& model, std::span<const Scene> test_set, int n_thresholds, int batch) {
  std::vector<Tensor<float>> scores;
  std::vector<Mask> masks;
  scores.reserve(test_set.size());
  std::vector<std::size_t> idx(test_set.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(batch));
    const Batch<T> b = make_batch<T>(test_set, std::span(idx).subspan(start, end - start));
    const DecompositionTrace<T> trace = run_network(b.images, model);
    const Tensor<T> s = target_scores(trace.final_target());
    for (std::size_t i = start; i < end; ++i) {
      scores.push_back(tensor_cast<float>(slice_batch(s, static_cast<int>(i - start), 1)));
      masks.push_back(test_set[i].mask);
    }
  }
  return evaluate_scores(scores, masks, n_thresholds);
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

nlohmann::ordered_json config_json(const TrainConfig& c) {
  return {{"stages", c.stages},       {"c_int", c.c_int},
          {"rcsab_n", c.rcsab_n},     {"gen_width", c.gen_width},
          {"lr", c.lr},               {"batch", c.batch},
          {"epochs", c.epochs},       {"lambda_rec", c.lambda_rec},
          {"use_gamma_gen", c.use_gamma_gen}, {"use_eps_gen", c.use_eps_gen},
          {"use_drg", c.use_drg},     {"seed", c.seed},
          {"precision", to_string(c.precision)}};
}

}  // namespace

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("invalid train config: ") + what);
  };
  need(stages >= 1, "stages must be >= 1");
  need(c_int >= 1, "c_int must be >= 1");
  need(rcsab_n >= 0, "rcsab_n must be >= 0");
  need(gen_width >= 1, "gen_width must be >= 1");
  need(lr > 0.0 && std::isfinite(lr), "lr must be positive");
  need(batch >= 1, "batch must be >= 1");
  need(epochs >= 1, "epochs must be >= 1");
  need(lambda_rec >= 0.0 && std::isfinite(lambda_rec), "lambda_rec must be >= 0");
}

NetConfig TrainConfig::net_config() const {
  NetConfig n;
  n.stages = stages;
  n.channels = c_int;
  n.rcsab_blocks = rcsab_n;
  n.gen_width = gen_width;
  n.use_gamma_gen = use_gamma_gen;
  n.use_eps_gen = use_eps_gen;
  n.use_drg = use_drg;
  return n;
}

LossConfig TrainConfig::loss_config() const {
  LossConfig l;
  l.lambda_rec = lambda_rec;
  return l;
}

TrainConfig TrainConfig::paper_scale() {
  TrainConfig c;
  c.stages = 6;
  c.epochs = 400;
  return c;
}

double poly_lr(std::int64_t iter, std::int64_t total, double base) {
  if (total <= 0 || iter < 0 || iter > total) {
    throw DomainError("poly_lr: need 0 <= iter <= total, got iter=" + std::to_string(iter) +
                      " total=" + std::to_string(total));
  }
  return base * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(total), 0.9);
}

void TrainLog::write_csv(std::ostream& os) const {
  const std::size_t k = epochs.empty() ? 0 : epochs.front().gamma_mean.size();
  os << "epoch,loss,seg_loss,rec_loss,lr,iou,f1,pd,fa";
  for (std::size_t s = 1; s <= k; ++s) os << ",gamma_mean_s" << s;
  for (std::size_t s = 1; s <= k; ++s) os << ",eps_mean_s" << s;
  os << '\n';
  os << std::setprecision(10);
  for (const EpochRecord& r : epochs) {
    os << r.epoch << ',' << r.loss << ',' << r.seg_loss << ',' << r.rec_loss << ',' << r.lr << ',' << r.iou << ','
       << r.f1 << ',' << r.pd << ',' << r.fa;
    for (double g : r.gamma_mean) os << ',' << g;
    for (double e : r.eps_mean) os << ',' << e;
    os << '\n';
  }
}

template <typename T>
Adam<T>::Adam(const ParameterStore<T>& store) {
  for (ParamId i = 0; i < store.size(); ++i) {
    m_.emplace_back(store.tensor(i).shape());
    v_.emplace_back(store.tensor(i).shape());
  }
}

template <typename T>
void Adam<T>::step(ParameterStore<T>& store, const std::vector<Tensor<T>>& grads, double lr) {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  if (grads.size() != store.size()) throw ValidationError("Adam: gradient count differs from parameter count");
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (ParamId i = 0; i < store.size(); ++i) {
    Tensor<T>& p = store.tensor(i);
    require_same_shape(p.shape(), grads[i].shape(), "Adam::step");
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = static_cast<double>(grads[i][k]);
      const double m = kBeta1 * static_cast<double>(m_[i][k]) + (1.0 - kBeta1) * g;
      const double v = kBeta2 * static_cast<double>(v_[i][k]) + (1.0 - kBeta2) * g * g;
      m_[i][k] = static_cast<T>(m);
      v_[i][k] = static_cast<T>(v);
      const double update = lr * (m / c1) / (std::sqrt(v / c2) + kEps);
      p[k] = static_cast<T>(static_cast<double>(p[k]) - update);
    }
  }
}

template <typename T>
TrainResult<T> train(const TrainConfig& config, std::span<const Scene> train_set, std::span<const Scene> val_set,
                     const TrainOptions& options) {
  config.validate();
  check_datasets(train_set);
  if (options.eval_each_epoch && val_set.empty()) throw ValidationError("validation set is empty");
  const Shape shape = train_set.front().image.shape();

  TrainResult<T> result{build_model<T>(config.net_config(), config.seed), {}, std::nullopt};
  Model<T>& model = result.model;
  TrainLog& log = result.log;
  const LossConfig loss_cfg = config.loss_config();
  Adam<T> adam(model.params);

  const std::size_t n = train_set.size();
  const std::size_t bs = static_cast<std::size_t>(config.batch);
  const std::int64_t batches = static_cast<std::int64_t>((n + bs - 1) / bs);
  log.total_iters = batches * config.epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng order_rng(config.seed ^ 0x5DEECE66DULL);
  ParameterStore<T> last_good = model.params;
  const std::string meta = training_metadata(config, shape.h, shape.w);

  auto save = [&] {
    if (options.checkpoint) save_checkpoint(*options.checkpoint, model, meta);
  };
  auto abort_with = [&](const std::string& why) {
    model.params = last_good;
    result.abort_reason = why;
    save();
    return result;
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.gamma_mean.assign(config.stages, 0.0);
    rec.eps_mean.assign(config.stages, 0.0);
    for (std::int64_t b = 0; b < batches; ++b) {
      const std::int64_t iter = epoch * batches + b;
      const double lr = poly_lr(iter, log.total_iters, config.lr);
      const std::size_t start = static_cast<std::size_t>(b) * bs;
      const std::size_t end = std::min(n, start + bs);
      const Batch<T> batch = make_batch<T>(train_set, std::span(order).subspan(start, end - start));

      Tape<T> tape;
      tape.bind(model.params);
      const Var<T> x = tape.constant(batch.images);
      std::vector<StageVars<T>> stages;
      try {
        stages = net_forward(x, model);
      } catch (const NumericError& e) {
        return abort_with("epoch " + std::to_string(epoch + 1) + ": " + e.what());
      }
      const LossVars<T> loss = total_loss(stages, batch.target, x, loss_cfg);
      const double total = static_cast<double>(loss.total.value()[0]);
      if (!std::isfinite(total)) return abort_with("epoch " + std::to_string(epoch + 1) + ": non-finite loss");
      tape.backward(loss.total);
      std::vector<Tensor<T>> grads;
      grads.reserve(model.params.size());
      for (ParamId p = 0; p < model.params.size(); ++p) {
        grads.push_back(tape.param_grad(p));
        if (!finite(grads.back())) {
          return abort_with("epoch " + std::to_string(epoch + 1) + ": non-finite gradient for " +
                            model.params.name(p));
        }
      }
      last_good = model.params;
      adam.step(model.params, grads, lr);
      log.step_lr.push_back(lr);

      const double w = static_cast<double>(end - start);
      rec.loss += total * w;
      rec.seg_loss += static_cast<double>(loss.seg.value()[0]) * w;
      rec.rec_loss += static_cast<double>(loss.rec.value()[0]) * w;
      rec.lr = lr;
      for (int s = 0; s < config.stages; ++s) {
        for (T g : stages[s].gamma.value().values()) rec.gamma_mean[s] += static_cast<double>(g);
        for (T e : stages[s].epsilon.value().values()) rec.eps_mean[s] += static_cast<double>(e);
      }
    }
    const double dn = static_cast<double>(n);
    rec.loss /= dn;
    rec.seg_loss /= dn;
    rec.rec_loss /= dn;
    for (int s = 0; s < config.stages; ++s) {
      rec.gamma_mean[s] /= dn;
      rec.eps_mean[s] /= dn;
    }
    if (options.eval_each_epoch) {
      const MetricReport r = evaluate_impl(model, val_set, 2, config.batch);
      rec.iou = r.iou;
      rec.f1 = r.f1;
      rec.pd = r.pd;
      rec.fa = r.fa;
    }
    log.epochs.push_back(rec);
    save();
    if (options.on_epoch) options.on_epoch(rec);
  }
  return result;
}

MetricReport evaluate_scores(std::span<const Tensor<float>> scores, std::span<const Mask> masks, int n_thresholds) {
  if (scores.size() != masks.size()) throw ValidationError("evaluate: score and mask counts differ");
  PixelCounts pixels;
  ObjectCounts objects;
  std::vector<ObjectCounts> roc(static_cast<std::size_t>(std::max(n_thresholds, 0)));
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (float v : scores[i].values()) {
      if (!(v >= 0.0f && v <= 1.0f)) throw DomainError("evaluate: scores must lie in [0, 1]");
    }
    const Mask pred = threshold_scores(scores[i], 0.5);
    pixels += pixel_counts(pred, masks[i]);
    objects += object_counts(pred, masks[i]);
    if (n_thresholds >= 2) {
      const std::vector<ObjectCounts> c = roc_counts(scores[i], masks[i], n_thresholds);
      for (std::size_t k = 0; k < c.size(); ++k) roc[k] += c[k];
    }
  }
  MetricReport r;
  r.iou = pixels.iou();
  r.f1 = pixels.f1();
  r.pd = objects.pd();
  r.fa = objects.fa();
  if (n_thresholds >= 2) r.roc = roc_from_counts(roc);
  return r;
}

template <typename T>
MetricReport evaluate(const Model<T>& model, std::span<const Scene> test_set, int n_thresholds, int batch) {
  if (batch < 1) throw ValidationError("evaluate: batch must be >= 1");
  if (test_set.empty()) return evaluate_scores({}, {}, n_thresholds);
  return evaluate_impl(model, test_set, n_thresholds, batch);
}

std::string training_metadata(const TrainConfig& config, int height, int width) {
  const nlohmann::ordered_json j = {
      {"height", height}, {"width", width}, {"train", config_json(config)}, {"created", utc_timestamp()}};
  return j.dump();
}

MetricReport evaluate_checkpoint(const std::filesystem::path& ckpt, std::span<const Scene> test_set,
                                 int n_thresholds) {
  const auto header = nlohmann::json::parse(read_checkpoint_header(ckpt), nullptr, false);
  if (header.is_discarded()) throw FormatError("checkpoint header is not valid JSON");
  const Model<float> model = load_checkpoint<float>(ckpt);
  if (header.contains("extra") && header["extra"].contains("height") && !test_set.empty()) {
    const int h = header["extra"]["height"].get<int>();
    const int w = header["extra"]["width"].get<int>();
    const Shape s = test_set.front().image.shape();
    if (s.h != h || s.w != w) {
      throw CompatibilityError("checkpoint was trained on " + std::to_string(h) + "x" + std::to_string(w) +
                               " images, data is " + std::to_string(s.h) + "x" + std::to_string(s.w));
    }
  }
  return evaluate(model, test_set, n_thresholds);
}

std::vector<ParamEntry> sample_param_entries(const ParameterStore<double>& store, std::size_t count,
                                             std::uint64_t seed) {
  const std::size_t total = store.scalar_count();
  if (total == 0) return {};
  Rng rng(seed);
  std::vector<ParamEntry> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t flat = rng.below(total);
    ParamId id = 0;
    while (flat >= store.tensor(id).size()) flat -= store.tensor(id++).size();
    out.push_back({id, flat});
  }
  return out;
}

double finite_diff_gradcheck(const LossClosure& closure, ParameterStore<double>& store,
                             std::span<const ParamEntry> entries, double eps) {
  auto eval = [&] {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    tape.bind(store);
    const Var<double> v = closure(tape);
    if (v.value().size() != 1) throw ShapeError("gradcheck closure must return a scalar");
    const double out = v.value()[0];
    if (!std::isfinite(out)) throw NumericError("gradcheck: closure value is not finite");
    return out;
  };

  Tape<double> tape;
  tape.bind(store);
  const Var<double> root = closure(tape);
  if (!std::isfinite(root.value()[0])) throw NumericError("gradcheck: closure value is not finite");
  tape.backward(root);

  double worst = 0.0;
  for (const ParamEntry& e : entries) {
    const double analytic = tape.param_grad(e.id)[e.index];
    double& w = store.tensor(e.id)[e.index];
    const double orig = w;
    w = orig + eps;
    const double plus = eval();
    w = orig - eps;
    const double minus = eval();
    w = orig;
    const double numeric = (plus - minus) / (2.0 * eps);
    if (!std::isfinite(analytic) || !std::isfinite(numeric)) throw NumericError("gradcheck: non-finite gradient");
    const double err = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    worst = std::max(worst, err);
  }
  return worst;
}

AblationAxis parse_axis(const std::string& name) {
  if (name == "components") return AblationAxis::components;
  if (name == "stages") return AblationAxis::stages;
  if (name == "rcsab") return AblationAxis::rcsab;
  if (name == "lambda") return AblationAxis::lambda;
  if (name == "gen_width") return AblationAxis::gen_width;
  throw ConfigError("unknown ablation axis '" + name + "' (components, stages, rcsab, lambda, gen_width)");
}

std::string axis_name(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::components: return "components";
    case AblationAxis::stages: return "stages";
    case AblationAxis::rcsab: return "rcsab";
    case AblationAxis::lambda: return "lambda";
    case AblationAxis::gen_width: return "gen_width";
  }
  return "?";
}

std::vector<AblationPoint> ablation_grid(const TrainConfig& base, AblationAxis axis) {
  std::vector<AblationPoint> out;
  switch (axis) {
    case AblationAxis::components: {
      struct Row {
        const char* label;
        bool eps, gamma, drg;
      };
      for (const Row& r : {Row{"a", false, false, false}, Row{"b", true, false, false}, Row{"c", false, true, false},
                           Row{"d", false, false, true}, Row{"e", true, true, false}, Row{"f", true, true, true}}) {
        TrainConfig c = base;
        c.use_eps_gen = r.eps;
        c.use_gamma_gen = r.gamma;
        c.use_drg = r.drg;
        out.push_back({r.label, c});
      }
      break;
    }
    case AblationAxis::stages:
      for (int k : {4, 5, 6, 7}) {
        TrainConfig c = base;
        c.stages = k;
        out.push_back({"K=" + std::to_string(k), c});
      }
      break;
    case AblationAxis::rcsab:
      for (int nb : {3, 4, 5, 6}) {
        TrainConfig c = base;
        c.rcsab_n = nb;
        out.push_back({"N=" + std::to_string(nb), c});
      }
      break;
    case AblationAxis::lambda:
      for (double l : {0.5, 0.1, 0.05}) {
        TrainConfig c = base;
        c.lambda_rec = l;
        std::ostringstream os;
        os << "lambda=" << l;
        out.push_back({os.str(), c});
      }
      break;
    case AblationAxis::gen_width:
      for (int w : {2, 3, 4, 8}) {
        TrainConfig c = base;
        c.gen_width = w;
        out.push_back({"width=" + std::to_string(w), c});
      }
      break;
  }
  return out;
}

std::vector<AblationRow> ablate(const TrainConfig& base, AblationAxis axis, std::span<const Scene> train_set,
                                std::span<const Scene> test_set, const std::function<void(const AblationRow&)>& on_row) {
  std::vector<AblationRow> rows;
  TrainOptions opts;
  opts.eval_each_epoch = false;
  for (const AblationPoint& p : ablation_grid(base, axis)) {
    AblationRow row{p, {}};
    if (p.config.precision == Precision::f64) {
      row.report = evaluate(train<double>(p.config, train_set, test_set, opts).model, test_set);
    } else {
      row.report = evaluate(train<float>(p.config, train_set, test_set, opts).model, test_set);
    }
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string config_fingerprint(const TrainConfig& config) {
  const std::string text = config_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

void write_ablation_csv(std::ostream& os, std::span<const AblationRow> rows) {
  os << "label,eps_gen,gamma_gen,drg,stages,rcsab_n,gen_width,lambda_rec,seed,fingerprint,iou,f1,pd,fa\n";
  os << std::setprecision(10);
  for (const AblationRow& r : rows) {
    const TrainConfig& c = r.point.config;
    os << r.point.label << ',' << c.use_eps_gen << ',' << c.use_gamma_gen << ',' << c.use_drg << ',' << c.stages
       << ',' << c.rcsab_n << ',' << c.gen_width << ',' << c.lambda_rec << ',' << c.seed << ','
       << config_fingerprint(c) << ',' << r.report.iou << ',' << r.report.f1 << ',' << r.report.pd << ','
       << r.report.fa << '\n';
  }
}

template class Adam<float>;
template class Adam<double>;
template TrainResult<float> train<float>(const TrainConfig&, std::span<const Scene>, std::span<const Scene>,
                                         const TrainOptions&);
template TrainResult<double> train<double>(const TrainConfig&, std::span<const Scene>, std::span<const Scene>,
                                           const TrainOptions&);
template MetricReport evaluate<float>(const Model<float>&, std::span<const Scene>, int, int);
template MetricReport evaluate<double>(const Model<double>&, std::span<const Scene>, int, int);

}  // namespace drpca
