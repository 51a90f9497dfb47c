#include "drpca/losses_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <tuple>

namespace drpca {
namespace {

void require_binary(const Mask& m, const char* what) {
  for (std::uint8_t v : m.values()) {
    if (v > 1) throw DomainError(std::string(what) + ": mask values must be 0 or 1");
  }
}

double sigmoid(double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

}  // namespace

void LossConfig::validate() const {
  if (!(lambda_rec >= 0.0)) throw ConfigError("LossConfig: lambda_rec must be >= 0");
  if (!(smooth_eps > 0.0)) throw ConfigError("LossConfig: smooth_eps must be > 0");
}

template <typename T>
double soft_iou_loss(const Tensor<T>& logits, const Mask& gt, const LossConfig& cfg) {
  require_same_shape(logits.shape(), gt.shape(), "soft_iou_loss");
  require_binary(gt, "soft_iou_loss");
  const int batch = logits.shape().n;
  double total = 0.0;
  for (int n = 0; n < batch; ++n) {
    const auto l = logits.sample(n);
    const auto g = gt.sample(n);
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (std::size_t i = 0; i < l.size(); ++i) {
      const double p = sigmoid(static_cast<double>(l[i]));
      inter += p * g[i];
      psum += p;
      gsum += g[i];
    }
    total += 1.0 - (inter + cfg.smooth_eps) / (psum + gsum - inter + cfg.smooth_eps);
  }
  return batch > 0 ? total / batch : 0.0;
}

template <typename T>
double recon_loss(const Tensor<T>& d_final, const Tensor<T>& d_input) {
  require_same_shape(d_final.shape(), d_input.shape(), "recon_loss");
  if (d_final.size() == 0) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < d_final.size(); ++i) {
    const double diff = static_cast<double>(d_final[i]) - static_cast<double>(d_input[i]);
    acc += diff * diff;
  }
  return acc / static_cast<double>(d_final.size());
}

template <typename T>
LossParts total_loss(const DecompositionTrace<T>& trace, const Mask& gt, const Tensor<T>& x_input,
                     const LossConfig& cfg) {
  cfg.validate();
  if (trace.stages.empty()) throw ValidationError("total_loss: empty trace");
  LossParts out;
  out.seg = soft_iou_loss(trace.stages.back().t, gt, cfg);
  out.rec = recon_loss(trace.stages.back().d, x_input);
  out.total = out.seg + cfg.lambda_rec * out.rec;
  return out;
}

template <typename T>
LossVars<T> total_loss(const std::vector<StageVars<T>>& stages, const Tensor<T>& gt, Var<T> x_input,
                       const LossConfig& cfg) {
  cfg.validate();
  if (stages.empty()) throw ValidationError("total_loss: no stages");
  LossVars<T> out;
  out.seg = ag::soft_iou_loss(stages.back().t, gt, static_cast<T>(cfg.smooth_eps));
  out.rec = ag::mse(stages.back().d, x_input);
  out.total = ag::add(out.seg, ag::scale(out.rec, static_cast<T>(cfg.lambda_rec)));
  return out;
}

PixelCounts& PixelCounts::operator+=(const PixelCounts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

double PixelCounts::iou() const {
  const std::uint64_t den = tp + fp + fn;
  return den == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(den);
}

double PixelCounts::f1() const {
  const std::uint64_t den = 2 * tp + fp + fn;
  return den == 0 ? 1.0 : static_cast<double>(2 * tp) / static_cast<double>(den);
}

PixelCounts pixel_counts(const Mask& pred, const Mask& gt) {
  require_same_shape(pred.shape(), gt.shape(), "pixel_metrics");
  require_binary(pred, "pixel_metrics");
  require_binary(gt, "pixel_metrics");
  PixelCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0;
    const bool g = gt[i] != 0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  return c;
}

PixelMetrics pixel_metrics(const Mask& pred, const Mask& gt) {
  const PixelCounts c = pixel_counts(pred, gt);
  return {c.iou(), c.f1()};
}

Components connected_components(const Mask& m, int n) {
  const Shape s = m.shape();
  if (s.c != 1) throw ShapeError("connected_components: expected a single-channel mask, got " + to_string(s));
  Components out;
  out.height = s.h;
  out.width = s.w;
  out.labels.assign(static_cast<std::size_t>(s.h) * s.w, 0);
  std::vector<int> stack;
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      const int idx = y * s.w + x;
      if (m.at(n, 0, y, x) == 0 || out.labels[idx] != 0) continue;
      const int label = ++out.count;
      out.labels[idx] = label;
      stack.push_back(idx);
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int cy = cur / s.w;
        const int cx = cur % s.w;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = cy + dy;
            const int nx = cx + dx;
            if (ny < 0 || ny >= s.h || nx < 0 || nx >= s.w) continue;
            const int nidx = ny * s.w + nx;
            if (m.at(n, 0, ny, nx) == 0 || out.labels[nidx] != 0) continue;
            out.labels[nidx] = label;
            stack.push_back(nidx);
          }
        }
      }
    }
  }
  return out;
}

ObjectCounts& ObjectCounts::operator+=(const ObjectCounts& o) {
  gt_objects += o.gt_objects;
  detected += o.detected;
  false_pixels += o.false_pixels;
  pixels += o.pixels;
  return *this;
}

double ObjectCounts::pd() const {
  return gt_objects == 0 ? 1.0 : static_cast<double>(detected) / static_cast<double>(gt_objects);
}

double ObjectCounts::fa() const {
  return pixels == 0 ? 0.0 : static_cast<double>(false_pixels) / static_cast<double>(pixels) * 1e6;
}

ObjectCounts object_counts(const Mask& pred, const Mask& gt) {
  require_same_shape(pred.shape(), gt.shape(), "object_metrics");
  require_binary(pred, "object_metrics");
  require_binary(gt, "object_metrics");
  ObjectCounts total;
  for (int n = 0; n < pred.shape().n; ++n) {
    const Components pc = connected_components(pred, n);
    const Components gc = connected_components(gt, n);
    std::vector<std::uint64_t> psize(pc.count + 1, 0), gsize(gc.count + 1, 0);
    std::map<std::pair<int, int>, std::uint64_t> overlap;
    for (std::size_t i = 0; i < pc.labels.size(); ++i) {
      const int p = pc.labels[i];
      const int g = gc.labels[i];
      ++psize[p];
      ++gsize[g];
      if (p != 0 && g != 0) ++overlap[{g, p}];
    }
    struct Candidate {
      double iou;
      int g;
      int p;
    };
    std::vector<Candidate> cands;
    for (const auto& [key, inter] : overlap) {
      const double uni = static_cast<double>(gsize[key.first] + psize[key.second] - inter);
      const double iou = static_cast<double>(inter) / uni;
      if (iou >= 0.5) cands.push_back({iou, key.first, key.second});
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      return std::tie(b.iou, a.g, a.p) < std::tie(a.iou, b.g, b.p);
    });
    std::vector<bool> gmatched(gc.count + 1, false), pmatched(pc.count + 1, false);
    ObjectCounts c;
    for (const Candidate& k : cands) {
      if (gmatched[k.g] || pmatched[k.p]) continue;
      gmatched[k.g] = pmatched[k.p] = true;
      ++c.detected;
    }
    c.gt_objects = static_cast<std::uint64_t>(gc.count);
    for (int p = 1; p <= pc.count; ++p) {
      if (!pmatched[p]) c.false_pixels += psize[p];
    }
    c.pixels = pc.labels.size();
    total += c;
  }
  return total;
}

ObjectMetrics object_metrics(const Mask& pred, const Mask& gt) {
  const ObjectCounts c = object_counts(pred, gt);
  return {c.pd(), c.fa()};
}

Mask threshold_scores(const Tensor<float>& scores, double threshold) {
  Mask m(scores.shape());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<double>(scores[i]) >= threshold ? 1 : 0;
  return m;
}

std::vector<ObjectCounts> roc_counts(const Tensor<float>& scores, const Mask& gt, int n_thresholds) {
  if (n_thresholds < 2) throw DomainError("roc_curve: need at least 2 thresholds");
  std::vector<ObjectCounts> out;
  out.reserve(n_thresholds);
  for (int i = 0; i < n_thresholds; ++i) {
    const double thr = static_cast<double>(i) / (n_thresholds - 1);
    out.push_back(object_counts(threshold_scores(scores, thr), gt));
  }
  return out;
}

std::vector<RocPoint> roc_from_counts(const std::vector<ObjectCounts>& counts) {
  const int n = static_cast<int>(counts.size());
  std::vector<RocPoint> pts;
  pts.reserve(n);
  for (int i = 0; i < n; ++i) {
    pts.push_back({n > 1 ? static_cast<double>(i) / (n - 1) : 0.0, counts[i].fa(), counts[i].pd()});
  }
  std::sort(pts.begin(), pts.end(), [](const RocPoint& a, const RocPoint& b) {
    return std::tie(a.fa, a.pd, b.threshold) < std::tie(b.fa, b.pd, a.threshold);
  });
  double best = 0.0;
  for (RocPoint& p : pts) {
    best = std::max(best, p.pd);
    p.pd = best;
  }
  return pts;
}

std::vector<RocPoint> roc_curve(const Tensor<float>& scores, const Mask& gt, int n_thresholds) {
  return roc_from_counts(roc_counts(scores, gt, n_thresholds));
}

void write_roc_csv(std::ostream& os, const std::vector<RocPoint>& roc) {
  os << "threshold,fa_per_1e6,pd\n";
  os.precision(10);
  for (const RocPoint& p : roc) os << p.threshold << ',' << p.fa << ',' << p.pd << '\n';
}

#define DRPCA_INSTANTIATE(T)                                                                                        \
  template double soft_iou_loss<T>(const Tensor<T>&, const Mask&, const LossConfig&);                               \
  template double recon_loss<T>(const Tensor<T>&, const Tensor<T>&);                                                \
  template LossParts total_loss<T>(const DecompositionTrace<T>&, const Mask&, const Tensor<T>&, const LossConfig&); \
  template LossVars<T> total_loss<T>(const std::vector<StageVars<T>>&, const Tensor<T>&, Var<T>, const LossConfig&);

DRPCA_INSTANTIATE(float)
DRPCA_INSTANTIATE(double)

}  // namespace drpca
