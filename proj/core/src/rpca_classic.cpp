#include "drpca/rpca_classic.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace drpca {
namespace {

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": matrix has non-finite entries");
}

void require_same(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace

void RpcaConfig::validate() const {
  if (!(lambda_reg > 0.0) || !(mu > 0.0) || !(lipschitz > 0.0)) {
    throw ConfigError("RpcaConfig: lambda_reg, mu and lipschitz must be positive");
  }
  if (max_iters < 1) throw ConfigError("RpcaConfig: max_iters must be >= 1");
  if (!(tol > 0.0 && tol < 1.0)) throw ConfigError("RpcaConfig: tol must lie in (0, 1)");
}

double soft_threshold(double x, double tau) {
  if (!(tau >= 0.0)) throw DomainError("soft_threshold: tau must be >= 0");
  const double mag = std::abs(x) - tau;
  if (mag <= 0.0) return 0.0;
  return x > 0.0 ? mag : -mag;
}

Matrix soft_threshold(const Matrix& x, double tau) {
  if (!(tau >= 0.0)) throw DomainError("soft_threshold: tau must be >= 0");
  return x.unaryExpr([tau](double v) { return soft_threshold(v, tau); });
}

Matrix svt(const Matrix& x, double tau) {
  if (!(tau >= 0.0)) throw DomainError("svt: tau must be >= 0");
  require_finite(x, "svt");
  if (x.size() == 0) return x;
  Eigen::BDCSVD<Matrix> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw NumericError("svt: SVD did not converge");
  const Eigen::VectorXd s = svd.singularValues().unaryExpr([tau](double v) { return std::max(v - tau, 0.0); });
  return svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
}

StaticConstants static_constants(const RpcaConfig& cfg) {
  const double den = cfg.lambda_reg * cfg.lipschitz + cfg.mu;
  return {cfg.lambda_reg * cfg.lipschitz / den, cfg.lambda_reg / den};
}

Matrix static_target_update(const Matrix& t_prev, const Matrix& d_prev, const Matrix& b_k, const RpcaConfig& cfg) {
  require_same(t_prev, d_prev, "static_target_update");
  require_same(t_prev, b_k, "static_target_update");
  const auto [gamma, epsilon] = static_constants(cfg);
  const Matrix interim = gamma * t_prev + (1.0 - gamma) * (d_prev - b_k);
  return soft_threshold(interim, epsilon);
}

double rpca_objective(const Matrix& d, const Matrix& b, const Matrix& t, const RpcaConfig& cfg) {
  require_same(d, b, "rpca_objective");
  require_same(d, t, "rpca_objective");
  double nuclear = 0.0;
  if (b.size() > 0) {
    Eigen::BDCSVD<Matrix> svd(b);
    nuclear = svd.singularValues().sum();
  }
  return nuclear + cfg.lambda_reg * t.cwiseAbs().sum() + 0.5 * cfg.mu * (d - b - t).squaredNorm();
}

RpcaResult rpca_solve(const Matrix& d, const RpcaConfig& cfg) {
  cfg.validate();
  require_finite(d, "rpca_solve");
  RpcaResult out;
  Matrix b = Matrix::Zero(d.rows(), d.cols());
  Matrix t = Matrix::Zero(d.rows(), d.cols());
  double best = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= cfg.max_iters; ++it) {
    const Matrix b_next = svt(d - t, 1.0 / cfg.mu);
    const Matrix t_next = soft_threshold(d - b_next, cfg.lambda_reg / cfg.mu);
    const double change = std::sqrt((b_next - b).squaredNorm() + (t_next - t).squaredNorm());
    const double scale = std::sqrt(b_next.squaredNorm() + t_next.squaredNorm());
    b = b_next;
    t = t_next;
    const double obj = rpca_objective(d, b, t, cfg);
    out.objective_history.push_back(obj);
    out.iterations = it;
    if (obj < best || it == 1) {
      best = obj;
      out.b = b;
      out.t = t;
    }
    // A zero iterate has no scale; an unchanged one has converged.
    if (change <= cfg.tol * std::max(scale, std::numeric_limits<double>::min())) {
      out.converged = true;
      out.b = b;
      out.t = t;
      break;
    }
  }
  return out;
}

Matrix to_matrix(const Tensor<float>& t, int n, int c) {
  const Shape s = t.shape();
  if (n < 0 || n >= s.n || c < 0 || c >= s.c) throw ShapeError("to_matrix: plane index out of range for " + to_string(s));
  Matrix m(s.h, s.w);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) m(y, x) = t.at(n, c, y, x);
  return m;
}

Tensor<float> from_matrix(const Matrix& m) {
  Tensor<float> t({1, 1, static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  for (int y = 0; y < m.rows(); ++y)
    for (int x = 0; x < m.cols(); ++x) t.at(0, 0, y, x) = static_cast<float>(m(y, x));
  return t;
}

}  // namespace drpca
