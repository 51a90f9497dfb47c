#pragma once

// Classical low-rank + sparse decomposition by alternating proximal steps:
//   min_{B,T} ||B||_* + lambda ||T||_1 + (mu/2) ||D - B - T||_F^2

#include <vector>

#include <Eigen/Dense>

#include "drpca/errors.hpp"
#include "drpca/tensor.hpp"

namespace drpca {

using Matrix = Eigen::MatrixXd;

struct RpcaConfig {
  double lambda_reg = 1.0 / 8.0;  // 1/sqrt(64)
  double mu = 100.0;
  double lipschitz = 1.0;
  int max_iters = 500;
  double tol = 1e-6;

  void validate() const;
};

/// sign(x) max(|x| - tau, 0).
double soft_threshold(double x, double tau);
Matrix soft_threshold(const Matrix& x, double tau);

/// U soft(S, tau) V^T.
Matrix svt(const Matrix& x, double tau);

struct StaticConstants {
  double gamma;
  double epsilon;
};

/// gamma = lambda L / (lambda L + mu), epsilon = lambda / (lambda L + mu).
StaticConstants static_constants(const RpcaConfig& cfg);

/// interim = gamma t_prev + (1 - gamma)(d_prev - b_k); returns soft(interim, epsilon).
Matrix static_target_update(const Matrix& t_prev, const Matrix& d_prev, const Matrix& b_k, const RpcaConfig& cfg);

double rpca_objective(const Matrix& d, const Matrix& b, const Matrix& t, const RpcaConfig& cfg);

struct RpcaResult {
  Matrix b;
  Matrix t;
  std::vector<double> objective_history;
  int iterations = 0;
  bool converged = false;
};

/// B <- svt(D - T, 1/mu), T <- soft(D - B, lambda/mu) until the relative change of (B,T)
/// drops below tol. Without convergence the lowest-objective iterate is returned.
RpcaResult rpca_solve(const Matrix& d, const RpcaConfig& cfg);

/// Plane (n, c) of a tensor as a matrix and back.
Matrix to_matrix(const Tensor<float>& t, int n = 0, int c = 0);
Tensor<float> from_matrix(const Matrix& m);

}  // namespace drpca
