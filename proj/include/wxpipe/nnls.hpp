#pragma once

// Non-negative least squares, active-set method of Lawson and Hanson.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "wxpipe/error.hpp"

namespace wxpipe {

struct NnlsResult {
  Eigen::VectorXd x;
  double residual_norm = 0.0;
  int iterations = 0;
  bool converged = true;
};

/// argmin ||A x - b||_2 subject to x >= 0. The dual feasibility tolerance is relative to
/// ||A||_F * ||b||_2 so that badly scaled columns do not stall the outer loop.
inline NnlsResult nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, double tol = 1e-10) {
  const Eigen::Index m = a.rows();
  const Eigen::Index n = a.cols();
  if (b.size() != m) throw Error(ErrorCode::LengthMismatch, "nnls: rhs length mismatch");

  NnlsResult res;
  res.x = Eigen::VectorXd::Zero(n);
  std::vector<bool> passive(static_cast<std::size_t>(n), false);
  const double dual_tol = tol * std::max(1.0, a.norm() * b.norm());
  const int max_outer = static_cast<int>(3 * n + 10);

  auto solve_passive = [&](Eigen::VectorXd& z) {
    std::vector<Eigen::Index> cols;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (passive[static_cast<std::size_t>(j)]) cols.push_back(j);
    }
    z = Eigen::VectorXd::Zero(n);
    if (cols.empty()) return;
    Eigen::MatrixXd ap(m, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) ap.col(static_cast<Eigen::Index>(k)) = a.col(cols[k]);
    const Eigen::VectorXd zp = ap.colPivHouseholderQr().solve(b);
    for (std::size_t k = 0; k < cols.size(); ++k) z(cols[k]) = zp(static_cast<Eigen::Index>(k));
  };

  Eigen::VectorXd w = a.transpose() * (b - a * res.x);
  int outer = 0;
  while (true) {
    // Most positive dual variable among the active (zero) set.
    Eigen::Index t = -1;
    double wmax = dual_tol;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!passive[static_cast<std::size_t>(j)] && w(j) > wmax) {
        wmax = w(j);
        t = j;
      }
    }
    if (t < 0) break;
    if (++outer > max_outer) {
      res.converged = false;
      break;
    }
    passive[static_cast<std::size_t>(t)] = true;

    Eigen::VectorXd z;
    for (int inner = 0; inner < 3 * n + 10; ++inner) {
      solve_passive(z);
      bool feasible = true;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (passive[static_cast<std::size_t>(j)] && z(j) <= 0.0) feasible = false;
      }
      if (feasible) break;
      // Step back toward x until the first passive coordinate hits zero.
      double alpha = 1.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (passive[static_cast<std::size_t>(j)] && z(j) <= 0.0) {
          const double denom = res.x(j) - z(j);
          if (denom > 0.0) alpha = std::min(alpha, res.x(j) / denom);
        }
      }
      res.x += alpha * (z - res.x);
      for (Eigen::Index j = 0; j < n; ++j) {
        if (passive[static_cast<std::size_t>(j)] && res.x(j) <= 1e-15) {
          passive[static_cast<std::size_t>(j)] = false;
          res.x(j) = 0.0;
        }
      }
      z.resize(0);
    }
    if (z.size() == n) res.x = z;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!passive[static_cast<std::size_t>(j)]) res.x(j) = 0.0;
    }
    w = a.transpose() * (b - a * res.x);
    res.iterations = outer;
  }
  res.residual_norm = (a * res.x - b).norm();
  return res;
}

}  // namespace wxpipe
