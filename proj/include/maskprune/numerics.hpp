#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace maskprune {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.allFinite();
}

struct LeastSquaresOptions {
  double damp = 1.0;
  double tol = 1e-10;
  /// 0 selects 10 * cols.
  Index max_iterations = 0;
};

template <typename Scalar>
struct LeastSquaresResult {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> solution;
  Index iterations = 0;
  /// ||A^T y - (A^T A + damp^2 I) r|| / ||A^T y|| at the returned iterate.
  Scalar normal_residual = 0;
  bool converged = false;
};

namespace detail {

// Stable Givens rotation: returns (c, s, r) with [c s; -s c] [a; b] = [r; 0].
template <typename Scalar>
void sym_ortho(Scalar a, Scalar b, Scalar& c, Scalar& s, Scalar& r) {
  using std::abs;
  using std::sqrt;
  if (b == Scalar(0)) {
    c = a < 0 ? Scalar(-1) : (a > 0 ? Scalar(1) : Scalar(1));
    s = 0;
    r = abs(a);
  } else if (a == Scalar(0)) {
    c = 0;
    s = b < 0 ? Scalar(-1) : Scalar(1);
    r = abs(b);
  } else if (abs(b) > abs(a)) {
    const Scalar tau = a / b;
    s = (b < 0 ? Scalar(-1) : Scalar(1)) / sqrt(Scalar(1) + tau * tau);
    c = s * tau;
    r = b / s;
  } else {
    const Scalar tau = b / a;
    c = (a < 0 ? Scalar(-1) : Scalar(1)) / sqrt(Scalar(1) + tau * tau);
    s = c * tau;
    r = a / c;
  }
}

}  // namespace detail

/// Minimizes ||A r - y||^2 + damp^2 ||r||^2 with LSMR (Golub-Kahan
/// bidiagonalization, damped). Iteration stops once the relative residual of
/// the regularized normal equations drops to `tol`; otherwise the best iterate
/// seen is returned with `converged == false`.
template <typename MatrixDerived, typename VectorDerived>
LeastSquaresResult<typename MatrixDerived::Scalar> solve_damped_lls(
    const Eigen::MatrixBase<MatrixDerived>& A,
    const Eigen::MatrixBase<VectorDerived>& y,
    const LeastSquaresOptions& options = {}) {
  using Scalar = typename MatrixDerived::Scalar;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  if (A.rows() != y.size()) throw std::invalid_argument("solve_damped_lls: A.rows != y.size");
  if (A.cols() < 1) throw std::invalid_argument("solve_damped_lls: A has no columns");
  if (!(options.damp >= 0)) throw std::invalid_argument("solve_damped_lls: damp must be >= 0");
  if (!(options.tol > 0)) throw std::invalid_argument("solve_damped_lls: tol must be > 0");
  if (!all_finite(A) || !all_finite(y)) throw std::invalid_argument("solve_damped_lls: non-finite input");

  const Index n = A.cols();
  const Index max_iter = options.max_iterations > 0 ? options.max_iterations : 10 * n;
  const Scalar damp = static_cast<Scalar>(options.damp);
  const Scalar damp2 = damp * damp;

  const Vec aty = A.transpose() * y;
  const Scalar aty_norm = aty.norm();

  LeastSquaresResult<Scalar> result;
  result.solution = Vec::Zero(n);
  if (aty_norm == Scalar(0)) {
    result.converged = true;
    return result;
  }

  auto normal_residual = [&](const Vec& r) {
    const Vec ar = A * r;
    return (aty - A.transpose() * ar - damp2 * r).norm() / aty_norm;
  };

  Vec u = y;
  Scalar beta = u.norm();
  u /= beta;
  Vec v = A.transpose() * u;
  Scalar alpha = v.norm();
  v /= alpha;

  Scalar zetabar = alpha * beta;
  Scalar alphabar = alpha;
  Scalar rho = 1, rhobar = 1, cbar = 1, sbar = 0;
  Vec h = v;
  Vec hbar = Vec::Zero(n);
  Vec x = Vec::Zero(n);

  result.normal_residual = Scalar(1);

  for (Index itn = 1; itn <= max_iter; ++itn) {
    u = A * v - alpha * u;
    beta = u.norm();
    if (beta > 0) {
      u /= beta;
      v = A.transpose() * u - beta * v;
      alpha = v.norm();
      if (alpha > 0) v /= alpha;
    }

    Scalar chat, shat, alphahat;
    detail::sym_ortho(alphabar, damp, chat, shat, alphahat);

    const Scalar rhoold = rho;
    Scalar c, s;
    detail::sym_ortho(alphahat, beta, c, s, rho);
    const Scalar thetanew = s * alpha;
    alphabar = c * alpha;

    const Scalar rhobarold = rhobar;
    const Scalar thetabar = sbar * rho;
    const Scalar rhotemp = cbar * rho;
    detail::sym_ortho(rhotemp, thetanew, cbar, sbar, rhobar);
    const Scalar zeta = cbar * zetabar;
    zetabar = -sbar * zetabar;

    hbar = h - (thetabar * rho / (rhoold * rhobarold)) * hbar;
    x += (zeta / (rho * rhobar)) * hbar;
    h = v - (thetanew / rho) * h;

    const Scalar res = normal_residual(x);
    if (res < result.normal_residual) {
      result.normal_residual = res;
      result.solution = x;
      result.iterations = itn;
    }
    if (res <= static_cast<Scalar>(options.tol)) {
      result.converged = true;
      break;
    }
    // Breakdown: the Krylov space is exhausted.
    if (beta == Scalar(0) || alpha == Scalar(0)) break;
  }
  return result;
}

/// Damped least-squares objective ||A r - y||^2 + damp^2 ||r||^2.
template <typename MatrixDerived, typename VectorDerived, typename SolutionDerived>
typename MatrixDerived::Scalar damped_objective(const Eigen::MatrixBase<MatrixDerived>& A,
                                                const Eigen::MatrixBase<VectorDerived>& y,
                                                const Eigen::MatrixBase<SolutionDerived>& r,
                                                double damp) {
  return (A * r - y).squaredNorm() + damp * damp * r.squaredNorm();
}

}  // namespace maskprune
