#pragma once

// Laplace machinery behind the plasticity penalty on small, fully explicit
// models: the negative Hessian of the log posterior, its (private, shared)
// block partition, the Schur complement Omega, the closed-form marginal over
// the private block and a grid-integration oracle for it.
//
// Parameter vectors are stacked as (theta_1, theta_s), private block first.

#include <functional>
#include <memory>
#include <vector>

#include <Eigen/Dense>

#include "wpl/autodiff.hpp"

namespace wpl::laplace {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct BlockHessian {
  Matrix h11;
  Matrix h1s;
  Matrix hs1;
  Matrix hss;

  static BlockHessian partition(const Matrix& hp, int p1);
  bool is_symmetric(double tol = 0.0) const;
};

/// A twice-differentiable log-likelihood l(theta_1, theta_s) under an isotropic
/// N(0, sigma2 I) prior. l_p = l - |theta|^2 / (2 sigma2).
struct LaplaceModel {
  std::function<double(const Vector&)> log_likelihood;
  std::function<Vector(const Vector&)> gradient;
  double sigma2 = 1.0;
  int p1 = 0;
  int ps = 0;
  Vector mle;

  int dim() const { return p1 + ps; }
  double log_posterior(const Vector& theta) const;
  Vector log_posterior_gradient(const Vector& theta) const;
};

/// Throws NumericError unless |grad l_p(mle)| <= tol.
void check_stationary(const LaplaceModel& model, double tol = 1e-8);

/// Newton ascent on l_p from `start` using finite-difference Hessians.
Vector find_mode(const LaplaceModel& model, const Vector& start, int max_iter = 100);

/// Wraps a graph whose single parameter "theta" is a [p, 1] column and whose
/// `output` node holds l(theta). Values and gradients both come from the graph.
class GraphLikelihood {
 public:
  GraphLikelihood(ad::Graph graph, ad::NodeId output, TensorMap inputs);

  double value(const Vector& theta) const;
  Vector gradient(const Vector& theta) const;

 private:
  ad::Graph graph_;
  ad::NodeId output_;
  TensorMap inputs_;
};

/// l(theta) = -1/2 (theta - mean)^T Q (theta - mean) + offset, with Q symmetric PSD.
/// Values are evaluated directly; gradients go through the autodiff graph.
/// The mle field is set to the exact maximiser of l_p.
LaplaceModel make_quadratic_model(const Matrix& q, const Vector& mean, double offset, double sigma2, int p1);

/// Logistic regression l = sum_i log sigmoid(y_i (theta_1 x_i + theta_s)), p1 = ps = 1.
/// The mle field is located by Newton's method.
LaplaceModel make_logistic_model(const std::vector<double>& x, const std::vector<int>& y, double sigma2);

/// -Hessian of l_p at the mle by central differences of the gradient, symmetrised.
Matrix negative_hessian_lp(const LaplaceModel& model, double step = 1e-4);

/// Omega = Hss - H1s^T H11^{-1} H1s. Throws SingularMatrixError if cond(H11) > 1e12.
Matrix schur_omega(const BlockHessian& blocks);

/// [u; v]^T H [u; v] evaluated block by block.
double quadratic_form(const BlockHessian& blocks, const Vector& u, const Vector& v);
/// The same form with the square completed in u:
/// (u + w)^T H11 (u + w) + v^T Omega v, where w = H11^{-1} H1s v.
double completed_square_form(const BlockHessian& blocks, const Vector& u, const Vector& v);

/// log A = l_p(mle) - 1/2 v^T Omega v + (p1/2) log 2pi + 1/2 log|det H11^{-1}|, v = theta_s - mle_s.
double closed_form_log_a(const LaplaceModel& model, const BlockHessian& blocks, const Vector& theta_s);

struct GridSpec {
  /// Half-width of the grid in standard deviations of the integrand along each axis.
  double half_width_sd = 8.0;
  int points_per_dim = 2000;
  /// Largest admissible boundary-point share of the total mass.
  double boundary_tolerance = 1e-12;
};

/// log of a trapezoid-rule integral of exp(log_f) over an axis-aligned grid
/// centred at `center` with per-axis scale `sd`. Throws GridError when the
/// boundary carries more than `grid.boundary_tolerance` of the mass.
double log_integrate(const std::function<double(const Vector&)>& log_f, const Vector& center, const Vector& sd,
                     const GridSpec& grid);

/// log of the integral over theta_1 of exp(l_p(theta_1, theta_s)), on a grid around mle_1.
/// Requires p1 <= 3.
double brute_force_log_a(const LaplaceModel& model, const Vector& theta_s, const GridSpec& grid);

/// Three-block model for the factorisation check: joint log-likelihood over
/// (theta_1, theta_2, theta_s) with an isotropic Gaussian prior.
struct PairModel {
  std::function<double(const Vector& t1, const Vector& t2, const Vector& ts)> log_likelihood;
  int p1 = 1;
  int p2 = 1;
  int ps = 1;
  double sigma2 = 1.0;
};

/// Which density multiplies the first model's block in the right-hand side.
enum class Numerator {
  joint_posterior,  // p(theta_1, theta_s | D)
  prior,            // p(theta_1, theta_s)
};

struct FactorizationGrid {
  int outer_points = 6;    // per dimension, evaluation points
  double outer_half_width = 1.5;  // in prior standard deviations
  GridSpec inner{8.0, 2000, 1e-12};
};

struct FactorizationResult {
  double deviation = 0.0;  // max - min of (log LHS - log RHS)
  double min_diff = 0.0;
  double max_diff = 0.0;
  std::size_t points = 0;
};

/// Compares the joint log posterior with the factorised right-hand side over a
/// grid of theta values; a deviation of ~0 means they differ by a constant.
FactorizationResult verify_factorization(const PairModel& model, const FactorizationGrid& grid,
                           Numerator numerator = Numerator::joint_posterior);

}  // namespace wpl::laplace
