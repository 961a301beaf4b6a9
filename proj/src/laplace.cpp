#include "wpl/laplace.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "wpl/error.hpp"

namespace wpl::laplace {
namespace {

constexpr double kMaxCondition = 1e12;

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite");
}

// Streaming log-sum-exp with Neumaier-compensated accumulation, so the result
// depends only on the (fixed) visiting order.
class LogSumExp {
 public:
  void add(double x) {
    if (x == -std::numeric_limits<double>::infinity()) return;
    if (x > max_) {
      const double r = std::exp(max_ - x);
      sum_ *= r;
      comp_ *= r;
      max_ = x;
    }
    const double term = std::exp(x - max_);
    const double t = sum_ + term;
    if (std::abs(sum_) >= std::abs(term)) {
      comp_ += (sum_ - t) + term;
    } else {
      comp_ += (term - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return max_ + std::log(sum_ + comp_); }

 private:
  double max_ = -std::numeric_limits<double>::infinity();
  double sum_ = 0.0;
  double comp_ = 0.0;
};

double log_normal_density(double x, double sigma2) {
  return -0.5 * x * x / sigma2 - 0.5 * std::log(2.0 * std::numbers::pi * sigma2);
}

double log_prior(const Vector& t, double sigma2) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < t.size(); ++i) s += log_normal_density(t[i], sigma2);
  return s;
}

Vector to_vector(const Tensor& t) {
  Vector v(static_cast<Eigen::Index>(t.size()));
  for (std::size_t i = 0; i < t.size(); ++i) v[static_cast<Eigen::Index>(i)] = t[i];
  return v;
}

Tensor to_column(const Vector& v) {
  return Tensor(Shape{static_cast<std::size_t>(v.size()), 1}, std::vector<double>(v.data(), v.data() + v.size()));
}

Matrix fd_negative_hessian(const std::function<Vector(const Vector&)>& grad, const Vector& at, double step) {
  const auto p = at.size();
  Matrix h(p, p);
  Vector probe = at;
  for (Eigen::Index j = 0; j < p; ++j) {
    probe[j] = at[j] + step;
    const Vector up = grad(probe);
    probe[j] = at[j] - step;
    const Vector down = grad(probe);
    probe[j] = at[j];
    h.col(j) = -(up - down) / (2.0 * step);
  }
  if (!h.allFinite()) throw NumericError("hessian has non-finite entries");
  return 0.5 * (h + h.transpose());
}

}  // namespace

BlockHessian BlockHessian::partition(const Matrix& hp, int p1) {
  if (hp.rows() != hp.cols()) throw ShapeError("hessian must be square");
  if (p1 < 0 || p1 > hp.rows()) throw ShapeError("private block size out of range");
  const auto ps = hp.rows() - p1;
  BlockHessian b;
  b.h11 = hp.topLeftCorner(p1, p1);
  b.h1s = hp.topRightCorner(p1, ps);
  b.hs1 = hp.bottomLeftCorner(ps, p1);
  b.hss = hp.bottomRightCorner(ps, ps);
  return b;
}

bool BlockHessian::is_symmetric(double tol) const {
  return (hs1 - h1s.transpose()).cwiseAbs().maxCoeff() <= tol &&
         (h11 - h11.transpose()).cwiseAbs().maxCoeff() <= tol && (hss - hss.transpose()).cwiseAbs().maxCoeff() <= tol;
}

double LaplaceModel::log_posterior(const Vector& theta) const {
  return log_likelihood(theta) - theta.squaredNorm() / (2.0 * sigma2);
}

Vector LaplaceModel::log_posterior_gradient(const Vector& theta) const { return gradient(theta) - theta / sigma2; }

void check_stationary(const LaplaceModel& model, double tol) {
  const double norm = model.log_posterior_gradient(model.mle).norm();
  if (!(norm <= tol)) {
    throw NumericError("mle is not stationary: |grad l_p| = " + std::to_string(norm));
  }
}

Vector find_mode(const LaplaceModel& model, const Vector& start, int max_iter) {
  Vector theta = start;
  auto grad = [&](const Vector& t) { return model.log_posterior_gradient(t); };
  for (int it = 0; it < max_iter; ++it) {
    const Vector g = grad(theta);
    if (g.norm() <= 1e-13) break;
    const Matrix h = fd_negative_hessian(grad, theta, 1e-4);
    theta += h.ldlt().solve(g);
  }
  return theta;
}

// ---------------------------------------------------------------------------

GraphLikelihood::GraphLikelihood(ad::Graph graph, ad::NodeId output, TensorMap inputs)
    : graph_(std::move(graph)), output_(output), inputs_(std::move(inputs)) {}

double GraphLikelihood::value(const Vector& theta) const {
  const Tensor t = to_column(theta);
  ad::Bindings b(inputs_);
  b.bind("theta", t);
  return ad::forward(graph_, b)[output_.index].item();
}

Vector GraphLikelihood::gradient(const Vector& theta) const {
  const Tensor t = to_column(theta);
  ad::Bindings b(inputs_);
  b.bind("theta", t);
  const auto values = ad::forward(graph_, b);
  return to_vector(ad::backward(graph_, values, output_).at("theta"));
}

LaplaceModel make_quadratic_model(const Matrix& q, const Vector& mean, double offset, double sigma2, int p1) {
  const auto p = q.rows();
  if (q.cols() != p || mean.size() != p) throw ShapeError("quadratic model dimensions disagree");
  if (p1 < 0 || p1 > p) throw ShapeError("private block size out of range");
  if (!(sigma2 > 0.0)) throw ConfigError("sigma2 must be > 0");
  const Matrix qs = 0.5 * (q + q.transpose());

  // Q = R R^T with R = V sqrt(D); then (theta - m)^T Q (theta - m) = |R^T (theta - m)|^2.
  Eigen::SelfAdjointEigenSolver<Matrix> eig(qs);
  const Vector d = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Matrix rt = (eig.eigenvectors() * d.asDiagonal()).transpose();

  ad::Graph g;
  auto theta = g.parameter("theta");
  auto centered = g.add(theta, g.input("neg_mean"));
  auto proj = g.matmul(g.input("rt"), centered);
  auto quad = g.scale(g.sum_of_squares(proj), -0.5);
  auto out = g.add(quad, g.input("offset"));
  TensorMap inputs;
  inputs["neg_mean"] = to_column(-mean);
  std::vector<double> rt_data(static_cast<std::size_t>(p * p));
  for (Eigen::Index r = 0; r < p; ++r)
    for (Eigen::Index c = 0; c < p; ++c) rt_data[static_cast<std::size_t>(r * p + c)] = rt(r, c);
  inputs["rt"] = Tensor::matrix(static_cast<std::size_t>(p), static_cast<std::size_t>(p), std::move(rt_data));
  inputs["offset"] = Tensor::scalar(offset);
  auto graph_lik = std::make_shared<GraphLikelihood>(std::move(g), out, std::move(inputs));

  LaplaceModel m;
  m.log_likelihood = [qs, mean, offset](const Vector& t) {
    const Vector c = t - mean;
    return -0.5 * c.dot(qs * c) + offset;
  };
  m.gradient = [graph_lik](const Vector& t) { return graph_lik->gradient(t); };
  m.sigma2 = sigma2;
  m.p1 = p1;
  m.ps = static_cast<int>(p) - p1;
  // Stationarity of l_p: (Q + I/sigma2) theta = Q m.
  const Matrix hp = qs + Matrix::Identity(p, p) / sigma2;
  m.mle = hp.ldlt().solve(qs * mean);
  return m;
}

LaplaceModel make_logistic_model(const std::vector<double>& x, const std::vector<int>& y, double sigma2) {
  if (x.size() != y.size() || x.empty()) throw ShapeError("logistic model needs matching nonempty x and y");
  const std::size_t n = x.size();
  // logits_i = [theta_1 x_i + theta_s, 0]; class 0 when y_i = +1.
  std::vector<double> design(n * 2);
  std::vector<double> target(n * 2, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    design[i * 2] = x[i];
    design[i * 2 + 1] = 1.0;
    target[i * 2 + (y[i] > 0 ? 0 : 1)] = 1.0;
  }
  ad::Graph g;
  auto theta = g.parameter("theta");
  auto z = g.matmul(g.input("design"), theta);
  auto logits = g.matmul(z, g.input("pad"));
  auto ce = g.softmax_cross_entropy(logits, g.input("target"));
  auto out = g.scale(ce, -static_cast<double>(n));
  TensorMap inputs;
  inputs["design"] = Tensor::matrix(n, 2, design);
  inputs["pad"] = Tensor::matrix(1, 2, {1.0, 0.0});
  inputs["target"] = Tensor::matrix(n, 2, target);
  auto graph_lik = std::make_shared<GraphLikelihood>(std::move(g), out, std::move(inputs));

  LaplaceModel m;
  m.log_likelihood = [x, y](const Vector& t) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double margin = (y[i] > 0 ? 1.0 : -1.0) * (t[0] * x[i] + t[1]);
      // log sigmoid(m) = -log(1 + e^{-m})
      s -= margin > 0 ? std::log1p(std::exp(-margin)) : -margin + std::log1p(std::exp(margin));
    }
    return s;
  };
  m.gradient = [graph_lik](const Vector& t) { return graph_lik->gradient(t); };
  m.sigma2 = sigma2;
  m.p1 = 1;
  m.ps = 1;
  m.mle = find_mode(m, Vector::Zero(2));
  return m;
}

Matrix negative_hessian_lp(const LaplaceModel& model, double step) {
  if (!(step > 0.0)) throw ConfigError("finite-difference step must be > 0");
  return fd_negative_hessian([&](const Vector& t) { return model.log_posterior_gradient(t); }, model.mle, step);
}

Matrix schur_omega(const BlockHessian& blocks) {
  const auto p1 = blocks.h11.rows();
  if (p1 == 0) return blocks.hss;
  Eigen::JacobiSVD<Matrix> svd(blocks.h11);
  const auto& sv = svd.singularValues();
  const double smin = sv[sv.size() - 1];
  if (!(smin > 0.0) || sv[0] / smin > kMaxCondition) {
    throw SingularMatrixError("H11 is singular or too ill-conditioned (cond > 1e12)");
  }
  const Matrix solved = blocks.h11.partialPivLu().solve(blocks.h1s);
  return blocks.hss - blocks.h1s.transpose() * solved;
}

double quadratic_form(const BlockHessian& blocks, const Vector& u, const Vector& v) {
  return u.dot(blocks.h11 * u) + u.dot(blocks.h1s * v) + v.dot(blocks.hs1 * u) + v.dot(blocks.hss * v);
}

double completed_square_form(const BlockHessian& blocks, const Vector& u, const Vector& v) {
  const Vector w = blocks.h11.partialPivLu().solve(blocks.h1s * v);
  const Vector uw = u + w;
  return uw.dot(blocks.h11 * uw) + v.dot(schur_omega(blocks) * v);
}

double closed_form_log_a(const LaplaceModel& model, const BlockHessian& blocks, const Vector& theta_s) {
  if (theta_s.size() != model.ps) throw ShapeError("theta_s has the wrong dimension");
  const Matrix omega = schur_omega(blocks);
  const Vector v = theta_s - model.mle.tail(model.ps);
  double log_det_h11 = 0.0;
  if (model.p1 > 0) {
    const auto lu = blocks.h11.partialPivLu();
    const Matrix& packed = lu.matrixLU();
    for (Eigen::Index i = 0; i < packed.rows(); ++i) log_det_h11 += std::log(std::abs(packed(i, i)));
  }
  const double result = model.log_posterior(model.mle) - 0.5 * v.dot(omega * v) +
                        0.5 * model.p1 * std::log(2.0 * std::numbers::pi) - 0.5 * log_det_h11;
  require_finite(result, "closed-form log A");
  return result;
}

double log_integrate(const std::function<double(const Vector&)>& log_f, const Vector& center, const Vector& sd,
                     const GridSpec& grid) {
  const auto dims = center.size();
  if (dims == 0) return log_f(center);
  if (grid.points_per_dim < 3) throw ConfigError("grid needs at least 3 points per dimension");
  const int n = grid.points_per_dim;
  std::vector<double> lo(static_cast<std::size_t>(dims));
  std::vector<double> h(static_cast<std::size_t>(dims));
  double log_cell = 0.0;
  for (Eigen::Index d = 0; d < dims; ++d) {
    if (!(sd[d] > 0.0)) throw ConfigError("grid scale must be positive");
    const double half = grid.half_width_sd * sd[d];
    lo[static_cast<std::size_t>(d)] = center[d] - half;
    h[static_cast<std::size_t>(d)] = 2.0 * half / (n - 1);
    log_cell += std::log(h[static_cast<std::size_t>(d)]);
  }

  LogSumExp total;
  double boundary_max = -std::numeric_limits<double>::infinity();
  std::vector<int> idx(static_cast<std::size_t>(dims), 0);
  Vector point(dims);
  const double log_half = std::log(0.5);
  while (true) {
    double log_w = log_cell;
    bool on_boundary = false;
    for (Eigen::Index d = 0; d < dims; ++d) {
      const int k = idx[static_cast<std::size_t>(d)];
      point[d] = lo[static_cast<std::size_t>(d)] + k * h[static_cast<std::size_t>(d)];
      if (k == 0 || k == n - 1) {
        on_boundary = true;
        log_w += log_half;
      }
    }
    const double lf = log_f(point);
    if (std::isnan(lf) || lf == std::numeric_limits<double>::infinity()) {
      throw NumericError("integrand is not finite on the grid");
    }
    total.add(lf + log_w);
    if (on_boundary) boundary_max = std::max(boundary_max, lf + log_w);

    Eigen::Index d = 0;
    for (; d < dims; ++d) {
      if (++idx[static_cast<std::size_t>(d)] < n) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
    if (d == dims) break;
  }
  const double log_total = total.value();
  require_finite(log_total, "grid integral");
  if (boundary_max - log_total > std::log(grid.boundary_tolerance)) {
    throw GridError("integrand mass at the grid boundary exceeds tolerance; widen the grid");
  }
  return log_total;
}

double brute_force_log_a(const LaplaceModel& model, const Vector& theta_s, const GridSpec& grid) {
  if (model.p1 > 3) throw ConfigError("grid integration is limited to p1 <= 3");
  if (theta_s.size() != model.ps) throw ShapeError("theta_s has the wrong dimension");
  if (model.p1 == 0) {
    Vector full(model.ps);
    full = theta_s;
    return model.log_posterior(full);
  }
  // Grid scale: conditional standard deviations of theta_1 from the curvature at the mle.
  const auto blocks = BlockHessian::partition(negative_hessian_lp(model), model.p1);
  const Matrix cov = blocks.h11.inverse();
  Vector sd(model.p1);
  for (int i = 0; i < model.p1; ++i) {
    if (!(cov(i, i) > 0.0)) throw SingularMatrixError("H11 is not positive definite");
    sd[i] = std::sqrt(cov(i, i));
  }
  Vector full(model.dim());
  full.tail(model.ps) = theta_s;
  auto integrand = [&](const Vector& t1) {
    full.head(model.p1) = t1;
    return model.log_posterior(full);
  };
  return log_integrate(integrand, model.mle.head(model.p1), sd, grid);
}

// ---------------------------------------------------------------------------

FactorizationResult verify_factorization(const PairModel& model, const FactorizationGrid& grid, Numerator numerator) {
  if (model.p1 + model.p2 + model.ps > 4 || model.p1 < 1 || model.p2 < 1 || model.ps < 1) {
    throw ConfigError("factorisation check supports p1, p2, ps >= 1 with p <= 4");
  }
  if (grid.outer_points < 2) throw ConfigError("need at least two outer grid points per dimension");
  const double sd = std::sqrt(model.sigma2);
  const double s2 = model.sigma2;
  const auto& lik = model.log_likelihood;

  // log p(D | theta_1, theta_s) = log int exp(l) p(theta_2) dtheta_2, and symmetrically.
  auto log_lik_1s = [&](const Vector& t1, const Vector& ts) {
    return log_integrate([&](const Vector& t2) { return lik(t1, t2, ts) + log_prior(t2, s2); },
                         Vector::Zero(model.p2), Vector::Constant(model.p2, sd), grid.inner);
  };
  auto log_lik_2s = [&](const Vector& t2, const Vector& ts) {
    return log_integrate([&](const Vector& t1) { return lik(t1, t2, ts) + log_prior(t1, s2); },
                         Vector::Zero(model.p1), Vector::Constant(model.p1, sd), grid.inner);
  };
  // log int p(D | theta_1, theta_s) p(theta_1, theta_s) dtheta_1
  std::map<std::vector<double>, double> denom_cache;
  auto log_denominator = [&](const Vector& ts) {
    std::vector<double> key(ts.data(), ts.data() + ts.size());
    if (auto it = denom_cache.find(key); it != denom_cache.end()) return it->second;
    const int q = model.p1 + model.p2;
    GridSpec coarse = grid.inner;
    coarse.points_per_dim = q == 1 ? grid.inner.points_per_dim : std::min(grid.inner.points_per_dim, 400);
    const double v = log_integrate(
                         [&](const Vector& t12) {
                           const Vector t1 = t12.head(model.p1);
                           const Vector t2 = t12.tail(model.p2);
                           return lik(t1, t2, ts) + log_prior(t1, s2) + log_prior(t2, s2);
                         },
                         Vector::Zero(q), Vector::Constant(q, sd), coarse) +
                     log_prior(ts, s2);
    denom_cache.emplace(std::move(key), v);
    return v;
  };

  const int dims = model.p1 + model.p2 + model.ps;
  const int n = grid.outer_points;
  const double half = grid.outer_half_width * sd;
  std::vector<int> idx(static_cast<std::size_t>(dims), 0);
  FactorizationResult result;
  result.min_diff = std::numeric_limits<double>::infinity();
  result.max_diff = -std::numeric_limits<double>::infinity();
  Vector theta(dims);
  while (true) {
    for (int d = 0; d < dims; ++d) theta[d] = -half + 2.0 * half * idx[static_cast<std::size_t>(d)] / (n - 1);
    const Vector t1 = theta.head(model.p1);
    const Vector t2 = theta.segment(model.p1, model.p2);
    const Vector ts = theta.tail(model.ps);

    const double lhs = lik(t1, t2, ts) + log_prior(theta, s2);
    const double first_block = numerator == Numerator::joint_posterior
                                   ? log_lik_1s(t1, ts) + log_prior(t1, s2) + log_prior(ts, s2)
                                   : log_prior(t1, s2) + log_prior(ts, s2);
    const double rhs = log_lik_2s(t2, ts) + first_block + log_prior(t2, s2) + log_prior(ts, s2) - log_denominator(ts);
    const double diff = lhs - rhs;
    require_finite(diff, "factorisation difference");
    result.min_diff = std::min(result.min_diff, diff);
    result.max_diff = std::max(result.max_diff, diff);
    ++result.points;

    int d = 0;
    for (; d < dims; ++d) {
      if (++idx[static_cast<std::size_t>(d)] < n) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
    if (d == dims) break;
  }
  result.deviation = result.max_diff - result.min_diff;
  return result;
}

}  // namespace wpl::laplace
