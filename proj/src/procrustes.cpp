#include "pkit/procrustes.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace pkit {

namespace {

void require_skew(const MatrixRef& k) {
  require(k.rows() == k.cols(), ErrorCode::NotSkew, "matrix is not square");
  const double scale = 1.0 + k.cwiseAbs().maxCoeff();
  require((k + k.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * scale,
          ErrorCode::NotSkew, "matrix is not skew-symmetric");
}

Matrix householder(const VectorRef& v) {
  const double nsq = v.squaredNorm();
  Matrix h = Matrix::Identity(v.size(), v.size());
  h.noalias() -= (2.0 / nsq) * (v * v.transpose());
  return h;
}

constexpr double kMinusOneMargin = 1e-6;

}  // namespace

Matrix solve_opp(const MatrixRef& a, const MatrixRef& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::ShapeMismatch,
          "solve_opp: operand shapes differ");
  Eigen::JacobiSVD<Matrix> svd(b * a.transpose(),
                               Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

Matrix solve_opp_right(const MatrixRef& m, const MatrixRef& t) {
  require(m.rows() == t.rows() && m.cols() == t.cols(), ErrorCode::ShapeMismatch,
          "solve_opp_right: operand shapes differ");
  // ||M Q - T|| is minimized by the polar factor of M^T T.
  Eigen::JacobiSVD<Matrix> svd(m.transpose() * t,
                               Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

Matrix cayley(const MatrixRef& k) {
  require_skew(k);
  const Index n = k.rows();
  const Matrix i = Matrix::Identity(n, n);
  // Q^T = (I + K)^{-1} (I - K); I - K is always nonsingular for skew K.
  Matrix qt = Eigen::PartialPivLU<Matrix>(i + k).solve(i - k);
  return qt.transpose();
}

Matrix cayley_inverse(const MatrixRef& q) {
  const Index n = q.rows();
  require(q.cols() == n, ErrorCode::ShapeMismatch, "cayley_inverse: not square");
  require(is_orthogonal(q), ErrorCode::NotOrthogonal,
          "cayley_inverse: input is not orthogonal");
  const Matrix i = Matrix::Identity(n, n);
  const Matrix iq = i + q;
  // For orthogonal Q the singular values of I + Q are |1 + lambda_i|.
  Eigen::JacobiSVD<Matrix> svd(iq);
  require(svd.singularValues().minCoeff() > 1e-8, ErrorCode::MinusOneEigenvalue,
          "cayley_inverse: I + Q is numerically singular (-1 eigenvalue)");
  // K = (Q - I)(Q + I)^{-1}; computed through K^T = (Q + I)^{-T} (Q - I)^T.
  Matrix kt = Eigen::PartialPivLU<Matrix>(iq.transpose()).solve((q - i).transpose());
  Matrix k = kt.transpose();
  return 0.5 * (k - k.transpose());
}

Matrix matrix_exponential_skew(const MatrixRef& k) {
  require_skew(k);
  const Index n = k.rows();
  const double norm = k.cwiseAbs().rowwise().sum().maxCoeff();
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  const Matrix ks = k / std::pow(2.0, squarings);
  Matrix result = Matrix::Identity(n, n);
  Matrix term = Matrix::Identity(n, n);
  for (int t = 1; t <= 30; ++t) {
    term = (term * ks) / static_cast<double>(t);
    result += term;
    if (term.cwiseAbs().maxCoeff() < 1e-18) break;
  }
  for (int s = 0; s < squarings; ++s) result = result * result;
  return result;
}

SpectrumFixResult fix_spectrum(const MatrixRef& q_in) {
  require(is_orthogonal(q_in), ErrorCode::NotOrthogonal,
          "fix_spectrum: input is not orthogonal");
  SpectrumFixResult res;
  res.q = q_in;
  const Index n = q_in.rows();
  if (res.q.determinant() < 0.0) {
    res.q.row(0) = -res.q.row(0);
    SpectrumFix fix;
    fix.kind = SpectrumFix::Kind::NegateRow;
    fix.row = 0;
    res.log.push_back(std::move(fix));
  }
  // Each reflector turns one eigenvalue near -1 into one near +1 and leaves
  // the rest of the spectrum in place, so 2n + 2 rounds always suffice.
  for (Index round = 0; round < 2 * n + 2; ++round) {
    Eigen::EigenSolver<Matrix> es(res.q);
    const auto& vals = es.eigenvalues();
    Index worst = 0;
    double dist = std::abs(vals(0) + std::complex<double>(1.0, 0.0));
    for (Index i = 1; i < n; ++i) {
      const double d = std::abs(vals(i) + std::complex<double>(1.0, 0.0));
      if (d < dist) {
        dist = d;
        worst = i;
      }
    }
    if (dist > kMinusOneMargin) break;
    const Eigen::VectorXcd u = es.eigenvectors().col(worst);
    Vector re = u.real(), im = u.imag();
    Vector v = re.norm() >= im.norm() ? re : im;
    v /= v.norm();
    res.q = householder(v) * res.q;
    SpectrumFix fix;
    fix.kind = SpectrumFix::Kind::Householder;
    fix.v = v;
    res.log.push_back(std::move(fix));
  }
  return res;
}

Matrix undo_spectrum_fixes(const MatrixRef& q_fixed,
                           const std::vector<SpectrumFix>& log) {
  Matrix q = q_fixed;
  for (auto it = log.rbegin(); it != log.rend(); ++it) {
    if (it->kind == SpectrumFix::Kind::NegateRow)
      q.row(it->row) = -q.row(it->row);
    else
      q = householder(it->v) * q;
  }
  return q;
}

OrthogonalFactor OrthogonalFactor::from_dense(Matrix q) {
  require(is_orthogonal(q), ErrorCode::NotOrthogonal,
          "OrthogonalFactor: matrix is not orthogonal");
  OrthogonalFactor f;
  f.n_ = q.rows();
  f.dense_ = std::move(q);
  return f;
}

OrthogonalFactor OrthogonalFactor::from_dense_compressed(const MatrixRef& q) {
  SpectrumFixResult fixed = fix_spectrum(q);
  OrthogonalFactor f;
  f.n_ = q.rows();
  f.skew_ = pack_skew(cayley_inverse(fixed.q));
  f.log_ = std::move(fixed.log);
  return f;
}

OrthogonalFactor OrthogonalFactor::from_skew(Vector theta, Index n,
                                             std::vector<SpectrumFix> log) {
  require(theta.size() == skew_param_count(n), ErrorCode::ShapeMismatch,
          "OrthogonalFactor: skew parameter size mismatch");
  OrthogonalFactor f;
  f.n_ = n;
  f.skew_ = std::move(theta);
  f.log_ = std::move(log);
  return f;
}

Matrix OrthogonalFactor::dense() const {
  if (dense_) return *dense_;
  return undo_spectrum_fixes(cayley(unpack_skew(*skew_, n_)), log_);
}

std::int64_t OrthogonalFactor::param_count() const {
  return skew_ ? skew_param_count(n_) : n_ * n_;
}

// ----- weighted orthogonal Procrustes --------------------------------------

namespace {

Matrix term_residual(const WoppTerm& t, const MatrixRef& q) {
  Matrix qa = t.a.size() > 0 ? Matrix(q * t.a) : Matrix(q);
  Matrix cqa = t.c.size() > 0 ? Matrix(t.c * qa) : std::move(qa);
  return cqa - t.b;
}

}  // namespace

double WoppProblem::objective(const MatrixRef& q) const {
  double f = 0.0;
  for (const WoppTerm& t : terms) f += t.weight * term_residual(t, q).squaredNorm();
  return f;
}

Matrix WoppProblem::gradient_q(const MatrixRef& q) const {
  Matrix g = Matrix::Zero(n, n);
  for (const WoppTerm& t : terms) {
    Matrix r = term_residual(t, q);
    if (t.c.size() > 0) r = t.c.transpose() * r;
    if (t.a.size() > 0) r = r * t.a.transpose();
    g.noalias() += (2.0 * t.weight) * r;
  }
  return g;
}

Vector WoppProblem::gradient_skew(const MatrixRef& k) const {
  const Matrix q = cayley(k);
  const Matrix gq = gradient_q(q);
  const Matrix i = Matrix::Identity(n, n);
  // d f = <M, dK> with M = (I + Q)^T G_Q (I + K)^{-1}; the skew gradient is
  // the antisymmetric part of M packed over the strict upper triangle.
  const Matrix m = (i + q.transpose()) * gq *
                   Eigen::PartialPivLU<Matrix>(i + k).inverse();
  return pack_skew(Matrix(m - m.transpose()));
}

namespace {

// Skew gradient of f(center * cayley(K)) at K.
Vector centered_gradient(const WoppProblem& problem, const MatrixRef& center,
                         const MatrixRef& k) {
  const Matrix c = cayley(k);
  const Matrix gq = problem.gradient_q(Matrix(center * c));
  const Matrix i = Matrix::Identity(problem.n, problem.n);
  const Matrix m = (i + c.transpose()) * (center.transpose() * gq) *
                   Eigen::PartialPivLU<Matrix>(i + k).inverse();
  return pack_skew(Matrix(m - m.transpose()));
}

}  // namespace

WoppResult solve_wopp(const WoppProblem& problem, const MatrixRef& q0,
                      const WoppOptions& opts) {
  require(q0.rows() == problem.n && q0.cols() == problem.n,
          ErrorCode::ShapeMismatch, "solve_wopp: Q0 dimension mismatch");
  require(is_orthogonal(q0), ErrorCode::NotOrthogonal,
          "solve_wopp: Q0 is not orthogonal");
  const Index n = problem.n;
  const Index dim = skew_param_count(n);
  WoppResult res;
  res.q = q0;

  // The iterate is center * cayley(K). Recentering the chart whenever K
  // grows keeps the parametrization well conditioned even when the optimum
  // has rotation angles near pi, where a single global K would blow up.
  Matrix center = q0;
  Vector theta = Vector::Zero(dim);
  auto eval = [&](const Vector& th) {
    const double f = problem.objective(Matrix(center * cayley(unpack_skew(th, n))));
    require(std::isfinite(f), ErrorCode::NonFiniteObjective,
            "solve_wopp: objective is not finite");
    return f;
  };

  double f = eval(theta);
  res.trace.push_back(f);
  if (opts.cg_iters <= 0 || dim == 0) return res;

  Vector g = centered_gradient(problem, center, unpack_skew(theta, n));
  Vector dir = -g;
  double step = 1.0;
  const double grad_tol = opts.grad_tol > 0 ? opts.grad_tol : 0.0;

  for (int it = 0; it < opts.cg_iters; ++it) {
    if (g.norm() <= grad_tol * (1.0 + std::abs(f))) break;
    double slope = g.dot(dir);
    if (slope >= 0.0) {  // not a descent direction: restart on the gradient
      dir = -g;
      slope = g.dot(dir);
      if (slope >= 0.0) break;
    }
    double t = step;
    bool accepted = false;
    double f_new = f;
    for (int bt = 0; bt < opts.max_backtracks; ++bt) {
      f_new = eval(theta + t * dir);
      if (f_new <= f + opts.armijo_c * t * slope) {
        accepted = true;
        break;
      }
      t *= opts.backtrack;
    }
    if (!accepted) {
      res.line_search_failed = true;
      break;
    }
    theta += t * dir;
    step = std::min(1.0, t * 2.0);
    f = f_new;
    res.trace.push_back(f);
    res.iterations = it + 1;

    Matrix k = unpack_skew(theta, n);
    bool recentered = false;
    if (k.cwiseAbs().maxCoeff() > 1.0) {
      center = center * cayley(k);
      theta.setZero();
      k = Matrix::Zero(n, n);
      recentered = true;
    }
    Vector g_new = centered_gradient(problem, center, k);
    // Polak-Ribiere+ with restarts on recentering and every dim steps.
    double beta = 0.0;
    if (!recentered && (it + 1) % static_cast<int>(std::max<Index>(dim, 1)) != 0) {
      const double denom = g.squaredNorm();
      if (denom > 0) beta = std::max(0.0, g_new.dot(g_new - g) / denom);
    }
    dir = -g_new + beta * dir;
    g = std::move(g_new);
  }

  res.q = center * cayley(unpack_skew(theta, n));
  return res;
}

WoppResult solve_wopp(const WoppProblem& problem, const MatrixRef& q0,
                      int cg_iters) {
  WoppOptions opts;
  opts.cg_iters = cg_iters;
  opts.grad_tol = 1e-12;
  return solve_wopp(problem, q0, opts);
}

}  // namespace pkit
