#include <doctest.h>

#include "pkit/procrustes.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

using namespace pkit;

namespace {

double opp_objective(const Matrix& q, const Matrix& a, const Matrix& b) {
  return (q * a - b).squaredNorm();
}

Matrix rotation2(double t) {
  Matrix q(2, 2);
  q << std::cos(t), -std::sin(t), std::sin(t), std::cos(t);
  return q;
}

Matrix reflection2(double t) {
  Matrix q(2, 2);
  q << std::cos(t), std::sin(t), std::sin(t), -std::cos(t);
  return q;
}

double min_eig_dist_to_minus_one(const Matrix& q) {
  Eigen::EigenSolver<Matrix> es(q);
  double best = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < q.rows(); ++i)
    best = std::min(best, std::abs(es.eigenvalues()(i) + std::complex<double>(1, 0)));
  return best;
}

}  // namespace

TEST_CASE("opp returns the identity when B equals A") {
  Rng rng(1);
  const Matrix a = rng.gaussian(3, 5);
  const Matrix q = solve_opp(a, a);
  CHECK((q - Matrix::Identity(3, 3)).norm() < 1e-12);
}

TEST_CASE("opp recovers a planted rotation on full-rank 4x6 data") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const Matrix qstar = rng.orthogonal(4);
    const Matrix a = rng.gaussian(4, 6);
    const Matrix q = solve_opp(a, qstar * a);
    CHECK((q - qstar).norm() < 1e-10);
    CHECK(orthogonality_error(q) < 1e-12);
  }
}

TEST_CASE("opp beats a dense 2x2 grid over rotations and reflections") {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const Matrix a = rng.gaussian(2, 3), b = rng.gaussian(2, 3);
    const Matrix q = solve_opp(a, b);
    double grid_best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 10000; ++k) {
      const double ang = 2.0 * M_PI * k / 10000.0;
      grid_best = std::min(grid_best, opp_objective(rotation2(ang), a, b));
      grid_best = std::min(grid_best, opp_objective(reflection2(ang), a, b));
    }
    CHECK(opp_objective(q, a, b) <= grid_best + 1e-8);
  }
}

TEST_CASE("right-multiplied opp agrees with the transposed problem") {
  Rng rng(4);
  const Matrix m = rng.gaussian(5, 3), t = rng.gaussian(5, 3);
  const Matrix q = solve_opp_right(m, t);
  const Matrix q2 = solve_opp(m.transpose(), t.transpose());
  CHECK(((m * q - t).squaredNorm()) ==
        doctest::Approx((q2 * m.transpose() - t.transpose()).squaredNorm())
            .epsilon(1e-12));
}

TEST_CASE("cayley of zero is the identity") {
  CHECK((cayley(Matrix::Zero(3, 3)) - Matrix::Identity(3, 3)).norm() == 0.0);
}

TEST_CASE("2x2 cayley matches the hand-computed closed form") {
  // K = [[0, k], [-k, 0]]:
  // (I+K)(I-K)^{-1} = 1/(1+k^2) [[1-k^2, 2k], [-2k, 1-k^2]]
  for (double k : {0.3, -1.2, 5.0}) {
    Matrix kk(2, 2);
    kk << 0, k, -k, 0;
    const Matrix q = cayley(kk);
    const double denom = 1.0 + k * k;
    CHECK(q(0, 0) == doctest::Approx((1 - k * k) / denom).epsilon(1e-14));
    CHECK(q(0, 1) == doctest::Approx(2 * k / denom).epsilon(1e-14));
    CHECK(q(1, 0) == doctest::Approx(-2 * k / denom).epsilon(1e-14));
    CHECK(q(1, 1) == doctest::Approx((1 - k * k) / denom).epsilon(1e-14));
    CHECK(orthogonality_error(q) < 1e-12);
  }
}

TEST_CASE("cayley rejects non-skew input") {
  try {
    cayley(Matrix::Ones(2, 2));
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NotSkew);
  }
}

TEST_CASE("cayley inverse round trips and detects -1 eigenvalues") {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    const Index n = 2 + static_cast<Index>(rng.next_u64() % 5);
    const Matrix k = 0.7 * (rng.gaussian(n, n) - rng.gaussian(n, n).transpose());
    const Matrix ks = 0.5 * (k - k.transpose());
    const Matrix q = cayley(ks);
    CHECK((cayley(cayley_inverse(q)) - q).norm() < 1e-10);
    CHECK((cayley_inverse(q) - ks).norm() < 1e-10);
  }
  try {
    cayley_inverse(Matrix(-Matrix::Identity(2, 2)));
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MinusOneEigenvalue);
  }
}

TEST_CASE("skew exponential basics") {
  CHECK((matrix_exponential_skew(Matrix::Zero(3, 3)) - Matrix::Identity(3, 3))
            .norm() == 0.0);
  // 2x2 with k = pi/2 rotates by pi/2
  Matrix k(2, 2);
  k << 0, -M_PI / 2, M_PI / 2, 0;
  Matrix expect(2, 2);
  expect << 0, -1, 1, 0;
  CHECK((matrix_exponential_skew(k) - expect).norm() < 1e-12);
  Rng rng(6);
  for (int t = 0; t < 10; ++t) {
    const Matrix g = rng.gaussian(4, 4);
    const Matrix ks = 2.0 * (g - g.transpose());
    const Matrix e = matrix_exponential_skew(ks);
    CHECK(orthogonality_error(e) < 1e-10);
    CHECK(e.determinant() == doctest::Approx(1.0).epsilon(1e-8));
    CHECK((e * matrix_exponential_skew(Matrix(-ks)) - Matrix::Identity(4, 4)).norm() <
          1e-10);
  }
}

TEST_CASE("fix_spectrum leaves clean matrices alone") {
  const SpectrumFixResult r = fix_spectrum(Matrix::Identity(4, 4));
  CHECK(r.log.empty());
  CHECK((r.q - Matrix::Identity(4, 4)).norm() == 0.0);
}

TEST_CASE("fix_spectrum flips a det -1 diagonal by one row negation") {
  Matrix q = Matrix::Identity(2, 2);
  q(1, 1) = -1.0;
  const SpectrumFixResult r = fix_spectrum(q);
  CHECK(r.q.determinant() == doctest::Approx(1.0));
  CHECK(min_eig_dist_to_minus_one(r.q) > 1e-6);
  CHECK((undo_spectrum_fixes(r.q, r.log) - q).norm() < 1e-12);
}

TEST_CASE("fix_spectrum repairs -I and the log replays exactly") {
  const Matrix q = -Matrix::Identity(2, 2);
  const SpectrumFixResult r = fix_spectrum(q);
  CHECK(r.q.determinant() == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(min_eig_dist_to_minus_one(r.q) > 1e-6);
  CHECK_NOTHROW(cayley_inverse(r.q));
  CHECK((undo_spectrum_fixes(r.q, r.log) - q).norm() < 1e-10);
}

TEST_CASE("fix_spectrum over random orthogonal matrices with forced bad cases") {
  Rng rng(7);
  for (int t = 0; t < 60; ++t) {
    const Index n = 2 + static_cast<Index>(rng.next_u64() % 5);
    Matrix q = rng.orthogonal(n);
    if (t % 3 == 1) q.row(0) = -q.row(0);  // force det -1
    if (t % 3 == 2) {
      // force an exact -1 pair: embed a pi rotation
      Matrix rot = Matrix::Identity(n, n);
      rot(0, 0) = -1;
      rot(1, 1) = -1;
      q = q * rot;
    }
    const SpectrumFixResult r = fix_spectrum(q);
    CHECK(orthogonality_error(r.q) < 1e-10);
    CHECK(r.q.determinant() == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(min_eig_dist_to_minus_one(r.q) > 1e-6);
    CHECK((undo_spectrum_fixes(r.q, r.log) - q).norm() < 1e-9);
    CHECK_NOTHROW(cayley_inverse(r.q));
  }
}

TEST_CASE("orthogonal factor stores the skew triangle and reconstructs") {
  Rng rng(8);
  const Matrix q = rng.orthogonal(5);
  const OrthogonalFactor f = OrthogonalFactor::from_dense_compressed(q);
  CHECK(f.is_skew_stored());
  CHECK(f.param_count() == 10);
  CHECK((f.dense() - q).norm() < 1e-9);
}

TEST_CASE("wopp objective and skew gradient match finite differences") {
  Rng rng(9);
  for (int t = 0; t < 10; ++t) {
    const Index n = 4;
    WoppProblem prob;
    prob.n = n;
    WoppTerm t1;
    t1.c = rng.gaussian(n, n);
    t1.a = rng.gaussian(n, 5);
    t1.b = rng.gaussian(n, 5);
    prob.terms.push_back(t1);
    WoppTerm t2;
    t2.c = rng.gaussian(n, n);
    t2.a = rng.gaussian(n, 3);
    t2.b = rng.gaussian(n, 3);
    t2.weight = 0.7;
    prob.terms.push_back(t2);

    const Matrix g = rng.gaussian(n, n);
    const Matrix k = 0.3 * (g - g.transpose());
    const Vector grad = prob.gradient_skew(k);
    Vector theta = pack_skew(k);
    Vector fd(theta.size());
    const double h = 1e-6;
    for (Index i = 0; i < theta.size(); ++i) {
      Vector tp = theta, tm = theta;
      tp(i) += h;
      tm(i) -= h;
      fd(i) = (prob.objective(cayley(unpack_skew(tp, n))) -
               prob.objective(cayley(unpack_skew(tm, n)))) /
              (2 * h);
    }
    CHECK((grad - fd).norm() <= 1e-5 * std::max(1.0, grad.norm()));
  }
}

TEST_CASE("wopp with identity weight matches the closed-form opp") {
  Rng rng(10);
  for (int t = 0; t < 10; ++t) {
    const Index n = 4;
    const Matrix a = rng.gaussian(n, 6);
    Matrix b = rng.gaussian(n, 6);
    // The Cayley chart covers the rotation component only; flipping one row
    // of B picks the representative of the reflection pair whose optimum is
    // a rotation, at the same optimal value.
    if (solve_opp(a, b).determinant() < 0) b.row(0) = -b.row(0);
    WoppProblem prob;
    prob.n = n;
    WoppTerm term;
    term.a = a;
    term.b = b;  // ||Q A - B||
    prob.terms.push_back(term);
    const double best = opp_objective(solve_opp(a, b), a, b);
    const WoppResult res = solve_wopp(prob, Matrix::Identity(n, n), 500);
    CHECK(res.q.rows() == n);
    CHECK(orthogonality_error(res.q) < 1e-10);
    CHECK(prob.objective(res.q) <= best + 1e-6 * std::max(1.0, best));
    for (std::size_t i = 1; i < res.trace.size(); ++i)
      CHECK(res.trace[i] <= res.trace[i - 1] + 1e-12);
  }
}

TEST_CASE("wopp drives a planted problem to zero") {
  Rng rng(11);
  for (int t = 0; t < 5; ++t) {
    const Index n = 4;
    const Matrix c = Matrix::Identity(n, n) + 0.3 * rng.gaussian(n, n);
    const Matrix a = rng.gaussian(n, 5);
    const Matrix g = rng.gaussian(n, n);
    const Matrix kstar = 0.4 * (g - g.transpose());
    const Matrix qstar = cayley(kstar);
    WoppProblem prob;
    prob.n = n;
    WoppTerm term;
    term.c = c;
    term.a = a;
    term.b = c * qstar * a;
    prob.terms.push_back(term);
    const WoppResult res = solve_wopp(prob, Matrix::Identity(n, n), 2000);
    CHECK(prob.objective(res.q) < 1e-8 * term.b.squaredNorm());
  }
}

TEST_CASE("wopp with zero iterations returns the start unchanged") {
  Rng rng(12);
  const Matrix q0 = cayley(Matrix(0.2 * unpack_skew(Vector::Ones(3), 3)));
  WoppProblem prob;
  prob.n = 3;
  WoppTerm term;
  term.a = rng.gaussian(3, 3);
  term.b = rng.gaussian(3, 3);
  prob.terms.push_back(term);
  const WoppResult res = solve_wopp(prob, q0, 0);
  CHECK((res.q - q0).norm() == 0.0);
  CHECK(res.trace.size() == 1);
}

TEST_CASE("wopp objective never rises above the start") {
  Rng rng(13);
  const Index n = 5;
  WoppProblem prob;
  prob.n = n;
  WoppTerm term;
  term.c = rng.psd_root(n, 0.1, 2.0);
  term.a = rng.gaussian(n, 4);
  term.b = rng.gaussian(n, 4);
  prob.terms.push_back(term);
  const Matrix g = rng.gaussian(n, n);
  const Matrix q0 = cayley(Matrix(0.5 * (g - g.transpose())));
  const WoppResult res = solve_wopp(prob, q0, 50);
  CHECK(prob.objective(res.q) <= prob.objective(q0) * (1.0 + 1e-9) + 1e-12);
}
