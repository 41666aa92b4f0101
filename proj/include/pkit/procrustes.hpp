#pragma once

// Orthogonal-matrix machinery: the closed-form orthogonal Procrustes
// solver, Cayley and exponential parametrizations of the orthogonal
// group, spectrum repair for the Cayley domain, and the iterative
// weighted-Procrustes solver (nonlinear CG over the skew parameter).

#include "pkit/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace pkit {

// argmin over orthogonal Q of ||Q A - B||_F; Q = U V^T from B A^T = U S V^T.
// Full SVD so Q is square even when B A^T is rank-deficient (the completion
// is deterministic; only the objective value is unique there).
Matrix solve_opp(const MatrixRef& a, const MatrixRef& b);

// argmin over orthogonal Q of ||M Q - T||_F (the right-multiplied variant).
Matrix solve_opp_right(const MatrixRef& m, const MatrixRef& t);

// Q = (I + K)(I - K)^{-1}; K must be skew-symmetric.
Matrix cayley(const MatrixRef& k);

// K = (Q - I)(Q + I)^{-1}; requires Q orthogonal with no eigenvalue at -1
// (detected through the conditioning of I + Q).
Matrix cayley_inverse(const MatrixRef& q);

// exp(K) by scaling-and-squaring on the truncated series; K skew.
Matrix matrix_exponential_skew(const MatrixRef& k);

// One recorded repair step: either a row negation or a Householder
// reflection I - 2 v v^T / ||v||^2, both applied from the left.
struct SpectrumFix {
  enum class Kind { NegateRow, Householder };
  Kind kind;
  Index row = -1;
  Vector v;
};

struct SpectrumFixResult {
  Matrix q;                      // repaired matrix: det +1, spectrum clear of -1
  std::vector<SpectrumFix> log;  // fixes in application order
};

// Makes Q representable by the Cayley transform: flips det -1 by negating a
// row, then multiplies by Householder reflectors built from eigenvectors of
// the remaining -1 eigenvalues until min |lambda + 1| clears the margin.
SpectrumFixResult fix_spectrum(const MatrixRef& q);

// Applies the inverse of a fix log, recovering the original matrix from the
// repaired one.
Matrix undo_spectrum_fixes(const MatrixRef& q_fixed,
                           const std::vector<SpectrumFix>& log);

// An orthogonal matrix stored either densely or as the strict upper
// triangle of its Cayley parameter plus the spectrum-fix log needed to
// reconstruct the exact original.
class OrthogonalFactor {
 public:
  static OrthogonalFactor from_dense(Matrix q);
  // Compresses to skew storage, repairing the spectrum first if needed.
  static OrthogonalFactor from_dense_compressed(const MatrixRef& q);
  static OrthogonalFactor from_skew(Vector theta, Index n,
                                    std::vector<SpectrumFix> log = {});

  Matrix dense() const;
  Index dim() const { return n_; }
  bool is_skew_stored() const { return skew_.has_value(); }
  const Vector& skew_params() const { return *skew_; }
  const std::vector<SpectrumFix>& fix_log() const { return log_; }
  std::int64_t param_count() const;

 private:
  Index n_ = 0;
  std::optional<Matrix> dense_;
  std::optional<Vector> skew_;
  std::vector<SpectrumFix> log_;
};

// ----- weighted orthogonal Procrustes --------------------------------------

// One quadratic term  weight * || C Q A - B ||_F^2. Empty C or A stands for
// the identity.
struct WoppTerm {
  Matrix c;
  Matrix a;
  Matrix b;
  double weight = 1.0;
};

struct WoppProblem {
  Index n = 0;  // Q is n x n
  std::vector<WoppTerm> terms;

  double objective(const MatrixRef& q) const;
  // Gradient with respect to Q under the Frobenius inner product.
  Matrix gradient_q(const MatrixRef& q) const;
  // Gradient with respect to the packed skew parameter at K.
  Vector gradient_skew(const MatrixRef& k) const;
};

struct WoppResult {
  Matrix q;
  std::vector<double> trace;  // objective per accepted iterate, trace[0] = f(Q0)
  bool line_search_failed = false;
  int iterations = 0;
};

struct WoppOptions {
  int cg_iters = 500;
  double armijo_c = 1e-4;
  double backtrack = 0.5;
  int max_backtracks = 60;
  double grad_tol = 0.0;  // 0 disables the early gradient-norm stop
};

// Minimizes the WOPP objective over Q = cayley(K) by Polak-Ribiere+ CG with
// Armijo backtracking, starting from q0 (which must be orthogonal and free
// of -1 eigenvalues).
WoppResult solve_wopp(const WoppProblem& problem, const MatrixRef& q0,
                      const WoppOptions& opts);
WoppResult solve_wopp(const WoppProblem& problem, const MatrixRef& q0,
                      int cg_iters);

}  // namespace pkit
