#pragma once

// Weighted-norm projections onto the structured classes: alternating exact
// least-squares steps for Kronecker sums and for GS matrices under a left
// weight X, i.e. minimizing ||X (W - S)||_F^2 over the class parameters.

#include "pkit/common.hpp"
#include "pkit/structured.hpp"

#include <vector>

namespace pkit {

// ||X (W - materialize(v))||_F.  Squared value is the ALS objective.
double weighted_residual(const MatrixRef& x, const MatrixRef& w,
                         const StructuredValue& v);

// ----- Kronecker ------------------------------------------------------------

// Exact minimizer over the A factors of ||Y - X sum_i A_i (x) B_i||_F^2 for
// fixed B, assembled as A = C^+ D from the Gram contractions of the normal
// equations (pseudo-inverse cutoff 1e-10 relative).
std::vector<Matrix> kron_step_A(const std::vector<Matrix>& b, const MatrixRef& x,
                                const MatrixRef& y, const KronSpec& spec);

// Mirror step: exact minimizer over B for fixed A, implemented by swapping
// factor roles through the Kronecker commutation permutations and reusing
// the A step.
std::vector<Matrix> kron_step_B(const std::vector<Matrix>& a, const MatrixRef& x,
                                const MatrixRef& y, const KronSpec& spec);

struct WeightedAlsResult {
  StructuredValue value;
  std::vector<double> trace;  // objective after init and after each half step
  bool ls_flag = false;       // an inner iterative solve was cut short
};

WeightedAlsResult kron_weighted_als(const MatrixRef& x, const MatrixRef& w,
                                    const KronSpec& spec, int iters,
                                    const KroneckerSum& init);

// ----- GS -------------------------------------------------------------------

// With permutations pre-applied the problem is ||Y - X L P R||_F^2.
// R step: per column block j, R_j = (XLP)_j^+ Y_j (exact least squares).
std::vector<Matrix> gs_step_R(const std::vector<Matrix>& l, const MatrixRef& x,
                              const MatrixRef& y, const GsSpec& spec);

struct GsStepLResult {
  std::vector<Matrix> l;
  bool converged = true;
};

struct GsStepLOptions {
  int max_iters = 200;
  double tol = 1e-12;
};

// L step: minimizes over the coupled L blocks via QR-orthonormalized
// factors and an LSQR inner solve, then back-substitutes
// L_i = R_{X_i}^+ L~_i (R'^T_i)^+. An optional warm start seeds LSQR and
// guards against regressions from degenerate QR factors.
GsStepLResult gs_step_L(const std::vector<Matrix>& r, const MatrixRef& x,
                        const MatrixRef& y, const GsSpec& spec,
                        const GsStepLOptions& opts = {},
                        const std::vector<Matrix>* warm = nullptr);

WeightedAlsResult gs_weighted_als(const MatrixRef& x, const MatrixRef& w,
                                  const GsSpec& spec, int iters,
                                  const GSMatrix& init);

// ----- dispatch --------------------------------------------------------------

// Weighted projection onto any structured class. Kron/GS run `iters`
// alternating iterations from `warm` (or from the unweighted projection);
// blockzero and dense have closed forms.
WeightedAlsResult weighted_project(const StructureSpec& spec, const MatrixRef& x,
                                   const MatrixRef& w, int iters,
                                   const StructuredValue* warm = nullptr);

}  // namespace pkit
