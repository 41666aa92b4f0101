#pragma once

// The two outer optimization loops coupling Procrustes rotation updates
// with structured projections: alternating least squares in the plain
// Frobenius norm and in the activation-weighted norm, plus the balancing
// rule for the in-term weight and the principal-component slicing
// equivalence check for the block-zero class.

#include "pkit/common.hpp"
#include "pkit/procrustes.hpp"
#include "pkit/structured.hpp"
#include "pkit/tensorfile.hpp"
#include "pkit/weighted.hpp"

#include <vector>

namespace pkit {

// One (W_out, W_in) pair sharing the rotated dimension n:
//   W_out is d_out x n and is rotated on the right (W_out Q),
//   W_in  is n x d_in  and is rotated on the left  (Q^T W_in).
struct LayerProblem {
  Matrix w_out;
  Matrix w_in;
  // Correlation roots for the weighted phase; empty means identity.
  Matrix xc_out;  // d_out x d_out
  Matrix xc_in;   // n x n
  StructureSpec spec_out = DenseSpec{};
  StructureSpec spec_in = DenseSpec{};
  double lambda_in = 1.0;
  // Frobenius-phase diagonal weights: rows of W_out (token frequencies for
  // an embedding) and columns of W_in (token frequencies for a head).
  // Empty means unweighted.
  Vector frob_out_diag;
  Vector frob_in_diag;

  Index n() const { return w_out.cols(); }
};

struct SolveReport {
  // Objective after every half step (projection / rotation), starting with
  // the value at the initial rotation.
  std::vector<double> frobenius_trace;
  std::vector<double> weighted_trace;
  double final_objective = 0.0;
  double final_objective_out = 0.0;
  double final_objective_in = 0.0;
  double wall_seconds = 0.0;
  bool line_search_failed = false;
  bool iterative_ls_flag = false;
};

struct AlsResult {
  Matrix q;
  StructuredValue what_out;
  StructuredValue what_in;
  SolveReport report;
};

// ||W_out Q - What_out||^2 + ||Q^T W_in - What_in||^2 with the optional
// Frobenius-phase diagonal weights applied.
double frobenius_objective(const LayerProblem& p, const MatrixRef& q,
                           const StructuredValue& what_out,
                           const StructuredValue& what_in);

// Weighted objective
//   ||Xc_out (W_out Q - What_out)||^2 + lambda ||Xc_in (W_in - Q What_in)||^2.
double weighted_objective(const LayerProblem& p, const MatrixRef& q,
                          const StructuredValue& what_out,
                          const StructuredValue& what_in);

// Alternates structured projections of (W_out Q, Q^T W_in) with the
// orthogonal Procrustes update on the stacked pair. Q starts at the
// identity; a final projection pass aligns the returned factors with the
// returned Q.
AlsResult als_frobenius(const LayerProblem& p, int n_iters);

// Weighted loop: alternates weighted projections with the joint
// weighted-Procrustes solve (Cayley-parametrized CG). The caller is
// expected to have rotated the problem by the Frobenius-phase rotation
// already; Q again starts at the identity.
AlsResult als_weighted(const LayerProblem& p, int n_iters, int cg_iters,
                       int proj_iters = 10);

// one -> 1.0; balanced -> ||Xc_out W_out||^2 / ||Xc_in W_in||^2.
double compute_lambda_in(const LayerProblem& p, LambdaMode mode);

// ----- block-zero slicing equivalence ---------------------------------------

// Operands of the out-plus-skip objective with zero-column classes:
//   || X_out (W_out Q - What_out) + X_skip (Q - Q_prev What_skip) ||^2.
struct SliceProblem {
  Matrix x_out;   // s x d_out
  Matrix w_out;   // d_out x n
  Matrix x_skip;  // s x n
  Matrix q_prev;  // n x n orthogonal (identity when empty)

  Index n() const { return w_out.cols(); }
  Matrix q_prev_or_identity() const;
};

struct SliceEquivResult {
  double objective_generic = 0.0;  // from the alternating optimizer
  double objective_pca = 0.0;      // closed form: squared SVD tail
  double gap = 0.0;                // generic - pca
  Matrix q_generic;
  Matrix q_pca;
  StructuredValue what_out;        // zero-cols factors from the generic route
  StructuredValue what_skip;
  int iterations = 0;
};

struct SliceEquivOptions {
  int max_iters = 20000;
  double stall_tol = 1e-15;  // stop when the objective stops moving
};

// Solves the problem twice: (a) closed form via the SVD of
// X_out W_out + X_skip (rotation = right singular vectors, factors sliced
// by the rank-d projector) and (b) generically, alternating exact
// least-squares fits of the kept columns with orthogonal Procrustes
// updates. Returns both objectives and their gap.
SliceEquivResult slicegpt_equivalence_check(const SliceProblem& p, Index d,
                                            const SliceEquivOptions& opts = {});

double slice_objective(const SliceProblem& p, Index d, const MatrixRef& q,
                       const MatrixRef& what_out, const MatrixRef& what_skip);

}  // namespace pkit
