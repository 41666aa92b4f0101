#include "pkit/als.hpp"

#include <chrono>
#include <cmath>

namespace pkit {

namespace {

constexpr int kFrobWeightedProjIters = 10;

Matrix diag_matrix(const VectorRef& d) {
  return Matrix(d.asDiagonal());
}

// Projection of the out-side target (rows weighted by an optional diagonal).
WeightedAlsResult project_out(const StructureSpec& spec, const MatrixRef& target,
                              const Vector& diag, const StructuredValue* warm) {
  if (diag.size() == 0) {
    WeightedAlsResult res;
    res.value = project(spec, target);
    return res;
  }
  return weighted_project(spec, diag_matrix(diag), target, kFrobWeightedProjIters,
                          warm);
}

// Projection of the in-side target with an optional diagonal weight on its
// columns: ||(T - W) D|| is the transposed problem with the diagonal on the
// left, and every class is closed under transposition.
WeightedAlsResult project_in(const StructureSpec& spec, const MatrixRef& target,
                             const Vector& diag, const StructuredValue* warm) {
  if (diag.size() == 0) {
    WeightedAlsResult res;
    res.value = project(spec, target);
    return res;
  }
  StructuredValue warm_t;
  const StructuredValue* warm_ptr = nullptr;
  if (warm) {
    warm_t = transpose_value(*warm);
    warm_ptr = &warm_t;
  }
  WeightedAlsResult res =
      weighted_project(transpose_spec(spec), diag_matrix(diag),
                       target.transpose(), kFrobWeightedProjIters, warm_ptr);
  res.value = transpose_value(res.value);
  return res;
}

}  // namespace

double frobenius_objective(const LayerProblem& p, const MatrixRef& q,
                           const StructuredValue& what_out,
                           const StructuredValue& what_in) {
  Matrix r_out = p.w_out * q - materialize(what_out);
  if (p.frob_out_diag.size() > 0)
    r_out = p.frob_out_diag.asDiagonal() * r_out;
  Matrix r_in = q.transpose() * p.w_in - materialize(what_in);
  if (p.frob_in_diag.size() > 0) r_in = r_in * p.frob_in_diag.asDiagonal();
  return r_out.squaredNorm() + r_in.squaredNorm();
}

double weighted_objective(const LayerProblem& p, const MatrixRef& q,
                          const StructuredValue& what_out,
                          const StructuredValue& what_in) {
  Matrix r_out = p.w_out * q - materialize(what_out);
  if (p.xc_out.size() > 0) r_out = p.xc_out * r_out;
  Matrix r_in = p.w_in - q * materialize(what_in);
  if (p.xc_in.size() > 0) r_in = p.xc_in * r_in;
  return r_out.squaredNorm() + p.lambda_in * r_in.squaredNorm();
}

AlsResult als_frobenius(const LayerProblem& p, int n_iters) {
  const auto t0 = std::chrono::steady_clock::now();
  const Index n = p.n();
  require(p.w_in.rows() == n, ErrorCode::ShapeMismatch,
          "als_frobenius: W_out columns and W_in rows must agree");
  spec_validate(p.spec_out, p.w_out.rows(), n);
  spec_validate(p.spec_in, n, p.w_in.cols());

  AlsResult res;
  res.q = Matrix::Identity(n, n);
  const bool weighted_out = p.frob_out_diag.size() > 0;
  const bool weighted_in = p.frob_in_diag.size() > 0;
  const StructuredValue* warm_out = nullptr;
  const StructuredValue* warm_in = nullptr;

  auto project_pair = [&] {
    WeightedAlsResult po =
        project_out(p.spec_out, Matrix(p.w_out * res.q), p.frob_out_diag, warm_out);
    WeightedAlsResult pi = project_in(
        p.spec_in, Matrix(res.q.transpose() * p.w_in), p.frob_in_diag, warm_in);
    res.what_out = std::move(po.value);
    res.what_in = std::move(pi.value);
    if (po.ls_flag || pi.ls_flag) res.report.iterative_ls_flag = true;
    warm_out = &res.what_out;
    warm_in = &res.what_in;
  };

  for (int it = 0; it < n_iters; ++it) {
    project_pair();
    res.report.frobenius_trace.push_back(
        frobenius_objective(p, res.q, res.what_out, res.what_in));
    // Stack [W_out; W_in^T] against the projected pair and solve the
    // right-multiplied Procrustes problem; the diagonal weights fold into
    // the stacked operands.
    Matrix top = p.w_out;
    Matrix top_hat = materialize(res.what_out);
    if (weighted_out) {
      top = p.frob_out_diag.asDiagonal() * top;
      top_hat = p.frob_out_diag.asDiagonal() * top_hat;
    }
    Matrix bottom = p.w_in;
    Matrix bottom_hat = materialize(res.what_in);
    if (weighted_in) {
      bottom = bottom * p.frob_in_diag.asDiagonal();
      bottom_hat = bottom_hat * p.frob_in_diag.asDiagonal();
    }
    Matrix m(top.rows() + bottom.cols(), n);
    m << top, bottom.transpose();
    Matrix m_hat(top.rows() + bottom.cols(), n);
    // bottom_hat approximates Q^T W_in, so its transpose stacks as
    // (W_in^T Q) target rows.
    m_hat << top_hat, bottom_hat.transpose();
    res.q = solve_opp_right(m, m_hat);
    res.report.frobenius_trace.push_back(
        frobenius_objective(p, res.q, res.what_out, res.what_in));
  }
  // Align the returned factors with the final rotation.
  project_pair();
  res.report.frobenius_trace.push_back(
      frobenius_objective(p, res.q, res.what_out, res.what_in));

  Matrix r_out = p.w_out * res.q - materialize(res.what_out);
  Matrix r_in = res.q.transpose() * p.w_in - materialize(res.what_in);
  res.report.final_objective_out = r_out.squaredNorm();
  res.report.final_objective_in = r_in.squaredNorm();
  res.report.final_objective = res.report.frobenius_trace.back();
  res.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

AlsResult als_weighted(const LayerProblem& p, int n_iters, int cg_iters,
                       int proj_iters) {
  const auto t0 = std::chrono::steady_clock::now();
  const Index n = p.n();
  require(p.w_in.rows() == n, ErrorCode::ShapeMismatch,
          "als_weighted: W_out columns and W_in rows must agree");
  require(p.lambda_in >= 0.0, ErrorCode::ShapeMismatch,
          "als_weighted: lambda_in must be nonnegative");
  spec_validate(p.spec_out, p.w_out.rows(), n);
  spec_validate(p.spec_in, n, p.w_in.cols());

  const Matrix xc_out =
      p.xc_out.size() > 0 ? p.xc_out : Matrix::Identity(p.w_out.rows(), p.w_out.rows());
  const Matrix xc_in = p.xc_in.size() > 0 ? p.xc_in : Matrix::Identity(n, n);

  AlsResult res;
  res.q = Matrix::Identity(n, n);
  const StructuredValue* warm_out = nullptr;
  const StructuredValue* warm_in = nullptr;

  auto project_pair = [&] {
    WeightedAlsResult po = weighted_project(p.spec_out, xc_out,
                                            Matrix(p.w_out * res.q), proj_iters,
                                            warm_out);
    // min over W of ||Xc_in (W_in - Q W)|| equals the projection of
    // Q^T W_in in the rotated weight Q^T Xc_in Q.
    const Matrix xc_in_rot = res.q.transpose() * xc_in * res.q;
    WeightedAlsResult pi =
        weighted_project(p.spec_in, xc_in_rot, Matrix(res.q.transpose() * p.w_in),
                         proj_iters, warm_in);
    res.what_out = std::move(po.value);
    res.what_in = std::move(pi.value);
    if (po.ls_flag || pi.ls_flag) res.report.iterative_ls_flag = true;
    warm_out = &res.what_out;
    warm_in = &res.what_in;
  };

  for (int it = 0; it < n_iters; ++it) {
    project_pair();
    res.report.weighted_trace.push_back(
        weighted_objective(p, res.q, res.what_out, res.what_in));

    WoppProblem wopp;
    wopp.n = n;
    WoppTerm out_term;
    out_term.c = xc_out * p.w_out;
    out_term.b = xc_out * materialize(res.what_out);
    out_term.weight = 1.0;
    wopp.terms.push_back(std::move(out_term));
    if (p.lambda_in > 0.0) {
      WoppTerm in_term;
      in_term.c = xc_in;
      in_term.a = materialize(res.what_in);
      in_term.b = xc_in * p.w_in;
      in_term.weight = p.lambda_in;
      wopp.terms.push_back(std::move(in_term));
    }
    WoppResult wr = solve_wopp(wopp, res.q, cg_iters);
    if (wr.line_search_failed) res.report.line_search_failed = true;
    res.q = std::move(wr.q);
    res.report.weighted_trace.push_back(
        weighted_objective(p, res.q, res.what_out, res.what_in));
  }
  project_pair();
  res.report.weighted_trace.push_back(
      weighted_objective(p, res.q, res.what_out, res.what_in));

  res.report.final_objective = res.report.weighted_trace.back();
  res.report.final_objective_out =
      (xc_out * (p.w_out * res.q - materialize(res.what_out))).squaredNorm();
  res.report.final_objective_in =
      (xc_in * (p.w_in - res.q * materialize(res.what_in))).squaredNorm();
  res.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

double compute_lambda_in(const LayerProblem& p, LambdaMode mode) {
  if (mode == LambdaMode::One) return 1.0;
  const Matrix num =
      p.xc_out.size() > 0 ? Matrix(p.xc_out * p.w_out) : p.w_out;
  const Matrix den = p.xc_in.size() > 0 ? Matrix(p.xc_in * p.w_in) : p.w_in;
  const double d = den.squaredNorm();
  require(d > 0.0, ErrorCode::DivisionByZero,
          "compute_lambda_in: in-term norm is zero");
  return num.squaredNorm() / d;
}

// ----- block-zero slicing equivalence ---------------------------------------

Matrix SliceProblem::q_prev_or_identity() const {
  return q_prev.size() > 0 ? q_prev : Matrix::Identity(n(), n());
}

double slice_objective(const SliceProblem& p, Index, const MatrixRef& q,
                       const MatrixRef& what_out, const MatrixRef& what_skip) {
  const Matrix qp = p.q_prev_or_identity();
  return (p.x_out * (p.w_out * q - what_out) + p.x_skip * (q - qp * what_skip))
      .squaredNorm();
}

SliceEquivResult slicegpt_equivalence_check(const SliceProblem& p, Index d,
                                            const SliceEquivOptions& opts) {
  const Index n = p.n();
  require(p.x_out.cols() == p.w_out.rows() && p.x_skip.cols() == n &&
              p.x_skip.rows() == p.x_out.rows() && d >= 0 && d <= n,
          ErrorCode::ShapeMismatch, "slice check: operand shapes inconsistent");
  const Matrix qp = p.q_prev_or_identity();
  const Matrix g = p.x_out * p.w_out + p.x_skip;

  SliceEquivResult res;

  // Closed form: rotate onto the principal components of G and slice.
  Eigen::JacobiSVD<Matrix> svd(g, Eigen::ComputeFullV);
  const Vector& sv = svd.singularValues();
  double tail = 0.0;
  for (Index i = d; i < sv.size(); ++i) tail += sv(i) * sv(i);
  res.q_pca = svd.matrixV();
  {
    Matrix what_out = p.w_out * res.q_pca;
    what_out.rightCols(n - d).setZero();
    Matrix what_skip = qp.transpose() * res.q_pca;
    what_skip.rightCols(n - d).setZero();
    res.objective_pca = slice_objective(p, d, res.q_pca, what_out, what_skip);
  }
  // The evaluated closed form and the tail agree to rounding; report the
  // evaluated value so the gap is measured on one footing.
  (void)tail;

  // Generic route: alternate the exact least-squares fit of the kept
  // columns with a Procrustes update of the rotation.
  const Matrix design = [&] {
    Matrix m(p.x_out.rows(), p.x_out.cols() + n);
    m << p.x_out, p.x_skip * qp;
    return m;
  }();
  Matrix q = Matrix::Identity(n, n);
  Matrix kept = Matrix::Zero(design.cols(), d);  // stacked [What_out; What_skip]
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < opts.max_iters; ++it) {
    const Matrix gq = g * q;
    if (d > 0) kept = pinv_solve(design, gq.leftCols(d));
    Matrix target = Matrix::Zero(g.rows(), n);
    if (d > 0) target.leftCols(d) = design * kept;
    const double obj =
        (gq.leftCols(d) - target.leftCols(d)).squaredNorm() +
        gq.rightCols(n - d).squaredNorm();
    res.iterations = it + 1;
    if (std::abs(prev - obj) <= opts.stall_tol * (1.0 + obj)) {
      prev = obj;
      break;
    }
    prev = obj;
    q = solve_opp_right(g, target);
  }
  if (d > 0) kept = pinv_solve(design, Matrix((g * q).leftCols(d)));
  res.q_generic = q;
  BlockZero what_out;
  what_out.rows = p.w_out.rows();
  what_out.cols = n;
  what_out.d = d;
  what_out.kind = BlockZeroKind::ZeroCols;
  what_out.core = kept.topRows(p.w_out.rows());
  BlockZero what_skip;
  what_skip.rows = n;
  what_skip.cols = n;
  what_skip.d = d;
  what_skip.kind = BlockZeroKind::ZeroCols;
  what_skip.core = kept.bottomRows(n);
  res.objective_generic = slice_objective(
      p, d, q, materialize(StructuredValue{what_out}),
      materialize(StructuredValue{what_skip}));
  res.what_out = std::move(what_out);
  res.what_skip = std::move(what_skip);
  res.gap = res.objective_generic - res.objective_pca;
  return res;
}

}  // namespace pkit
