#include "pkit/weighted.hpp"

#include <cmath>

namespace pkit {

namespace {

Matrix block_diag(const std::vector<Matrix>& blocks) {
  Index rows = 0, cols = 0;
  for (const Matrix& b : blocks) {
    rows += b.rows();
    cols += b.cols();
  }
  Matrix out = Matrix::Zero(rows, cols);
  Index r0 = 0, c0 = 0;
  for (const Matrix& b : blocks) {
    out.block(r0, c0, b.rows(), b.cols()) = b;
    r0 += b.rows();
    c0 += b.cols();
  }
  return out;
}

}  // namespace

double weighted_residual(const MatrixRef& x, const MatrixRef& w,
                         const StructuredValue& v) {
  return (x * (w - materialize(v))).norm();
}

// ----- Kronecker ------------------------------------------------------------

namespace {

// Assembles the normal-equations pair (C, D) of the A step from
// G = X^T X and H = X^T Y:
//   C[(r,a),(n,b)] = sum_{i,k} (B_r B_n^T)(i,k) G(a*m2+i, b*m2+k)
//   D[(r,a),  b  ] = sum_{i,j}  B_r(i,j)     H(a*m2+i, b*n2+j)
std::vector<Matrix> kron_step_A_normal(const std::vector<Matrix>& b,
                                       const MatrixRef& g, const MatrixRef& h,
                                       Index r, Index m1, Index n1, Index m2,
                                       Index n2) {
  Matrix c(r * m1, r * m1);
  for (Index rr = 0; rr < r; ++rr) {
    for (Index nn = 0; nn < r; ++nn) {
      const Matrix bbt = b[rr] * b[nn].transpose();  // m2 x m2
      for (Index a = 0; a < m1; ++a)
        for (Index bb = 0; bb < m1; ++bb)
          c(rr * m1 + a, nn * m1 + bb) =
              g.block(a * m2, bb * m2, m2, m2).cwiseProduct(bbt).sum();
    }
  }
  Matrix d(r * m1, n1);
  for (Index rr = 0; rr < r; ++rr)
    for (Index a = 0; a < m1; ++a)
      for (Index bb = 0; bb < n1; ++bb)
        d(rr * m1 + a, bb) =
            h.block(a * m2, bb * n2, m2, n2).cwiseProduct(b[rr]).sum();
  require(c.allFinite() && d.allFinite(), ErrorCode::NonFinite,
          "kron step: non-finite normal equations");
  const Matrix a_flat = pinv_solve(c, d);
  std::vector<Matrix> a(static_cast<std::size_t>(r));
  for (Index rr = 0; rr < r; ++rr)
    a[static_cast<std::size_t>(rr)] = a_flat.middleRows(rr * m1, m1);
  return a;
}

}  // namespace

std::vector<Matrix> kron_step_A(const std::vector<Matrix>& b, const MatrixRef& x,
                                const MatrixRef& y, const KronSpec& spec) {
  require(static_cast<Index>(b.size()) == spec.r, ErrorCode::ShapeMismatch,
          "kron_step_A: factor count does not match rank");
  for (const Matrix& bi : b)
    require(bi.rows() == spec.m2 && bi.cols() == spec.n2, ErrorCode::ShapeMismatch,
            "kron_step_A: B factor shape mismatch");
  require(x.cols() == spec.rows() && y.rows() == x.rows() && y.cols() == spec.cols(),
          ErrorCode::ShapeMismatch, "kron_step_A: operand shapes inconsistent");
  const Matrix g = x.transpose() * x;
  const Matrix h = x.transpose() * y;
  return kron_step_A_normal(b, g, h, spec.r, spec.m1, spec.n1, spec.m2, spec.n2);
}

std::vector<Matrix> kron_step_B(const std::vector<Matrix>& a, const MatrixRef& x,
                                const MatrixRef& y, const KronSpec& spec) {
  require(static_cast<Index>(a.size()) == spec.r, ErrorCode::ShapeMismatch,
          "kron_step_B: factor count does not match rank");
  for (const Matrix& ai : a)
    require(ai.rows() == spec.m1 && ai.cols() == spec.n1, ErrorCode::ShapeMismatch,
            "kron_step_B: A factor shape mismatch");
  require(x.cols() == spec.rows() && y.rows() == x.rows() && y.cols() == spec.cols(),
          ErrorCode::ShapeMismatch, "kron_step_B: operand shapes inconsistent");
  // sum A_i (x) B_i equals sum B_i (x) A_i after the commutation
  // permutations, so the B step is the A step of the swapped problem.
  const PermVec rho = stride_perm(spec.m1, spec.m2);
  const PermVec gamma = stride_perm(spec.n1, spec.n2);
  const Matrix xs = permute_cols(x, rho);
  const Matrix ys = permute_cols(y, gamma);
  KronSpec swapped;
  swapped.r = spec.r;
  swapped.m1 = spec.m2;
  swapped.n1 = spec.n2;
  swapped.m2 = spec.m1;
  swapped.n2 = spec.n1;
  return kron_step_A(a, xs, ys, swapped);
}

WeightedAlsResult kron_weighted_als(const MatrixRef& x, const MatrixRef& w,
                                    const KronSpec& spec, int iters,
                                    const KroneckerSum& init) {
  spec_validate(StructureSpec{spec}, w.rows(), w.cols());
  KroneckerSum cur = init;
  WeightedAlsResult res;
  res.trace.push_back(std::pow(weighted_residual(x, w, StructuredValue{cur}), 2));
  const Matrix y = x * w;
  for (int it = 0; it < iters; ++it) {
    cur.a = kron_step_A(cur.b, x, y, spec);
    res.trace.push_back(std::pow(weighted_residual(x, w, StructuredValue{cur}), 2));
    cur.b = kron_step_B(cur.a, x, y, spec);
    res.trace.push_back(std::pow(weighted_residual(x, w, StructuredValue{cur}), 2));
  }
  res.value = std::move(cur);
  return res;
}

// ----- GS -------------------------------------------------------------------

namespace {

// X L P for block-diagonal L.
Matrix xlp(const std::vector<Matrix>& l, const MatrixRef& x, const GsSpec& spec) {
  Matrix xl(x.rows(), spec.inner());
  for (Index i = 0; i < spec.kl; ++i)
    xl.middleCols(i * spec.bl2, spec.bl2) =
        x.middleCols(i * spec.bl1, spec.bl1) * l[static_cast<std::size_t>(i)];
  return permute_cols(xl, spec.p);
}

Matrix pr_rows(const std::vector<Matrix>& r, const GsSpec& spec) {
  return permute_rows(block_diag(r), spec.p);  // P * R
}

double reduced_objective(const MatrixRef& x, const MatrixRef& y,
                         const std::vector<Matrix>& l,
                         const std::vector<Matrix>& r, const GsSpec& spec) {
  const Matrix pr = pr_rows(r, spec);
  Matrix fit = Matrix::Zero(y.rows(), y.cols());
  for (Index i = 0; i < spec.kl; ++i)
    fit.noalias() += x.middleCols(i * spec.bl1, spec.bl1) *
                     l[static_cast<std::size_t>(i)] *
                     pr.middleRows(i * spec.bl2, spec.bl2);
  return (y - fit).squaredNorm();
}

// LSQR on the operator theta -> sum_i QX_i  Ltilde_i  QR_i^T with
// warm start x0; returns (solution, hit_tolerance).
struct TildeShape {
  std::vector<Index> p, q, offset;
  Index total = 0;
};

TildeShape tilde_shape(const std::vector<Matrix>& qx,
                       const std::vector<Matrix>& qr) {
  TildeShape sh;
  for (std::size_t i = 0; i < qx.size(); ++i) {
    sh.p.push_back(qx[i].cols());
    sh.q.push_back(qr[i].cols());
    sh.offset.push_back(sh.total);
    sh.total += qx[i].cols() * qr[i].cols();
  }
  return sh;
}

Matrix op_apply(const Vector& theta, const std::vector<Matrix>& qx,
                const std::vector<Matrix>& qr, const TildeShape& sh, Index rows,
                Index cols) {
  Matrix out = Matrix::Zero(rows, cols);
  for (std::size_t i = 0; i < qx.size(); ++i) {
    Eigen::Map<const Matrix> lt(theta.data() + sh.offset[i], sh.p[i], sh.q[i]);
    out.noalias() += qx[i] * lt * qr[i].transpose();
  }
  return out;
}

Vector op_adjoint(const MatrixRef& z, const std::vector<Matrix>& qx,
                  const std::vector<Matrix>& qr, const TildeShape& sh) {
  Vector theta(sh.total);
  for (std::size_t i = 0; i < qx.size(); ++i) {
    Eigen::Map<Matrix> lt(theta.data() + sh.offset[i], sh.p[i], sh.q[i]);
    lt = qx[i].transpose() * z * qr[i];
  }
  return theta;
}

std::pair<Vector, bool> lsqr(const std::vector<Matrix>& qx,
                             const std::vector<Matrix>& qr, const MatrixRef& rhs,
                             const Vector& theta0, const GsStepLOptions& opts) {
  const TildeShape sh = tilde_shape(qx, qr);
  const Index rows = rhs.rows(), cols = rhs.cols();
  Vector delta = Vector::Zero(sh.total);
  Matrix u = rhs - op_apply(theta0, qx, qr, sh, rows, cols);
  double beta = u.norm();
  if (beta == 0.0) return {theta0, true};
  u /= beta;
  Vector v = op_adjoint(u, qx, qr, sh);
  double alpha = v.norm();
  if (alpha == 0.0) return {theta0, true};
  v /= alpha;
  const double grad0 = std::max(1.0, alpha * beta);  // ||A^T r|| at start
  Vector w = v;
  double phibar = beta, rhobar = alpha;
  bool converged = false;
  for (int it = 0; it < opts.max_iters; ++it) {
    u = op_apply(v, qx, qr, sh, rows, cols) - alpha * u;
    beta = u.norm();
    if (beta > 0) u /= beta;
    v = op_adjoint(u, qx, qr, sh) - beta * v;
    alpha = v.norm();
    if (alpha > 0) v /= alpha;
    const double rho = std::hypot(rhobar, beta);
    const double c = rhobar / rho, s = beta / rho;
    const double theta = s * alpha;
    rhobar = -c * alpha;
    const double phi = c * phibar;
    phibar = s * phibar;
    delta += (phi / rho) * w;
    w = v - (theta / rho) * w;
    // ||A^T r|| = phibar * alpha * |c|
    if (phibar * alpha * std::abs(c) <= opts.tol * grad0 || beta == 0.0 ||
        alpha == 0.0) {
      converged = true;
      break;
    }
  }
  return {theta0 + delta, converged};
}

}  // namespace

std::vector<Matrix> gs_step_R(const std::vector<Matrix>& l, const MatrixRef& x,
                              const MatrixRef& y, const GsSpec& spec_in) {
  const GsSpec spec = spec_in.resolved();
  require(static_cast<Index>(l.size()) == spec.kl, ErrorCode::ShapeMismatch,
          "gs_step_R: L block count mismatch");
  require(x.cols() == spec.rows() && y.rows() == x.rows() && y.cols() == spec.cols(),
          ErrorCode::ShapeMismatch, "gs_step_R: operand shapes inconsistent");
  const Matrix design = xlp(l, x, spec);
  std::vector<Matrix> r(static_cast<std::size_t>(spec.kr));
  for (Index j = 0; j < spec.kr; ++j)
    r[static_cast<std::size_t>(j)] =
        pinv_solve(design.middleCols(j * spec.br1, spec.br1),
                   y.middleCols(j * spec.br2, spec.br2));
  return r;
}

GsStepLResult gs_step_L(const std::vector<Matrix>& r, const MatrixRef& x,
                        const MatrixRef& y, const GsSpec& spec_in,
                        const GsStepLOptions& opts,
                        const std::vector<Matrix>* warm) {
  const GsSpec spec = spec_in.resolved();
  require(static_cast<Index>(r.size()) == spec.kr, ErrorCode::ShapeMismatch,
          "gs_step_L: R block count mismatch");
  require(x.cols() == spec.rows() && y.rows() == x.rows() && y.cols() == spec.cols(),
          ErrorCode::ShapeMismatch, "gs_step_L: operand shapes inconsistent");
  const Matrix pr = pr_rows(r, spec);

  std::vector<Matrix> qx(static_cast<std::size_t>(spec.kl));
  std::vector<Matrix> rx(static_cast<std::size_t>(spec.kl));
  std::vector<Matrix> qr_(static_cast<std::size_t>(spec.kl));
  std::vector<Matrix> rr(static_cast<std::size_t>(spec.kl));
  for (Index i = 0; i < spec.kl; ++i) {
    const Matrix xi = x.middleCols(i * spec.bl1, spec.bl1);
    Eigen::HouseholderQR<Matrix> qrx(xi);
    const Index px = std::min(xi.rows(), xi.cols());
    qx[i] = qrx.householderQ() * Matrix::Identity(xi.rows(), px);
    rx[i] = qrx.matrixQR().topRows(px).triangularView<Eigen::Upper>();
    const Matrix prit = pr.middleRows(i * spec.bl2, spec.bl2).transpose();
    Eigen::HouseholderQR<Matrix> qrr(prit);
    const Index pq = std::min(prit.rows(), prit.cols());
    qr_[i] = qrr.householderQ() * Matrix::Identity(prit.rows(), pq);
    rr[i] = qrr.matrixQR().topRows(pq).triangularView<Eigen::Upper>();
  }

  const TildeShape sh = tilde_shape(qx, qr_);
  Vector theta0 = Vector::Zero(sh.total);
  if (warm) {
    for (Index i = 0; i < spec.kl; ++i) {
      Eigen::Map<Matrix> lt(theta0.data() + sh.offset[i], sh.p[i], sh.q[i]);
      lt = rx[i] * (*warm)[static_cast<std::size_t>(i)] * rr[i].transpose();
    }
  }
  auto [theta, hit_tol] = lsqr(qx, qr_, y, theta0, opts);

  GsStepLResult res;
  res.converged = hit_tol;
  res.l.resize(static_cast<std::size_t>(spec.kl));
  for (Index i = 0; i < spec.kl; ++i) {
    Eigen::Map<const Matrix> lt(theta.data() + sh.offset[i], sh.p[i], sh.q[i]);
    res.l[i] = pinv(rx[i]) * lt * pinv(Matrix(rr[i].transpose()));
  }
  // The QR substitution is exact only for full-rank blocks; keep the warm
  // start if a degenerate system made things worse.
  if (warm) {
    const double before = reduced_objective(x, y, *warm, r, spec);
    const double after = reduced_objective(x, y, res.l, r, spec);
    if (after > before + 1e-12 * (1.0 + before)) {
      res.l = *warm;
      res.converged = false;
    }
  }
  return res;
}

WeightedAlsResult gs_weighted_als(const MatrixRef& x, const MatrixRef& w,
                                  const GsSpec& spec_in, int iters,
                                  const GSMatrix& init) {
  const GsSpec spec = spec_in.resolved();
  spec_validate(StructureSpec{spec}, w.rows(), w.cols());
  // Fold the outer permutations away: || X (W - PL L P R PR) ||
  // = || (X PL) (PL^T W PR^T) - (X PL) L P R ||.
  const Matrix xr = permute_cols(x, spec.pl);
  const Matrix y = permute_cols(Matrix(x * w), inverse_perm(spec.pr));

  GSMatrix cur = init;
  cur.shape = spec;
  WeightedAlsResult res;
  res.trace.push_back(reduced_objective(xr, y, cur.l, cur.r, spec));
  GsStepLOptions lopts;
  for (int it = 0; it < iters; ++it) {
    cur.r = gs_step_R(cur.l, xr, y, spec);
    res.trace.push_back(reduced_objective(xr, y, cur.l, cur.r, spec));
    GsStepLResult lres = gs_step_L(cur.r, xr, y, spec, lopts, &cur.l);
    if (!lres.converged) res.ls_flag = true;
    cur.l = std::move(lres.l);
    res.trace.push_back(reduced_objective(xr, y, cur.l, cur.r, spec));
  }
  res.value = std::move(cur);
  return res;
}

// ----- dispatch --------------------------------------------------------------

WeightedAlsResult weighted_project(const StructureSpec& spec, const MatrixRef& x,
                                   const MatrixRef& w, int iters,
                                   const StructuredValue* warm) {
  spec_validate(spec, w.rows(), w.cols());
  if (const auto* ks = std::get_if<KronSpec>(&spec)) {
    const KroneckerSum init = warm && std::holds_alternative<KroneckerSum>(*warm)
                                  ? std::get<KroneckerSum>(*warm)
                                  : kron_project(w, *ks);
    return kron_weighted_als(x, w, *ks, iters, init);
  }
  if (const auto* gs = std::get_if<GsSpec>(&spec)) {
    const GSMatrix init = warm && std::holds_alternative<GSMatrix>(*warm)
                              ? std::get<GSMatrix>(*warm)
                              : gs_project(w, *gs);
    return gs_weighted_als(x, w, *gs, iters, init);
  }
  WeightedAlsResult res;
  if (const auto* bz = std::get_if<BlockZeroSpec>(&spec)) {
    // Exact: the kept block is an unconstrained least-squares fit.
    BlockZero val;
    val.rows = w.rows();
    val.cols = w.cols();
    val.d = bz->d;
    val.kind = bz->kind;
    switch (bz->kind) {
      case BlockZeroKind::ZeroCols:
        val.core = pinv_solve(x, Matrix(x * w.leftCols(bz->d)));
        break;
      case BlockZeroKind::ZeroRows:
        val.core = pinv_solve(x.leftCols(bz->d), Matrix(x * w));
        break;
      case BlockZeroKind::Corner:
        val.core = pinv_solve(x.leftCols(bz->d), Matrix((x * w).leftCols(bz->d)));
        break;
    }
    res.value = std::move(val);
  } else {
    res.value = DenseValue{w};
  }
  res.trace.push_back(std::pow(weighted_residual(x, w, res.value), 2));
  return res;
}

}  // namespace pkit
