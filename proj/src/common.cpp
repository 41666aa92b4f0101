#include "pkit/common.hpp"

#include <cstdio>
#include <cstdlib>
#include <mutex>

namespace pkit {

LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("PKIT_LOG");
    if (!env) return LogLevel::Error;
    std::string s(env);
    if (s == "debug") return LogLevel::Debug;
    if (s == "info") return LogLevel::Info;
    return LogLevel::Error;
  }();
  return level;
}

void log_line(LogLevel level, const std::string& msg) {
  if (level > log_level()) return;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  const char* tag = level == LogLevel::Error  ? "error"
                    : level == LogLevel::Info ? "info"
                                              : "debug";
  std::fprintf(stderr, "[pkit:%s] %s\n", tag, msg.c_str());
}

Matrix pinv_solve(const MatrixRef& a, const MatrixRef& b, double rcond) {
  require(a.rows() == b.rows(), ErrorCode::ShapeMismatch,
          "pinv_solve: row counts differ");
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  const double cutoff = s.size() > 0 ? rcond * s(0) : 0.0;
  Vector inv = Vector::Zero(s.size());
  for (Index i = 0; i < s.size(); ++i)
    if (s(i) > cutoff) inv(i) = 1.0 / s(i);
  return svd.matrixV() * inv.asDiagonal() * (svd.matrixU().transpose() * b);
}

Matrix pinv(const MatrixRef& a, double rcond) {
  return pinv_solve(a, Matrix::Identity(a.rows(), a.rows()), rcond);
}

double orthogonality_error(const MatrixRef& q) {
  return (q.transpose() * q - Matrix::Identity(q.cols(), q.cols())).norm();
}

Vector pack_skew(const MatrixRef& k) {
  const Index n = k.rows();
  require(k.cols() == n, ErrorCode::ShapeMismatch, "pack_skew: not square");
  Vector theta(skew_param_count(n));
  Index idx = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) theta(idx++) = k(i, j);
  return theta;
}

Matrix unpack_skew(const VectorRef& theta, Index n) {
  require(theta.size() == skew_param_count(n), ErrorCode::ShapeMismatch,
          "unpack_skew: parameter count does not match dimension");
  Matrix k = Matrix::Zero(n, n);
  Index idx = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) {
      k(i, j) = theta(idx);
      k(j, i) = -theta(idx);
      ++idx;
    }
  return k;
}

PermVec identity_perm(Index n) {
  PermVec p(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) p[i] = i;
  return p;
}

PermVec inverse_perm(const PermVec& p) {
  PermVec inv(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) inv[p[k]] = static_cast<Index>(k);
  return inv;
}

PermVec stride_perm(Index outer, Index inner) {
  PermVec p(static_cast<std::size_t>(outer * inner));
  for (Index i = 0; i < outer; ++i)
    for (Index a = 0; a < inner; ++a) p[i * inner + a] = a * outer + i;
  return p;
}

bool is_permutation(const PermVec& p) {
  std::vector<bool> seen(p.size(), false);
  for (Index v : p) {
    if (v < 0 || v >= static_cast<Index>(p.size()) || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

Matrix perm_matrix(const PermVec& p) {
  const Index n = static_cast<Index>(p.size());
  Matrix m = Matrix::Zero(n, n);
  for (Index k = 0; k < n; ++k) m(k, p[k]) = 1.0;
  return m;
}

Matrix permute_rows(const MatrixRef& m, const PermVec& p) {
  require(static_cast<Index>(p.size()) == m.rows(), ErrorCode::ShapeMismatch,
          "permute_rows: size mismatch");
  Matrix out(m.rows(), m.cols());
  for (Index k = 0; k < m.rows(); ++k) out.row(k) = m.row(p[k]);
  return out;
}

Matrix permute_cols(const MatrixRef& m, const PermVec& p) {
  require(static_cast<Index>(p.size()) == m.cols(), ErrorCode::ShapeMismatch,
          "permute_cols: size mismatch");
  Matrix out(m.rows(), m.cols());
  for (Index k = 0; k < m.cols(); ++k) out.col(p[k]) = m.col(k);
  return out;
}

Matrix Rng::gaussian(Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = normal();
  return m;
}

Matrix Rng::orthogonal(Index n) {
  Matrix g = gaussian(n, n);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index i = 0; i < n; ++i)
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  return q;
}

Matrix Rng::psd_root(Index n, double lo, double hi) {
  Matrix q = orthogonal(n);
  Vector d(n);
  for (Index i = 0; i < n; ++i) d(i) = lo + (hi - lo) * uniform();
  return q * d.asDiagonal() * q.transpose();
}

}  // namespace pkit
