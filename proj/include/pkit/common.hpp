#pragma once

// Core aliases, error codes and small dense-matrix helpers shared by the
// whole library. Eigen is the only math dependency; everything runs in
// double precision.

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pkit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using MatrixRef = Eigen::Ref<const Matrix>;
using VectorRef = Eigen::Ref<const Vector>;

enum class ErrorCode {
  BadMagic,
  UnsupportedDtype,
  TruncatedPayload,
  IoError,
  ShapeMismatch,
  RankTooLarge,
  NotSkew,
  MinusOneEigenvalue,
  NotOrthogonal,
  NotPsd,
  NonFinite,
  NonFiniteObjective,
  IdOutOfRange,
  DivisionByZero,
  ZeroVector,
  NotDivisible,
  NoFeasibleShape,
  BadConfig,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

// ----- logging ----------------------------------------------------------

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

// Level is read once from the PKIT_LOG environment variable
// (error|info|debug, default error).
LogLevel log_level();
void log_line(LogLevel level, const std::string& msg);

// ----- numeric helpers --------------------------------------------------

inline bool all_finite(const MatrixRef& m) { return m.allFinite(); }

// Minimum-norm least-squares solve via SVD. Singular values below
// rcond * sigma_max are treated as zero.
Matrix pinv_solve(const MatrixRef& a, const MatrixRef& b, double rcond = 1e-10);

// Moore-Penrose pseudo-inverse with the same cutoff rule.
Matrix pinv(const MatrixRef& a, double rcond = 1e-10);

double orthogonality_error(const MatrixRef& q);

inline bool is_orthogonal(const MatrixRef& q, double tol = 1e-10) {
  return q.rows() == q.cols() && orthogonality_error(q) < tol;
}

// ----- skew-symmetric packing -------------------------------------------

// Strict upper triangle in row-major order: (0,1),(0,2),...,(1,2),...
inline Index skew_param_count(Index n) { return n * (n - 1) / 2; }

Vector pack_skew(const MatrixRef& k);
Matrix unpack_skew(const VectorRef& theta, Index n);

// ----- permutations -----------------------------------------------------

// A permutation pi stands for the matrix P with P(k, pi[k]) = 1, so
// (P * M) row k equals M row pi[k] and (M * P) column pi[k] equals
// M column k.
using PermVec = std::vector<Index>;

PermVec identity_perm(Index n);
PermVec inverse_perm(const PermVec& p);
// Perfect-shuffle / stride permutation: k = i*inner + a  ->  a*outer + i
// for i in [0, outer), a in [0, inner).
PermVec stride_perm(Index outer, Index inner);
bool is_permutation(const PermVec& p);

Matrix perm_matrix(const PermVec& p);
Matrix permute_rows(const MatrixRef& m, const PermVec& p);      // P * M
Matrix permute_cols(const MatrixRef& m, const PermVec& p);      // M * P

// ----- deterministic randomness ------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double normal() { return normal_(gen_); }
  double uniform() { return uniform_(gen_); }
  std::uint64_t next_u64() { return gen_(); }

  Matrix gaussian(Index rows, Index cols);
  // Haar-distributed orthogonal matrix (QR of a Gaussian with the R
  // diagonal sign fix).
  Matrix orthogonal(Index n);
  // Symmetric PSD square root with singular values in [lo, hi].
  Matrix psd_root(Index n, double lo = 0.5, double hi = 1.5);

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace pkit
