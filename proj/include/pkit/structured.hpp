#pragma once

// Low-parametric matrix classes and their exact Frobenius-norm projections:
//  - sums of Kronecker products  sum_i A_i (x) B_i
//  - GS matrices  P_L (L P R) P_R  with block-diagonal L, R
//  - single-nonzero-block matrices (zero-cols / zero-rows / corner)
// plus a pass-through "dense" class so pipelines can disable compression
// per role.

#include "pkit/common.hpp"
#include "pkit/tensorfile.hpp"

#include <cstdint>
#include <filesystem>
#include <variant>
#include <vector>

namespace pkit {

// ----- shape specs --------------------------------------------------------

struct KronSpec {
  Index r = 1;
  Index m1 = 1, n1 = 1;  // A_i shape
  Index m2 = 1, n2 = 1;  // B_i shape
  Index rows() const { return m1 * m2; }
  Index cols() const { return n1 * n2; }
};

struct GsSpec {
  Index kl = 1, kr = 1;
  Index bl1 = 1, bl2 = 1;  // L blocks
  Index br1 = 1, br2 = 1;  // R blocks
  // Permutations; empty means the default (identity P_L/P_R, stride P).
  PermVec pl, p, pr;
  Index rows() const { return kl * bl1; }
  Index cols() const { return kr * br2; }
  Index inner() const { return kl * bl2; }

  // Fills empty permutations with defaults and validates sizes.
  GsSpec resolved() const;
};

enum class BlockZeroKind { ZeroCols, ZeroRows, Corner };

struct BlockZeroSpec {
  Index d = 0;
  BlockZeroKind kind = BlockZeroKind::ZeroCols;
};

struct DenseSpec {};

using StructureSpec = std::variant<KronSpec, GsSpec, BlockZeroSpec, DenseSpec>;

// ----- structured values ---------------------------------------------------

struct KroneckerSum {
  std::vector<Matrix> a;  // r factors, each m1 x n1
  std::vector<Matrix> b;  // r factors, each m2 x n2
  KronSpec spec() const;
};

struct GSMatrix {
  GsSpec shape;               // with resolved permutations
  std::vector<Matrix> l;      // kl blocks, bl1 x bl2
  std::vector<Matrix> r;      // kr blocks, br1 x br2
};

struct BlockZero {
  Index rows = 0, cols = 0;
  Index d = 0;
  BlockZeroKind kind = BlockZeroKind::ZeroCols;
  Matrix core;  // the retained block
};

struct DenseValue {
  Matrix w;
};

using StructuredValue = std::variant<KroneckerSum, GSMatrix, BlockZero, DenseValue>;

// ----- operations ----------------------------------------------------------

// (m1*m2) x (n1*n2)  ->  (m1*n1) x (m2*n2); output(i1*n1+j1, i2*n2+j2) =
// input(i1*m2+i2, j1*n2+j2). A Kronecker product A (x) B maps to the rank-1
// matrix vec(A) vec(B)^T (row-major vectorization).
Matrix rearrange_kron(const MatrixRef& w, Index m1, Index n1, Index m2, Index n2);

// Best Frobenius-norm approximation by a sum of r Kronecker products,
// via truncated SVD of the rearranged matrix.
KroneckerSum kron_project(const MatrixRef& w, const KronSpec& spec);

// Optimal L, R blocks for the fixed permutations: each implied block of
// P_L^T W P_R^T receives its best low-rank approximation.
GSMatrix gs_project(const MatrixRef& w, const GsSpec& spec);

// Copies the retained block and zeroes the rest.
BlockZero blockzero_project(const MatrixRef& w, const BlockZeroSpec& spec);

StructuredValue project(const StructureSpec& spec, const MatrixRef& w);

Matrix materialize(const StructuredValue& v);

// X * materialize(v) computed without materializing.
Matrix apply(const MatrixRef& x, const StructuredValue& v);

std::int64_t param_count(const StructuredValue& v);
std::int64_t param_count(const StructureSpec& spec, Index rows, Index cols);

// Fraction of dense parameters kept: params(v) / (rows*cols).
double param_fraction(const StructuredValue& v, Index rows, Index cols);
// 1 - param_fraction.
double compression_ratio(const StructuredValue& v, Index rows, Index cols);

Index value_rows(const StructuredValue& v);
Index value_cols(const StructuredValue& v);

void spec_validate(const StructureSpec& spec, Index rows, Index cols);

// All three classes are closed under transposition; these map a spec or a
// value to the spec/value of the transposed matrix.
StructureSpec transpose_spec(const StructureSpec& spec);
StructuredValue transpose_value(const StructuredValue& v);

// For the (i, j) block grid implied by a GS spec: the list of
// (L-column, R-row) index pairs routed into each block by P, i.e. the
// block's maximal rank.
std::vector<std::vector<std::vector<std::pair<Index, Index>>>> gs_block_pairs(
    const GsSpec& spec);

// ----- serialization -------------------------------------------------------

// A structured value is stored as a directory with a manifest.json naming
// the class and shape plus TensorFiles for the factors.
void save_structured(const std::filesystem::path& dir, const StructuredValue& v);
StructuredValue load_structured(const std::filesystem::path& dir);

}  // namespace pkit
