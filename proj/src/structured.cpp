#include "pkit/structured.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>

namespace pkit {

namespace {

// Deterministic factor signs: the largest-magnitude entry of each left
// singular vector is made positive.
void fix_svd_signs(Matrix& u, Matrix& v) {
  for (Index k = 0; k < u.cols(); ++k) {
    Index imax = 0;
    for (Index i = 1; i < u.rows(); ++i)
      if (std::abs(u(i, k)) > std::abs(u(imax, k))) imax = i;
    if (u(imax, k) < 0) {
      u.col(k) = -u.col(k);
      v.col(k) = -v.col(k);
    }
  }
}

Matrix unvec_rowmajor(const VectorRef& v, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = v(i * cols + j);
  return m;
}

}  // namespace

GsSpec GsSpec::resolved() const {
  GsSpec s = *this;
  require(s.kl > 0 && s.kr > 0 && s.bl1 > 0 && s.bl2 > 0 && s.br1 > 0 && s.br2 > 0,
          ErrorCode::ShapeMismatch, "gs spec has nonpositive sizes");
  require(s.kl * s.bl2 == s.kr * s.br1, ErrorCode::ShapeMismatch,
          "gs spec inner dimensions do not match (kl*bl2 != kr*br1)");
  if (s.pl.empty()) s.pl = identity_perm(s.rows());
  if (s.pr.empty()) s.pr = identity_perm(s.cols());
  if (s.p.empty()) s.p = stride_perm(s.kl, s.bl2);
  require(static_cast<Index>(s.pl.size()) == s.rows() && is_permutation(s.pl),
          ErrorCode::ShapeMismatch, "P_L is not a permutation of the row space");
  require(static_cast<Index>(s.pr.size()) == s.cols() && is_permutation(s.pr),
          ErrorCode::ShapeMismatch, "P_R is not a permutation of the column space");
  require(static_cast<Index>(s.p.size()) == s.inner() && is_permutation(s.p),
          ErrorCode::ShapeMismatch, "P is not a permutation of the inner space");
  return s;
}

KronSpec KroneckerSum::spec() const {
  KronSpec s;
  s.r = static_cast<Index>(a.size());
  if (!a.empty()) {
    s.m1 = a[0].rows();
    s.n1 = a[0].cols();
    s.m2 = b[0].rows();
    s.n2 = b[0].cols();
  }
  return s;
}

Matrix rearrange_kron(const MatrixRef& w, Index m1, Index n1, Index m2, Index n2) {
  require(w.rows() == m1 * m2 && w.cols() == n1 * n2, ErrorCode::ShapeMismatch,
          "rearrange_kron: dims do not factor the matrix");
  Matrix out(m1 * n1, m2 * n2);
  for (Index i1 = 0; i1 < m1; ++i1)
    for (Index j1 = 0; j1 < n1; ++j1)
      for (Index i2 = 0; i2 < m2; ++i2)
        for (Index j2 = 0; j2 < n2; ++j2)
          out(i1 * n1 + j1, i2 * n2 + j2) = w(i1 * m2 + i2, j1 * n2 + j2);
  return out;
}

KroneckerSum kron_project(const MatrixRef& w, const KronSpec& spec) {
  require(spec.r >= 1, ErrorCode::ShapeMismatch, "kron rank must be positive");
  require(w.rows() == spec.rows() && w.cols() == spec.cols(),
          ErrorCode::ShapeMismatch, "kron_project: shape does not divide matrix");
  require(spec.r <= std::min(spec.m1 * spec.n1, spec.m2 * spec.n2),
          ErrorCode::RankTooLarge, "kron rank exceeds rearranged matrix rank bound");
  const Matrix wr = rearrange_kron(w, spec.m1, spec.n1, spec.m2, spec.n2);
  Eigen::JacobiSVD<Matrix> svd(wr, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Matrix u = svd.matrixU();
  Matrix v = svd.matrixV();
  fix_svd_signs(u, v);
  const Vector& s = svd.singularValues();
  KroneckerSum ks;
  for (Index k = 0; k < spec.r; ++k) {
    const double root = std::sqrt(std::max(0.0, s(k)));
    ks.a.push_back(unvec_rowmajor(root * u.col(k), spec.m1, spec.n1));
    ks.b.push_back(unvec_rowmajor(root * v.col(k), spec.m2, spec.n2));
  }
  return ks;
}

std::vector<std::vector<std::vector<std::pair<Index, Index>>>> gs_block_pairs(
    const GsSpec& spec) {
  std::vector<std::vector<std::vector<std::pair<Index, Index>>>> pairs(
      spec.kl, std::vector<std::vector<std::pair<Index, Index>>>(spec.kr));
  for (Index k = 0; k < spec.inner(); ++k) {
    const Index i = k / spec.bl2;        // L block owning column k
    const Index a = k % spec.bl2;        // column within the block
    const Index img = spec.p[k];         // row of R selected by P
    const Index j = img / spec.br1;      // R block owning that row
    const Index brow = img % spec.br1;
    pairs[i][j].emplace_back(a, brow);
  }
  return pairs;
}

GSMatrix gs_project(const MatrixRef& w, const GsSpec& spec_in) {
  const GsSpec spec = spec_in.resolved();
  require(w.rows() == spec.rows() && w.cols() == spec.cols(),
          ErrorCode::ShapeMismatch, "gs_project: shape does not match matrix");
  // Undo the outer permutations: W ~ P_L (L P R) P_R  <=>  P_L^T W P_R^T ~ LPR.
  const Matrix m = permute_cols(permute_rows(w, inverse_perm(spec.pl)),
                                inverse_perm(spec.pr));
  GSMatrix gs;
  gs.shape = spec;
  gs.l.assign(spec.kl, Matrix::Zero(spec.bl1, spec.bl2));
  gs.r.assign(spec.kr, Matrix::Zero(spec.br1, spec.br2));
  const auto pairs = gs_block_pairs(spec);
  for (Index i = 0; i < spec.kl; ++i) {
    for (Index j = 0; j < spec.kr; ++j) {
      const auto& pij = pairs[i][j];
      if (pij.empty()) continue;
      const Matrix block = m.block(i * spec.bl1, j * spec.br2, spec.bl1, spec.br2);
      Eigen::JacobiSVD<Matrix> svd(block, Eigen::ComputeThinU | Eigen::ComputeThinV);
      Matrix u = svd.matrixU();
      Matrix v = svd.matrixV();
      fix_svd_signs(u, v);
      const Vector& s = svd.singularValues();
      const Index rank_cap = std::min<Index>(static_cast<Index>(pij.size()), s.size());
      for (Index t = 0; t < rank_cap; ++t) {
        const double root = std::sqrt(std::max(0.0, s(t)));
        gs.l[i].col(pij[t].first) = root * u.col(t);
        gs.r[j].row(pij[t].second) = root * v.col(t).transpose();
      }
    }
  }
  return gs;
}

BlockZero blockzero_project(const MatrixRef& w, const BlockZeroSpec& spec) {
  BlockZero bz;
  bz.rows = w.rows();
  bz.cols = w.cols();
  bz.d = spec.d;
  bz.kind = spec.kind;
  switch (spec.kind) {
    case BlockZeroKind::ZeroCols:
      require(spec.d <= w.cols(), ErrorCode::ShapeMismatch,
              "blockzero: kept width exceeds matrix");
      bz.core = w.leftCols(spec.d);
      break;
    case BlockZeroKind::ZeroRows:
      require(spec.d <= w.rows(), ErrorCode::ShapeMismatch,
              "blockzero: kept height exceeds matrix");
      bz.core = w.topRows(spec.d);
      break;
    case BlockZeroKind::Corner:
      require(spec.d <= w.rows() && spec.d <= w.cols(), ErrorCode::ShapeMismatch,
              "blockzero: kept corner exceeds matrix");
      bz.core = w.topLeftCorner(spec.d, spec.d);
      break;
  }
  return bz;
}

StructuredValue project(const StructureSpec& spec, const MatrixRef& w) {
  return std::visit(
      [&](const auto& s) -> StructuredValue {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, KronSpec>) return kron_project(w, s);
        else if constexpr (std::is_same_v<T, GsSpec>) return gs_project(w, s);
        else if constexpr (std::is_same_v<T, BlockZeroSpec>) return blockzero_project(w, s);
        else return DenseValue{w};
      },
      spec);
}

namespace {

Matrix materialize_kron(const KroneckerSum& ks) {
  const KronSpec s = ks.spec();
  Matrix out = Matrix::Zero(s.rows(), s.cols());
  for (Index k = 0; k < s.r; ++k) {
    const Matrix& a = ks.a[k];
    const Matrix& b = ks.b[k];
    for (Index i = 0; i < s.m1; ++i)
      for (Index j = 0; j < s.n1; ++j)
        out.block(i * s.m2, j * s.n2, s.m2, s.n2) += a(i, j) * b;
  }
  return out;
}

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

Matrix materialize_gs(const GSMatrix& gs) {
  const GsSpec& s = gs.shape;
  const Matrix inner = block_diag(gs.l) * perm_matrix(s.p) * block_diag(gs.r);
  return permute_rows(permute_cols(inner, s.pr), s.pl);
}

Matrix materialize_blockzero(const BlockZero& bz) {
  Matrix out = Matrix::Zero(bz.rows, bz.cols);
  switch (bz.kind) {
    case BlockZeroKind::ZeroCols: out.leftCols(bz.d) = bz.core; break;
    case BlockZeroKind::ZeroRows: out.topRows(bz.d) = bz.core; break;
    case BlockZeroKind::Corner: out.topLeftCorner(bz.d, bz.d) = bz.core; break;
  }
  return out;
}

Matrix apply_kron(const MatrixRef& x, const KroneckerSum& ks) {
  const KronSpec s = ks.spec();
  require(x.cols() == s.rows(), ErrorCode::ShapeMismatch,
          "apply: inner dimensions do not match");
  Matrix out = Matrix::Zero(x.rows(), s.cols());
  Vector row(x.cols());
  for (Index rr = 0; rr < x.rows(); ++rr) {
    row = x.row(rr);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>
        xm(row.data(), s.m1, s.m2);
    for (Index k = 0; k < s.r; ++k) {
      // out row block = vec_rowmajor(A^T Xm B)
      const Matrix prod = ks.a[k].transpose() * xm * ks.b[k];
      for (Index j1 = 0; j1 < s.n1; ++j1)
        for (Index j2 = 0; j2 < s.n2; ++j2)
          out(rr, j1 * s.n2 + j2) += prod(j1, j2);
    }
  }
  return out;
}

Matrix apply_gs(const MatrixRef& x, const GSMatrix& gs) {
  const GsSpec& s = gs.shape;
  require(x.cols() == s.rows(), ErrorCode::ShapeMismatch,
          "apply: inner dimensions do not match");
  // X P_L: column p_l[k] of the result is column k of X.
  Matrix y = permute_cols(x, s.pl);
  // times block-diagonal L
  Matrix z(x.rows(), s.inner());
  for (Index i = 0; i < s.kl; ++i)
    z.middleCols(i * s.bl2, s.bl2) = y.middleCols(i * s.bl1, s.bl1) * gs.l[i];
  // times P
  z = permute_cols(z, s.p);
  // times block-diagonal R
  Matrix u(x.rows(), s.cols());
  for (Index j = 0; j < s.kr; ++j)
    u.middleCols(j * s.br2, s.br2) = z.middleCols(j * s.br1, s.br1) * gs.r[j];
  // times P_R
  return permute_cols(u, s.pr);
}

Matrix apply_blockzero(const MatrixRef& x, const BlockZero& bz) {
  require(x.cols() == bz.rows, ErrorCode::ShapeMismatch,
          "apply: inner dimensions do not match");
  Matrix out = Matrix::Zero(x.rows(), bz.cols);
  switch (bz.kind) {
    case BlockZeroKind::ZeroCols:
      out.leftCols(bz.d) = x * bz.core;
      break;
    case BlockZeroKind::ZeroRows:
      out = x.leftCols(bz.d) * bz.core;
      break;
    case BlockZeroKind::Corner:
      out.leftCols(bz.d) = x.leftCols(bz.d) * bz.core;
      break;
  }
  return out;
}

}  // namespace

Matrix materialize(const StructuredValue& v) {
  return std::visit(
      [](const auto& s) -> Matrix {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, KroneckerSum>) return materialize_kron(s);
        else if constexpr (std::is_same_v<T, GSMatrix>) return materialize_gs(s);
        else if constexpr (std::is_same_v<T, BlockZero>) return materialize_blockzero(s);
        else return s.w;
      },
      v);
}

Matrix apply(const MatrixRef& x, const StructuredValue& v) {
  return std::visit(
      [&](const auto& s) -> Matrix {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, KroneckerSum>) return apply_kron(x, s);
        else if constexpr (std::is_same_v<T, GSMatrix>) return apply_gs(x, s);
        else if constexpr (std::is_same_v<T, BlockZero>) return apply_blockzero(x, s);
        else {
          require(x.cols() == s.w.rows(), ErrorCode::ShapeMismatch,
                  "apply: inner dimensions do not match");
          return x * s.w;
        }
      },
      v);
}

std::int64_t param_count(const StructuredValue& v) {
  return std::visit(
      [](const auto& s) -> std::int64_t {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, KroneckerSum>) {
          const KronSpec sp = s.spec();
          return static_cast<std::int64_t>(sp.r) *
                 (sp.m1 * sp.n1 + sp.m2 * sp.n2);
        } else if constexpr (std::is_same_v<T, GSMatrix>) {
          // Permutations are index metadata, not counted.
          const GsSpec& sp = s.shape;
          return static_cast<std::int64_t>(sp.kl) * sp.bl1 * sp.bl2 +
                 static_cast<std::int64_t>(sp.kr) * sp.br1 * sp.br2;
        } else if constexpr (std::is_same_v<T, BlockZero>) {
          return static_cast<std::int64_t>(s.core.rows()) * s.core.cols();
        } else {
          return static_cast<std::int64_t>(s.w.rows()) * s.w.cols();
        }
      },
      v);
}

std::int64_t param_count(const StructureSpec& spec, Index rows, Index cols) {
  spec_validate(spec, rows, cols);
  return std::visit(
      [&](const auto& s) -> std::int64_t {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, KronSpec>) {
          return static_cast<std::int64_t>(s.r) * (s.m1 * s.n1 + s.m2 * s.n2);
        } else if constexpr (std::is_same_v<T, GsSpec>) {
          return static_cast<std::int64_t>(s.kl) * s.bl1 * s.bl2 +
                 static_cast<std::int64_t>(s.kr) * s.br1 * s.br2;
        } else if constexpr (std::is_same_v<T, BlockZeroSpec>) {
          switch (s.kind) {
            case BlockZeroKind::ZeroCols: return static_cast<std::int64_t>(rows) * s.d;
            case BlockZeroKind::ZeroRows: return static_cast<std::int64_t>(s.d) * cols;
            case BlockZeroKind::Corner: return static_cast<std::int64_t>(s.d) * s.d;
          }
          return 0;
        } else {
          return static_cast<std::int64_t>(rows) * cols;
        }
      },
      spec);
}

double param_fraction(const StructuredValue& v, Index rows, Index cols) {
  return static_cast<double>(param_count(v)) /
         static_cast<double>(rows * cols);
}

double compression_ratio(const StructuredValue& v, Index rows, Index cols) {
  return 1.0 - param_fraction(v, rows, cols);
}

Index value_rows(const StructuredValue& v) {
  return std::visit(
      [](const auto& s) -> Index {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, KroneckerSum>) return s.spec().rows();
        else if constexpr (std::is_same_v<T, GSMatrix>) return s.shape.rows();
        else if constexpr (std::is_same_v<T, BlockZero>) return s.rows;
        else return s.w.rows();
      },
      v);
}

Index value_cols(const StructuredValue& v) {
  return std::visit(
      [](const auto& s) -> Index {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, KroneckerSum>) return s.spec().cols();
        else if constexpr (std::is_same_v<T, GSMatrix>) return s.shape.cols();
        else if constexpr (std::is_same_v<T, BlockZero>) return s.cols;
        else return s.w.cols();
      },
      v);
}

void spec_validate(const StructureSpec& spec, Index rows, Index cols) {
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, KronSpec>) {
          require(s.rows() == rows && s.cols() == cols, ErrorCode::ShapeMismatch,
                  "kron spec does not match matrix dims");
          require(s.r >= 1 && s.r <= std::min(s.m1 * s.n1, s.m2 * s.n2),
                  ErrorCode::RankTooLarge, "kron rank out of range");
        } else if constexpr (std::is_same_v<T, GsSpec>) {
          const GsSpec rs = s.resolved();
          require(rs.rows() == rows && rs.cols() == cols, ErrorCode::ShapeMismatch,
                  "gs spec does not match matrix dims");
        } else if constexpr (std::is_same_v<T, BlockZeroSpec>) {
          switch (s.kind) {
            case BlockZeroKind::ZeroCols:
              require(s.d <= cols, ErrorCode::ShapeMismatch, "blockzero d too large");
              break;
            case BlockZeroKind::ZeroRows:
              require(s.d <= rows, ErrorCode::ShapeMismatch, "blockzero d too large");
              break;
            case BlockZeroKind::Corner:
              require(s.d <= rows && s.d <= cols, ErrorCode::ShapeMismatch,
                      "blockzero d too large");
              break;
          }
        } else {
          (void)s;
        }
      },
      spec);
}

StructureSpec transpose_spec(const StructureSpec& spec) {
  return std::visit(
      [](const auto& s) -> StructureSpec {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, KronSpec>) {
          return KronSpec{s.r, s.n1, s.m1, s.n2, s.m2};
        } else if constexpr (std::is_same_v<T, GsSpec>) {
          const GsSpec r = s.resolved();
          GsSpec t;
          t.kl = r.kr;
          t.bl1 = r.br2;
          t.bl2 = r.br1;
          t.kr = r.kl;
          t.br1 = r.bl2;
          t.br2 = r.bl1;
          t.pl = inverse_perm(r.pr);
          t.p = inverse_perm(r.p);
          t.pr = inverse_perm(r.pl);
          return t;
        } else if constexpr (std::is_same_v<T, BlockZeroSpec>) {
          BlockZeroSpec t = s;
          if (s.kind == BlockZeroKind::ZeroCols) t.kind = BlockZeroKind::ZeroRows;
          else if (s.kind == BlockZeroKind::ZeroRows) t.kind = BlockZeroKind::ZeroCols;
          return t;
        } else {
          return DenseSpec{};
        }
      },
      spec);
}

StructuredValue transpose_value(const StructuredValue& v) {
  return std::visit(
      [](const auto& s) -> StructuredValue {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, KroneckerSum>) {
          KroneckerSum t;
          for (const Matrix& m : s.a) t.a.push_back(m.transpose());
          for (const Matrix& m : s.b) t.b.push_back(m.transpose());
          return t;
        } else if constexpr (std::is_same_v<T, GSMatrix>) {
          GSMatrix t;
          t.shape = std::get<GsSpec>(transpose_spec(StructureSpec{s.shape}));
          for (const Matrix& m : s.r) t.l.push_back(m.transpose());
          for (const Matrix& m : s.l) t.r.push_back(m.transpose());
          return t;
        } else if constexpr (std::is_same_v<T, BlockZero>) {
          BlockZero t;
          t.rows = s.cols;
          t.cols = s.rows;
          t.d = s.d;
          t.kind = s.kind == BlockZeroKind::ZeroCols  ? BlockZeroKind::ZeroRows
                   : s.kind == BlockZeroKind::ZeroRows ? BlockZeroKind::ZeroCols
                                                       : BlockZeroKind::Corner;
          t.core = s.core.transpose();
          return t;
        } else {
          return DenseValue{s.w.transpose()};
        }
      },
      v);
}

// ----- serialization -------------------------------------------------------

namespace {

using nlohmann::json;

json perm_to_json(const PermVec& p) {
  json arr = json::array();
  for (Index v : p) arr.push_back(v);
  return arr;
}

PermVec perm_from_json(const json& arr) {
  PermVec p;
  for (const auto& v : arr) p.push_back(v.get<Index>());
  return p;
}

}  // namespace

void save_structured(const std::filesystem::path& dir, const StructuredValue& v) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json manifest;
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, KroneckerSum>) {
          manifest["class"] = "kron";
          const KronSpec sp = s.spec();
          manifest["r"] = sp.r;
          manifest["m1"] = sp.m1;
          manifest["n1"] = sp.n1;
          manifest["m2"] = sp.m2;
          manifest["n2"] = sp.n2;
          write_tensor(dir / "A.tensor", tensor_from_stack(s.a));
          write_tensor(dir / "B.tensor", tensor_from_stack(s.b));
        } else if constexpr (std::is_same_v<T, GSMatrix>) {
          manifest["class"] = "gs";
          const GsSpec& sp = s.shape;
          manifest["kl"] = sp.kl;
          manifest["kr"] = sp.kr;
          manifest["bl1"] = sp.bl1;
          manifest["bl2"] = sp.bl2;
          manifest["br1"] = sp.br1;
          manifest["br2"] = sp.br2;
          manifest["pl"] = perm_to_json(sp.pl);
          manifest["p"] = perm_to_json(sp.p);
          manifest["pr"] = perm_to_json(sp.pr);
          write_tensor(dir / "L.tensor", tensor_from_stack(s.l));
          write_tensor(dir / "R.tensor", tensor_from_stack(s.r));
        } else if constexpr (std::is_same_v<T, BlockZero>) {
          manifest["class"] = "blockzero";
          manifest["rows"] = s.rows;
          manifest["cols"] = s.cols;
          manifest["d"] = s.d;
          manifest["pattern"] = s.kind == BlockZeroKind::ZeroCols  ? "zero-cols"
                                : s.kind == BlockZeroKind::ZeroRows ? "zero-rows"
                                                                    : "corner";
          if (s.core.size() > 0) write_matrix(dir / "core.tensor", s.core);
        } else {
          manifest["class"] = "dense";
          write_matrix(dir / "W.tensor", s.w);
        }
      },
      v);
  atomic_write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

StructuredValue load_structured(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) fail(ErrorCode::IoError, "cannot open " + (dir / "manifest.json").string());
  json manifest = json::parse(in);
  const std::string cls = manifest.at("class").get<std::string>();
  if (cls == "kron") {
    KroneckerSum ks;
    ks.a = tensor_to_stack(read_tensor(dir / "A.tensor"));
    ks.b = tensor_to_stack(read_tensor(dir / "B.tensor"));
    return ks;
  }
  if (cls == "gs") {
    GSMatrix gs;
    gs.shape.kl = manifest.at("kl").get<Index>();
    gs.shape.kr = manifest.at("kr").get<Index>();
    gs.shape.bl1 = manifest.at("bl1").get<Index>();
    gs.shape.bl2 = manifest.at("bl2").get<Index>();
    gs.shape.br1 = manifest.at("br1").get<Index>();
    gs.shape.br2 = manifest.at("br2").get<Index>();
    gs.shape.pl = perm_from_json(manifest.at("pl"));
    gs.shape.p = perm_from_json(manifest.at("p"));
    gs.shape.pr = perm_from_json(manifest.at("pr"));
    gs.l = tensor_to_stack(read_tensor(dir / "L.tensor"));
    gs.r = tensor_to_stack(read_tensor(dir / "R.tensor"));
    return gs;
  }
  if (cls == "blockzero") {
    BlockZero bz;
    bz.rows = manifest.at("rows").get<Index>();
    bz.cols = manifest.at("cols").get<Index>();
    bz.d = manifest.at("d").get<Index>();
    const std::string pat = manifest.at("pattern").get<std::string>();
    bz.kind = pat == "zero-cols"  ? BlockZeroKind::ZeroCols
              : pat == "zero-rows" ? BlockZeroKind::ZeroRows
                                   : BlockZeroKind::Corner;
    if (std::filesystem::exists(dir / "core.tensor")) {
      bz.core = read_matrix(dir / "core.tensor");
    } else if (bz.kind == BlockZeroKind::Corner) {
      bz.core = Matrix::Zero(bz.d, bz.d);
    } else {
      bz.core = Matrix::Zero(bz.kind == BlockZeroKind::ZeroRows ? bz.d : bz.rows,
                             bz.kind == BlockZeroKind::ZeroCols ? bz.d : bz.cols);
    }
    return bz;
  }
  if (cls == "dense") return DenseValue{read_matrix(dir / "W.tensor")};
  fail(ErrorCode::BadConfig, "unknown structured class " + cls);
}

}  // namespace pkit
