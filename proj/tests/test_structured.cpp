#include <doctest.h>

#include "pkit/structured.hpp"

#include <filesystem>

using namespace pkit;

namespace {

Matrix kron_dense(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

Vector svd_values(const Matrix& m) {
  return Eigen::JacobiSVD<Matrix>(m).singularValues();
}

double svd_tail(const Matrix& m, Index r) {
  const Vector s = svd_values(m);
  double tail = 0.0;
  for (Index i = r; i < s.size(); ++i) tail += s(i) * s(i);
  return std::sqrt(tail);
}

KroneckerSum random_kron(Rng& rng, const KronSpec& spec) {
  KroneckerSum ks;
  for (Index k = 0; k < spec.r; ++k) {
    ks.a.push_back(rng.gaussian(spec.m1, spec.n1));
    ks.b.push_back(rng.gaussian(spec.m2, spec.n2));
  }
  return ks;
}

GSMatrix random_gs(Rng& rng, const GsSpec& spec_in) {
  GSMatrix gs;
  gs.shape = spec_in.resolved();
  for (Index i = 0; i < gs.shape.kl; ++i)
    gs.l.push_back(rng.gaussian(gs.shape.bl1, gs.shape.bl2));
  for (Index j = 0; j < gs.shape.kr; ++j)
    gs.r.push_back(rng.gaussian(gs.shape.br1, gs.shape.br2));
  return gs;
}

}  // namespace

TEST_CASE("rearrangement maps a Kronecker product to a rank-1 matrix") {
  Rng rng(1);
  const Matrix a = rng.gaussian(2, 2), b = rng.gaussian(2, 2);
  const Matrix w = kron_dense(a, b);
  const Matrix r = rearrange_kron(w, 2, 2, 2, 2);
  CHECK(svd_values(r)(1) < 1e-12);
  // vec(A) vec(B)^T with row-major vectorization
  for (Index i1 = 0; i1 < 2; ++i1)
    for (Index j1 = 0; j1 < 2; ++j1)
      for (Index i2 = 0; i2 < 2; ++i2)
        for (Index j2 = 0; j2 < 2; ++j2)
          CHECK(r(i1 * 2 + j1, i2 * 2 + j2) ==
                doctest::Approx(a(i1, j1) * b(i2, j2)).epsilon(1e-14));
}

TEST_CASE("rearranged identity is rank one") {
  const Matrix r = rearrange_kron(Matrix::Identity(4, 4), 2, 2, 2, 2);
  CHECK(svd_values(r)(1) < 1e-12);
}

TEST_CASE("rearrangement agrees with exhaustive index enumeration") {
  Rng rng(2);
  const Index m1 = 2, n1 = 3, m2 = 3, n2 = 2;
  const Matrix w = rng.gaussian(m1 * m2, n1 * n2);
  const Matrix r = rearrange_kron(w, m1, n1, m2, n2);
  REQUIRE(r.rows() == m1 * n1);
  REQUIRE(r.cols() == m2 * n2);
  int seen = 0;
  for (Index i1 = 0; i1 < m1; ++i1)
    for (Index i2 = 0; i2 < m2; ++i2)
      for (Index j1 = 0; j1 < n1; ++j1)
        for (Index j2 = 0; j2 < n2; ++j2) {
          CHECK(r(i1 * n1 + j1, i2 * n2 + j2) == w(i1 * m2 + i2, j1 * n2 + j2));
          ++seen;
        }
  CHECK(seen == w.size());
}

TEST_CASE("rearrangement is a Frobenius isometry") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const Matrix w = rng.gaussian(6, 6);
    CHECK(rearrange_kron(w, 2, 3, 3, 2).norm() == doctest::Approx(w.norm()).epsilon(1e-15));
  }
}

TEST_CASE("kron projection recovers members of its own class") {
  Rng rng(4);
  KronSpec spec{2, 2, 3, 3, 2};
  const KroneckerSum planted = random_kron(rng, spec);
  const Matrix w = materialize(StructuredValue{planted});
  const KroneckerSum proj = kron_project(w, spec);
  CHECK((materialize(StructuredValue{proj}) - w).norm() < 1e-10);
}

TEST_CASE("kron projection of the 4x4 identity recovers I2 (x) I2") {
  const KroneckerSum proj = kron_project(Matrix::Identity(4, 4), KronSpec{1, 2, 2, 2, 2});
  CHECK((materialize(StructuredValue{proj}) - Matrix::Identity(4, 4)).norm() < 1e-12);
}

TEST_CASE("kron projection residual equals the rearranged SVD tail") {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const Matrix w = rng.gaussian(4, 4);
    const KronSpec spec{1, 2, 2, 2, 2};
    const KroneckerSum proj = kron_project(w, spec);
    const double residual = (w - materialize(StructuredValue{proj})).norm();
    const double tail = svd_tail(rearrange_kron(w, 2, 2, 2, 2), 1);
    CHECK(residual == doctest::Approx(tail).epsilon(1e-10));
  }
}

TEST_CASE("kron projection beats random same-shape candidates") {
  Rng rng(6);
  const KronSpec spec{1, 2, 2, 3, 2};
  const Matrix w = rng.gaussian(6, 4);
  const KroneckerSum proj = kron_project(w, spec);
  const double residual = (w - materialize(StructuredValue{proj})).norm();
  for (int t = 0; t < 1000; ++t) {
    KroneckerSum cand = proj;
    for (Index k = 0; k < spec.r; ++k) {
      cand.a[k] += 0.1 * rng.gaussian(spec.m1, spec.n1);
      cand.b[k] += 0.1 * rng.gaussian(spec.m2, spec.n2);
    }
    CHECK((w - materialize(StructuredValue{cand})).norm() >= residual - 1e-10);
  }
}

TEST_CASE("kron projection is deterministic and idempotent") {
  Rng rng(7);
  const Matrix w = rng.gaussian(6, 6);
  const KronSpec spec{2, 2, 3, 3, 2};
  const KroneckerSum p1 = kron_project(w, spec);
  const KroneckerSum p2 = kron_project(w, spec);
  for (Index k = 0; k < spec.r; ++k) {
    CHECK((p1.a[k] - p2.a[k]).norm() == 0.0);
    CHECK((p1.b[k] - p2.b[k]).norm() == 0.0);
  }
  const KroneckerSum p3 = kron_project(materialize(StructuredValue{p1}), spec);
  CHECK((materialize(StructuredValue{p3}) - materialize(StructuredValue{p1})).norm() <
        1e-10);
  CHECK(param_count(StructuredValue{p3}) == param_count(StructuredValue{p1}));
}

TEST_CASE("kron rank bound is enforced") {
  try {
    kron_project(Matrix::Identity(4, 4), KronSpec{5, 2, 2, 2, 2});
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::RankTooLarge);
  }
}

TEST_CASE("gs projection recovers members of its own class") {
  Rng rng(8);
  GsSpec spec;
  spec.kl = 2;
  spec.kr = 2;
  spec.bl1 = 4;
  spec.bl2 = 2;
  spec.br1 = 2;
  spec.br2 = 4;
  const GSMatrix planted = random_gs(rng, spec);
  const Matrix w = materialize(StructuredValue{planted});
  const GSMatrix proj = gs_project(w, spec);
  CHECK((materialize(StructuredValue{proj}) - w).norm() < 1e-10);
}

TEST_CASE("gs with kl=kr=1 and identity permutations is a truncated SVD") {
  Rng rng(9);
  const Matrix w = rng.gaussian(5, 6);
  GsSpec spec;
  spec.kl = 1;
  spec.kr = 1;
  spec.bl1 = 5;
  spec.bl2 = 2;
  spec.br1 = 2;
  spec.br2 = 6;
  spec.p = identity_perm(2);
  const GSMatrix proj = gs_project(w, spec);
  const double residual = (w - materialize(StructuredValue{proj})).norm();
  CHECK(residual == doctest::Approx(svd_tail(w, 2)).epsilon(1e-10));
}

TEST_CASE("monarch-style 8x8 residual matches a standalone block-SVD oracle") {
  Rng rng(10);
  const Matrix w = rng.gaussian(8, 8);
  GsSpec spec;
  spec.kl = 2;
  spec.kr = 2;
  spec.bl1 = 4;
  spec.bl2 = 2;
  spec.br1 = 2;
  spec.br2 = 4;
  const GSMatrix proj = gs_project(w, spec);
  const double residual = (w - materialize(StructuredValue{proj})).norm();
  // With the stride shuffle every (i, j) block of the (unpermuted) matrix
  // holds exactly one routed pair, so the class truncates each 4x4 block to
  // rank 1 independently.
  double tail_sq = 0.0;
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 2; ++j)
      tail_sq += std::pow(svd_tail(w.block(4 * i, 4 * j, 4, 4), 1), 2);
  CHECK(residual == doctest::Approx(std::sqrt(tail_sq)).epsilon(1e-10));
}

TEST_CASE("gs projection idempotence") {
  Rng rng(11);
  const Matrix w = rng.gaussian(8, 8);
  GsSpec spec;
  spec.kl = 2;
  spec.kr = 2;
  spec.bl1 = 4;
  spec.bl2 = 2;
  spec.br1 = 2;
  spec.br2 = 4;
  const GSMatrix p1 = gs_project(w, spec);
  const GSMatrix p2 = gs_project(materialize(StructuredValue{p1}), spec);
  CHECK((materialize(StructuredValue{p2}) - materialize(StructuredValue{p1})).norm() <
        1e-10);
}

TEST_CASE("blockzero projection keeps the block and zeroes the rest") {
  Rng rng(12);
  const Matrix w = rng.gaussian(4, 6);
  SUBCASE("full width leaves the matrix unchanged") {
    const BlockZero bz = blockzero_project(w, BlockZeroSpec{6, BlockZeroKind::ZeroCols});
    CHECK((materialize(StructuredValue{bz}) - w).norm() == 0.0);
  }
  SUBCASE("d = 0 gives the zero matrix") {
    const BlockZero bz = blockzero_project(w, BlockZeroSpec{0, BlockZeroKind::ZeroCols});
    CHECK(materialize(StructuredValue{bz}).norm() == 0.0);
    CHECK((w - materialize(StructuredValue{bz})).norm() ==
          doctest::Approx(w.norm()));
  }
  SUBCASE("residual equals the norm of the dropped columns") {
    const BlockZero bz = blockzero_project(w, BlockZeroSpec{3, BlockZeroKind::ZeroCols});
    const double residual = (w - materialize(StructuredValue{bz})).norm();
    CHECK(residual == doctest::Approx(w.rightCols(3).norm()).epsilon(1e-14));
  }
  SUBCASE("zero-rows and corner patterns") {
    const BlockZero rows = blockzero_project(w, BlockZeroSpec{2, BlockZeroKind::ZeroRows});
    CHECK((w - materialize(StructuredValue{rows})).norm() ==
          doctest::Approx(w.bottomRows(2).norm()).epsilon(1e-14));
    const BlockZero corner = blockzero_project(w, BlockZeroSpec{2, BlockZeroKind::Corner});
    const Matrix m = materialize(StructuredValue{corner});
    CHECK((m.topLeftCorner(2, 2) - w.topLeftCorner(2, 2)).norm() == 0.0);
    CHECK(m.norm() == doctest::Approx(w.topLeftCorner(2, 2).norm()));
  }
}

TEST_CASE("materialize special cases") {
  Rng rng(13);
  SUBCASE("scalar A factor gives B back") {
    KroneckerSum ks;
    ks.a.push_back(Matrix::Ones(1, 1));
    ks.b.push_back(rng.gaussian(3, 4));
    CHECK((materialize(StructuredValue{ks}) - ks.b[0]).norm() == 0.0);
  }
  SUBCASE("I2 (x) swap is block-diagonal of swap blocks") {
    KroneckerSum ks;
    ks.a.push_back(Matrix::Identity(2, 2));
    Matrix swap(2, 2);
    swap << 0, 1, 1, 0;
    ks.b.push_back(swap);
    Matrix expect = Matrix::Zero(4, 4);
    expect.block(0, 0, 2, 2) = swap;
    expect.block(2, 2, 2, 2) = swap;
    CHECK((materialize(StructuredValue{ks}) - expect).norm() == 0.0);
  }
  SUBCASE("all-identity GS factors with identity permutations give I") {
    GsSpec spec;
    spec.kl = 2;
    spec.kr = 2;
    spec.bl1 = 2;
    spec.bl2 = 2;
    spec.br1 = 2;
    spec.br2 = 2;
    spec.p = identity_perm(4);
    GSMatrix gs;
    gs.shape = spec.resolved();
    gs.l = {Matrix::Identity(2, 2), Matrix::Identity(2, 2)};
    gs.r = {Matrix::Identity(2, 2), Matrix::Identity(2, 2)};
    CHECK((materialize(StructuredValue{gs}) - Matrix::Identity(4, 4)).norm() == 0.0);
  }
}

TEST_CASE("apply agrees with the materialization oracle") {
  Rng rng(14);
  SUBCASE("X = I gives the materialization") {
    const KroneckerSum ks = random_kron(rng, KronSpec{2, 2, 2, 3, 2});
    const Matrix m = materialize(StructuredValue{ks});
    CHECK((pkit::apply(Matrix::Identity(6, 6), StructuredValue{ks}) - m).norm() <
          1e-12 * m.norm());
  }
  SUBCASE("random X against kron, gs, blockzero and dense") {
    for (int t = 0; t < 10; ++t) {
      const Matrix x = rng.gaussian(5, 6);
      const KroneckerSum ks = random_kron(rng, KronSpec{2, 2, 2, 3, 2});
      const Matrix mk = materialize(StructuredValue{ks});
      CHECK((pkit::apply(x, StructuredValue{ks}) - x * mk).norm() <=
            1e-12 * (x * mk).norm() + 1e-14);

      GsSpec spec;
      spec.kl = 2;
      spec.kr = 2;
      spec.bl1 = 3;
      spec.bl2 = 2;
      spec.br1 = 2;
      spec.br2 = 2;
      Rng prng(100 + t);
      // random permutations exercise the permute paths
      auto shuffle = [&](Index sz) {
        PermVec p = identity_perm(sz);
        for (Index i = sz - 1; i > 0; --i)
          std::swap(p[i], p[static_cast<Index>(prng.next_u64() % (i + 1))]);
        return p;
      };
      spec.pl = shuffle(6);
      spec.p = shuffle(4);
      spec.pr = shuffle(4);
      const GSMatrix gs = random_gs(prng, spec);
      const Matrix mg = materialize(StructuredValue{gs});
      CHECK((pkit::apply(x, StructuredValue{gs}) - x * mg).norm() <=
            1e-12 * (x * mg).norm() + 1e-14);

      const Matrix wd = rng.gaussian(6, 4);
      const BlockZero bz = blockzero_project(wd, BlockZeroSpec{2, BlockZeroKind::Corner});
      const Matrix mb = materialize(StructuredValue{bz});
      CHECK((pkit::apply(x, StructuredValue{bz}) - x * mb).norm() <=
            1e-12 * (x * mb).norm() + 1e-14);

      CHECK((pkit::apply(x, StructuredValue{DenseValue{wd}}) - x * wd).norm() == 0.0);
    }
  }
}

TEST_CASE("parameter counting and ratio formulas") {
  SUBCASE("kron q=4 r=3 on 64x64 keeps about three quarters") {
    KronSpec spec{3, 4, 1, 16, 64};
    const std::int64_t params = param_count(StructureSpec{spec}, 64, 64);
    CHECK(params == 3 * (4 + 16 * 64));
    const double fraction = static_cast<double>(params) / 4096.0;
    CHECK(fraction == doctest::Approx(0.7529).epsilon(1e-3));
    CHECK(1.0 - fraction == doctest::Approx(0.25).epsilon(0.02));
  }
  SUBCASE("gs ratio formula on the square (4,2) case") {
    GsSpec spec;
    spec.kl = 4;
    spec.kr = 2;
    spec.bl1 = 16;
    spec.bl2 = 16;
    spec.br1 = 32;
    spec.br2 = 32;
    const std::int64_t params = param_count(StructureSpec{spec}, 64, 64);
    const double c = static_cast<double>(spec.kl * spec.bl1 * spec.bl2 +
                                         spec.kr * spec.br1 * spec.br2) /
                     static_cast<double>(spec.kl * spec.kr * spec.bl1 * spec.br2);
    CHECK(static_cast<double>(params) / 4096.0 == doctest::Approx(c).epsilon(1e-12));
    CHECK(c == doctest::Approx(0.75).epsilon(1e-12));
  }
  SUBCASE("blockzero with full width has ratio zero") {
    Rng rng(15);
    const Matrix w = rng.gaussian(4, 6);
    const BlockZero bz = blockzero_project(w, BlockZeroSpec{6, BlockZeroKind::ZeroCols});
    CHECK(compression_ratio(StructuredValue{bz}, 4, 6) == doctest::Approx(0.0));
  }
}

TEST_CASE("transposed specs and values mirror the originals") {
  Rng rng(16);
  const KroneckerSum ks = random_kron(rng, KronSpec{2, 2, 3, 3, 2});
  CHECK((materialize(transpose_value(StructuredValue{ks})) -
         materialize(StructuredValue{ks}).transpose())
            .norm() == 0.0);
  GsSpec spec;
  spec.kl = 2;
  spec.kr = 2;
  spec.bl1 = 3;
  spec.bl2 = 2;
  spec.br1 = 2;
  spec.br2 = 2;
  const GSMatrix gs = random_gs(rng, spec);
  CHECK((materialize(transpose_value(StructuredValue{gs})) -
         materialize(StructuredValue{gs}).transpose())
            .norm() < 1e-14);
  // a transposed projection equals the projection of the transpose
  const Matrix w = rng.gaussian(6, 4);
  const StructureSpec tspec = transpose_spec(StructureSpec{spec});
  const Matrix p1 = materialize(project(tspec, w.transpose()));
  const Matrix p2 = materialize(project(StructureSpec{spec}, w)).transpose();
  CHECK((p1 - p2).norm() < 1e-10);
}

TEST_CASE("structured values round trip through directory serialization") {
  Rng rng(17);
  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() / "pkit_structured_io";
  std::filesystem::remove_all(dir);

  const KroneckerSum ks = random_kron(rng, KronSpec{2, 2, 2, 3, 2});
  save_structured(dir / "kron", StructuredValue{ks});
  CHECK((materialize(load_structured(dir / "kron")) -
         materialize(StructuredValue{ks})).norm() == 0.0);

  GsSpec spec;
  spec.kl = 2;
  spec.kr = 2;
  spec.bl1 = 3;
  spec.bl2 = 2;
  spec.br1 = 2;
  spec.br2 = 2;
  const GSMatrix gs = random_gs(rng, spec);
  save_structured(dir / "gs", StructuredValue{gs});
  CHECK((materialize(load_structured(dir / "gs")) -
         materialize(StructuredValue{gs})).norm() == 0.0);

  const Matrix w = rng.gaussian(4, 6);
  const BlockZero bz = blockzero_project(w, BlockZeroSpec{3, BlockZeroKind::ZeroCols});
  save_structured(dir / "bz", StructuredValue{bz});
  CHECK((materialize(load_structured(dir / "bz")) -
         materialize(StructuredValue{bz})).norm() == 0.0);

  save_structured(dir / "dense", StructuredValue{DenseValue{w}});
  CHECK((materialize(load_structured(dir / "dense")) - w).norm() == 0.0);
}
