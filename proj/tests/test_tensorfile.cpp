#include <doctest.h>

#include "pkit/tensorfile.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

using namespace pkit;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  static int counter = 0;
  fs::path dir = fs::temp_directory_path() /
                 ("pkit_tf_" + std::to_string(::getpid()) + "_" +
                  std::to_string(counter++));
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("tensor round trip of the identity") {
  const fs::path dir = temp_dir();
  const Matrix id = Matrix::Identity(2, 2);
  write_matrix(dir / "id.tensor", id);
  CHECK((read_matrix(dir / "id.tensor") - id).norm() == 0.0);
}

TEST_CASE("bad magic is rejected") {
  const fs::path dir = temp_dir();
  write_matrix(dir / "t.tensor", Matrix::Identity(2, 2));
  std::string bytes = slurp(dir / "t.tensor");
  std::memcpy(bytes.data(), "XXXXXXXX", 8);
  atomic_write_bytes(dir / "bad.tensor", bytes);
  try {
    read_tensor(dir / "bad.tensor");
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BadMagic);
  }
}

TEST_CASE("unsupported dtype and truncation") {
  const fs::path dir = temp_dir();
  write_matrix(dir / "t.tensor", Matrix::Identity(2, 2));
  std::string bytes = slurp(dir / "t.tensor");
  {
    std::string bad = bytes;
    bad[8] = 7;  // dtype byte
    atomic_write_bytes(dir / "dtype.tensor", bad);
    try {
      read_tensor(dir / "dtype.tensor");
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::UnsupportedDtype);
    }
  }
  {
    std::string bad = bytes.substr(0, bytes.size() - 5);
    atomic_write_bytes(dir / "trunc.tensor", bad);
    try {
      read_tensor(dir / "trunc.tensor");
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::TruncatedPayload);
    }
  }
}

TEST_CASE("3-D tensor payload order matches independent byte offsets") {
  // dims (3,4,2): element (i,j,k) sits at flat offset i*8 + j*2 + k,
  // payload byte offset 17 + 3*8 + 8*flat.
  const fs::path dir = temp_dir();
  Tensor t;
  t.dims = {3, 4, 2};
  for (int i = 0; i < 24; ++i) t.data.push_back(100.0 + i);
  write_tensor(dir / "t3.tensor", t);
  const std::string bytes = slurp(dir / "t3.tensor");
  const std::size_t header = 8 + 1 + 4 + 3 * 8;
  REQUIRE(bytes.size() == header + 24 * 8);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 4; ++j)
      for (Index k = 0; k < 2; ++k) {
        const Index flat = i * 8 + j * 2 + k;
        double v;
        std::memcpy(&v, bytes.data() + header + 8 * flat, 8);
        CHECK(v == 100.0 + flat);
      }
  const Tensor back = read_tensor(dir / "t3.tensor");
  CHECK(back.dims == t.dims);
  CHECK(back.data == t.data);
}

TEST_CASE("1x1 zero matrix yields 8 zero payload bytes after the header") {
  const fs::path dir = temp_dir();
  Matrix m(1, 1);
  m(0, 0) = 0.0;
  write_matrix(dir / "z.tensor", m);
  const std::string bytes = slurp(dir / "z.tensor");
  const std::size_t header = 8 + 1 + 4 + 2 * 8;
  REQUIRE(bytes.size() == header + 8);
  CHECK(bytes.compare(0, 8, "PKTENSR1") == 0);
  for (std::size_t i = header; i < bytes.size(); ++i) CHECK(bytes[i] == 0);
}

TEST_CASE("write/read/write produces byte-identical files") {
  const fs::path dir = temp_dir();
  Rng rng(11);
  const Matrix m = rng.gaussian(5, 7);
  write_matrix(dir / "a.tensor", m);
  const Matrix back = read_matrix(dir / "a.tensor");
  write_matrix(dir / "b.tensor", back);
  CHECK(slurp(dir / "a.tensor") == slurp(dir / "b.tensor"));
}

TEST_CASE("row-major layout: element (1,0) of a 2x3 matrix is the 4th value") {
  const fs::path dir = temp_dir();
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  write_matrix(dir / "m.tensor", m);
  const Tensor t = read_tensor(dir / "m.tensor");
  CHECK(t.data[3] == m(1, 0));
}

TEST_CASE("bitwise round trip over random finite values") {
  const fs::path dir = temp_dir();
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor t;
    t.dims = {1 + static_cast<Index>(rng.next_u64() % 4),
              1 + static_cast<Index>(rng.next_u64() % 4)};
    for (Index i = 0; i < t.size(); ++i)
      t.data.push_back(rng.normal() * std::pow(10.0, (rng.uniform() - 0.5) * 40));
    write_tensor(dir / "r.tensor", t);
    const Tensor back = read_tensor(dir / "r.tensor");
    REQUIRE(back.data.size() == t.data.size());
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      std::uint64_t a, b;
      std::memcpy(&a, &t.data[i], 8);
      std::memcpy(&b, &back.data[i], 8);
      CHECK(a == b);
    }
  }
}

TEST_CASE("job config parses defaults and rejects unknown keys") {
  const JobConfig cfg = parse_job_config(R"({
    "structures": {"in": {"kind": "kron", "r": 3, "q": 4},
                    "out": {"kind": "kron", "r": 3, "q": 4}},
    "seed": 7
  })");
  CHECK(cfg.frobenius_iters == 50);
  CHECK(cfg.weighted_iters == 1);
  CHECK(cfg.cg_iters == 500);
  CHECK(cfg.lambda_mode == LambdaMode::One);
  CHECK(cfg.emb_weighting == EmbeddingWeighting::SqrtD1);
  CHECK(cfg.in.kind == StructureKind::Kron);
  CHECK(cfg.in.r == 3);
  CHECK(cfg.seed == 7);
  CHECK(cfg.embedding.kind == StructureKind::None);

  auto check_code = [](const std::string& text, ErrorCode code) {
    try {
      parse_job_config(text);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == code);
    }
  };
  check_code(R"({"surprise": 1})", ErrorCode::BadConfig);
  check_code(R"({"structures": {"in": {"kind": "kron", "r": 3, "q": 4, "x": 1}}})",
             ErrorCode::BadConfig);
  check_code(R"({"frobenius_iters": -1})", ErrorCode::BadConfig);
  check_code(R"({"structures": {"in": {"kind": "gs", "kl": 2, "kr": 2,
              "bl1": 2, "bl2": 2, "br1": 3, "br2": 2}}})",
             ErrorCode::BadConfig);
  check_code("not json", ErrorCode::BadConfig);
}

TEST_CASE("job config round trips through its JSON emitter") {
  JobConfig cfg;
  cfg.out.kind = StructureKind::Gs;
  cfg.out.kl = 4;
  cfg.out.kr = 2;
  cfg.out.bl1 = 4;
  cfg.out.bl2 = 4;
  cfg.out.br1 = 8;
  cfg.out.br2 = 8;
  cfg.lambda_mode = LambdaMode::Balanced;
  cfg.emb_weighting = EmbeddingWeighting::LogD1;
  cfg.seed = 99;
  const JobConfig back = parse_job_config(job_config_to_json(cfg));
  CHECK(back.out.kind == StructureKind::Gs);
  CHECK(back.out.br1 == 8);
  CHECK(back.lambda_mode == LambdaMode::Balanced);
  CHECK(back.emb_weighting == EmbeddingWeighting::LogD1);
  CHECK(back.seed == 99);
}
