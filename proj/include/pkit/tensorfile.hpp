#pragma once

// Bit-exact binary I/O for dense f64 tensors plus the JSON job
// configuration consumed by the CLI.
//
// File layout (all integers little-endian):
//   magic   8 bytes  "PKTENSR1"
//   dtype   u8       0 = f64 little-endian
//   ndim    u32      1, 2 or 3
//   dims    ndim x u64
//   payload row-major f64 values (last index fastest)

#include "pkit/common.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pkit {

struct Tensor {
  std::vector<Index> dims;
  std::vector<double> data;  // row-major

  Index size() const {
    Index n = 1;
    for (Index d : dims) n *= d;
    return n;
  }
};

Tensor tensor_from_matrix(const MatrixRef& m);
Matrix tensor_to_matrix(const Tensor& t);
Tensor tensor_from_vector(const VectorRef& v);
Vector tensor_to_vector(const Tensor& t);
// Stacked matrices (dims = count x rows x cols).
Tensor tensor_from_stack(const std::vector<Matrix>& ms);
std::vector<Matrix> tensor_to_stack(const Tensor& t);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

void write_matrix(const std::filesystem::path& path, const MatrixRef& m);
Matrix read_matrix(const std::filesystem::path& path);

// Writes to a sibling temp file and renames into place.
void atomic_write_bytes(const std::filesystem::path& path,
                        const std::string& bytes);
void atomic_write_text(const std::filesystem::path& path,
                       const std::string& text);

// ----- job configuration --------------------------------------------------

enum class StructureKind { Kron, Gs, BlockZero, None };
enum class LambdaMode { One, Balanced };
enum class EmbeddingWeighting { SqrtD1, LogD1, None };

// Shape parameters for one weight role. Only the fields of the selected
// kind are meaningful.
struct RoleStructure {
  StructureKind kind = StructureKind::None;
  // Kron: r terms, splitting factor q applied on the rotated side.
  Index r = 0, q = 0;
  // GS block-diagonal shape.
  Index kl = 0, kr = 0, bl1 = 0, bl2 = 0, br1 = 0, br2 = 0;
  // BlockZero kept dimension.
  Index d = 0;
};

struct JobConfig {
  RoleStructure in, out, embedding, head;
  int frobenius_iters = 50;
  int weighted_iters = 1;
  int cg_iters = 500;
  LambdaMode lambda_mode = LambdaMode::One;
  EmbeddingWeighting emb_weighting = EmbeddingWeighting::SqrtD1;
  std::uint64_t seed = 0;
};

// Parses a UTF-8 JSON document. Unknown keys are rejected (BadConfig),
// missing keys fall back to the defaults above.
JobConfig parse_job_config(const std::string& json_text);
JobConfig load_job_config(const std::filesystem::path& path);
std::string job_config_to_json(const JobConfig& cfg);

const char* to_string(StructureKind k);
const char* to_string(LambdaMode m);
const char* to_string(EmbeddingWeighting w);

}  // namespace pkit
