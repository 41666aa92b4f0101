#pragma once

// A small RMSNorm transformer-like network over synthetic dense weights.
// Its forward pass is exactly invariant under per-junction orthogonal
// rotations of the weights (with compensating matrices on the skip
// connections), which is what the compression pipeline exploits: find
// rotations that make each weight pair maximally compressible, rotate,
// project, and account for the parameters.

#include "pkit/als.hpp"
#include "pkit/calib.hpp"
#include "pkit/common.hpp"
#include "pkit/procrustes.hpp"
#include "pkit/structured.hpp"
#include "pkit/tensorfile.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pkit {

// ----- network --------------------------------------------------------------

enum class Activation { Relu, Gelu, AttentionStub };

struct ToyBlock {
  Matrix w_in;   // n x h (stacked input projections)
  Matrix w_out;  // h x n
  Vector b_in;   // empty or size h
  Vector b_out;  // empty or size n
  Activation act = Activation::Relu;
  bool skip = true;
  // Skip-connection matrix; empty means identity. Rotation fills it with
  // Q_{l-1}^T Q_l.
  Matrix skip_matrix;

  Index hidden() const { return w_in.cols(); }
};

struct ToyNetwork {
  Matrix w_emb;   // V x n
  std::vector<ToyBlock> blocks;
  Matrix w_head;  // n x V

  Index dim() const { return w_emb.cols(); }
  Index vocab() const { return w_emb.rows(); }
  Index n_blocks() const { return static_cast<Index>(blocks.size()); }
  // Junctions: 0 = embedding -> first block, b = block b-1 -> block b,
  // n_blocks() = last block -> head.
  Index n_junctions() const { return n_blocks() + 1; }
};

// x / ||x||_2. Errors on the zero vector; the network forward instead
// passes zero rows through unchanged.
Vector rmsnorm(const VectorRef& x);
Matrix rmsnorm_rows_safe(const MatrixRef& x);

Matrix forward(const ToyNetwork& net, const std::vector<std::int64_t>& ids);

// Applies one rotation per junction: W_emb Q_0, Q_{b}^T W_in^b, W_out^b
// Q_{b+1}, skip slots Q_b^T M Q_{b+1}, Q_L^T W_head. Forward outputs are
// unchanged.
ToyNetwork rotate_network(const ToyNetwork& net, const std::vector<Matrix>& qs);

ToyNetwork generate_toy_network(std::uint64_t seed, Index n_blocks, Index dim,
                                Index hidden, Index vocab);

// ----- calibration over the network -----------------------------------------

struct NetworkCalibration {
  TokenFrequency freq;
  // in_corr[b]: inputs of block b's W_in (b < L) or of the head (b == L).
  std::vector<CorrelationAccumulator> in_corr;
  // out_corr[b]: activations entering block b's W_out.
  std::vector<CorrelationAccumulator> out_corr;
  // stacked_corr[b]: [activations, skip stream] entering block b's output
  // junction, used by the principal-component slicing path.
  std::vector<CorrelationAccumulator> stacked_corr;
  std::int64_t sequences = 0;

  // Exact transport to the rotated network's coordinates.
  NetworkCalibration rotated(const ToyNetwork& net,
                             const std::vector<Matrix>& qs) const;
};

NetworkCalibration collect_calibration(
    const ToyNetwork& net, const std::vector<std::vector<std::int64_t>>& batches);

void save_calibration(const std::filesystem::path& dir,
                      const NetworkCalibration& calib);
NetworkCalibration load_calibration(const std::filesystem::path& dir);

// ----- compression plan -------------------------------------------------------

struct JunctionPlan {
  StructureSpec spec_out = DenseSpec{};
  StructureSpec spec_in = DenseSpec{};
  // Trailing columns of the in-side weight excluded from compression (the
  // stacked value projections of attention blocks); they are rotated but
  // never projected.
  Index values_cols = 0;
};

struct CompressionPlan {
  std::vector<JunctionPlan> junctions;
  LambdaMode lambda_mode = LambdaMode::One;
  EmbeddingWeighting emb_weighting = EmbeddingWeighting::SqrtD1;
  int frobenius_iters = 50;
  int weighted_iters = 1;
  int cg_iters = 500;
  int proj_iters = 10;
  int jobs = 1;
  // Principal-component slicing semantics (block-zero classes, no in-term).
  bool slice_path = false;
};

// Resolves a job config against the network dimensions: sizes Kronecker
// factors by the rotated-side rule, validates GS shapes, marks value
// columns of attention blocks, and selects the slicing path when the out
// role uses the block-zero class.
CompressionPlan build_plan(const ToyNetwork& net, const JobConfig& cfg, int jobs);

// ----- compression -------------------------------------------------------------

struct JunctionReport {
  Index junction = 0;
  double lambda_in = 1.0;
  SolveReport frobenius;
  SolveReport weighted;
  // Slicing path: generic objective, closed-form objective and their gap.
  double slice_generic = 0.0;
  double slice_pca = 0.0;
  double slice_gap = 0.0;
  bool failed = false;
  std::string error;
};

struct CompressionReport {
  std::vector<JunctionReport> junctions;
  std::int64_t original_params = 0;
  std::int64_t compressed_params = 0;
  double param_fraction = 0.0;     // compressed / original
  double compression_ratio = 0.0;  // 1 - param_fraction
  double forward_rel_error = 0.0;  // on held-out tokens
};

struct CompressedWeight {
  StructuredValue value;
  // Rotated-but-uncompressed trailing columns (attention values), if any.
  Matrix excluded;
};

struct CompressedNetwork {
  // Materialized network for exact forward passes.
  ToyNetwork net;
  CompressedWeight emb;
  std::vector<CompressedWeight> block_in;
  std::vector<CompressedWeight> block_out;
  CompressedWeight head;
  // Skip slots: skew-stored orthogonal factors on the standard path,
  // block-zero slices on the slicing path.
  std::vector<std::optional<OrthogonalFactor>> skip_skew;
  std::vector<std::optional<StructuredValue>> skip_sliced;
};

struct CompressionResult {
  CompressedNetwork network;
  CompressionReport report;
};

CompressionResult compress_network(
    const ToyNetwork& net, const CompressionPlan& plan,
    const NetworkCalibration& calib,
    const std::vector<std::vector<std::int64_t>>& heldout);

// ----- decomposition sizing ---------------------------------------------------

enum class KronSide { RotatedRows, RotatedCols };

struct KronShape {
  KronSpec spec;
  std::int64_t params = 0;
  std::int64_t dense = 0;
  double fraction() const {
    return static_cast<double>(params) / static_cast<double>(dense);
  }
};

// r = p terms with the q-way split on the rotated side: params are exactly
// p*q + rows*cols*p/q.
KronShape choose_kron_shape(Index rows, Index cols, Index p, Index q,
                            KronSide side);

// Smallest-|error| GS shape for the kept-parameter fraction c at fixed
// (kl, kr); fails with NoFeasibleShape beyond 2% absolute error.
GsSpec choose_gs_shape(Index rows, Index cols, double c, Index kl, Index kr);
// Appendix-style defaults: (4,2) square, (4,8) rectangular, (1,4)
// embedding-like.
std::pair<Index, Index> default_gs_blocks(Index rows, Index cols,
                                          bool embedding_like);

// ----- serialization -----------------------------------------------------------

void save_network(const std::filesystem::path& dir, const ToyNetwork& net);
ToyNetwork load_network(const std::filesystem::path& dir);

void save_compressed(const std::filesystem::path& dir,
                     const CompressedNetwork& cnet);
CompressedNetwork load_compressed(const std::filesystem::path& dir);

// Loads either format, materializing a forward-capable network.
ToyNetwork load_any_network(const std::filesystem::path& dir);

}  // namespace pkit
