#pragma once

// Calibration statistics: batched correlation accumulation, symmetric PSD
// square roots, and the token-frequency diagonal used for embedding and
// head weighting.

#include "pkit/common.hpp"
#include "pkit/tensorfile.hpp"

#include <cstdint>
#include <vector>

namespace pkit {

class CorrelationAccumulator {
 public:
  CorrelationAccumulator() = default;
  explicit CorrelationAccumulator(Index n)
      : sum_(Matrix::Zero(n, n)), samples_(0) {}

  // S += batch^T batch. Rows are samples, columns the tracked dimension.
  void accumulate(const MatrixRef& batch);
  void merge(const CorrelationAccumulator& other);

  Index dim() const { return sum_.rows(); }
  std::int64_t samples() const { return samples_; }
  const Matrix& sum() const { return sum_; }
  // Symmetric PSD root of the accumulated correlation.
  Matrix root() const;

  static CorrelationAccumulator from_sum(Matrix s, std::int64_t samples);

 private:
  Matrix sum_;
  std::int64_t samples_ = 0;
};

// Symmetric PSD root R with R * R = S. Eigenvalues in
// [-1e-10*|S|, 0) are clamped to zero; anything lower raises NotPsd.
Matrix correlation_root(const MatrixRef& s);

struct TokenFrequency {
  std::vector<std::int64_t> counts;

  Index vocab() const { return static_cast<Index>(counts.size()); }
  std::int64_t total() const;
};

// Exact histogram of a token-id stream over vocabulary size v.
TokenFrequency count_tokens(const std::vector<std::int64_t>& ids, Index v);

// Per-token diagonal weights: sqrt(D_i + 1), log(D_i + 1) or all ones.
Vector embedding_weight(const TokenFrequency& freq, EmbeddingWeighting mode);

}  // namespace pkit
