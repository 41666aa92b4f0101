#include "pkit/calib.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace pkit {

void CorrelationAccumulator::accumulate(const MatrixRef& batch) {
  require(batch.cols() == sum_.cols(), ErrorCode::ShapeMismatch,
          "accumulate: batch width does not match accumulator");
  require(batch.allFinite(), ErrorCode::NonFinite,
          "accumulate: batch has non-finite entries");
  sum_.noalias() += batch.transpose() * batch;
  samples_ += batch.rows();
}

void CorrelationAccumulator::merge(const CorrelationAccumulator& other) {
  require(other.dim() == dim(), ErrorCode::ShapeMismatch,
          "merge: accumulator dimensions differ");
  sum_ += other.sum_;
  samples_ += other.samples_;
}

Matrix CorrelationAccumulator::root() const { return correlation_root(sum_); }

CorrelationAccumulator CorrelationAccumulator::from_sum(Matrix s,
                                                        std::int64_t samples) {
  CorrelationAccumulator acc(s.rows());
  acc.sum_ = std::move(s);
  acc.samples_ = samples;
  return acc;
}

Matrix correlation_root(const MatrixRef& s) {
  require(s.rows() == s.cols(), ErrorCode::ShapeMismatch,
          "correlation_root: matrix is not square");
  const double asym = (s - s.transpose()).cwiseAbs().maxCoeff();
  require(asym <= 1e-10 * (1.0 + s.cwiseAbs().maxCoeff()), ErrorCode::ShapeMismatch,
          "correlation_root: matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (s + s.transpose()));
  Vector vals = es.eigenvalues();
  const double scale = std::max(std::abs(vals.minCoeff()), std::abs(vals.maxCoeff()));
  Vector roots(vals.size());
  for (Index i = 0; i < vals.size(); ++i) {
    require(vals(i) >= -1e-10 * scale, ErrorCode::NotPsd,
            "correlation_root: matrix has a significantly negative eigenvalue");
    roots(i) = std::sqrt(std::max(0.0, vals(i)));
  }
  return es.eigenvectors() * roots.asDiagonal() * es.eigenvectors().transpose();
}

std::int64_t TokenFrequency::total() const {
  std::int64_t t = 0;
  for (std::int64_t c : counts) t += c;
  return t;
}

TokenFrequency count_tokens(const std::vector<std::int64_t>& ids, Index v) {
  TokenFrequency freq;
  freq.counts.assign(static_cast<std::size_t>(v), 0);
  for (std::int64_t id : ids) {
    require(id >= 0 && id < v, ErrorCode::IdOutOfRange,
            "count_tokens: token id out of range");
    ++freq.counts[static_cast<std::size_t>(id)];
  }
  return freq;
}

Vector embedding_weight(const TokenFrequency& freq, EmbeddingWeighting mode) {
  Vector w(freq.vocab());
  for (Index i = 0; i < w.size(); ++i) {
    const double d = static_cast<double>(freq.counts[static_cast<std::size_t>(i)]);
    switch (mode) {
      case EmbeddingWeighting::SqrtD1: w(i) = std::sqrt(d + 1.0); break;
      case EmbeddingWeighting::LogD1: w(i) = std::log(d + 1.0); break;
      case EmbeddingWeighting::None: w(i) = 1.0; break;
    }
  }
  return w;
}

}  // namespace pkit
