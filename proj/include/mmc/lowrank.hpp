#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mmc/tensor.hpp"

namespace mmc {

// Small dense row-major matrix for the non-differentiated analysis paths
// (eigendecomposition, evaluation-time Mahalanobis forms).
struct Mat {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(std::int64_t r, std::int64_t c) : rows(r), cols(c), a(static_cast<std::size_t>(r * c), 0.0) {}
  double& operator()(std::int64_t i, std::int64_t j) { return a[static_cast<std::size_t>(i * cols + j)]; }
  double operator()(std::int64_t i, std::int64_t j) const { return a[static_cast<std::size_t>(i * cols + j)]; }
  static Mat identity(std::int64_t n);
};

// Per-class covariance Sigma = diag(lambda) + Phi Phi^T with the inverse and
// log-determinant cached at construction. All pieces are Tensors so that
// gradients reach lambda and Phi when the inputs carry a graph.
struct LowRankCovariance {
  std::int64_t dim = 0;
  std::int64_t rank = 0;
  Tensor diag;      // {d}
  Tensor factors;   // {d, r}; undefined when r == 0
  Tensor inverse;   // {d, d}
  Tensor logdet;    // {1}

  Mat inverse_dense() const;
  Mat sigma_dense() const;
  double logdet_value() const { return logdet.value(); }
};

// diag entries must be strictly positive; factors may be an undefined Tensor
// or a {d, 0} tensor for the pure-diagonal case.
LowRankCovariance build_covariance(const Tensor& diag, const Tensor& factors);

// Rank-1 updates applied once per factor column, in column order, starting
// from diag(lambda)^-1. Equals the dense inverse of diag(lambda) + Phi Phi^T.
Tensor recursive_inverse(const Tensor& diag, const Tensor& factors);

// log det accumulated alongside the same recursion:
// sum(log lambda) + sum_j log(1 + phi_j^T Sigma_j^-1 phi_j).
Tensor recursive_logdet(const Tensor& diag, const Tensor& factors);

double mahalanobis_sq(const LowRankCovariance& cov, std::span<const double> delta);
double mahalanobis_sq(const Mat& precision, std::span<const double> delta);

struct EigenDecomposition {
  std::vector<double> values;  // descending
  Mat vectors;                 // orthonormal columns, A = Q diag(values) Q^T
};

// Cyclic Jacobi rotations; sweeps until the off-diagonal Frobenius norm
// drops below 1e-12 or 100 sweeps elapse. Input must be symmetric to 1e-10.
EigenDecomposition symmetric_eigen(const Mat& m);

}  // namespace mmc
