#include "mmc/lowrank.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mmc {

Mat Mat::identity(std::int64_t n) {
  Mat m(n, n);
  for (std::int64_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

namespace {

void check_inputs(const Tensor& diag, const Tensor& factors) {
  if (diag.rank() != 1) {
    throw std::invalid_argument("covariance: diag must be rank-1, got " +
                                shape_str(diag.shape()));
  }
  for (double v : diag.data()) {
    if (!(v > 0.0)) {
      throw std::invalid_argument("covariance: diag entries must be strictly positive");
    }
  }
  if (factors.defined() && factors.dim(0) > 0 && factors.dim(1) > 0) {
    if (factors.rank() != 2 || factors.dim(0) != diag.dim(0)) {
      throw std::invalid_argument("covariance: factors " + shape_str(factors.shape()) +
                                  " do not match diag " + shape_str(diag.shape()));
    }
  }
}

std::int64_t factor_rank(const Tensor& diag, const Tensor& factors) {
  if (!factors.defined() || factors.size() == 0) return 0;
  (void)diag;
  return factors.dim(1);
}

// Shared recursion: Sherman-Morrison per column for the inverse, matrix
// determinant lemma for the log det, both in one pass.
void run_recursion(const Tensor& diag, const Tensor& factors, Tensor* inverse_out,
                   Tensor* logdet_out) {
  check_inputs(diag, factors);
  const std::int64_t r = factor_rank(diag, factors);

  Tensor inv = diag_embed(1.0 / diag);
  Tensor logdet = sum_all(log(diag));
  for (std::int64_t j = 0; j < r; ++j) {
    Tensor phi = slice(factors, 1, j, 1);       // {d, 1}
    Tensor u = matmul(inv, phi);                // {d, 1}
    Tensor denom = matmul(transpose(phi), u) + 1.0;  // {1, 1}
    if (!(denom.value() > 0.0)) {
      throw std::runtime_error(
          "covariance: Sherman-Morrison denominator is not positive (" +
          std::to_string(denom.value()) + "); positive-definite invariant breached");
    }
    inv = inv - matmul(u, transpose(u)) / reshape(denom, {1});
    logdet = logdet + reshape(log(denom), {1});
  }
  if (inverse_out) *inverse_out = inv;
  if (logdet_out) *logdet_out = logdet;
}

}  // namespace

Tensor recursive_inverse(const Tensor& diag, const Tensor& factors) {
  Tensor inv;
  run_recursion(diag, factors, &inv, nullptr);
  return inv;
}

Tensor recursive_logdet(const Tensor& diag, const Tensor& factors) {
  Tensor ld;
  run_recursion(diag, factors, nullptr, &ld);
  return ld;
}

LowRankCovariance build_covariance(const Tensor& diag, const Tensor& factors) {
  LowRankCovariance cov;
  cov.dim = diag.rank() >= 1 ? diag.dim(0) : 0;
  cov.rank = factor_rank(diag, factors);
  cov.diag = diag;
  cov.factors = factors;
  run_recursion(diag, factors, &cov.inverse, &cov.logdet);
  return cov;
}

Mat LowRankCovariance::inverse_dense() const {
  Mat m(dim, dim);
  m.a = inverse.data();
  return m;
}

Mat LowRankCovariance::sigma_dense() const {
  Mat m(dim, dim);
  for (std::int64_t i = 0; i < dim; ++i) m(i, i) = diag.data()[static_cast<std::size_t>(i)];
  if (rank > 0) {
    const auto& f = factors.data();
    for (std::int64_t i = 0; i < dim; ++i) {
      for (std::int64_t j = 0; j < dim; ++j) {
        double acc = 0.0;
        for (std::int64_t c = 0; c < rank; ++c) {
          acc += f[static_cast<std::size_t>(i * rank + c)] *
                 f[static_cast<std::size_t>(j * rank + c)];
        }
        m(i, j) += acc;
      }
    }
  }
  return m;
}

double mahalanobis_sq(const Mat& precision, std::span<const double> delta) {
  const std::int64_t d = precision.rows;
  if (static_cast<std::int64_t>(delta.size()) != d) {
    throw std::invalid_argument("mahalanobis_sq: delta length " +
                                std::to_string(delta.size()) + " does not match dim " +
                                std::to_string(d));
  }
  double acc = 0.0;
  for (std::int64_t i = 0; i < d; ++i) {
    double row = 0.0;
    for (std::int64_t j = 0; j < d; ++j) row += precision(i, j) * delta[static_cast<std::size_t>(j)];
    acc += delta[static_cast<std::size_t>(i)] * row;
  }
  return acc;
}

double mahalanobis_sq(const LowRankCovariance& cov, std::span<const double> delta) {
  const std::int64_t d = cov.dim;
  if (static_cast<std::int64_t>(delta.size()) != d) {
    throw std::invalid_argument("mahalanobis_sq: delta length " +
                                std::to_string(delta.size()) + " does not match dim " +
                                std::to_string(d));
  }
  const auto& p = cov.inverse.data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < d; ++i) {
    double row = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      row += p[static_cast<std::size_t>(i * d + j)] * delta[static_cast<std::size_t>(j)];
    }
    acc += delta[static_cast<std::size_t>(i)] * row;
  }
  return acc;
}

EigenDecomposition symmetric_eigen(const Mat& m) {
  if (m.rows != m.cols) {
    throw std::invalid_argument("symmetric_eigen: matrix is not square");
  }
  const std::int64_t n = m.rows;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      if (std::abs(m(i, j) - m(j, i)) > 1e-10) {
        throw std::invalid_argument("symmetric_eigen: input is not symmetric");
      }
    }
  }
  Mat a = m;
  Mat q = Mat::identity(n);
  auto off_norm = [&]() {
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        if (i != j) s += a(i, j) * a(i, j);
      }
    }
    return std::sqrt(s);
  };
  for (int sweep = 0; sweep < 100 && off_norm() >= 1e-12; ++sweep) {
    for (std::int64_t p = 0; p < n - 1; ++p) {
      for (std::int64_t r = p + 1; r < n; ++r) {
        const double apq = a(p, r);
        if (apq == 0.0) continue;
        const double theta = (a(r, r) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::int64_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, r);
          a(k, p) = c * akp - s * akq;
          a(k, r) = s * akp + c * akq;
        }
        for (std::int64_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(r, k);
          a(p, k) = c * apk - s * aqk;
          a(r, k) = s * apk + c * aqk;
        }
        for (std::int64_t k = 0; k < n; ++k) {
          const double qkp = q(k, p), qkq = q(k, r);
          q(k, p) = c * qkp - s * qkq;
          q(k, r) = s * qkp + c * qkq;
        }
      }
    }
  }
  EigenDecomposition dec;
  dec.values.resize(static_cast<std::size_t>(n));
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::int64_t x, std::int64_t y) { return a(x, x) > a(y, y); });
  dec.vectors = Mat(n, n);
  for (std::int64_t k = 0; k < n; ++k) {
    dec.values[static_cast<std::size_t>(k)] = a(order[static_cast<std::size_t>(k)],
                                                order[static_cast<std::size_t>(k)]);
    for (std::int64_t i = 0; i < n; ++i) {
      dec.vectors(i, k) = q(i, order[static_cast<std::size_t>(k)]);
    }
  }
  return dec;
}

}  // namespace mmc
