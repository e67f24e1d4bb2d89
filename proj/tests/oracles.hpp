// Independent reference implementations used only by tests. These are kept
// deliberately separate from the library code paths they check.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "mmc/lowrank.hpp"
#include "mmc/tensor.hpp"

namespace oracle {

// Dense inverse by Gauss-Jordan elimination with partial pivoting.
inline mmc::Mat gauss_jordan_inverse(const mmc::Mat& m) {
  const std::int64_t n = m.rows;
  mmc::Mat a = m;
  mmc::Mat inv = mmc::Mat::identity(n);
  for (std::int64_t col = 0; col < n; ++col) {
    std::int64_t pivot = col;
    for (std::int64_t r = col + 1; r < n; ++r) {
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    }
    if (std::abs(a(pivot, col)) < 1e-300) {
      throw std::runtime_error("gauss_jordan_inverse: singular matrix");
    }
    if (pivot != col) {
      for (std::int64_t j = 0; j < n; ++j) {
        std::swap(a(col, j), a(pivot, j));
        std::swap(inv(col, j), inv(pivot, j));
      }
    }
    const double p = a(col, col);
    for (std::int64_t j = 0; j < n; ++j) {
      a(col, j) /= p;
      inv(col, j) /= p;
    }
    for (std::int64_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a(r, col);
      if (f == 0.0) continue;
      for (std::int64_t j = 0; j < n; ++j) {
        a(r, j) -= f * a(col, j);
        inv(r, j) -= f * inv(col, j);
      }
    }
  }
  return inv;
}

// log |M| by LU decomposition (Doolittle with partial pivoting); requires a
// positive determinant.
inline double lu_logdet(const mmc::Mat& m) {
  const std::int64_t n = m.rows;
  mmc::Mat a = m;
  double logdet = 0.0;
  int sign = 1;
  for (std::int64_t col = 0; col < n; ++col) {
    std::int64_t pivot = col;
    for (std::int64_t r = col + 1; r < n; ++r) {
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    }
    if (pivot != col) {
      for (std::int64_t j = 0; j < n; ++j) std::swap(a(col, j), a(pivot, j));
      sign = -sign;
    }
    const double p = a(col, col);
    if (p < 0.0) sign = -sign;
    logdet += std::log(std::abs(p));
    for (std::int64_t r = col + 1; r < n; ++r) {
      const double f = a(r, col) / p;
      for (std::int64_t j = col; j < n; ++j) a(r, j) -= f * a(col, j);
    }
  }
  if (sign < 0) throw std::runtime_error("lu_logdet: negative determinant");
  return logdet;
}

inline std::vector<double> mat_vec(const mmc::Mat& m, const std::vector<double>& v) {
  std::vector<double> out(static_cast<std::size_t>(m.rows), 0.0);
  for (std::int64_t i = 0; i < m.rows; ++i) {
    for (std::int64_t j = 0; j < m.cols; ++j) {
      out[static_cast<std::size_t>(i)] += m(i, j) * v[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

// Solve M x = b, then dot with b: the dense route to delta^T M^-1 delta.
inline double solve_quadratic_form(const mmc::Mat& m, const std::vector<double>& delta) {
  mmc::Mat inv = gauss_jordan_inverse(m);
  auto x = mat_vec(inv, delta);
  double acc = 0.0;
  for (std::size_t i = 0; i < delta.size(); ++i) acc += delta[i] * x[i];
  return acc;
}

// Central finite differences of a scalar-valued function of one parameter
// tensor, evaluated entry by entry.
inline std::vector<double> central_differences(mmc::Tensor param,
                                               const std::function<double()>& eval,
                                               double step = 1e-5) {
  std::vector<double> grad(param.data().size(), 0.0);
  auto& d = param.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double orig = d[i];
    d[i] = orig + step;
    const double up = eval();
    d[i] = orig - step;
    const double down = eval();
    d[i] = orig;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

// Relative comparison with an absolute floor, as used by the gradient checks.
inline bool close_rel(double a, double b, double rel = 1e-4, double abs_floor = 1e-7) {
  const double diff = std::abs(a - b);
  if (diff <= abs_floor) return true;
  return diff <= rel * std::max(std::abs(a), std::abs(b));
}

}  // namespace oracle
