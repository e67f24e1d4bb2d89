#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mmc/lowrank.hpp"
#include "mmc/rng.hpp"
#include "mmc/tensor.hpp"
#include "oracles.hpp"

using namespace mmc;

namespace {

LowRankCovariance random_cov(Rng& rng, std::int64_t d, std::int64_t r,
                             double diag_min = 0.1) {
  std::vector<double> diag(static_cast<std::size_t>(d));
  for (auto& v : diag) v = diag_min + rng.uniform() * 0.9;
  std::vector<double> fac(static_cast<std::size_t>(d * r));
  for (auto& v : fac) v = rng.normal() * 0.5;
  Tensor df = Tensor::from_data({d}, diag);
  Tensor ff = r > 0 ? Tensor::from_data({d, r}, fac) : Tensor();
  return build_covariance(df, ff);
}

double max_abs_diff(const Mat& a, const Mat& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.a.size(); ++i) m = std::max(m, std::abs(a.a[i] - b.a[i]));
  return m;
}

}  // namespace

TEST_CASE("identity covariance") {
  auto cov = build_covariance(Tensor::from_data({2}, {1.0, 1.0}), Tensor());
  CHECK(cov.rank == 0);
  CHECK(max_abs_diff(cov.inverse_dense(), Mat::identity(2)) == 0.0);
  CHECK(cov.logdet_value() == 0.0);
}

TEST_CASE("rank-1 factor on an axis") {
  auto cov = build_covariance(Tensor::from_data({2}, {1.0, 1.0}),
                              Tensor::from_data({2, 1}, {1.0, 0.0}));
  Mat sigma = cov.sigma_dense();
  CHECK(sigma(0, 0) == 2.0);
  CHECK(sigma(1, 1) == 1.0);
  CHECK(sigma(0, 1) == 0.0);
  CHECK(cov.logdet_value() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  // (I + e1 e1^T)^-1 = I - 0.5 e1 e1^T
  Mat inv = cov.inverse_dense();
  CHECK(inv(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(inv(1, 1) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(std::abs(inv(0, 1)) < 1e-15);
}

TEST_CASE("diagonal-only inverse and logdet") {
  auto cov = build_covariance(Tensor::from_data({2}, {2.0, 4.0}), Tensor());
  Mat inv = cov.inverse_dense();
  CHECK(inv(0, 0) == doctest::Approx(0.5));
  CHECK(inv(1, 1) == doctest::Approx(0.25));
  CHECK(cov.logdet_value() == doctest::Approx(std::log(8.0)).epsilon(1e-14));
}

TEST_CASE("non-positive diag is rejected") {
  CHECK_THROWS_AS(build_covariance(Tensor::from_data({2}, {1.0, 0.0}), Tensor()),
                  std::invalid_argument);
  CHECK_THROWS_AS(build_covariance(Tensor::from_data({2}, {1.0, -0.5}), Tensor()),
                  std::invalid_argument);
}

TEST_CASE("recursive inverse and logdet match dense oracles over 500 random cases") {
  Rng rng(42);
  for (int trial = 0; trial < 500; ++trial) {
    const std::int64_t d = 2 + rng.index(15);  // 2..16
    const std::int64_t r = rng.index(9);       // 0..8
    auto cov = random_cov(rng, d, r);
    Mat sigma = cov.sigma_dense();

    Mat dense_inv = oracle::gauss_jordan_inverse(sigma);
    const double inv_err = max_abs_diff(cov.inverse_dense(), dense_inv);
    CAPTURE(trial);
    CAPTURE(d);
    CAPTURE(r);
    CHECK(inv_err < 1e-8);

    const double dense_ld = oracle::lu_logdet(sigma);
    CHECK(std::abs(cov.logdet_value() - dense_ld) <=
          1e-8 * std::max(1.0, std::abs(dense_ld)));

    // ||Sigma Sigma^-1 - I||_max < 1e-8
    Mat prod(d, d);
    Mat inv = cov.inverse_dense();
    for (std::int64_t i = 0; i < d; ++i) {
      for (std::int64_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::int64_t k = 0; k < d; ++k) acc += sigma(i, k) * inv(k, j);
        prod(i, j) = acc;
      }
    }
    CHECK(max_abs_diff(prod, Mat::identity(d)) < 1e-8);
  }
}

TEST_CASE("logdet additivity of one extra column") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t d = 3 + rng.index(10);
    const std::int64_t r = 1 + rng.index(4);
    std::vector<double> diag(static_cast<std::size_t>(d));
    for (auto& v : diag) v = 0.1 + rng.uniform();
    std::vector<double> fac(static_cast<std::size_t>(d * r));
    for (auto& v : fac) v = rng.normal() * 0.5;

    Tensor dt = Tensor::from_data({d}, diag);
    Tensor full = Tensor::from_data({d, r}, fac);
    Tensor head = slice(full, 1, 0, r - 1);
    Tensor last = slice(full, 1, r - 1, 1);

    const double ld_full = recursive_logdet(dt, full).value();
    const double ld_head = recursive_logdet(dt, head).value();
    Tensor inv_head = recursive_inverse(dt, head);
    const double quad = matmul(transpose(last), matmul(inv_head, last)).value();
    CHECK(ld_full - ld_head ==
          doctest::Approx(std::log(1.0 + quad)).epsilon(1e-12));
  }
}

TEST_CASE("random instance satisfies the eigenvalue floor") {
  Rng rng(11);
  auto cov = random_cov(rng, 8, 3);
  auto dec = symmetric_eigen(cov.sigma_dense());
  double min_diag = 1e300;
  for (double v : cov.diag.data()) min_diag = std::min(min_diag, v);
  // Sigma = diag + Phi Phi^T, so every eigenvalue >= min(diag).
  for (double ev : dec.values) CHECK(ev >= min_diag - 1e-10);
  // symmetric by construction
  Mat sigma = cov.sigma_dense();
  for (std::int64_t i = 0; i < 8; ++i) {
    for (std::int64_t j = 0; j < 8; ++j) {
      CHECK(sigma(i, j) == doctest::Approx(sigma(j, i)).epsilon(1e-14));
    }
  }
}

TEST_CASE("mahalanobis squared form") {
  auto id2 = build_covariance(Tensor::from_data({2}, {1.0, 1.0}), Tensor());
  std::vector<double> delta{3.0, 4.0};
  CHECK(mahalanobis_sq(id2, delta) == doctest::Approx(25.0).epsilon(1e-14));
  std::vector<double> zero{0.0, 0.0};
  CHECK(mahalanobis_sq(id2, zero) == 0.0);

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t d = 2 + rng.index(15);
    auto cov = random_cov(rng, d, rng.index(5));
    std::vector<double> dv(static_cast<std::size_t>(d));
    for (auto& v : dv) v = rng.normal();
    const double got = mahalanobis_sq(cov, dv);
    const double want = oracle::solve_quadratic_form(cov.sigma_dense(), dv);
    CHECK(got == doctest::Approx(want).epsilon(1e-8));
    CHECK(got >= 0.0);
  }
}

TEST_CASE("mahalanobis lower bound from the top eigenvalue") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::int64_t d = 2 + rng.index(10);
    auto cov = random_cov(rng, d, rng.index(4));
    auto dec = symmetric_eigen(cov.sigma_dense());
    const double lam_max = dec.values.front();
    std::vector<double> dv(static_cast<std::size_t>(d));
    double norm_sq = 0.0;
    for (auto& v : dv) {
      v = rng.normal();
      norm_sq += v * v;
    }
    CHECK(mahalanobis_sq(cov, dv) >= norm_sq / lam_max - 1e-10);
  }
}

TEST_CASE("precision eigenvalues respect the 0.1 diag floor") {
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const std::int64_t d = 2 + rng.index(10);
    auto cov = random_cov(rng, d, rng.index(4), /*diag_min=*/0.1);
    auto dec = symmetric_eigen(cov.inverse_dense());
    for (double ev : dec.values) CHECK(ev <= 1.0 / 0.1 + 1e-9);
  }
}

TEST_CASE("column order only perturbs the recursion at rounding level") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t d = 4 + rng.index(8);
    const std::int64_t r = 2 + rng.index(4);
    std::vector<double> diag(static_cast<std::size_t>(d));
    for (auto& v : diag) v = 0.1 + rng.uniform();
    std::vector<double> fac(static_cast<std::size_t>(d * r));
    for (auto& v : fac) v = rng.normal() * 0.5;
    Tensor dt = Tensor::from_data({d}, diag);
    Tensor f = Tensor::from_data({d, r}, fac);
    std::vector<Tensor> cols;
    for (std::int64_t j = r - 1; j >= 0; --j) cols.push_back(slice(f, 1, j, 1));
    Tensor reversed = concat(cols, 1);
    Mat a(d, d), b(d, d);
    a.a = recursive_inverse(dt, f).data();
    b.a = recursive_inverse(dt, reversed).data();
    CHECK(max_abs_diff(a, b) < 1e-9);
    CHECK(std::abs(recursive_logdet(dt, f).value() -
                   recursive_logdet(dt, reversed).value()) < 1e-9);
  }
}

TEST_CASE("gradients flow through the inverse and logdet") {
  Rng rng(17);
  std::vector<double> diag_raw{0.4, 0.9, 0.6, 1.2};
  std::vector<double> fac{0.3, -0.2, 0.5, 0.1};
  Tensor dt = Tensor::from_data({4}, diag_raw, true);
  Tensor ft = Tensor::from_data({4, 1}, fac, true);
  std::vector<double> delta{0.7, -0.4, 0.2, 0.9};
  Tensor dvec = Tensor::from_data({4, 1}, delta);

  auto eval = [&]() {
    auto cov = build_covariance(dt, ft);
    Tensor quad = matmul(transpose(dvec), matmul(cov.inverse, dvec));
    return (reshape(quad, {1}) * 0.5 + cov.logdet * 0.5).value();
  };
  {
    auto cov = build_covariance(dt, ft);
    Tensor quad = matmul(transpose(dvec), matmul(cov.inverse, dvec));
    backward(reshape(quad, {1}) * 0.5 + cov.logdet * 0.5);
  }
  auto fd_diag = oracle::central_differences(dt, eval);
  auto fd_fac = oracle::central_differences(ft, eval);
  for (std::size_t i = 0; i < fd_diag.size(); ++i) {
    CHECK(oracle::close_rel(dt.grad()[i], fd_diag[i]));
  }
  for (std::size_t i = 0; i < fd_fac.size(); ++i) {
    CHECK(oracle::close_rel(ft.grad()[i], fd_fac[i]));
  }
  (void)rng;
}

TEST_CASE("jacobi eigendecomposition basics") {
  Mat d2(2, 2);
  d2(0, 0) = 3.0;
  d2(1, 1) = 1.0;
  auto dec = symmetric_eigen(d2);
  CHECK(dec.values == std::vector<double>{3.0, 1.0});
  CHECK(std::abs(std::abs(dec.vectors(0, 0)) - 1.0) < 1e-12);
  CHECK(std::abs(dec.vectors(1, 0)) < 1e-12);

  auto ident = symmetric_eigen(Mat::identity(5));
  for (double v : ident.values) CHECK(v == 1.0);
}

TEST_CASE("jacobi reconstructs a random symmetric 8x8") {
  Rng rng(23);
  Mat a(8, 8);
  for (std::int64_t i = 0; i < 8; ++i) {
    for (std::int64_t j = 0; j <= i; ++j) {
      const double v = rng.normal();
      a(i, j) = v;
      a(j, i) = v;
    }
  }
  auto dec = symmetric_eigen(a);
  // Q orthonormal
  for (std::int64_t i = 0; i < 8; ++i) {
    for (std::int64_t j = 0; j < 8; ++j) {
      double dot = 0.0;
      for (std::int64_t k = 0; k < 8; ++k) dot += dec.vectors(k, i) * dec.vectors(k, j);
      CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-8);
    }
  }
  // A v_i = lambda_i v_i and Q Lambda Q^T = A
  for (std::int64_t c = 0; c < 8; ++c) {
    for (std::int64_t i = 0; i < 8; ++i) {
      double av = 0.0;
      for (std::int64_t k = 0; k < 8; ++k) av += a(i, k) * dec.vectors(k, c);
      CHECK(std::abs(av - dec.values[static_cast<std::size_t>(c)] * dec.vectors(i, c)) < 1e-8);
    }
  }
  Mat recon(8, 8);
  for (std::int64_t i = 0; i < 8; ++i) {
    for (std::int64_t j = 0; j < 8; ++j) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < 8; ++k) {
        acc += dec.vectors(i, k) * dec.values[static_cast<std::size_t>(k)] * dec.vectors(j, k);
      }
      recon(i, j) = acc;
    }
  }
  CHECK(max_abs_diff(recon, a) < 1e-8);
  CHECK(std::is_sorted(dec.values.rbegin(), dec.values.rend()));
}

TEST_CASE("asymmetric input is rejected") {
  Mat a(2, 2);
  a(0, 1) = 1.0;
  a(1, 0) = 0.5;
  CHECK_THROWS_AS(symmetric_eigen(a), std::invalid_argument);
}
