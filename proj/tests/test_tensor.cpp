#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "mmc/checkpoint.hpp"
#include "mmc/rng.hpp"
#include "mmc/tensor.hpp"
#include "oracles.hpp"

using namespace mmc;

TEST_CASE("matmul against identity") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(a, Tensor::eye(2));
  CHECK(r.data() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("logsumexp of (0, 0) is log 2") {
  Tensor x = Tensor::from_data({2}, {0.0, 0.0});
  CHECK(logsumexp(x, 0).value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("logsumexp is overflow-safe") {
  Tensor x = Tensor::from_data({2}, {1000.0, 1000.0});
  CHECK(logsumexp(x, 0).value() == doctest::Approx(1000.0 + std::log(2.0)));
}

TEST_CASE("sigmoid derivative at zero is 0.25") {
  Tensor x = Tensor::from_data({1}, {0.0}, /*requires_grad=*/true);
  backward(sigmoid(x));
  CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("grad of sum(x*x)") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  backward(sum_all(x * x));
  CHECK(x.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("constant leaves get no grad") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Tensor c = Tensor::from_data({2}, {3, 4}, false);
  backward(sum_all(x * c));
  CHECK(x.grad() == std::vector<double>{3, 4});
  CHECK_FALSE(c.has_grad());
}

TEST_CASE("backward requires a scalar") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(x * x), std::invalid_argument);
}

TEST_CASE("requires_grad ancestors hold finite grads after backward") {
  Tensor a = Tensor::from_data({2, 2}, {0.5, -1.0, 2.0, 0.25}, true);
  Tensor b = Tensor::from_data({2, 1}, {1.0, -0.5}, true);
  Tensor y = matmul(sigmoid(a), b);
  backward(mean_all(y * y));
  REQUIRE(a.has_grad());
  REQUIRE(b.has_grad());
  for (double g : a.grad()) CHECK(std::isfinite(g));
  for (double g : b.grad()) CHECK(std::isfinite(g));
}

TEST_CASE("shape mismatch errors name the op and shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 2]") != std::string::npos);
  }
}

TEST_CASE("trailing-dimension broadcasting") {
  Tensor m = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor row = Tensor::from_data({3}, {10, 20, 30}, true);
  Tensor col = Tensor::from_data({2, 1}, {100, 200});
  Tensor r = m + row + col;
  CHECK(r.data() == std::vector<double>{111, 122, 133, 214, 225, 236});
  backward(sum_all(r));
  CHECK(m.grad() == std::vector<double>{1, 1, 1, 1, 1, 1});
  CHECK(row.grad() == std::vector<double>{2, 2, 2});  // summed over rows

  Tensor bad = Tensor::zeros({4});
  CHECK_THROWS_AS(m + bad, std::invalid_argument);
}

TEST_CASE("clamp_min subgradient is zero at and below the constant") {
  Tensor x = Tensor::from_data({3}, {0.05, 0.1, 0.4}, true);
  Tensor y = clamp_min(x, 0.1);
  CHECK(y.data() == std::vector<double>{0.1, 0.1, 0.4});
  backward(sum_all(y));
  CHECK(x.grad() == std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("log of non-positive values propagates NaN rather than throwing") {
  Tensor x = Tensor::from_data({2}, {-1.0, 2.0});
  Tensor y = log(x);
  CHECK(std::isnan(y.data()[0]));
  CHECK(y.data()[1] == doctest::Approx(std::log(2.0)));
}

TEST_CASE("concat, slice, index_rows, gather_cols round-trips and grads") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
  Tensor b = Tensor::from_data({2, 1}, {5, 6}, true);
  Tensor cat = concat({a, b}, 1);
  CHECK(cat.shape() == Shape{2, 3});
  CHECK(cat.data() == std::vector<double>{1, 2, 5, 3, 4, 6});
  Tensor back = slice(cat, 1, 0, 2);
  CHECK(back.data() == a.data());

  Tensor rows = index_rows(cat, {1, 0, 1});
  CHECK(rows.shape() == Shape{3, 3});
  CHECK(rows.data() == std::vector<double>{3, 4, 6, 1, 2, 5, 3, 4, 6});

  Tensor picked = gather_cols(cat, {2, 0});
  CHECK(picked.data() == std::vector<double>{5, 3});
  backward(sum_all(picked));
  CHECK(a.grad() == std::vector<double>{0, 0, 1, 0});
  CHECK(b.grad() == std::vector<double>{1, 0});
}

TEST_CASE("diag_embed and its gradient") {
  Tensor v = Tensor::from_data({2}, {3, 7}, true);
  Tensor d = diag_embed(v);
  CHECK(d.data() == std::vector<double>{3, 0, 0, 7});
  backward(sum_all(d * d));
  CHECK(v.grad() == std::vector<double>{6, 14});
}

TEST_CASE("backward never mutates saved forward values") {
  Tensor x = Tensor::from_data({3}, {0.3, -0.7, 1.4}, true);
  Tensor h = sigmoid(x);
  Tensor y = h * h;
  const auto h_before = h.data();
  const auto y_before = y.data();
  backward(sum_all(y));
  CHECK(h.data() == h_before);
  CHECK(y.data() == y_before);
}

namespace {

// A randomized op pipeline with the choices frozen up front, so the same
// function can be re-evaluated for finite differencing.
double random_graph_loss(const Tensor& a, const Tensor& b, const Tensor& v,
                         const std::vector<int>& plan, std::vector<Tensor>* leaves) {
  Tensor t = matmul(a, b);
  for (int op : plan) {
    switch (op) {
      case 0: t = t * t; break;
      case 1: t = sigmoid(t); break;
      case 2: t = exp(t * 0.3); break;
      case 3: t = log(sigmoid(t) + 0.5); break;
      case 4: t = t / (exp(t * 0.2) + 1.5); break;
      case 5: t = clamp_min(t, 0.1); break;
      case 6: t = relu(t); break;
      case 7: t = t - v; break;
      default: t = t * v; break;
    }
  }
  Tensor u = logsumexp(t, 1);
  Tensor loss = mean_all(u * u) + 0.1 * sum_all(sigmoid(t));
  if (leaves) {
    backward(loss);
  }
  return loss.value();
}

}  // namespace

TEST_CASE("autodiff matches central finite differences on 100 random graphs") {
  Rng rng(20240911);
  int checked = 0;
  for (int g = 0; g < 100; ++g) {
    std::vector<double> da(12), db(8), dv(2);
    for (auto& x : da) x = rng.normal() * 0.8;
    for (auto& x : db) x = rng.normal() * 0.8;
    for (auto& x : dv) x = rng.normal() * 0.8;
    std::vector<int> plan(3);
    for (auto& p : plan) p = static_cast<int>(rng.index(9));

    Tensor a = Tensor::from_data({3, 4}, da, true);
    Tensor b = Tensor::from_data({4, 2}, db, true);
    Tensor v = Tensor::from_data({2}, dv, true);
    std::vector<Tensor> leaves{a, b, v};
    random_graph_loss(a, b, v, plan, &leaves);

    for (auto& leaf : leaves) {
      // leaves not touched by the sampled plan keep an empty grad == zero
      std::vector<double> got = leaf.has_grad()
                                    ? leaf.grad()
                                    : std::vector<double>(leaf.data().size(), 0.0);
      auto fd = oracle::central_differences(
          leaf, [&]() { return random_graph_loss(a, b, v, plan, nullptr); });
      for (std::size_t i = 0; i < fd.size(); ++i) {
        if (!oracle::close_rel(got[i], fd[i])) {
          CAPTURE(g);
          CAPTURE(i);
          CHECK(oracle::close_rel(got[i], fd[i]));
        }
        ++checked;
      }
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("identical seed gives bit-identical values and gradients") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> da(12), db(8), dv(2);
    for (auto& x : da) x = rng.normal();
    for (auto& x : db) x = rng.normal();
    for (auto& x : dv) x = rng.normal();
    Tensor a = Tensor::from_data({3, 4}, da, true);
    Tensor b = Tensor::from_data({4, 2}, db, true);
    Tensor v = Tensor::from_data({2}, dv, true);
    std::vector<Tensor> leaves{a, b, v};
    double loss = random_graph_loss(a, b, v, {1, 4, 8}, &leaves);
    return std::make_tuple(loss, a.grad(), b.grad(), v.grad());
  };
  CHECK(run(77) == run(77));
}

TEST_CASE("adam first step moves a scalar parameter by about lr") {
  Tensor w = Tensor::from_data({1}, {5.0}, true);
  Adam adam({w}, {.lr = 0.01});
  adam.zero_grad();
  backward(sum_all(w));  // grad = 1
  adam.step();
  CHECK(w.data()[0] == doctest::Approx(5.0 - 0.01).epsilon(1e-6));
  CHECK(adam.step_count() == 1);
}

TEST_CASE("adam with zero grad leaves parameters unchanged but counts the step") {
  Tensor w = Tensor::from_data({2}, {1.0, -2.0}, true);
  Adam adam({w});
  adam.zero_grad();
  adam.step();
  CHECK(w.data() == std::vector<double>{1.0, -2.0});
  CHECK(adam.step_count() == 1);
}

TEST_CASE("adam skips non-finite grads and reports") {
  Tensor w = Tensor::from_data({1}, {1.0}, true);
  Adam adam({w});
  adam.zero_grad();
  backward(sum_all(log(w - 1.0)));  // log(0) = -inf upstream
  const int skipped = adam.step();
  CHECK(skipped == 1);
  CHECK(w.data()[0] == 1.0);
}

TEST_CASE("adam drives (w - 3)^2 near its minimum in 200 steps") {
  Tensor w = Tensor::from_data({1}, {0.0}, true);
  Adam adam({w}, {.lr = 0.1});
  for (int i = 0; i < 200; ++i) {
    adam.zero_grad();
    Tensor diff = w - 3.0;
    backward(sum_all(diff * diff));
    adam.step();
  }
  CHECK(std::abs(w.data()[0] - 3.0) < 0.1);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  const std::string path = (std::filesystem::temp_directory_path() / "mmc_ckpt_test.bin").string();
  NamedTensors saved{
      {"extractor.block0.weight", Tensor::from_data({2, 3}, {1.5, -2.25, 0.0, 1e-17, 3.14159, -0.5})},
      {"head.temperature", Tensor::from_data({1}, {4.0})},
  };
  save_checkpoint(path, saved);
  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].first == "extractor.block0.weight");
  CHECK(loaded[0].second.shape() == Shape{2, 3});
  CHECK(loaded[0].second.data() == saved[0].second.data());
  CHECK(loaded[1].second.data() == saved[1].second.data());
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint rejects bad magic and bad length") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "mmc_ckpt_corrupt.bin").string();
  save_checkpoint(path, {{"w", Tensor::from_data({2}, {1.0, 2.0})}});

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);

  save_checkpoint(path, {{"w", Tensor::from_data({2}, {1.0, 2.0})}});
  fs::resize_file(path, fs::file_size(path) - 3);
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);

  save_checkpoint(path, {{"w", Tensor::from_data({2}, {1.0, 2.0})}});
  {
    std::ofstream f(path, std::ios::binary | std::ios::app);
    f.write("zz", 2);
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  fs::remove(path);
}
