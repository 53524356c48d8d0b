#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "amsam/tensor.hpp"
#include "grad_cases.hpp"
#include "support.hpp"

using namespace amsam;
using testing::rel_err;

TEST_CASE("every op's gradient matches central differences") {
  std::mt19937_64 rng(11);
  for (const auto& c : testing::op_grad_cases()) {
    CAPTURE(c.name);
    const double tol = c.linear ? 1e-6 : 1e-3;
    for (int i = 0; i < 20; ++i) CHECK(c.run(rng) < tol);
  }
}

TEST_CASE("matmul agrees with a triple loop") {
  std::mt19937_64 rng(3);
  Tensor a = Tensor::randn({2, 3, 4}, rng), b = Tensor::randn({4, 5}, rng);
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 5});
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < 4; ++k) acc += a.at({n, i, k}) * b.at({k, j});
        CHECK(c.at({n, i, j}) == doctest::Approx(acc).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("transposed convolution places each kernel tap once") {
  std::mt19937_64 rng(5);
  Tensor x = Tensor::randn({1, 2, 2, 3}, rng), k = Tensor::randn({2, 3, 2, 2}, rng), b = Tensor::randn({3}, rng);
  Tensor y = conv_transpose2x2(x, k, b);
  REQUIRE(y.shape() == Shape{1, 3, 4, 6});
  for (std::size_t co = 0; co < 3; ++co) {
    for (std::size_t oy = 0; oy < 4; ++oy) {
      for (std::size_t ox = 0; ox < 6; ++ox) {
        double acc = b.at({co});
        for (std::size_t ci = 0; ci < 2; ++ci) acc += x.at({0, ci, oy / 2, ox / 2}) * k.at({ci, co, oy % 2, ox % 2});
        CHECK(y.at({0, co, oy, ox}) == doctest::Approx(acc).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  std::mt19937_64 rng(9);
  Tensor x = Tensor::randn({3, 7}, rng, 4.0);
  Tensor y = layer_norm(x, Tensor::ones({7}), Tensor::zeros({7}), 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t c = 0; c < 7; ++c) mean += y.at({r, c});
    mean /= 7.0;
    for (std::size_t c = 0; c < 7; ++c) sq += (y.at({r, c}) - mean) * (y.at({r, c}) - mean);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(sq / 7.0 == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax rows sum to one and log_softmax is its log") {
  std::mt19937_64 rng(1);
  Tensor x = Tensor::randn({4, 5}, rng, 10.0);
  Tensor p = softmax_lastdim(x), lp = log_softmax_lastdim(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      s += p.at({r, c});
      CHECK(std::log(p.at({r, c})) == doctest::Approx(lp.at({r, c})).epsilon(1e-12));
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("gelu uses the exact erf form") {
  Tensor x = Tensor::from_data({3}, {-1.0, 0.0, 2.0});
  Tensor y = gelu(x);
  for (std::size_t i = 0; i < 3; ++i) {
    const double v = x.data()[i];
    CHECK(y.data()[i] == doctest::Approx(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)))).epsilon(1e-15));
  }
}

TEST_CASE("broadcasting only over a trailing size-1 suffix") {
  Tensor a = Tensor::ones({2, 3, 4});
  CHECK(add(a, Tensor::ones({2, 1, 1})).shape() == Shape{2, 3, 4});
  CHECK(add(Tensor::ones({2, 3, 1}), a).shape() == Shape{2, 3, 4});
  CHECK_THROWS_AS(add(a, Tensor::ones({1, 3, 4})), DimensionError);
  CHECK_THROWS_AS(add(a, Tensor::ones({3, 4})), DimensionError);
  CHECK_THROWS_AS(matmul(Tensor::ones({2, 3}), Tensor::ones({4, 2})), DimensionError);
  CHECK_THROWS_AS(reshape(a, {5, 5}), DimensionError);
}

TEST_CASE("leaf gradients accumulate across backward calls") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor loss = sum_all(hadamard(x, x));
  loss.backward();
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
  sum_all(hadamard(x, x)).backward();
  CHECK(x.grad()[1] == 8.0);
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("a tensor used twice receives both contributions") {
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  Tensor y = add(scale(x, 2.0), hadamard(x, x));  // 2x + x^2
  sum_all(y).backward();
  CHECK(x.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("backward preconditions") {
  Tensor x = Tensor::ones({2}, true);
  CHECK_THROWS_AS(scale(x, 2.0).backward(), DimensionError);
  CHECK_THROWS(sum_all(Tensor::ones({2})).backward());
}

TEST_CASE("the tape lists the loss first and every node before its inputs") {
  Tensor x = Tensor::ones({2}, true);
  Tensor h = gelu(x);
  Tensor loss = sum_all(add(h, h));
  GradTape tape = build_tape(loss);
  REQUIRE(!tape.records.empty());
  CHECK(tape.records.front() == loss.node().get());
  auto pos = [&](const detail::Node* n) {
    return std::find(tape.records.begin(), tape.records.end(), n) - tape.records.begin();
  };
  CHECK(pos(h.node().get()) > 0);
  CHECK(pos(x.node().get()) > pos(h.node().get()));
}

TEST_CASE("detach cuts the graph and clone copies values") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor d = x.detach();
  CHECK_FALSE(d.requires_grad());
  Tensor c = x.clone();
  c.mutable_data()[0] = 5.0;
  CHECK(x.data()[0] == 1.0);
  CHECK(c.requires_grad());
  CHECK(checksum(x) != checksum(c));
  c.mutable_data()[0] = 1.0;
  CHECK(checksum(x) == checksum(c));
}
