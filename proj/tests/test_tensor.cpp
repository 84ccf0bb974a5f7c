#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "maskspec/rng.hpp"
#include "maskspec/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace maskspec;
using Catch::Approx;

namespace {

Tensor<double> random_tensor(std::vector<long> shape, Rng& rng, bool requires_grad = true) {
  long n = 1;
  for (const long d : shape) n *= d;
  std::vector<double> data(n);
  for (auto& v : data) v = rng.uniform(-1.5, 1.5);
  return Tensor<double>::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST_CASE("matmul identity and hand-checked product") {
  const auto eye = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
  const auto b = Tensor<double>::from_data({2, 2}, {3.5, -2, 7, 0.25});
  const auto ib = matmul(eye, b);
  for (int i = 0; i < 4; ++i) REQUIRE(ib.values()[i] == b.values()[i]);

  const auto x = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
  const auto y = Tensor<double>::from_data({2, 2}, {5, 6, 7, 8});
  const auto xy = matmul(x, y);
  REQUIRE(xy.values() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul matches a naive triple loop") {
  Rng rng(7);
  const auto a = random_tensor({4, 5}, rng, false);
  const auto b = random_tensor({5, 3}, rng, false);
  const auto c = matmul(a, b);
  for (long i = 0; i < 4; ++i) {
    for (long j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (long k = 0; k < 5; ++k) acc += a.values()[i * 5 + k] * b.values()[k * 3 + j];
      REQUIRE(c.values()[i * 3 + j] == Approx(acc).margin(1e-12));
    }
  }
}

TEST_CASE("matmul transpose flags agree with explicit transposition") {
  Rng rng(8);
  const auto a = random_tensor({3, 4}, rng, false);
  const auto b = random_tensor({5, 4}, rng, false);
  const auto c = matmul(a, b, false, true);  // a * b^T
  for (long i = 0; i < 3; ++i) {
    for (long j = 0; j < 5; ++j) {
      double acc = 0.0;
      for (long k = 0; k < 4; ++k) acc += a.values()[i * 4 + k] * b.values()[j * 4 + k];
      REQUIRE(c.values()[i * 5 + j] == Approx(acc).margin(1e-12));
    }
  }
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  Rng rng(9);
  const auto a = random_tensor({2, 3}, rng, false);
  const auto b = random_tensor({4, 2}, rng, false);
  REQUIRE_THROWS_AS(matmul(a, b), contract_error);
}

TEST_CASE("softmax basics") {
  const auto pair = softmax_rows(Tensor<double>::from_data({2}, {0.0, 0.0}));
  REQUIRE(pair.values()[0] == Approx(0.5).margin(1e-15));
  REQUIRE(pair.values()[1] == Approx(0.5).margin(1e-15));

  const auto single = softmax_rows(Tensor<double>::from_data({1}, {3.2}));
  REQUIRE(single.values()[0] == Approx(1.0).margin(1e-15));

  Rng rng(3);
  const auto x = random_tensor({4, 9}, rng, false);
  auto shifted = x.values();
  for (auto& v : shifted) v += 11.25;
  const auto s1 = softmax_rows(x);
  const auto s2 = softmax_rows(Tensor<double>::from_data({4, 9}, shifted));
  for (long i = 0; i < s1.size(); ++i) {
    REQUIRE(s1.values()[i] == Approx(s2.values()[i]).margin(1e-12));
  }
  for (long r = 0; r < 4; ++r) {
    double row = 0.0;
    for (long c = 0; c < 9; ++c) row += s1.values()[r * 9 + c];
    REQUIRE(row == Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("softmax along axis zero normalizes columns") {
  const auto x = Tensor<double>::from_data({2, 2}, {0, 1, 0, 3});
  const auto s = softmax(x, 0);
  REQUIRE(s.values()[0] + s.values()[2] == Approx(1.0).margin(1e-12));
  REQUIRE(s.values()[1] + s.values()[3] == Approx(1.0).margin(1e-12));
}

TEST_CASE("layer_norm moments and degenerate rows") {
  const auto gamma = Tensor<double>::from_data({6}, std::vector<double>(6, 1.0));
  const auto beta = Tensor<double>::from_data({6}, std::vector<double>(6, 0.0));

  const auto flat = layer_norm(Tensor<double>::from_data({1, 6}, std::vector<double>(6, 4.2)),
                               gamma, beta);
  for (const double v : flat.values()) REQUIRE(v == Approx(0.0).margin(1e-9));

  // The eps term inside the inverse square root shifts the output variance
  // by eps / (var + eps), so the check needs a row whose variance is not
  // tiny relative to eps.
  Rng rng(5);
  const long d = 32;
  std::vector<double> row(d);
  for (auto& v : row) v = rng.uniform(-3.0, 3.0);
  const auto gamma32 = Tensor<double>::from_data({d}, std::vector<double>(d, 1.0));
  const auto beta32 = Tensor<double>::from_data({d}, std::vector<double>(d, 0.0));
  const auto y = layer_norm(Tensor<double>::from_data({1, d}, row), gamma32, beta32);
  double mean = 0.0;
  for (const double v : y.values()) mean += v;
  mean /= d;
  double var = 0.0;
  for (const double v : y.values()) var += (v - mean) * (v - mean);
  var /= d;
  REQUIRE(std::abs(mean) < 1e-9);
  REQUIRE(std::abs(var - 1.0) < 1e-6);

  const auto some_row = Tensor<double>::from_data({1, 6}, {0.4, -1.2, 2.2, 0.1, -0.7, 1.5});
  const auto fives =
      layer_norm(some_row, Tensor<double>::from_data({6}, std::vector<double>(6, 0.0)),
                 Tensor<double>::from_data({6}, std::vector<double>(6, 5.0)));
  for (const double v : fives.values()) REQUIRE(v == 5.0);
}

TEST_CASE("layer_norm is invariant to a per-row constant shift") {
  Rng rng(6);
  const auto gamma = Tensor<double>::from_data({8}, std::vector<double>(8, 1.0));
  const auto beta = Tensor<double>::from_data({8}, std::vector<double>(8, 0.0));
  const auto x = random_tensor({3, 8}, rng, false);
  auto shifted = x.values();
  for (auto& v : shifted) v += 2.75;
  const auto a = layer_norm(x, gamma, beta);
  const auto b = layer_norm(Tensor<double>::from_data({3, 8}, shifted), gamma, beta);
  for (long i = 0; i < a.size(); ++i) {
    REQUIRE(a.values()[i] == Approx(b.values()[i]).margin(1e-6));
  }
}

TEST_CASE("gelu reference points") {
  const auto v = gelu(Tensor<double>::from_data({3}, {0.0, 10.0, 1.0}));
  REQUIRE(v.values()[0] == 0.0);
  REQUIRE(v.values()[1] == Approx(10.0).margin(1e-6));
  REQUIRE(v.values()[2] == Approx(0.841345).margin(1e-5));
}

TEST_CASE("ops raise numeric_error on non-finite results") {
  const auto inf = Tensor<double>::from_data({1}, {std::numeric_limits<double>::infinity()});
  REQUIRE_THROWS_AS(scale(inf, 2.0), numeric_error);
}

TEST_CASE("backward of x squared at 3 is 6") {
  auto x = Tensor<double>::from_data({1}, {3.0}, true);
  backward(square(x));
  REQUIRE(x.grad()[0] == Approx(6.0).margin(1e-12));
}

TEST_CASE("backward rejects non-scalar losses") {
  auto x = Tensor<double>::from_data({2}, {1.0, 2.0}, true);
  REQUIRE_THROWS_AS(backward(square(x)), contract_error);
}

TEST_CASE("backward accumulates until cleared") {
  auto x = Tensor<double>::from_data({1}, {3.0}, true);
  backward(square(x));
  backward(square(x));
  REQUIRE(x.grad()[0] == Approx(12.0).margin(1e-12));
  x.zero_grad();
  REQUIRE(x.grad()[0] == 0.0);
}

TEST_CASE("matmul gradient matches the analytic formula") {
  // With loss = sum(C), dL/dC is all ones: dL/dA = ones . B^T, dL/dB = A^T . ones.
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_tensor({3, 3}, rng);
    auto b = random_tensor({3, 3}, rng);
    backward(sum(matmul(a, b)));
    for (long i = 0; i < 3; ++i) {
      for (long j = 0; j < 3; ++j) {
        double expect_a = 0.0, expect_b = 0.0;
        for (long k = 0; k < 3; ++k) {
          expect_a += b.values()[j * 3 + k];
          expect_b += a.values()[k * 3 + i];
        }
        REQUIRE(a.grad()[i * 3 + j] == Approx(expect_a).margin(1e-10));
        REQUIRE(b.grad()[i * 3 + j] == Approx(expect_b).margin(1e-10));
      }
    }
  }
}

TEST_CASE("finite differences validate every primitive op") {
  Rng rng(21);
  const int trials = 25;  // the acceptance suite runs the 100-trial sweep

  for (int t = 0; t < trials; ++t) {
    const long m = rng.uniform_int(1, 4), k = rng.uniform_int(1, 4), n = rng.uniform_int(1, 4);

    auto check = [&](auto&& fn, std::vector<Tensor<double>> inputs) {
      const auto res = testsupport::grad_check(fn, std::move(inputs));
      CAPTURE(t, res.worst_location);
      REQUIRE(res.max_rel_error < 1e-4);
    };

    check([](const std::vector<Tensor<double>>& in) { return sum(matmul(in[0], in[1])); },
          {random_tensor({m, k}, rng), random_tensor({k, n}, rng)});
    check([](const std::vector<Tensor<double>>& in) { return sum(matmul(in[0], in[1], true, false)); },
          {random_tensor({k, m}, rng), random_tensor({k, n}, rng)});
    check([](const std::vector<Tensor<double>>& in) { return sum(matmul(in[0], in[1], false, true)); },
          {random_tensor({m, k}, rng), random_tensor({n, k}, rng)});
    check([](const std::vector<Tensor<double>>& in) { return sum(matmul(in[0], in[1], true, true)); },
          {random_tensor({k, m}, rng), random_tensor({n, k}, rng)});
    check([](const std::vector<Tensor<double>>& in) { return mean(square(add(in[0], in[1]))); },
          {random_tensor({m, n}, rng), random_tensor({m, n}, rng)});
    check([](const std::vector<Tensor<double>>& in) { return mean(add_row_vector(in[0], in[1])); },
          {random_tensor({m, n}, rng), random_tensor({n}, rng)});
    check([](const std::vector<Tensor<double>>& in) { return mean(square(scale(in[0], -1.7))); },
          {random_tensor({m, n}, rng)});
    check([](const std::vector<Tensor<double>>& in) { return mean(square(gelu(in[0]))); },
          {random_tensor({m, n}, rng)});
    check([](const std::vector<Tensor<double>>& in) { return mean(square(softmax_rows(in[0]))); },
          {random_tensor({m, n + 1}, rng)});
    check([](const std::vector<Tensor<double>>& in) {
            return mean(square(layer_norm(in[0], in[1], in[2])));
          },
          {random_tensor({m, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)});
    check([](const std::vector<Tensor<double>>& in) { return mean(square(mean_over_rows(in[0]))); },
          {random_tensor({m + 1, n}, rng)});
    check([n](const std::vector<Tensor<double>>& in) {
            return mean(square(slice_cols(in[0], 1, n)));
          },
          {random_tensor({m, n + 2}, rng)});
    check([](const std::vector<Tensor<double>>& in) {
            return mean(square(concat_cols(std::vector<Tensor<double>>{in[0], in[1]})));
          },
          {random_tensor({m, n}, rng), random_tensor({m, k}, rng)});
    check([](const std::vector<Tensor<double>>& in) {
            return mean(square(gather_rows(in[0], {0, 2, 0})));
          },
          {random_tensor({3, n}, rng)});

    Matrix<double> bce_target(m, n);
    Matrix<double> ce_target(m, n + 1);
    for (long i = 0; i < bce_target.size(); ++i) bce_target.data[i] = rng.uniform01() < 0.5 ? 0.0 : 1.0;
    for (long r = 0; r < m; ++r) {
      double row_sum = 0.0;
      for (long c = 0; c < n + 1; ++c) {
        ce_target(r, c) = rng.uniform(0.05, 1.0);
        row_sum += ce_target(r, c);
      }
      for (long c = 0; c < n + 1; ++c) ce_target(r, c) /= row_sum;
    }
    check([&bce_target](const std::vector<Tensor<double>>& in) {
            return bce_with_logits(in[0], bce_target);
          },
          {random_tensor({m, n}, rng)});
    check([&ce_target](const std::vector<Tensor<double>>& in) {
            return softmax_cross_entropy(in[0], ce_target);
          },
          {random_tensor({m, n + 1}, rng)});
  }
}

TEST_CASE("identical inputs produce bit-identical op results") {
  Rng rng_a(99), rng_b(99);
  const auto xa = random_tensor({6, 7}, rng_a, false);
  const auto xb = random_tensor({6, 7}, rng_b, false);
  REQUIRE(xa.values() == xb.values());
  const auto wa = random_tensor({7, 5}, rng_a, false);
  const auto wb = random_tensor({7, 5}, rng_b, false);
  const auto ya = softmax_rows(gelu(matmul(xa, wa)));
  const auto yb = softmax_rows(gelu(matmul(xb, wb)));
  REQUIRE(ya.values() == yb.values());
}
