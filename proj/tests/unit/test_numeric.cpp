#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "sbat/error.hpp"
#include "sbat/flops.hpp"
#include "sbat/ops.hpp"
#include "support/gradcheck.hpp"

using namespace sbat;
using sbat::testing::grad_check;
using sbat::testing::random_tensor;

namespace {

// Plain triple loop, independent of the gemm kernels.
std::vector<double> naive_product(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

}  // namespace

TEST_CASE("matmul examples") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor::from({2, 2}, {5, 6, 7, 8});
  auto c = matmul(eye, b);
  CHECK(std::vector<double>(c.values().begin(), c.values().end()) == std::vector<double>{5, 6, 7, 8});

  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto d = matmul(a, b);
  CHECK(naive_product(a, b) == std::vector<double>{19, 22, 43, 50});
  CHECK(std::vector<double>(d.values().begin(), d.values().end()) == std::vector<double>{19, 22, 43, 50});

  std::mt19937_64 rng(3);
  auto z = matmul(Tensor::zeros({2, 3}), random_tensor({3, 4}, rng));
  CHECK(z.shape() == Shape{2, 4});
  for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("matmul agrees with the triple-loop oracle on random shapes") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> ext(1, 16);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t m = ext(rng), k = ext(rng), n = ext(rng);
    auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    auto c = matmul(a, b);
    auto expect = naive_product(a, b);
    CHECK(sbat::testing::max_abs_diff(c.values(), expect) < 1e-13);
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
}

TEST_CASE("masked_softmax examples") {
  auto y = masked_softmax(Tensor::from({2}, {0, 0}), Mask::all(2));
  CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(0.5).epsilon(1e-15));

  auto y2 = masked_softmax(Tensor::from({3}, {1, 1, 1e6}), Mask::from(1, 3, {1, 1, 0}));
  CHECK(y2[0] == 0.5);
  CHECK(y2[1] == 0.5);
  CHECK(y2[2] == 0.0);

  // e^0 / (e^0 + e^{ln 3}) = 1/4
  auto y3 = masked_softmax(Tensor::from({2}, {0, std::log(3.0)}), Mask::all(2));
  CHECK(std::abs(y3[0] - 0.25) < 1e-15);
  CHECK(std::abs(y3[1] - 0.75) < 1e-15);
}

TEST_CASE("masked_softmax rejects a fully masked row") {
  CHECK_THROWS_AS(masked_softmax(Tensor::from({2}, {1, 2}), Mask::from(1, 2, {0, 0})), DegenerateError);
}

TEST_CASE("masked_softmax rows are distributions and ignore masked values") {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution coin(0.6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t groups = 3, rows_per = 4, n = 7;
    std::vector<std::uint8_t> valid(groups * n);
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t j = 0; j < n; ++j) valid[g * n + j] = coin(rng);
      valid[g * n + trial % n] = 1;
    }
    auto mask = Mask::from(groups, n, valid);
    auto logits = random_tensor({groups * rows_per, n}, rng, -5, 5);
    auto y = masked_softmax(logits, mask);
    for (std::size_t r = 0; r < groups * rows_per; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = y[r * n + j];
        if (!mask.at(r / rows_per, j)) {
          CHECK(v == 0.0);
        } else {
          CHECK(v > 0.0);
        }
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    auto perturbed = logits.detach();
    auto pv = perturbed.mutable_values();
    for (std::size_t r = 0; r < groups * rows_per; ++r)
      for (std::size_t j = 0; j < n; ++j)
        if (!mask.at(r / rows_per, j)) pv[r * n + j] = 1e3 * (j + 1);
    auto y2 = masked_softmax(perturbed, mask);
    CHECK(std::equal(y.values().begin(), y.values().end(), y2.values().begin()));
  }
}

TEST_CASE("masked_mean examples") {
  auto a = masked_mean(Tensor::from({2, 2}, {2, 4, 6, 8}), Mask::all(2));
  CHECK(a.shape() == Shape{2});
  CHECK(a[0] == 4.0);
  CHECK(a[1] == 6.0);

  auto b = masked_mean(Tensor::from({2, 2}, {2, 4, 999, 999}), Mask::from(1, 2, {1, 0}));
  CHECK(b[0] == 2.0);
  CHECK(b[1] == 4.0);

  auto c = masked_mean(Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1}), Mask::from(1, 3, {1, 1, 0}));
  CHECK(c[0] == 0.5);
  CHECK(c[1] == 0.5);

  CHECK_THROWS_AS(masked_mean(Tensor::from({1, 2}, {1, 2}), Mask::from(1, 1, {0})), DegenerateError);
}

TEST_CASE("masked_mean ignores masked rows bit for bit") {
  std::mt19937_64 rng(9);
  auto x = random_tensor({4, 5, 3}, rng);
  auto mask = Mask::from(4, 5, {1, 1, 0, 0, 0, 1, 1, 1, 1, 1, 1, 0, 1, 0, 1, 0, 0, 0, 0, 1});
  auto y = masked_mean(x, mask);
  auto x2 = x.detach();
  auto v = x2.mutable_values();
  for (std::size_t g = 0; g < 4; ++g)
    for (std::size_t r = 0; r < 5; ++r)
      if (!mask.at(g, r))
        for (std::size_t j = 0; j < 3; ++j) v[(g * 5 + r) * 3 + j] = -77.0;
  auto y2 = masked_mean(x2, mask);
  CHECK(std::equal(y.values().begin(), y.values().end(), y2.values().begin()));
}

TEST_CASE("layer_norm examples") {
  auto ones = Tensor::full({3}, 1.0), zeros = Tensor::zeros({3});
  auto c = layer_norm(Tensor::full({3}, 7.5), ones, zeros);
  for (double v : c.values()) CHECK(v == 0.0);

  auto two = layer_norm(Tensor::from({2}, {-1, 1}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-300);
  CHECK(two[0] == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(two[1] == doctest::Approx(1.0).epsilon(1e-15));

  // Scalar oracle: mean 2, population variance 8/3.
  const double expect = 2.0 / std::sqrt(8.0 / 3.0 + 1e-5);
  auto y = layer_norm(Tensor::from({3}, {0, 2, 4}), ones, zeros, 1e-5);
  CHECK(std::abs(y[0] + expect) < 1e-14);
  CHECK(std::abs(y[1]) < 1e-14);
  CHECK(std::abs(y[2] - expect) < 1e-14);
  CHECK(std::abs(expect - 1.2247) < 1e-4);
}

TEST_CASE("gelu examples") {
  auto y = gelu(Tensor::from({4}, {0.0, 1.0, 30.0, -30.0}));
  CHECK(y[0] == 0.0);
  CHECK(std::abs(y[1] - 0.8412) < 1e-3);
  CHECK(std::abs(y[2] - 30.0) < 1e-9);
  CHECK(std::abs(y[3]) < 1e-9);
}

TEST_CASE("backward examples") {
  auto w = Tensor::from({2, 2}, {1, -2, 3, 0.5}, true);
  backward(sum(w));
  for (double g : w.grad()) CHECK(g == 1.0);

  w.zero_grad();
  backward(scale(sum(mul(w, w)), 0.5));
  for (std::size_t i = 0; i < 4; ++i) CHECK(w.grad()[i] == w[i]);

  // No reset between calls: gradients accumulate.
  backward(scale(sum(mul(w, w)), 0.5));
  for (std::size_t i = 0; i < 4; ++i) CHECK(w.grad()[i] == 2.0 * w[i]);

  CHECK_THROWS_AS(backward(w), ContractError);
}

TEST_CASE("gradient soundness on random composite expressions") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> ext(1, 16);
  std::bernoulli_distribution coin(0.7);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t m = ext(rng), k = ext(rng), n = std::max<std::size_t>(2, ext(rng));
    auto a = random_tensor({m, k}, rng, -1, 1, true);
    auto b = random_tensor({k, n}, rng, -1, 1, true);
    auto gamma = random_tensor({n}, rng, 0.5, 1.5, true);
    auto beta = random_tensor({n}, rng, -0.5, 0.5, true);
    auto c = random_tensor({m, n}, rng, -1, 1, true);
    auto target = random_tensor({m, n}, rng, 3, 4);
    std::vector<std::uint8_t> valid(n);
    for (auto& v : valid) v = coin(rng);
    valid[0] = 1;
    const auto mask = Mask::from(1, n, valid);
    auto loss_fn = [&] {
      auto h = layer_norm(matmul(a, b), gamma, beta);
      auto s = masked_softmax(mul(gelu(h), c), mask);
      auto pooled = masked_mean(add(s, h), Mask::all(m));
      auto e = concat_last(reshape(pooled, {1, n}), reshape(pooled, {1, n}));
      return add(mae_loss(s, target), mean(mul(e, e)));
    };
    auto r = grad_check({a, b, gamma, beta, c}, loss_fn);
    INFO("trial " << trial << " shapes " << m << "x" << k << "x" << n);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("gradient soundness through batched attention pieces") {
  std::mt19937_64 rng(77);
  const std::size_t g = 3, m = 5, d = 6, heads = 2;
  auto x = random_tensor({g, m, d}, rng, -1, 1, true);
  auto src = random_tensor({g * m, d}, rng, -1, 1, true);
  std::vector<std::int64_t> idx = {4, -1, 0, 2, 2, 13, 7, -1, 1, 9, 3, 5, 6, 14, 11};
  auto mask = Mask::from(g, m, {1, 1, 1, 0, 1, 1, 1, 1, 1, 1, 0, 1, 1, 0, 0});
  std::vector<std::uint8_t> keep(mask.valid.begin(), mask.valid.end());
  auto loss_fn = [&] {
    auto q = split_heads(x, heads);
    auto k = split_heads(reshape(gather_rows(src, idx), {g, m, d}), heads);
    auto logits = bmm(reshape(q, {g * heads, m, d / heads}), reshape(k, {g * heads, m, d / heads}), true);
    auto alpha = masked_softmax(scale(logits, 0.7), mask);
    auto out = merge_heads(reshape(bmm(alpha, reshape(k, {g * heads, m, d / heads})), {g, heads, m, d / heads}));
    auto z = zero_rows(reshape(out, {g * m, d}), keep);
    auto pooled = masked_mean(reshape(z, {g, m, d}), mask);
    return sum(mul(repeat_rows(pooled, 2), repeat_rows(pooled, 2)));
  };
  auto r = grad_check({x, src}, loss_fn);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("flop counter reports exact matmul counts") {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 5}, rng), b = random_tensor({5, 7}, rng);
  Tensor plain = matmul(a, b);
  {
    FlopScope scope;
    Tensor counted = matmul(a, b);
    CHECK(flop_counter().total().mults == 3u * 7u * 5u);
    CHECK(flop_counter().total().adds == 3u * 7u * 4u);
    CHECK(std::equal(plain.values().begin(), plain.values().end(), counted.values().begin()));
    {
      FlopCategory cat("attention");
      bmm(random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 6}, rng));
    }
    CHECK(flop_counter().category("attention").mults == 2u * 3u * 6u * 4u);
    CHECK(flop_counter().category("linear").mults == 105u);
    auto report = flop_counter().report();
    CHECK(report.at("total.mults") == 105u + 144u);
  }
  CHECK_FALSE(flop_counter().enabled());
  const auto before = flop_counter().total();
  matmul(a, b);
  CHECK(flop_counter().total() == before);
}

TEST_CASE("non-finite values are reported, not propagated") {
  auto big = Tensor::from({1}, {1e300});
  CHECK_THROWS_AS(scale(big, 1e300), NumericError);
  set_finite_checks(false);
  CHECK(std::isinf(scale(big, 1e300)[0]));
  set_finite_checks(true);
}

TEST_CASE("no-grad mode records nothing") {
  auto w = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = sum(w);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("identical inputs give bit-identical outputs") {
  auto run = [] {
    std::mt19937_64 rng(42);
    auto a = random_tensor({6, 6}, rng), b = random_tensor({6, 6}, rng);
    auto y = masked_softmax(layer_norm(gelu(matmul(a, b)), Tensor::full({6}, 1.0), Tensor::zeros({6})), Mask::all(6));
    return std::vector<double>(y.values().begin(), y.values().end());
  };
  CHECK(run() == run());
}

TEST_CASE("gather_rows picks rows and zero-fills") {
  auto x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  std::vector<std::int64_t> idx = {2, -1, 0, 2};
  auto y = gather_rows(x, idx);
  CHECK(y.shape() == Shape{4, 2});
  CHECK(std::vector<double>(y.values().begin(), y.values().end()) == std::vector<double>{5, 6, 0, 0, 1, 2, 5, 6});
  std::vector<std::int64_t> bad = {3};
  CHECK_THROWS_AS(gather_rows(x, bad), DimensionError);
}
