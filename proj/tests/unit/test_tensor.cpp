#include <cmath>
#include <vector>

#include "doctest.h"
#include "ratnet/tensor.hpp"

using namespace ratnet;

TEST_CASE("cosine similarity on hand-evaluated pairs") {
  const Tensor a = Tensor::matrix(1, 2, {1, 0});
  CHECK(cosine_similarity(a, Tensor::matrix(1, 2, {1, 0})).item() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cosine_similarity(a, Tensor::matrix(1, 2, {0, 1})).item() == 0.0);
  CHECK(cosine_similarity(a, Tensor::matrix(1, 2, {1, 1})).item() == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("cosine of a zero row is a degenerate-vector error") {
  CHECK_THROWS_AS(cosine_similarity(Tensor::matrix(1, 2, {0, 0}), Tensor::matrix(1, 2, {1, 0})), DegenerateVectorError);
  CHECK_THROWS_AS(l2_normalize(Tensor::matrix(2, 2, {1, 0, 0, 0})), DegenerateVectorError);
}

TEST_CASE("shape mismatches raise ShapeError") {
  CHECK_THROWS_AS(matmul(Tensor::matrix(2, 3, std::vector<double>(6, 1)), Tensor::matrix(2, 3, std::vector<double>(6, 1))),
                  ShapeError);
  CHECK_THROWS_AS(add(Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::vector({1, 2, 3})), ShapeError);
}

TEST_CASE("gradient of x*x at 3 is 6") {
  Tensor x = Tensor::scalar(3.0, true);
  backward(mul(x, x));
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("cross-entropy gradient at uniform logits is softmax minus one-hot") {
  const std::size_t C = 5;
  Tensor logits = Tensor::matrix(1, C, std::vector<double>(C, 0.3), true);
  const std::vector<std::size_t> label{2};
  backward(cross_entropy(logits, label));
  for (std::size_t c = 0; c < C; ++c)
    CHECK(logits.grad()[c] == doctest::Approx(1.0 / C - (c == 2 ? 1.0 : 0.0)).epsilon(1e-14));
}

TEST_CASE("gradients accumulate across uses of a leaf and zero_grad clears them") {
  Tensor x = Tensor::vector({1.0, -2.0}, true);
  backward(sum(add(x, x)));
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);
  x.zero_grad();
  CHECK((!x.has_grad() || x.grad()[0] == 0.0));
}

TEST_CASE("no-grad guard stops recording") {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor y;
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    y = mul(x, x);
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad_check on exact quadratic") {
  Tensor x = Tensor::scalar(3.0, true);
  std::vector<Tensor> params{x};
  CHECK(grad_check([&] { return mul(x, x); }, params, 1e-5) <= 1e-6);
}

TEST_CASE("softmax first-entry gradient sums to zero on symmetric input") {
  Tensor x = Tensor::matrix(1, 4, {0.5, 0.5, 0.5, 0.5}, true);
  backward(select_col(softmax_with_temperature(x, 0.7), 0));
  double total = 0.0;
  for (double g : x.grad()) total += g;
  CHECK(std::abs(total) <= 1e-15);
  std::vector<Tensor> params{x};
  CHECK(grad_check([&] { return sum(select_col(softmax_with_temperature(x, 0.7), 0)); }, params, 1e-5) <= 1e-6);
}

TEST_CASE("grad_check covers every op on a mixed graph") {
  Rng rng(11);
  auto rnd = [&](std::size_t r, std::size_t c) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.normal();
    return Tensor::matrix(r, c, v, true);
  };
  Tensor a = rnd(3, 4), b = rnd(4, 2), c = rnd(3, 2), d = rnd(1, 2);
  std::vector<Tensor> params{a, b, c, d};
  const std::vector<std::size_t> labels{0, 1, 1};
  auto loss = [&] {
    Tensor h = ratnet::tanh(add(matmul(a, b), d));
    Tensor g = concat(h, mul(c, c));
    Tensor s = softmax_with_temperature(cosine_similarity(g, transpose(transpose(g))), 0.5);
    Tensor t = add(mean(rowwise_cosine(h, c)), frobenius_norm_squared(sub(s, scale(s, 0.5))));
    Tensor u = add(cross_entropy(shift(h, 0.1), labels), mean_squared_terms(l2_normalize(c)));
    return add(add(t, u), sum(row_sum(mul(repeat_rows(select_row(h, 1), 3), relu(shift(c, 5.0))))));
  };
  CHECK(grad_check(loss, params, 1e-5) <= 1e-6);
}

TEST_CASE("sgd step arithmetic") {
  Tensor p = Tensor::scalar(1.0, true);
  backward(p);
  std::vector<Tensor> ps{p};
  sgd_step(ps, {0.1, 1});
  CHECK(p.item() == doctest::Approx(0.9).epsilon(1e-15));

  Tensor q = Tensor::vector({2.0, -2.0}, true);
  backward(sum(mul(q, Tensor::vector({1.0, -1.0}))));
  std::vector<Tensor> qs{q};
  sgd_step(qs, {0.5, 1});
  CHECK(q.data()[0] == 1.5);
  CHECK(q.data()[1] == -1.5);

  Tensor z = Tensor::vector({4.0}, true);
  backward(sum(scale(z, 0.0)));
  std::vector<Tensor> zs{z};
  sgd_step(zs, {0.5, 1});
  CHECK(z.data()[0] == 4.0);
}

TEST_CASE("sgd rejects a non-positive learning rate") {
  CHECK_THROWS_AS(SgdConfig({0.0, 8}).validate(), Error);
  CHECK_THROWS_AS(SgdConfig({0.1, 0}).validate(), Error);
}

TEST_CASE("clone is independent, handles alias") {
  Tensor a = Tensor::vector({1.0, 2.0});
  Tensor alias = a;
  Tensor copy = a.clone();
  alias.mutable_data()[0] = 5.0;
  CHECK(a.data()[0] == 5.0);
  CHECK(copy.data()[0] == 1.0);
}
