#include <cmath>

#include "doctest.h"
#include "hplab/rng.hpp"
#include "hplab/tensor.hpp"

using namespace hplab;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0,
                     bool requires_grad = false) {
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (double& v : data) v = rng.uniform_in(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST_CASE("shape validation") {
  CHECK_THROWS_AS(Tensor::from_data({0}, {}, false), ShapeError);
  CHECK_THROWS_AS(Tensor::from_data({2, -1}, {1, 2}, false), ShapeError);
  CHECK_THROWS_AS(Tensor::from_data({3}, {1.0, 2.0}, false), ShapeError);
  CHECK_THROWS_AS(Tensor::from_data({2}, {1.0, INFINITY}, false), NumericError);
  CHECK_THROWS_AS(Tensor::from_data({2}, {1.0, NAN}, false), NumericError);
}

TEST_CASE("softmax basics") {
  Tensor x = Tensor::from_data({2}, {0.0, 0.0});
  Tensor y = softmax_rows(x);
  CHECK(y.at(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.at(1) == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor m = random_tensor({4, 7}, rng, -30.0, 30.0);
    Tensor s = softmax_rows(m);
    for (int r = 0; r < 4; ++r) {
      double row_sum = 0.0;
      for (int c = 0; c < 7; ++c) {
        double v = s.at(r * 7 + c);
        CHECK(v >= 0.0);
        row_sum += v;
      }
      CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("matmul identity") {
  Rng rng(5);
  Tensor a = random_tensor({3, 3}, rng);
  std::vector<double> eye(9, 0.0);
  eye[0] = eye[4] = eye[8] = 1.0;
  Tensor identity = Tensor::from_data({3, 3}, std::move(eye));
  Tensor out = matmul(identity, a);
  for (int i = 0; i < 9; ++i) CHECK(out.at(i) == a.at(i));

  CHECK_THROWS_AS(matmul(a, Tensor::zeros({4, 2})), ShapeError);
}

TEST_CASE("cross entropy of uniform prediction is ln(num classes)") {
  Tensor logits = Tensor::zeros({1, 4});
  for (int label = 0; label < 4; ++label) {
    Tensor loss = cross_entropy_rows(logits, std::span<const int>(&label, 1));
    CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  int bad = 7;
  CHECK_THROWS_AS(cross_entropy_rows(logits, std::span<const int>(&bad, 1)),
                  DomainError);
}

TEST_CASE("backward on linear and quadratic forms") {
  {
    Tensor x = Tensor::from_data({5}, {1, 2, 3, 4, 5}, true);
    Tape tape;
    Tensor loss = sum(x);
    tape.backward(loss);
    for (int i = 0; i < 5; ++i) CHECK(x.grad()[i] == 1.0);
  }
  {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tape tape;
    Tensor loss = sum(mul(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
  }
}

TEST_CASE("backward contract errors") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  Tape tape;
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);  // non-scalar loss
  Tensor loss = sum(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ContractError);  // repeated backward
  tape.reset();
  CHECK_THROWS_AS(tape.backward(loss), ContractError);  // empty tape
}

TEST_CASE("two-layer MLP gradients match finite differences") {
  Rng rng(17);
  Tensor w1 = random_tensor({4, 6}, rng, -1.0, 1.0);
  Tensor w2 = random_tensor({6, 1}, rng, -1.0, 1.0);
  Tensor x0 = random_tensor({1, 4}, rng, -1.5, 1.5);
  auto f = [&](const Tensor& x) {
    Tensor hidden = sigmoid(matmul(x, w1));
    return sum(matmul(hidden, w2));
  };
  CHECK(finite_difference_check(f, x0, 1e-5) < 1e-6);
}

TEST_CASE("finite difference oracle behaviour") {
  Rng rng(23);
  Tensor x = random_tensor({6}, rng);
  CHECK(finite_difference_check([](const Tensor& t) { return sum(t); }, x, 1e-5) <
        1e-9);

  Tensor probe = random_tensor({5}, rng);
  Tensor direction = random_tensor({5}, rng);
  auto softmax_dot = [&](const Tensor& t) {
    return sum(mul(softmax_rows(t), direction));
  };
  CHECK(finite_difference_check(softmax_dot, probe, 1e-5) < 1e-6);

  CHECK_THROWS_AS(finite_difference_check(softmax_dot, probe, 0.0), DomainError);
  CHECK_THROWS_AS(finite_difference_check(softmax_dot, probe, -1e-5), DomainError);

  // Deliberately wrong backward rule: value x^2 but claimed derivative 3x.
  auto faulty = [](const Tensor& t) {
    std::vector<double> values(t.data().begin(), t.data().end());
    std::vector<double> claimed(t.data().begin(), t.data().end());
    for (double& v : values) v = v * v;
    for (double& d : claimed) d = 3.0 * d;
    return sum(map_with_grad(t, std::move(values), std::move(claimed)));
  };
  Tensor away_from_zero = random_tensor({4}, rng, 0.5, 2.0);
  CHECK(finite_difference_check(faulty, away_from_zero, 1e-5) > 1e-2);
}

TEST_CASE("every primitive passes a gradient check") {
  Rng rng(31);
  const double h = 1e-5;
  const double tol = 1e-5;

  auto check = [&](const char* name, const std::function<Tensor(const Tensor&)>& f,
                   Tensor x) {
    double err = finite_difference_check(f, x, h);
    INFO(name);
    CHECK(err < tol);
  };

  Tensor other = random_tensor({3, 4}, rng);
  check("add", [&](const Tensor& t) { return sum(add(t, other)); },
        random_tensor({3, 4}, rng));
  check("sub", [&](const Tensor& t) { return sum(sub(other, t)); },
        random_tensor({3, 4}, rng));
  check("mul", [&](const Tensor& t) { return sum(mul(t, other)); },
        random_tensor({3, 4}, rng));
  Tensor rhs = random_tensor({4, 2}, rng);
  check("matmul-lhs", [&](const Tensor& t) { return sum(matmul(t, rhs)); },
        random_tensor({3, 4}, rng));
  Tensor lhs = random_tensor({2, 3}, rng);
  check("matmul-rhs", [&](const Tensor& t) { return sum(matmul(lhs, t)); },
        random_tensor({3, 4}, rng));
  check("transpose", [&](const Tensor& t) { return sum(mul(transpose(t), rhs)); },
        random_tensor({2, 4}, rng));
  check("exp", [&](const Tensor& t) { return sum(vexp(t)); },
        random_tensor({5}, rng));
  check("log", [&](const Tensor& t) { return sum(vlog(t)); },
        random_tensor({5}, rng, 0.2, 2.2));
  check("log1m_clamped", [&](const Tensor& t) { return sum(log1m_clamped(t)); },
        random_tensor({5}, rng, -2.0, 0.8));
  check("relu", [&](const Tensor& t) { return sum(relu(t)); },
        random_tensor({6}, rng, 0.1, 2.0));
  check("sigmoid", [&](const Tensor& t) { return sum(sigmoid(t)); },
        random_tensor({6}, rng));
  check("mean", [&](const Tensor& t) { return mean(t); }, random_tensor({7}, rng));
  check("scale", [&](const Tensor& t) { return sum(scale(t, -1.7)); },
        random_tensor({5}, rng));
  check("shift", [&](const Tensor& t) { return sum(mul(shift(t, 0.3), other)); },
        random_tensor({3, 4}, rng));
  Tensor gate = Tensor::scalar(0.7);
  check("scale_by-base", [&](const Tensor& t) { return sum(scale_by(t, gate)); },
        random_tensor({5}, rng));
  Tensor base = random_tensor({5}, rng);
  check("scale_by-scalar", [&](const Tensor& t) { return sum(scale_by(base, t)); },
        random_tensor({1}, rng));
  check("select", [&](const Tensor& t) { return select(t, 2); },
        random_tensor({5}, rng));
  check("softmax", [&](const Tensor& t) { return sum(mul(softmax_rows(t), other)); },
        random_tensor({3, 4}, rng));
  Tensor gain = random_tensor({4}, rng, 0.5, 1.5);
  Tensor bias = random_tensor({4}, rng, -0.5, 0.5);
  check("layer_norm-x",
        [&](const Tensor& t) {
          return sum(mul(layer_norm_rows(t, gain, bias), other));
        },
        random_tensor({3, 4}, rng));
  Tensor ln_x = random_tensor({3, 4}, rng);
  check("layer_norm-gain",
        [&](const Tensor& t) {
          return sum(mul(layer_norm_rows(ln_x, t, bias), other));
        },
        random_tensor({4}, rng, 0.5, 1.5));
  check("layer_norm-bias",
        [&](const Tensor& t) {
          return sum(mul(layer_norm_rows(ln_x, gain, t), other));
        },
        random_tensor({4}, rng, -0.5, 0.5));
  std::vector<int> ids = {2, 0, 2, 1};
  Tensor emb_weight = random_tensor({4, 3}, rng);
  check("embedding",
        [&](const Tensor& t) {
          Tensor rows = embedding_lookup(t, ids);
          return sum(mul(rows, mul(rows, rows)));
        },
        emb_weight);
  std::vector<int> labels = {1, 3, 0};
  check("cross_entropy",
        [&](const Tensor& t) { return cross_entropy_rows(t, labels); },
        random_tensor({3, 4}, rng));
  Tensor tail = random_tensor({2, 4}, rng);
  Tensor cat_w = random_tensor({5, 4}, rng);
  check("concat-rows",
        [&](const Tensor& t) { return sum(mul(concat_rows(t, tail), cat_w)); },
        random_tensor({3, 4}, rng));
  Tensor row_base = random_tensor({3, 4}, rng);
  check("add_rowvec-matrix",
        [&](const Tensor& t) { return sum(mul(add_rowvec(t, bias), other)); },
        random_tensor({3, 4}, rng));
  check("add_rowvec-vector",
        [&](const Tensor& t) { return sum(mul(add_rowvec(row_base, t), other)); },
        random_tensor({4}, rng));
}

TEST_CASE("straight-through top-k is the documented wrong-gradient op") {
  Rng rng(41);
  Tensor r = random_tensor({6}, rng);
  Tensor weights = random_tensor({6}, rng, 0.5, 1.5);
  auto f = [&](const Tensor& t) {
    return sum(mul(straight_through_top_k(t, 2), weights));
  };
  // Values are piecewise constant, so the identity backward disagrees with
  // the difference quotient almost everywhere.
  CHECK(finite_difference_check(f, r, 1e-5) > 1e-2);
  Tensor mask = straight_through_top_k(r, 2);
  double total = 0.0;
  for (double v : mask.data()) total += v;
  CHECK(total == 2.0);
}

TEST_CASE("forward results are deterministic") {
  Rng rng_a(99), rng_b(99);
  Tensor a1 = random_tensor({8, 8}, rng_a);
  Tensor b1 = random_tensor({8, 8}, rng_a);
  Tensor a2 = random_tensor({8, 8}, rng_b);
  Tensor b2 = random_tensor({8, 8}, rng_b);
  Tensor y1 = softmax_rows(matmul(a1, b1));
  Tensor y2 = softmax_rows(matmul(a2, b2));
  for (int64_t i = 0; i < y1.size(); ++i) CHECK(y1.at(i) == y2.at(i));
}

TEST_CASE("non-finite propagation is rejected at the operation boundary") {
  Tensor big = Tensor::full({3}, 800.0);
  CHECK_THROWS_AS(vexp(big), NumericError);       // overflow to inf
  Tensor negative = Tensor::full({2}, -1.0);
  CHECK_THROWS_AS(vlog(negative), NumericError);  // nan
  Tensor zero = Tensor::zeros({2});
  CHECK_THROWS_AS(vlog(zero), NumericError);      // -inf
}

TEST_CASE("gradients accumulate across backward passes on fresh tapes") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  for (int pass = 0; pass < 2; ++pass) {
    Tape tape;
    Tensor loss = sum(x);
    tape.backward(loss);
  }
  CHECK(x.grad()[0] == 2.0);
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}
