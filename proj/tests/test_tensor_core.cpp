#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "tsrm/error.hpp"
#include "tsrm/ops.hpp"

using namespace tsrm;
using tsrm::testing::gradcheck;
using tsrm::testing::random_tensor;

TEST_CASE("matmul identity and 2x2 product") {
  Tape tape;
  Var a = tape.constant(Tensor::from({2, 2}, {1, 2, 3, 4}));
  Var eye = tape.constant(Tensor::from({2, 2}, {1, 0, 0, 1}));
  Var b = tape.constant(Tensor::from({2, 2}, {5, 6, 7, 8}));
  CHECK(ops::matmul(a, eye).value() == a.value());
  CHECK(ops::matmul(a, b).value() == Tensor::from({2, 2}, {19, 22, 43, 50}));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({2, 3}));
  try {
    ops::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("backward of sum(A*B) with B = ones gives all-k gradient") {
  const std::size_t m = 3, k = 4, n = 5;
  Rng rng(1);
  Tape tape;
  Var a = tape.leaf(random_tensor({m, k}, rng));
  Var b = tape.constant(Tensor::ones({k, n}));
  tape.backward(ops::sum(ops::matmul(a, b)));
  for (auto g : a.grad().data()) CHECK(g == doctest::Approx(static_cast<double>(n)));

  auto r = gradcheck([](Tape&, const std::vector<Var>& v) { return ops::sum(ops::matmul(v[0], v[1])); },
                     {random_tensor({m, k}, rng), Tensor::ones({k, n})});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("matmul transposes and batching match finite differences") {
  Rng rng(2);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      const Shape as = ta ? Shape{2, 4, 3} : Shape{2, 3, 4};
      const Shape bs = tb ? Shape{2, 5, 4} : Shape{2, 4, 5};
      Tensor w = random_tensor({2, 3, 5}, rng);
      auto r = gradcheck(
          [&](Tape& t, const std::vector<Var>& v) {
            return ops::sum(ops::mul(ops::matmul(v[0], v[1], ta, tb), t.constant(w)));
          },
          {random_tensor(as, rng), random_tensor(bs, rng)});
      CHECK(r.max_rel_error < 1e-6);
    }
  }
  // shared right operand
  Tensor w = random_tensor({2, 3, 5}, rng);
  auto r = gradcheck(
      [&](Tape& t, const std::vector<Var>& v) {
        return ops::sum(ops::mul(ops::matmul(v[0], v[1]), t.constant(w)));
      },
      {random_tensor({2, 3, 4}, rng), random_tensor({4, 5}, rng)});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("elementwise arithmetic") {
  Tape tape;
  Var a = tape.constant(Tensor::from({2}, {1, 2}));
  Var b = tape.constant(Tensor::from({2}, {3, 4}));
  CHECK(ops::add(a, b).value() == Tensor::from({2}, {4, 6}));
  CHECK(ops::mul(a, real(1)).value() == a.value());
  CHECK(ops::sub(a, a).value() == Tensor::zeros({2}));
  Var z = tape.constant(Tensor::from({2}, {1, 0}));
  CHECK_THROWS_AS(ops::div(a, z), NumericError);
  Var wrong = tape.constant(Tensor({3}));
  CHECK_THROWS_AS(ops::add(a, wrong), DimensionError);
}

TEST_CASE("elementwise gradients with broadcasting") {
  Rng rng(3);
  for (int kind = 0; kind < 4; ++kind) {
    for (const Shape& bshape : {Shape{2, 3, 4}, Shape{3, 4}, Shape{4}, Shape{1}}) {
      Tensor b = random_tensor(bshape, rng);
      for (auto& v : b.data()) v += v >= 0 ? real(0.5) : real(-0.5);
      auto r = gradcheck(
          [kind](Tape&, const std::vector<Var>& v) {
            Var out;
            switch (kind) {
              case 0: out = ops::add(v[0], v[1]); break;
              case 1: out = ops::sub(v[0], v[1]); break;
              case 2: out = ops::mul(v[0], v[1]); break;
              default: out = ops::div(v[0], v[1]); break;
            }
            return ops::sum(ops::square(out));
          },
          {random_tensor({2, 3, 4}, rng), b});
      CHECK(r.max_rel_error < 1e-6);
    }
  }
}

TEST_CASE("reductions") {
  Tape tape;
  Var a = tape.leaf(Tensor::from({3}, {1, 2, 3}));
  CHECK(ops::sum(a).value()[0] == 6);
  Var c = tape.constant(Tensor({7}, 2.5));
  CHECK(ops::mean(c).value()[0] == 2.5);
  Var m = ops::mean(a);
  tape.backward(m);
  for (auto g : a.grad().data()) CHECK(g == doctest::Approx(1.0 / 3.0));

  Tape t2;
  Var x = t2.constant(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  CHECK(ops::sum(x, 0).value() == Tensor::from({3}, {5, 7, 9}));
  CHECK(ops::mean(x, 1).value() == Tensor::from({2}, {2, 5}));
  CHECK_THROWS_AS(ops::sum(x, 2), DimensionError);

  Rng rng(4);
  auto r = gradcheck(
      [](Tape&, const std::vector<Var>& v) { return ops::sum(ops::square(ops::mean(v[0], 1))); },
      {random_tensor({3, 4, 2}, rng)});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("reductions are order independent") {
  Rng rng(5);
  Tensor t = random_tensor({20000}, rng, 1e3);
  std::vector<real> v(t.data().begin(), t.data().end());
  const real forward = compensated_sum(v);
  std::shuffle(v.begin(), v.end(), rng.engine());
  const real shuffled = compensated_sum(v);
  CHECK(std::abs(forward - shuffled) <= 1e-12 * std::max<real>(1, std::abs(forward)));
}

TEST_CASE("concat and split are exact inverses") {
  Rng rng(6);
  Tape tape;
  Var a = tape.leaf(random_tensor({2, 4}, rng));
  Var b = tape.leaf(random_tensor({3, 4}, rng));
  Var c = ops::concat({a, b}, 0);
  CHECK(c.shape() == Shape{5, 4});
  auto parts = ops::split(c, {2, 3}, 0);
  CHECK(parts[0].value() == a.value());
  CHECK(parts[1].value() == b.value());
  CHECK(ops::concat({a}, 0).value() == a.value());
  CHECK_THROWS_AS(ops::split(c, {2, 2}, 0), DimensionError);
  CHECK_THROWS_AS(ops::concat({a, tape.constant(Tensor({3, 5}))}, 0), DimensionError);

  // split then concat along a middle axis
  Var x = tape.constant(random_tensor({2, 5, 3}, rng));
  auto xs = ops::split(x, {1, 4}, 1);
  CHECK(ops::concat(xs, 1).value() == x.value());
}

TEST_CASE("concat gradient slices flow only to their source") {
  Rng rng(7);
  Tape tape;
  Var a = tape.leaf(random_tensor({2, 3}, rng));
  Var b = tape.leaf(random_tensor({2, 2}, rng));
  Var c = ops::concat({a, b}, 1);
  auto parts = ops::split(c, {3, 2}, 1);
  tape.backward(ops::sum(parts[1]));
  if (a.has_grad()) {
    for (auto g : a.grad().data()) CHECK(g == 0);
  }
  for (auto g : b.grad().data()) CHECK(g == 1);

  auto r = gradcheck(
      [](Tape&, const std::vector<Var>& v) {
        Var c = ops::concat({v[0], v[1]}, 1);
        return ops::sum(ops::square(ops::split(c, {1, 4}, 1)[1]));
      },
      {random_tensor({2, 3}, rng), random_tensor({2, 2}, rng)});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("reshape and permute gradients") {
  Rng rng(8);
  Tensor w = random_tensor({4, 2, 3}, rng);
  auto r = gradcheck(
      [&](Tape& t, const std::vector<Var>& v) {
        Var p = ops::permute(ops::reshape(v[0], {2, 3, 4}), {2, 0, 1});
        return ops::sum(ops::mul(p, t.constant(w)));
      },
      {random_tensor({6, 4}, rng)});
  CHECK(r.max_rel_error < 1e-6);

  Tape tape;
  Var x = tape.constant(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  CHECK(ops::permute(x, {1, 0}).value() == Tensor::from({3, 2}, {1, 4, 2, 5, 3, 6}));
}

TEST_CASE("backward contract") {
  Rng rng(9);
  Tensor xv = random_tensor({2, 3}, rng);
  {
    Tape tape;
    Var x = tape.leaf(xv);
    tape.backward(ops::sum(x));
    for (auto g : x.grad().data()) CHECK(g == 1);
  }
  {
    Tape tape;
    Var x = tape.leaf(xv);
    tape.backward(ops::sum(ops::mul(x, x)));
    for (std::size_t i = 0; i < xv.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * xv[i]));
    CHECK_THROWS_AS(tape.backward(ops::sum(x)), ContractError);
  }
  {
    Tape tape;
    Var x = tape.leaf(xv);
    CHECK_THROWS_AS(tape.backward(x), ContractError);
  }
  {
    Tape t1, t2;
    Var a = t1.leaf(xv);
    Var b = t2.leaf(xv);
    CHECK_THROWS_AS(ops::add(a, b), ContractError);
  }
}

TEST_CASE("parameters accumulate gradients; frozen ones receive none") {
  Parameter w("w", Tensor::from({2}, {1, 2}));
  Parameter frozen("f", Tensor::from({2}, {3, 4}));
  frozen.trainable = false;
  Tape tape;
  Var pw = tape.param(w);
  CHECK(tape.param(w).id() == pw.id());
  Var loss = ops::sum(ops::mul(ops::add(pw, pw), tape.param(frozen)));
  tape.backward(loss);
  CHECK(w.grad == Tensor::from({2}, {6, 8}));
  CHECK_FALSE(frozen.has_grad());
}
