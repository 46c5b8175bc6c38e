#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "gradcheck_cases.hpp"
#include "oracles.hpp"
#include "stagin/autodiff.hpp"

using namespace stagin;
using ad::Tensor;

using gradcheck::project;
using gradcheck::random_points;

TEST_CASE("analytic values of the pointwise primitives") {
  Tensor x = Tensor::constant({3}, {0.0, 1.0, -1.0});
  CHECK(ad::gelu(x).data()[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(ad::sigmoid(x).data()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(ad::tanh_t(x).data()[0] == doctest::Approx(0.0).epsilon(1e-12));

  Tensor u = Tensor::constant({3}, {1.0, 1.0, 1.0});
  Tensor s = ad::softmax_last_dim(u);
  for (int i = 0; i < 3; ++i) CHECK(s.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor logits = Tensor::zeros({7});
  CHECK(ad::cross_entropy_with_logits(logits, 3).item() ==
        doctest::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("backward reproduces closed forms") {
  // d/dx (x^T x) = 2x
  Rng rng(11);
  std::vector<double> xv = oracles::random_vector(6, rng);
  ad::Tape tape;
  Tensor x = tape.leaf({6}, xv);
  Tensor loss = ad::reduce_sum_all(ad::hadamard(x, x));
  tape.backward(loss);
  auto gx = tape.grad_of(x);
  for (size_t i = 0; i < xv.size(); ++i) CHECK(gx[i] == doctest::Approx(2.0 * xv[i]).epsilon(1e-12));

  // d/dA tr(AB) = B^T
  Mat bo = oracles::random_matrix(4, 4, rng);
  ad::Tape tape2;
  Tensor a = tape2.leaf({4, 4}, oracles::random_vector(16, rng));
  Tensor b = Tensor::constant({4, 4}, bo.d);
  Tensor prod = ad::matmul(a, b);
  // trace via hadamard with identity
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[static_cast<size_t>(i) * 4 + i] = 1.0;
  Tensor tr = ad::reduce_sum_all(ad::hadamard(prod, Tensor::constant({4, 4}, eye)));
  tape2.backward(tr);
  auto ga = tape2.grad_of(a);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(ga[static_cast<size_t>(i) * 4 + j] == doctest::Approx(bo(j, i)).epsilon(1e-12));
}

TEST_CASE("leaves off the loss path get zero gradients; NotScalar rejected") {
  ad::Tape tape;
  Tensor x = tape.leaf({3}, {1.0, 2.0, 3.0});
  Tensor unused = tape.leaf({2}, {5.0, 6.0});
  Tensor loss = ad::reduce_sum_all(x);
  tape.backward(loss);
  auto gu = tape.grad_of(unused);
  CHECK(gu.size() == 2);
  CHECK(gu[0] == 0.0);
  CHECK(gu[1] == 0.0);

  Tensor vec = tape.leaf({3}, {1.0, 2.0, 3.0});
  CHECK_THROWS_AS(tape.backward(vec), ad::NotScalar);
}

TEST_CASE("grad_check is near-exact for a linear function") {
  auto f = [](ad::Tape&, const std::vector<Tensor>& leaves) {
    return project(ad::scale(leaves[0], 3.0), 99);
  };
  double err = ad::grad_check(f, random_points({{4, 3}}, 5), 1e-5);
  CHECK(err < 1e-10);
}

TEST_CASE("every primitive passes grad_check at random points") {
  for (const auto& c : gradcheck::primitive_cases()) {
    CAPTURE(c.name);
    for (uint64_t trial = 0; trial < 5; ++trial) {
      double err = ad::grad_check(c.fn, random_points(c.shapes, 1000 + trial * 31), 1e-5);
      CAPTURE(trial);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("softmax rows are stochastic with entries in (0,1)") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    Mat m = oracles::random_matrix(6, 9, rng, 4.0);
    Tensor s = ad::softmax_last_dim(Tensor::constant({6, 9}, m.d));
    for (int i = 0; i < 6; ++i) {
      double row = 0.0;
      for (int j = 0; j < 9; ++j) {
        double v = s.data()[i * 9 + j];
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        row += v;
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("batchnorm in eval mode is affine in its input") {
  ad::BnState bn(3);
  bn.running_mean = {0.3, -0.2, 1.4};
  bn.running_var = {1.2, 0.8, 2.5};
  Tensor gamma = Tensor::constant({3}, {1.1, 0.9, 1.3});
  Tensor beta = Tensor::constant({3}, {0.2, -0.1, 0.4});
  Rng rng(5);
  Mat x1 = oracles::random_matrix(3, 5, rng);
  Mat x2 = oracles::random_matrix(3, 5, rng);
  auto run = [&](const Mat& x) {
    return ad::batchnorm_cols(Tensor::constant({3, 5}, x.d), gamma, beta, bn, false);
  };
  Mat sum(3, 5);
  for (size_t i = 0; i < sum.d.size(); ++i) sum.d[i] = x1.d[i] + x2.d[i];
  Tensor f1 = run(x1), f2 = run(x2), fs = run(sum), f0 = run(Mat(3, 5, 0.0));
  // affine: f(x1+x2) - f(0) == (f(x1)-f(0)) + (f(x2)-f(0))
  for (size_t i = 0; i < sum.d.size(); ++i) {
    double lhs = fs.data()[i] - f0.data()[i];
    double rhs = (f1.data()[i] - f0.data()[i]) + (f2.data()[i] - f0.data()[i]);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("batchnorm running statistics follow the 0.1-momentum update") {
  ad::BnState bn(2);
  Tensor gamma = Tensor::constant({2}, {1.0, 1.0});
  Tensor beta = Tensor::constant({2}, {0.0, 0.0});
  Mat x(2, 4);
  for (int j = 0; j < 4; ++j) {
    x(0, j) = j;         // mean 1.5, unbiased var 5/3
    x(1, j) = 2.0 * j;   // mean 3.0, unbiased var 20/3
  }
  ad::batchnorm_cols(Tensor::constant({2, 4}, x.d), gamma, beta, bn, true);
  CHECK(bn.running_mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 1.5).epsilon(1e-12));
  CHECK(bn.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * (5.0 / 3)).epsilon(1e-12));
  CHECK(bn.running_mean[1] == doctest::Approx(0.1 * 3.0).epsilon(1e-12));
  CHECK(bn.running_var[1] == doctest::Approx(0.9 + 0.1 * (20.0 / 3)).epsilon(1e-12));
}

TEST_CASE("dropout: identity cases and unbiased expectation") {
  Rng rng(42);
  Tensor x = Tensor::constant({4}, {1.0, -2.0, 3.0, 0.5});
  Tensor eval_out = ad::dropout(x, 0.5, false, rng);
  Tensor p0_out = ad::dropout(x, 0.0, true, rng);
  for (int i = 0; i < 4; ++i) {
    CHECK(eval_out.data()[i] == x.data()[i]);
    CHECK(p0_out.data()[i] == x.data()[i]);
  }

  // E[dropout(x)] = x with inverted scaling, Monte-Carlo over 1e5 draws
  const int draws = 100000;
  double acc = 0.0;
  Tensor one = Tensor::constant({1}, {1.0});
  Rng mc(777);
  for (int i = 0; i < draws; ++i) acc += ad::dropout(one, 0.3, true, mc).data()[0];
  CHECK(acc / draws == doctest::Approx(1.0).epsilon(1e-2));
}

TEST_CASE("adjoint linearity: backward of a sum equals sum of backwards") {
  Rng rng(31);
  auto xv = oracles::random_vector(8, rng);
  auto run = [&xv](int which) {
    ad::Tape tape;
    Tensor x = tape.leaf({8}, xv);
    Tensor l1 = ad::reduce_sum_all(ad::hadamard(x, x));
    Tensor l2 = ad::reduce_sum_all(ad::gelu(x));
    Tensor loss = which == 0 ? l1 : (which == 1 ? l2 : ad::add(l1, l2));
    tape.backward(loss);
    return tape.grad_of(x);
  };
  auto g1 = run(0), g2 = run(1), gsum = run(2);
  for (size_t i = 0; i < 8; ++i)
    CHECK(gsum[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-12));
}

TEST_CASE("shape mismatches carry both shapes in the message") {
  Tensor a = Tensor::zeros({3, 4});
  Tensor b = Tensor::zeros({5, 2});
  try {
    ad::matmul(a, b);
    FAIL("expected ShapeMismatch");
  } catch (const ad::ShapeMismatch& e) {
    std::string msg = e.what();
    CHECK(msg.find("{3,4}") != std::string::npos);
    CHECK(msg.find("{5,2}") != std::string::npos);
  }
  CHECK_THROWS_AS(ad::add(a, b), ad::ShapeMismatch);
  CHECK_THROWS_AS(ad::hadamard(a, b), ad::ShapeMismatch);
}
