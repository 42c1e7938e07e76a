#include <cmath>
#include <vector>

#include "doctest.h"
#include "paka/error.hpp"
#include "paka/kernel_align.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace paka;
using namespace paka::test;

TEST_CASE("gram: documented examples and loop oracle") {
  Eigen::MatrixXd eye(2, 2);
  eye << 1, 0, 0, 1;
  CHECK(gram(eye) == eye);
  Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(2, 2);
  CHECK(gram(ones) == Eigen::MatrixXd::Constant(2, 2, 2.0));
  Rng rng(11);
  const Eigen::MatrixXd f = random_matrix(rng, 3, 2);
  CHECK((gram(f) - gram_oracle(f)).cwiseAbs().maxCoeff() <= 1e-14);
  const Eigen::MatrixXd k = gram(random_matrix(rng, 7, 5));
  CHECK(k == k.transpose());
}

TEST_CASE("gram rejects non-finite input") {
  Eigen::MatrixXd f = Eigen::MatrixXd::Ones(2, 2);
  f(0, 1) = std::nan("");
  CHECK_THROWS_AS(gram(f), Error);
}

TEST_CASE("center_gram: examples, explicit HKH oracle and idempotence") {
  const Eigen::MatrixXd constant_rows = Eigen::MatrixXd::Constant(3, 2, 0.7);
  CHECK(center_gram(gram(constant_rows)).cwiseAbs().maxCoeff() <= 1e-15);

  Eigen::MatrixXd expected(2, 2);
  expected << 0.5, -0.5, -0.5, 0.5;
  CHECK((center_gram(Eigen::MatrixXd::Identity(2, 2)) - expected).cwiseAbs().maxCoeff() <= 1e-15);

  Rng rng(12);
  const Eigen::MatrixXd a = random_matrix(rng, 4, 4);
  const Eigen::MatrixXd k = a + a.transpose();
  const Eigen::MatrixXd h = centering(4);
  const Eigen::MatrixXd c = center_gram(k);
  CHECK((c - h * k * h).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(c.rowwise().sum().cwiseAbs().maxCoeff() <= 1e-8);
  CHECK(c.colwise().sum().cwiseAbs().maxCoeff() <= 1e-8);
  CHECK((center_gram(c) - c).cwiseAbs().maxCoeff() <= 1e-10);

  CHECK_THROWS_AS(center_gram(Eigen::MatrixXd(0, 0)), Error);
}

TEST_CASE("cka: examples and definition oracle") {
  Rng rng(13);
  const Eigen::MatrixXd s = random_matrix(rng, 6, 3);
  CHECK(cka(s, s).value == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(cka(s, s).kind == AlignmentKind::kCka);

  Eigen::MatrixXd a(3, 1), b(3, 1);
  a << 1, 0, -1;
  b << 1, -2, 1;
  CHECK(std::abs(cka(a, b).value) <= 1e-15);

  const Eigen::MatrixXd t = random_matrix(rng, 6, 3);
  CHECK(std::abs(cka(s, t).value - cka_oracle(s, t)) <= 1e-12);
}

TEST_CASE("cka rejects degenerate and mismatched inputs") {
  const Eigen::MatrixXd same_rows = Eigen::MatrixXd::Constant(4, 3, 1.5);
  Rng rng(14);
  const Eigen::MatrixXd t = random_matrix(rng, 4, 3);
  try {
    cka(same_rows, t);
    FAIL("expected DegenerateInput");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDegenerateInput);
  }
  CHECK_THROWS_AS(cka(t, same_rows), Error);
  CHECK_THROWS_AS(cka(random_matrix(rng, 4, 3), random_matrix(rng, 5, 3)), Error);
  CHECK_THROWS_AS(cka(random_matrix(rng, 1, 3), random_matrix(rng, 1, 3)), Error);
}

TEST_CASE("cka invariants over random instances") {
  Rng rng(15);
  std::uniform_int_distribution<int> dims(2, 9);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = dims(rng) + 1, d = dims(rng);
    const Eigen::MatrixXd s = random_matrix(rng, n, d);
    const Eigen::MatrixXd t = random_matrix(rng, n, d);
    const double base = cka(s, t).value;
    CHECK(base >= 0.0);
    CHECK(base <= 1.0 + 1e-12);
    CHECK(std::abs(base - cka(t, s).value) <= 1e-12);
    for (double alpha : {0.01, 1.0, 100.0}) CHECK(std::abs(cka(alpha * s, t).value - base) <= 1e-10);
    CHECK(std::abs(cka(s * random_orthogonal(rng, d), t).value - base) <= 1e-10);
    const Eigen::RowVectorXd c = random_matrix(rng, 1, d, 5.0);
    CHECK(std::abs(cka(s.rowwise() + c, t).value - base) <= 1e-10);
  }
}

TEST_CASE("hsic: examples, trace oracle and CKA identity") {
  Rng rng(16);
  const Eigen::MatrixXd kb = gram(random_matrix(rng, 4, 3));
  CHECK(std::abs(hsic(gram(Eigen::MatrixXd::Constant(4, 3, -0.3)), kb).value) <= 1e-15);

  const Eigen::MatrixXd a = random_matrix(rng, 5, 5), b = random_matrix(rng, 5, 5);
  const Eigen::MatrixXd ka = a + a.transpose(), kb2 = b + b.transpose();
  CHECK(std::abs(hsic(ka, kb2).value - hsic_oracle(ka, kb2)) <= 1e-12);

  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::MatrixXd s = random_matrix(rng, 8, 4), t = random_matrix(rng, 8, 4);
    const Eigen::MatrixXd ks = gram(s), kt = gram(t);
    const double ratio = hsic(ks, kt).value / std::sqrt(hsic(ks, ks).value * hsic(kt, kt).value);
    CHECK(std::abs(cka(s, t).value - ratio) <= 1e-10);
    CHECK(hsic(ks, kt).value >= -1e-12);
  }
  CHECK_THROWS_AS(hsic(ka, Eigen::MatrixXd::Identity(3, 3)), Error);
}

TEST_CASE("mmd_sq: examples, double-sum oracle and median heuristic") {
  Rng rng(17);
  const Eigen::MatrixXd s = random_matrix(rng, 5, 3);
  CHECK(std::abs(mmd_sq(s, s, 1.0).value) <= 1e-12);
  CHECK(std::abs(mmd_sq(s, s).value) <= 1e-12);
  const Eigen::MatrixXd row = random_matrix(rng, 1, 3);
  CHECK(std::abs(mmd_sq(row, row).value) <= 1e-12);

  const Eigen::MatrixXd a = random_matrix(rng, 4, 2), b = random_matrix(rng, 4, 2);
  CHECK(std::abs(mmd_sq(a, b, 1.0).value - mmd_oracle(a, b, 1.0)) <= 1e-12);
  CHECK(mmd_sq(a, b, 1.0).kind == AlignmentKind::kMmdSq);

  // Median of pooled pairwise distances: points 0, 1, 3 on a line give distances {1, 2, 3}.
  Eigen::MatrixXd p(2, 1), q(1, 1);
  p << 0, 1;
  q << 3;
  CHECK(median_heuristic_bandwidth(p, q) == doctest::Approx(2.0));
  CHECK(std::abs(mmd_sq(p, q).value - mmd_oracle(p, q, 2.0)) <= 1e-12);
  // All points coincide: the median is 0, so the fallback bandwidth 1 applies.
  CHECK(median_heuristic_bandwidth(Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Zero(3, 2)) == 1.0);
  CHECK_THROWS_AS(mmd_sq(a, random_matrix(rng, 4, 3)), Error);
}

TEST_CASE("loss_paka examples") {
  Rng rng(18);
  const Eigen::MatrixXd s = random_matrix(rng, 6, 4), t = random_matrix(rng, 6, 4);
  CHECK(std::abs(loss_paka(s, s)) <= 1e-14);
  Eigen::MatrixXd a(3, 1), b(3, 1);
  a << 1, 0, -1;
  b << 1, -2, 1;
  CHECK(loss_paka(a, b) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(loss_paka(s, t) == 1.0 - cka(s, t).value);
  const double l = loss_paka(s, t);
  CHECK(l >= 0.0);
  CHECK(l <= 1.0);
}

TEST_CASE("loss_gram examples and entrywise oracle") {
  Rng rng(19);
  const Eigen::MatrixXd s = random_matrix(rng, 4, 3), t = random_matrix(rng, 4, 3);
  CHECK(loss_gram(s, s) == 0.0);
  Eigen::MatrixXd a(1, 2), b(1, 2);
  a << 1, 0;
  b << 0, 1;
  CHECK(std::abs(loss_gram(a, b)) <= 1e-15);
  CHECK(std::abs(loss_gram(s, t) - loss_gram_oracle(s, t)) <= 1e-12);
  CHECK(loss_gram(s, t) >= 0.0);

  Eigen::MatrixXd zero_row = s;
  zero_row.row(2).setZero();
  try {
    loss_gram(zero_row, t);
    FAIL("expected ZeroRow");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kZeroRow);
  }
}

TEST_CASE("grad_loss_paka: stationary at S = T, degenerate input, finite differences") {
  Rng rng(20);
  const Eigen::MatrixXd s = random_matrix(rng, 5, 3);
  CHECK(grad_loss_paka(s, s).cwiseAbs().maxCoeff() <= 1e-8);
  CHECK_THROWS_AS(grad_loss_paka(Eigen::MatrixXd::Ones(5, 3), s), Error);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::MatrixXd a = random_matrix(rng, 5, 3), b = random_matrix(rng, 5, 3);
    const auto f = [&](const Eigen::MatrixXd& x) { return loss_paka(x, b); };
    CHECK(max_rel(grad_loss_paka(a, b), central_difference(f, a, 1e-6)) <= 1e-5);
  }
}

TEST_CASE("grad_loss_gram: zero at S = T, N = 1, finite differences") {
  Rng rng(21);
  const Eigen::MatrixXd s = random_matrix(rng, 4, 3);
  CHECK(grad_loss_gram(s, s).cwiseAbs().maxCoeff() <= 1e-10);
  Eigen::MatrixXd a(1, 2), b(1, 2);
  a << 1, 0;
  b << 0, 1;
  CHECK(grad_loss_gram(a, b).cwiseAbs().maxCoeff() <= 1e-15);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::MatrixXd x = random_matrix(rng, 4, 3), y = random_matrix(rng, 4, 3);
    const auto f = [&](const Eigen::MatrixXd& m) { return loss_gram(m, y); };
    CHECK(max_rel(grad_loss_gram(x, y), central_difference(f, x, 1e-6)) <= 1e-5);
  }
}

TEST_CASE("grad_loss_hsic and grad_loss_mmd match finite differences") {
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd x = random_matrix(rng, 6, 3), y = random_matrix(rng, 6, 3);
    const auto fh = [&](const Eigen::MatrixXd& m) { return loss_hsic(m, y); };
    CHECK(max_rel(grad_loss_hsic(x, y), central_difference(fh, x, 1e-6)) <= 1e-5);
    const double bw = median_heuristic_bandwidth(x, y);
    const auto fm = [&](const Eigen::MatrixXd& m) { return loss_mmd(m, y, bw); };
    CHECK(max_rel(grad_loss_mmd(x, y, bw), central_difference(fm, x, 1e-6)) <= 1e-5);
  }
  // The HSIC loss is the negated HSIC of the row-normalized Grams.
  const Eigen::MatrixXd x = random_matrix(rng, 6, 3), y = random_matrix(rng, 6, 3);
  CHECK(loss_hsic(x, y) == doctest::Approx(-hsic(gram(normalize_rows(x)), gram(normalize_rows(y))).value));
}

TEST_CASE("loss_paka never increases under a small gradient step") {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::MatrixXd s = random_matrix(rng, 8, 4), t = random_matrix(rng, 8, 4);
    const Eigen::MatrixXd next = s - 1e-3 * grad_loss_paka(s, t);
    CHECK(loss_paka(next, t) <= loss_paka(s, t) + 1e-12);
  }
}

TEST_CASE("coefficient_of_variation") {
  const std::vector<double> constant{2.5, 2.5, 2.5};
  CHECK(coefficient_of_variation(constant) == 0.0);
  const std::vector<double> two{1.0, 3.0};
  CHECK(coefficient_of_variation(two) == doctest::Approx(0.5).epsilon(1e-15));
  const std::vector<double> one{1.0};
  CHECK_THROWS_AS(coefficient_of_variation(one), Error);
  const std::vector<double> zero_mean{-1.0, 1.0};
  try {
    coefficient_of_variation(zero_mean);
    FAIL("expected EmptyOrZeroMean");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kEmptyOrZeroMean);
  }
}

TEST_CASE("normalize_rows") {
  Rng rng(24);
  const Eigen::MatrixXd u = normalize_rows(random_matrix(rng, 5, 4));
  for (Eigen::Index i = 0; i < u.rows(); ++i) CHECK(u.row(i).norm() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(normalize_rows(Eigen::MatrixXd::Zero(2, 2)), Error);
}
