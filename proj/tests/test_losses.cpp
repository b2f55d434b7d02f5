#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"

#include "forge/error.hpp"
#include "forge/losses.hpp"

#include <cmath>
#include <numbers>

using namespace forge;
using forge::testing::dino_oracle;
using forge::testing::nt_xent_oracle;
using forge::testing::plain_cosine_ce;
using namespace forge::losses;
using forge::testing::finite_difference;
using forge::testing::random_matrix;
using forge::testing::random_vector;
using forge::testing::relative_error;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected forge::Error");
  return ErrorKind::Io;
}

}  // namespace

TEST_CASE("nt_xent single positive pair has zero loss") {
  Matrix z(2, 3);
  z << 1, 2, 3, 1, 2, 3;
  for (double tau : {0.05, 0.5, 2.0}) {
    auto r = nt_xent_loss(z, adjacent_pairing(1), {tau, 1});
    CHECK(std::abs(r.loss) < 1e-12);
  }
}

TEST_CASE("nt_xent two orthogonal pairs") {
  Matrix z(4, 2);
  z << 1, 0, 1, 0, 0, 1, 0, 1;
  auto r = nt_xent_loss(z, adjacent_pairing(2), {0.5, 2});
  CHECK(std::abs(r.loss - 0.2395447662218845) < 1e-9);
  CHECK(std::abs(r.loss - nt_xent_oracle(z, adjacent_pairing(2), 0.5)) < 1e-12);
}

TEST_CASE("nt_xent matches the scalar oracle and finite differences") {
  Rng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix z = random_matrix(rng, 8, 8);
    const auto pair = adjacent_pairing(4);
    const double tau = rng.uniform(0.1, 1.0);
    auto r = nt_xent_loss(z, pair, {tau, 4});
    CHECK(std::abs(r.loss - nt_xent_oracle(z, pair, tau)) < 1e-9);
    auto fd = finite_difference<Matrix>(z, [&](const Matrix& m) { return nt_xent_loss(m, pair, {tau, 4}).loss; });
    CHECK(relative_error(r.grad, fd) < 1e-5);
  }
}

TEST_CASE("nt_xent is invariant under a joint permutation of items and pairing") {
  Rng rng(5);
  const Matrix z = random_matrix(rng, 6, 4);
  const auto pair = adjacent_pairing(3);
  std::vector<int> perm{4, 0, 5, 2, 1, 3};  // new row r holds old row perm[r]
  std::vector<int> inverse(6);
  for (int r = 0; r < 6; ++r) inverse[static_cast<std::size_t>(perm[r])] = r;
  Matrix zp(6, 4);
  std::vector<int> pp(6);
  for (int r = 0; r < 6; ++r) {
    zp.row(r) = z.row(perm[r]);
    pp[static_cast<std::size_t>(r)] = inverse[static_cast<std::size_t>(pair[static_cast<std::size_t>(perm[r])])];
  }
  CHECK(std::abs(nt_xent_loss(z, pair, {0.2, 3}).loss - nt_xent_loss(zp, pp, {0.2, 3}).loss) < 1e-12);
}

TEST_CASE("nt_xent rejects bad pairings") {
  Matrix z = Matrix::Ones(4, 2);
  CHECK(kind_of([&] { nt_xent_loss(z, std::vector<int>{1, 2, 3, 0}, {0.5, 2}); }) == ErrorKind::BadPairing);
  CHECK(kind_of([&] { nt_xent_loss(z, std::vector<int>{0, 1, 3, 2}, {0.5, 2}); }) == ErrorKind::BadPairing);
  Matrix zero = Matrix::Zero(2, 2);
  CHECK(kind_of([&] { nt_xent_loss(zero, adjacent_pairing(1), {0.5, 1}); }) == ErrorKind::ZeroNorm);
}

TEST_CASE("dino uniform distributions") {
  DinoConfig cfg;
  cfg.output_dim = 4;
  cfg.num_local = 0;
  cfg.normalize = false;
  const Matrix zeros = Matrix::Zero(2, 4);
  CHECK(std::abs(dino_loss(zeros, zeros, cfg).loss - 2.0 * std::log(4.0)) < 1e-12);
  cfg.normalize = true;
  CHECK(std::abs(dino_loss(zeros, zeros, cfg).loss - std::log(4.0)) < 1e-12);
}

TEST_CASE("dino one-hot teacher reduces to -log p") {
  DinoConfig cfg;
  cfg.output_dim = 3;
  cfg.num_local = 0;
  cfg.normalize = false;
  cfg.student_temp = 1.0;
  Matrix teacher(2, 3);
  teacher << 0, 1000, 0, 0, 1000, 0;  // sharpened to one-hot on class 1
  const double p = 0.7;
  Matrix student(2, 3);
  // softmax([0, log(2p/(1-p)), 0]) puts mass p on class 1
  student << 0, std::log(2 * p / (1 - p)), 0, 0, std::log(2 * p / (1 - p)), 0;
  const auto r = dino_loss(student, teacher, cfg);
  CHECK(std::abs(r.loss - 2.0 * -std::log(p)) < 1e-9);
}

TEST_CASE("dino matches the scalar oracle and finite differences") {
  Rng rng(202);
  for (int trial = 0; trial < 20; ++trial) {
    DinoConfig cfg;
    cfg.output_dim = 8;
    cfg.normalize = trial % 2 == 0;
    cfg.center = random_vector(rng, 8, 0.3);
    const Matrix s = random_matrix(rng, 6, 8);
    const Matrix t = random_matrix(rng, 2, 8);
    const auto r = dino_loss(s, t, cfg);
    CHECK(r.cross_terms == 10);
    CHECK(std::abs(r.loss - dino_oracle(s, t, cfg.center, cfg.student_temp, cfg.teacher_temp, cfg.normalize)) < 1e-9);
    auto fd = finite_difference<Matrix>(s, [&](const Matrix& m) { return dino_loss(m, t, cfg).loss; });
    CHECK(relative_error(r.grad, fd) < 1e-5);
  }
}

TEST_CASE("dino teacher softmax is shift invariant and centering is consistent") {
  Rng rng(9);
  DinoConfig cfg;
  cfg.output_dim = 5;
  const Matrix s = random_matrix(rng, 6, 5);
  const Matrix t = random_matrix(rng, 2, 5);
  const double base = dino_loss(s, t, cfg).loss;
  CHECK(std::abs(dino_loss(s, (t.array() + 3.7).matrix(), cfg).loss - base) < 1e-9);

  // Centering with the teacher batch mean equals feeding pre-centered logits.
  const Vector mean = t.colwise().mean().transpose();
  cfg.center = mean;
  const double centered = dino_loss(s, t, cfg).loss;
  cfg.center = Vector();
  const Matrix pre = t.rowwise() - mean.transpose();
  CHECK(std::abs(dino_loss(s, pre, cfg).loss - centered) < 1e-9);
}

TEST_CASE("dino rejects mismatched widths") {
  DinoConfig cfg;
  cfg.output_dim = 4;
  CHECK(kind_of([&] { dino_loss(Matrix::Zero(6, 4), Matrix::Zero(2, 5), cfg); }) == ErrorKind::DimMismatch);
}

TEST_CASE("center and EMA updates") {
  CHECK(dino_center_update(vec({1, 2}), vec({5, 6}), 1.0) == vec({1, 2}));
  CHECK(dino_center_update(vec({1, 2}), vec({5, 6}), 0.0) == vec({5, 6}));
  const Vector c = dino_center_update(vec({0, 0}), vec({2, 4}), 0.9);
  CHECK(std::abs(c(0) - 0.2) < 1e-12);
  CHECK(std::abs(c(1) - 0.4) < 1e-12);
  CHECK(ema_update(vec({1}), vec({3}), 1.0) == vec({1}));
  CHECK(ema_update(vec({1}), vec({3}), 0.0) == vec({3}));
  CHECK(ema_update(vec({1}), vec({3}), 0.5) == vec({2}));
  CHECK(kind_of([] { ema_update(vec({1}), vec({1, 2}), 0.5); }) == ErrorKind::DimMismatch);
  CHECK(kind_of([] { dino_center_update(vec({1}), vec({1, 2}), 0.5); }) == ErrorKind::DimMismatch);
  CHECK(ema_momentum_at(0.996, 1.0, 0, 100) == doctest::Approx(0.996));
  CHECK(ema_momentum_at(0.996, 1.0, 100, 100) == doctest::Approx(1.0));
}

TEST_CASE("aam with zero margin equals plain cosine softmax") {
  Rng rng(303);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix e = random_matrix(rng, 6, 5);
    const Matrix w = random_matrix(rng, 4, 5);
    std::vector<int> labels;
    for (int j = 0; j < 6; ++j) labels.push_back(static_cast<int>(rng.below(4)));
    const auto r = aam_softmax_loss(e, w, labels, {0.0, 30.0, 4});
    CHECK(std::abs(r.loss - plain_cosine_ce(e, w, labels, 30.0)) < 1e-9);
  }
}

TEST_CASE("aam with a single class has zero loss") {
  Rng rng(1);
  const auto r = aam_softmax_loss(random_matrix(rng, 3, 4), random_matrix(rng, 1, 4), std::vector<int>{0, 0, 0},
                                  {0.2, 30.0, 1});
  CHECK(std::abs(r.loss) < 1e-12);
}

TEST_CASE("aam gradients match finite differences") {
  Rng rng(404);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix e = random_matrix(rng, 4, 5);
    const Matrix w = random_matrix(rng, 3, 5);
    std::vector<int> labels;
    for (int j = 0; j < 4; ++j) labels.push_back(static_cast<int>(rng.below(3)));
    const AamConfig cfg{0.2, 30.0, 3};
    const auto r = aam_softmax_loss(e, w, labels, cfg);
    auto fd_e = finite_difference<Matrix>(e, [&](const Matrix& m) { return aam_softmax_loss(m, w, labels, cfg).loss; });
    auto fd_w = finite_difference<Matrix>(w, [&](const Matrix& m) { return aam_softmax_loss(e, m, labels, cfg).loss; });
    CHECK(relative_error(r.grad_embeddings, fd_e) < 1e-5);
    CHECK(relative_error(r.grad_weights, fd_w) < 1e-5);
  }
}

TEST_CASE("aam margin never lowers the loss of a correctly classified sample") {
  Rng rng(505);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix e = random_matrix(rng, 1, 6);
    const Matrix w = random_matrix(rng, 5, 6);
    const auto probe = aam_softmax_loss(e, w, std::vector<int>{0}, {0.0, 30.0, 5});
    Eigen::Index best = 0;
    probe.probs.row(0).maxCoeff(&best);
    const std::vector<int> label{static_cast<int>(best)};
    double prev = -1.0;
    for (double m = 0.0; m <= 1.5; m += 0.05) {
      const double loss = aam_softmax_loss(e, w, label, {m, 30.0, 5}).loss;
      CHECK(loss >= prev - 1e-12);
      prev = loss;
    }
    ++checked;
  }
  CHECK(checked == 200);
}

TEST_CASE("aam validates labels and norms") {
  Rng rng(2);
  const Matrix e = random_matrix(rng, 2, 3);
  const Matrix w = random_matrix(rng, 2, 3);
  CHECK(kind_of([&] { aam_softmax_loss(e, w, std::vector<int>{0, 2}, {0.2, 30, 2}); }) == ErrorKind::LabelOutOfRange);
  CHECK(kind_of([&] { aam_softmax_loss(Matrix::Zero(2, 3), w, std::vector<int>{0, 1}, {0.2, 30, 2}); }) ==
        ErrorKind::ZeroNorm);
}

TEST_CASE("aam margin fallback is continuous in slope below the guard") {
  const double m = 0.5;
  const auto below = additive_angular_margin(std::cos(std::numbers::pi - m) - 1e-3, m);
  CHECK(below.derivative == 1.0);
  const auto regular = additive_angular_margin(0.3, m);
  CHECK(std::abs(regular.value - std::cos(std::acos(0.3) + m)) < 1e-12);
}

TEST_CASE("cosine soft-target cross-entropy gradients") {
  Rng rng(606);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix e = random_matrix(rng, 3, 4);
    const Matrix w = random_matrix(rng, 5, 4);
    Matrix t(3, 5);
    for (int j = 0; j < 3; ++j) t.row(j) = softmax(random_vector(rng, 5)).transpose();
    const std::vector<double> weights{1.0, 0.0, 2.5};
    const auto r = cosine_softmax_cross_entropy(e, w, t, 10.0, weights);
    auto fd_e = finite_difference<Matrix>(
        e, [&](const Matrix& m) { return cosine_softmax_cross_entropy(m, w, t, 10.0, weights).loss; });
    auto fd_w = finite_difference<Matrix>(
        w, [&](const Matrix& m) { return cosine_softmax_cross_entropy(e, m, t, 10.0, weights).loss; });
    CHECK(relative_error(r.grad_embeddings, fd_e) < 1e-5);
    CHECK(relative_error(r.grad_weights, fd_w) < 1e-5);
  }
}

TEST_CASE("lc_soft_target examples and properties") {
  CHECK(lc_soft_target(vec({0, 1, 0}), 0.1) == vec({0, 1, 0}));
  const Vector u = lc_soft_target(vec({0.25, 0.25, 0.25, 0.25}), 0.1);
  for (Eigen::Index k = 0; k < 4; ++k) CHECK(std::abs(u(k) - 0.25) < 1e-12);

  const Vector s = lc_soft_target(vec({0.6, 0.4}), 0.1);
  const double a = std::pow(0.6, 10), b = std::pow(0.4, 10);
  CHECK(std::abs(s(0) - a / (a + b)) < 1e-12);
  CHECK(std::abs(s(1) - b / (a + b)) < 1e-12);
  CHECK(std::abs(s(0) - 0.9829540725450702) < 1e-12);

  Rng rng(707);
  for (int trial = 0; trial < 100; ++trial) {
    const Vector p = softmax(random_vector(rng, 6, 2.0));
    const Vector q = lc_soft_target(p, rng.uniform(0.05, 1.0));
    Eigen::Index ap = 0, aq = 0;
    p.maxCoeff(&ap);
    q.maxCoeff(&aq);
    CHECK(ap == aq);
    CHECK(std::abs(q.sum() - 1.0) < 1e-12);
    const Vector once = lc_soft_target(Vector::Unit(6, ap), 0.1);
    CHECK(lc_soft_target(once, 0.1) == once);
  }
  CHECK(kind_of([] { lc_soft_target(vec({0.5, 0.6}), 0.1); }) == ErrorKind::NotADistribution);
}

TEST_CASE("lc_loss examples, oracle and gradient") {
  CHECK(std::abs(lc_loss(vec({0, 1, 0}), vec({0, 1, 0})).loss) < 1e-12);
  CHECK(std::abs(lc_loss(vec({0.5, 0.25, 0.25}), vec({1, 0, 0})).loss - std::log(2.0)) < 1e-12);
  Rng rng(808);
  for (int trial = 0; trial < 20; ++trial) {
    const Vector logits = random_vector(rng, 6, 2.0);
    const Vector p = softmax(logits);
    const Vector t = softmax(random_vector(rng, 6));
    double oracle = 0;
    for (int k = 0; k < 6; ++k) oracle -= t(k) * std::log(p(k));
    CHECK(std::abs(lc_loss(p, t).loss - oracle) < 1e-9);
    const auto r = lc_loss_from_logits(logits, t);
    CHECK(std::abs(r.loss - oracle) < 1e-9);
    auto fd = finite_difference<Vector>(logits, [&](const Vector& l) { return lc_loss_from_logits(l, t).loss; });
    CHECK(relative_error(r.grad_logits, fd) < 1e-5);
  }
  CHECK(kind_of([] { lc_loss(vec({0.5, 0.2}), vec({1, 0})); }) == ErrorKind::NotADistribution);
}
