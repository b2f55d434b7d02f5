#include "doctest.h"
#include "test_util.hpp"

#include "forge/error.hpp"
#include "forge/model.hpp"

#include <cmath>

using namespace forge;
using forge::testing::random_matrix;
using forge::testing::random_vector;
using forge::testing::relative_error;

namespace {

Vector layer_softmax(const Vector& logits) {
  Vector e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

TEST_CASE("forward with zero parameters yields the projection bias") {
  auto model = zeros_like(init_model(ModelShape{4, 5, 3, 6}, 1));
  Rng rng(2);
  model.head.projection_bias = random_vector(rng, 6);
  Vector e = embed(model, random_matrix(rng, 7, 4));
  CHECK(relative_error(e, model.head.projection_bias) < 1e-15);
}

TEST_CASE("single frame pooling reduces to the projected layer stack") {
  auto model = init_model(ModelShape{4, 5, 3, 6}, 7);
  Rng rng(3);
  model.head.value_layer_logits = random_vector(rng, 3);
  Matrix x = random_matrix(rng, 1, 4);
  Vector h = x.row(0).transpose();
  Vector mix = Vector::Zero(5);
  const Vector w = layer_softmax(model.head.value_layer_logits);
  for (int l = 0; l < 3; ++l) {
    h = (model.encoder.weights[static_cast<std::size_t>(l)] * h + model.encoder.biases[static_cast<std::size_t>(l)]).array().tanh();
    mix += w(l) * h;
  }
  Vector expected = model.head.projection * mix + model.head.projection_bias;
  CHECK(relative_error(embed(model, x), expected) < 1e-12);
}

TEST_CASE("forward is deterministic and checks dimensions") {
  auto a = init_model(ModelShape{4, 5, 2, 3}, 11);
  auto b = init_model(ModelShape{4, 5, 2, 3}, 11);
  Rng rng(1);
  Matrix x = random_matrix(rng, 9, 4);
  CHECK(embed(a, x) == embed(b, x));
  CHECK_THROWS_AS(embed(a, random_matrix(rng, 9, 3)), Error);
  CHECK_THROWS_AS(init_model(ModelShape{4, 5, 1, 3}, 1), Error);
}

TEST_CASE("backward matches finite differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto model = init_model(ModelShape{6, 6, 2, 5}, seed, 1.5);
    Rng rng(seed + 50);
    model.head.key_layer_logits = random_vector(rng, 2);
    model.head.value_layer_logits = random_vector(rng, 2);
    model.head.query = random_vector(rng, 6, 2.0);
    Matrix x = random_matrix(rng, 5, 6);
    Vector g = random_vector(rng, 5);

    ForwardCache cache;
    forward(model, x, &cache);
    SpeakerModel grads = zeros_like(model);
    backward(model, cache, g, grads);
    const Vector analytic = flatten(grads);

    const Vector theta = flatten(model);
    SpeakerModel probe = model;
    Vector numeric(theta.size());
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      Vector t = theta;
      t(i) += 1e-5;
      unflatten(probe, t);
      const double up = g.dot(embed(probe, x));
      t(i) -= 2e-5;
      unflatten(probe, t);
      const double down = g.dot(embed(probe, x));
      numeric(i) = (up - down) / 2e-5;
    }
    CHECK(relative_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("backward rejects a stale cache") {
  auto model = init_model(ModelShape{3, 4, 2, 2}, 1);
  Rng rng(1);
  ForwardCache cache;
  Matrix x = random_matrix(rng, 3, 3);
  forward(model, x, &cache);
  unflatten(model, flatten(model));
  SpeakerModel grads = zeros_like(model);
  CHECK_THROWS_AS(backward(model, cache, Vector::Ones(2), grads), Error);
}

TEST_CASE("parameter groups follow layer order") {
  auto model = init_model(ModelShape{3, 4, 3, 2}, 1);
  std::vector<int> groups;
  visit_params(model, [&](int g, double*, Eigen::Index) { groups.push_back(g); });
  CHECK(std::is_sorted(groups.begin(), groups.end()));
  CHECK(groups.front() == 1);
  CHECK(groups.back() == 4);
  CHECK(parameter_count(model) == flatten(model).size());
}

TEST_CASE("checkpoint round trip") {
  auto dir = forge::testing::temp_dir("ckpt");
  Checkpoint ck{init_model(ModelShape{3, 4, 2, 5}, 4), Matrix::Constant(7, 5, 0.25)};
  save_checkpoint(ck, dir / "m.ckpt");
  auto back = load_checkpoint(dir / "m.ckpt");
  quantize_to_f32(ck);
  CHECK(flatten(back.model) == flatten(ck.model));
  CHECK(back.class_weights == ck.class_weights);
  CHECK(shape_of(back.model).num_layers == 2);
}
