#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"

#include "forge/clustering.hpp"
#include "forge/error.hpp"
#include "forge/eval.hpp"

#include <set>

using namespace forge;
using forge::testing::naive_ahc;
using forge::testing::naive_lloyd;
using namespace forge::clustering;
using forge::testing::numbered_ids;
using forge::testing::random_matrix;

namespace {

struct Blobs {
  EmbeddingMatrix m;
  std::vector<int> truth;
};

Blobs two_blobs(std::uint64_t seed) {
  Rng rng(seed);
  Matrix x(40, 4);
  std::vector<int> truth;
  for (int i = 0; i < 40; ++i) {
    const int b = i % 2;
    truth.push_back(b);
    for (int t = 0; t < 4; ++t) x(i, t) = rng.normal() * 0.1 + (t == b ? 1.0 : 0.0);
  }
  return {EmbeddingMatrix(numbered_ids("u", 40), x), truth};
}

}  // namespace

TEST_CASE("kmeans separates two distant blobs") {
  auto blobs = two_blobs(3);
  auto model = kmeans_fit(blobs.m, KMeansOptions{2, 50, 1e-6, 11});
  CHECK(eval::ari(model.assignment, blobs.truth) == doctest::Approx(1.0));
}

TEST_CASE("kmeans with k equal to N has zero inertia") {
  Rng rng(1);
  Matrix x = random_matrix(rng, 12, 3);
  auto model = kmeans_fit(x, KMeansOptions{12, 50, 1e-6, 2});
  CHECK(model.inertia == 0.0);
  std::set<int> used(model.assignment.begin(), model.assignment.end());
  CHECK(used.size() == 12);
}

TEST_CASE("kmeans matches a naive Lloyd run from the same init") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    Matrix x = random_matrix(rng, 100, 3);
    Matrix init = kmeans_plus_plus_init(x, 5, seed);
    auto model = kmeans_lloyd(x, init, 50, 1e-6, seed);
    CHECK(model.inertia == naive_lloyd(x, init, 50, 1e-6));
  }
}

TEST_CASE("kmeans inertia history never increases and is deterministic") {
  Rng rng(9);
  Matrix x = random_matrix(rng, 200, 5);
  auto a = kmeans_fit(x, KMeansOptions{8, 50, 1e-9, 4});
  auto b = kmeans_fit(x, KMeansOptions{8, 50, 1e-9, 4});
  for (std::size_t i = 1; i < a.inertia_history.size(); ++i) CHECK(a.inertia_history[i] <= a.inertia_history[i - 1]);
  CHECK(a.centroids == b.centroids);
  CHECK(a.assignment == b.assignment);
}

TEST_CASE("kmeans repairs empty clusters") {
  Matrix x(6, 1);
  x << 0, 0, 0, 10, 10, 11;
  Matrix init(3, 1);
  init << 0, 10, 100;  // the third centroid attracts nothing
  auto model = kmeans_lloyd(x, init, 10, 1e-9);
  for (int c : model.member_counts) CHECK(c > 0);
}

TEST_CASE("kmeans rejects k above N") {
  Matrix x = Matrix::Zero(3, 2);
  CHECK_THROWS_AS(kmeans_fit(x, KMeansOptions{4, 10, 1e-6, 0}), Error);
  try {
    kmeans_fit(x, KMeansOptions{4, 10, 1e-6, 0});
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::TooFewSamples);
  }
}

TEST_CASE("ahc identity when target equals k") {
  Rng rng(2);
  KMeansModel model;
  model.centroids = random_matrix(rng, 6, 3);
  std::vector<int> counts(6, 1);
  auto r = ahc_merge(model, counts, 6);
  CHECK(r.merges.empty());
  for (int i = 0; i < 6; ++i) CHECK(r.cluster_map[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("ahc merges the unique closest pair") {
  Matrix d(3, 3);
  d << 0, 0.1, 0.5,  //
      0.1, 0, 0.6,   //
      0.5, 0.6, 0;
  std::vector<int> counts{1, 1, 1};
  auto r = ahc_from_distances(d, counts, 2);
  REQUIRE(r.merges.size() == 1);
  CHECK(r.merges[0].cluster_a == 0);
  CHECK(r.merges[0].cluster_b == 1);
  CHECK(r.merges[0].distance == doctest::Approx(0.1));
  CHECK(r.cluster_map[0] == r.cluster_map[1]);
  CHECK(r.cluster_map[2] != r.cluster_map[0]);
}

TEST_CASE("ahc ties go to the lowest index pair") {
  Matrix d = Matrix::Constant(4, 4, 0.3);
  d.diagonal().setZero();
  std::vector<int> counts(4, 1);
  auto r = ahc_from_distances(d, counts, 3);
  CHECK(r.merges[0].cluster_a == 0);
  CHECK(r.merges[0].cluster_b == 1);
}

TEST_CASE("ahc matches a naive agglomerative oracle") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 100);
    KMeansModel model;
    model.centroids = random_matrix(rng, 10, 4);
    std::vector<int> counts;
    for (int i = 0; i < 10; ++i) counts.push_back(1 + static_cast<int>(rng.below(5)));
    auto r = ahc_merge(model, counts, 4);
    auto oracle = naive_ahc(cosine_distance_matrix(model.centroids), counts, 4);
    CHECK(r.merges.size() == 6);
    CHECK(eval::ari(r.cluster_map, oracle) == doctest::Approx(1.0));
    std::set<int> labels(r.cluster_map.begin(), r.cluster_map.end());
    CHECK(labels.size() == 4);
  }
}

TEST_CASE("ahc rejects bad targets") {
  Matrix d = Matrix::Zero(3, 3);
  std::vector<int> counts(3, 1);
  CHECK_THROWS_AS(ahc_from_distances(d, counts, 0), Error);
  CHECK_THROWS_AS(ahc_from_distances(d, counts, 4), Error);
}

TEST_CASE("pseudo labels from clustering") {
  SUBCASE("utterance at a centroid takes that centroid's label") {
    KMeansModel model;
    model.centroids = Matrix(3, 2);
    model.centroids << 1, 0, 0, 1, -1, 0;
    std::vector<int> map{0, 1, 0};
    Matrix x(2, 2);
    x << 0, 1, -1, 0;
    auto labels = assign_pseudo_labels(EmbeddingMatrix(numbered_ids("u", 2), x), model, map, 0);
    CHECK(labels.label_of(UtteranceId("u0")) != labels.label_of(UtteranceId("u1")));
  }
  SUBCASE("identical utterances collapse to one class") {
    Matrix x = Matrix::Ones(10, 3);
    KMeansModel model;
    model.centroids = Matrix(2, 3);
    model.centroids << 1, 1, 1, -1, 0, 0;
    std::vector<int> map{1, 0};
    auto labels = assign_pseudo_labels(EmbeddingMatrix(numbered_ids("u", 10), x), model, map, 0);
    CHECK(labels.num_classes() == 1);
  }
  SUBCASE("blobs recover the ground truth") {
    auto blobs = two_blobs(5);
    auto out = cluster_embeddings(blobs.m, ClusterOptions{8, 2, 50, 1e-6, 3}, 0);
    CHECK(eval::ari(out.labels.labels_for(blobs.m.ids()), blobs.truth) == doctest::Approx(1.0));
  }
  SUBCASE("dimension mismatch") {
    KMeansModel model;
    model.centroids = Matrix::Zero(2, 3);
    std::vector<int> map{0, 1};
    CHECK_THROWS_AS(assign_pseudo_labels(EmbeddingMatrix(numbered_ids("u", 2), Matrix::Ones(2, 2)), model, map, 0), Error);
  }
}

TEST_CASE("pseudo labels are invariant to row order up to renaming") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    Matrix x = random_matrix(rng, 60, 4);
    auto ids = numbered_ids("u", 60);
    EmbeddingMatrix m(ids, x);
    auto model = kmeans_fit(m, KMeansOptions{6, 50, 1e-6, seed});
    auto ahc = ahc_merge(model, model.member_counts, 3);

    std::vector<int> perm(60);
    for (int i = 0; i < 60; ++i) perm[static_cast<std::size_t>(i)] = i;
    rng.shuffle(perm.begin(), perm.end());
    Matrix px(60, 4);
    std::vector<UtteranceId> pids;
    for (int i = 0; i < 60; ++i) {
      px.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
      pids.push_back(ids[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
    }
    auto a = assign_pseudo_labels(m, model, ahc.cluster_map, 0);
    auto b = assign_pseudo_labels(EmbeddingMatrix(pids, px), model, ahc.cluster_map, 0);
    CHECK(eval::ari(a.labels_for(ids), b.labels_for(ids)) == doctest::Approx(1.0));
  }
}
