#include "doctest.h"
#include "test_util.hpp"

#include "forge/core.hpp"
#include "forge/error.hpp"
#include "forge/io.hpp"

#include <fstream>

using namespace forge;
using forge::testing::random_matrix;
using forge::testing::random_vector;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected forge::Error");
  return ErrorKind::Io;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST_CASE("l2_normalize examples") {
  const Vector a = l2_normalize(vec({3, 4}));
  CHECK(a(0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(a(1) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(l2_normalize(vec({1, 0, 0})) == vec({1, 0, 0}));
  CHECK(kind_of([] { l2_normalize(vec({0, 0})); }) == ErrorKind::ZeroNorm);
}

TEST_CASE("cosine_similarity examples and errors") {
  CHECK(cosine_similarity(vec({1, 0}), vec({1, 0})) == doctest::Approx(1.0));
  CHECK(cosine_similarity(vec({1, 0}), vec({0, 1})) == doctest::Approx(0.0));
  CHECK(std::abs(cosine_similarity(vec({1, 1}), vec({1, 0})) - 0.70710678) < 1e-8);
  CHECK(kind_of([] { cosine_similarity(vec({1, 0}), vec({1, 0, 0})); }) == ErrorKind::DimMismatch);
  CHECK(kind_of([] { cosine_similarity(vec({0, 0}), vec({1, 0})); }) == ErrorKind::ZeroNorm);
}

TEST_CASE("cosine is scale invariant and equals the dot of normalized vectors") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng.below(16));
    const Vector u = random_vector(rng, d);
    const Vector v = random_vector(rng, d);
    const double alpha = rng.uniform(1e-3, 1e3);
    const double beta = rng.uniform(1e-3, 1e3);
    const double base = cosine_similarity(u, v);
    CHECK(std::abs(cosine_similarity(alpha * u, beta * v) - base) < 1e-9);
    CHECK(std::abs(l2_normalize(u).dot(l2_normalize(v)) - base) < 1e-9);
    CHECK(std::abs(l2_normalize(u).norm() - 1.0) < 1e-6);
  }
}

TEST_CASE("UtteranceId rejects empty and whitespace") {
  CHECK(kind_of([] { UtteranceId(""); }) == ErrorKind::BadId);
  CHECK(kind_of([] { UtteranceId("a b"); }) == ErrorKind::BadId);
  CHECK(kind_of([] { UtteranceId("a\tb"); }) == ErrorKind::BadId);
  CHECK(UtteranceId("spk01-utt02").str() == "spk01-utt02");
}

TEST_CASE("EmbeddingMatrix invariants") {
  CHECK(kind_of([] { EmbeddingMatrix(make_ids({"a", "a"}), Matrix::Ones(2, 3)); }) == ErrorKind::DuplicateId);
  CHECK(kind_of([] { EmbeddingMatrix(make_ids({"a"}), Matrix::Ones(2, 3)); }) == ErrorKind::DimMismatch);
  Matrix bad = Matrix::Ones(1, 2);
  bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK(kind_of([&] { EmbeddingMatrix(make_ids({"a"}), bad); }) == ErrorKind::DegenerateData);
}

TEST_CASE("PseudoLabelMap compaction") {
  auto m = PseudoLabelMap::compact(make_ids({"a", "b", "c", "d"}), {7, 3, 7, 10}, 2);
  CHECK(m.num_classes() == 3);
  CHECK(m.labels() == std::vector<int>{1, 0, 1, 2});
  CHECK(m.iteration() == 2);
  CHECK(*m.label_of(UtteranceId("d")) == 2);
  CHECK(kind_of([] { PseudoLabelMap(make_ids({"a", "b"}), {0, 2}, 0); }) == ErrorKind::LabelOutOfRange);
}

TEST_CASE("embedding file round trip is the identity on float-representable data") {
  const auto dir = forge::testing::temp_dir("core_emb");
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = 1 + static_cast<Eigen::Index>(rng.below(12));
    const auto d = 1 + static_cast<Eigen::Index>(rng.below(9));
    Matrix data = random_matrix(rng, n, d, 3.0).cast<float>().cast<double>();
    std::vector<std::string> raw;
    for (Eigen::Index i = 0; i < n; ++i) raw.push_back("utt-" + std::to_string(trial) + "-" + std::to_string(i));
    EmbeddingMatrix m(make_ids(raw), data);
    io::save_embeddings(m, dir / "m.emb");
    CHECK(io::load_embeddings(dir / "m.emb") == m);
    // Bytes are stable across a second save.
    io::save_embeddings(io::load_embeddings(dir / "m.emb"), dir / "m2.emb");
    CHECK(io::read_file(dir / "m.emb") == io::read_file(dir / "m2.emb"));
  }
}

TEST_CASE("embedding file layout is little-endian with ID lines") {
  const auto dir = forge::testing::temp_dir("core_layout");
  Matrix data(1, 2);
  data << 1.0, -2.0;
  io::save_embeddings(EmbeddingMatrix(make_ids({"x"}), data), dir / "x.emb");
  const auto bytes = io::read_file(dir / "x.emb");
  const std::string expected("EMB1\x01\x00\x00\x00\x02\x00\x00\x00x\n\x00\x00\x80\x3f\x00\x00\x00\xc0", 22);
  CHECK(bytes == expected);
}

TEST_CASE("corrupt embedding files") {
  const auto dir = forge::testing::temp_dir("core_corrupt");
  { std::ofstream(dir / "empty.emb", std::ios::binary); }
  CHECK(kind_of([&] { io::load_embeddings(dir / "empty.emb"); }) == ErrorKind::BadMagic);
  CHECK(kind_of([&] { io::load_embeddings(dir / "missing.emb"); }) == ErrorKind::Io);

  // Header claims 5 rows, only 4 rows present.
  {
    std::ofstream out(dir / "short.emb", std::ios::binary);
    io::write_magic(out, "EMB1");
    io::write_u32(out, 5);
    io::write_u32(out, 3);
    for (int i = 0; i < 4; ++i) out << "u" << i << '\n';
    for (int i = 0; i < 12; ++i) io::write_f32(out, 0.5 * i);
  }
  CHECK(kind_of([&] { io::load_embeddings(dir / "short.emb"); }) == ErrorKind::TruncatedData);

  {
    std::ofstream out(dir / "zero_dim.emb", std::ios::binary);
    io::write_magic(out, "EMB1");
    io::write_u32(out, 1);
    io::write_u32(out, 0);
    out << "u\n";
  }
  CHECK(kind_of([&] { io::load_embeddings(dir / "zero_dim.emb"); }) == ErrorKind::DimMismatch);
}

TEST_CASE("feature, label, trial, score and loss text formats round trip") {
  const auto dir = forge::testing::temp_dir("core_text");
  Rng rng(3);
  FeatureSet fs;
  fs.ids = make_ids({"a", "b"});
  fs.frames = {random_matrix(rng, 3, 4).cast<float>().cast<double>(), random_matrix(rng, 5, 4).cast<float>().cast<double>()};
  io::save_features(fs, dir / "f.fea");
  const auto back = io::load_features(dir / "f.fea");
  CHECK(back.ids == fs.ids);
  CHECK(back.frames[0] == fs.frames[0]);
  CHECK(back.frames[1] == fs.frames[1]);

  auto labels = PseudoLabelMap(make_ids({"a", "b", "c"}), {0, 1, 0}, 0);
  io::save_labels(labels, dir / "l.tsv");
  CHECK(io::read_file(dir / "l.tsv") == "a\t0\nb\t1\nc\t0\n");
  CHECK(io::load_labels(dir / "l.tsv") == labels);

  TrialList trials({Trial{true, UtteranceId("a"), UtteranceId("c")}, Trial{false, UtteranceId("a"), UtteranceId("b")}});
  io::save_trials(trials, dir / "t.txt");
  CHECK(io::read_file(dir / "t.txt") == "1 a c\n0 a b\n");
  CHECK(io::load_trials(dir / "t.txt").rows().size() == 2);
  CHECK(kind_of([] { TrialList({Trial{true, UtteranceId("a"), UtteranceId("a")}}); }) == ErrorKind::BadConfig);

  std::vector<io::ScoredRow> scores{{UtteranceId("a"), UtteranceId("c"), 0.25, true}};
  io::save_scores(scores, dir / "s.tsv");
  auto s = io::load_scores(dir / "s.tsv");
  CHECK(s.size() == 1);
  CHECK(s[0].score == 0.25);
  CHECK(s[0].is_target);

  io::save_losses({{UtteranceId("a"), 1.5}}, dir / "loss.tsv");
  CHECK(io::load_losses(dir / "loss.tsv")[0].loss == 1.5);
}
