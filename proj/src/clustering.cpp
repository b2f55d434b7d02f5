#include "forge/clustering.hpp"

#include "forge/error.hpp"
#include "forge/random.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <stdexcept>

namespace forge::clustering {

namespace {

// Plain loop so the summation order is fixed.
double squared_distance(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
  double s = 0.0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    const double d = a(i, c) - b(j, c);
    s += d * d;
  }
  return s;
}

void check_k(const Matrix& points, int k) {
  if (k < 1) fail(ErrorKind::BadTarget, "k must be at least 1");
  if (k > points.rows()) fail(ErrorKind::TooFewSamples, "k exceeds the number of samples");
}

}  // namespace

std::vector<int> nearest_centroid(const Matrix& points, const Matrix& centroids) {
  if (points.cols() != centroids.cols()) fail(ErrorKind::DimMismatch, "point and centroid dimensions differ");
  std::vector<int> out(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      const double d = squared_distance(points, i, centroids, c);
      if (d < best) {
        best = d;
        arg = static_cast<int>(c);
      }
    }
    out[static_cast<std::size_t>(i)] = arg;
  }
  return out;
}

Matrix kmeans_plus_plus_init(const Matrix& points, int k, std::uint64_t seed) {
  check_k(points, k);
  Rng rng(seed);
  const Eigen::Index n = points.rows();
  Matrix centers(k, points.cols());
  std::vector<char> chosen(static_cast<std::size_t>(n), 0);
  Eigen::Index first = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
  centers.row(0) = points.row(first);
  chosen[static_cast<std::size_t>(first)] = 1;
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) d2[static_cast<std::size_t>(i)] = squared_distance(points, i, centers, 0);

  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!chosen[static_cast<std::size_t>(i)]) total += d2[static_cast<std::size_t>(i)];
    Eigen::Index pick = -1;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (chosen[static_cast<std::size_t>(i)] || d2[static_cast<std::size_t>(i)] <= 0.0) continue;
        acc += d2[static_cast<std::size_t>(i)];
        pick = i;
        if (acc > r) break;
      }
    } else {
      // Remaining points coincide with chosen centers.
      for (Eigen::Index i = 0; i < n && pick < 0; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) pick = i;
    }
    centers.row(c) = points.row(pick);
    chosen[static_cast<std::size_t>(pick)] = 1;
    for (Eigen::Index i = 0; i < n; ++i)
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], squared_distance(points, i, centers, c));
  }
  return centers;
}

KMeansModel kmeans_lloyd(const Matrix& points, Matrix init, int max_iters, double tol, std::uint64_t seed) {
  check_k(points, static_cast<int>(init.rows()));
  if (init.cols() != points.cols()) fail(ErrorKind::DimMismatch, "initial centroids have the wrong dimension");
  if (max_iters < 1) fail(ErrorKind::BadConfig, "max_iters must be at least 1");
  const Eigen::Index n = points.rows();
  const Eigen::Index k = init.rows();

  KMeansModel model;
  model.seed = seed;
  model.centroids = std::move(init);

  for (int it = 0; it < max_iters; ++it) {
    auto assign = nearest_centroid(points, model.centroids);
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) inertia += squared_distance(points, i, model.centroids, assign[static_cast<std::size_t>(i)]);
    if (!model.inertia_history.empty() && inertia > model.inertia_history.back() * (1.0 + 1e-12) + 1e-12)
      throw std::logic_error("k-means inertia increased between Lloyd iterations");
    model.inertia_history.push_back(inertia);

    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = assign[static_cast<std::size_t>(i)];
      sums.row(c) += points.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    Matrix next = model.centroids;
    for (Eigen::Index c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0) next.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);

    for (Eigen::Index empty = 0; empty < k; ++empty) {
      if (counts[static_cast<std::size_t>(empty)] > 0) continue;
      std::vector<double> sse(static_cast<std::size_t>(k), 0.0);
      for (Eigen::Index i = 0; i < n; ++i) {
        const int c = assign[static_cast<std::size_t>(i)];
        sse[static_cast<std::size_t>(c)] += squared_distance(points, i, next, c);
      }
      const auto donor = static_cast<Eigen::Index>(std::max_element(sse.begin(), sse.end()) - sse.begin());
      Eigen::Index far = -1;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (assign[static_cast<std::size_t>(i)] != donor) continue;
        const double d = squared_distance(points, i, next, donor);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far < 0 || counts[static_cast<std::size_t>(donor)] < 2) break;  // nothing left to split
      assign[static_cast<std::size_t>(far)] = static_cast<int>(empty);
      next.row(empty) = points.row(far);
      counts[static_cast<std::size_t>(empty)] = 1;
      sums.row(donor) -= points.row(far);
      --counts[static_cast<std::size_t>(donor)];
      next.row(donor) = sums.row(donor) / static_cast<double>(counts[static_cast<std::size_t>(donor)]);
    }

    double movement = 0.0;
    for (Eigen::Index c = 0; c < k; ++c) movement = std::max(movement, std::sqrt(squared_distance(next, c, model.centroids, c)));
    model.centroids = std::move(next);
    model.iterations_run = it + 1;
    if (movement < tol) break;
  }

  model.assignment = nearest_centroid(points, model.centroids);
  model.member_counts.assign(static_cast<std::size_t>(k), 0);
  model.inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int c = model.assignment[static_cast<std::size_t>(i)];
    model.inertia += squared_distance(points, i, model.centroids, c);
    ++model.member_counts[static_cast<std::size_t>(c)];
  }
  return model;
}

KMeansModel kmeans_fit(const Matrix& points, const KMeansOptions& opts) {
  check_k(points, opts.k);
  return kmeans_lloyd(points, kmeans_plus_plus_init(points, opts.k, opts.seed), opts.max_iters, opts.tol, opts.seed);
}

KMeansModel kmeans_fit(const EmbeddingMatrix& m, const KMeansOptions& opts) { return kmeans_fit(m.data(), opts); }

Matrix cosine_distance_matrix(const Matrix& centroids) {
  const Matrix unit = l2_normalize_rows(centroids);
  Matrix d = Matrix::Ones(unit.rows(), unit.rows()) - unit * unit.transpose();
  for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, i) = 0.0;
  return d;
}

AhcResult ahc_from_distances(const Matrix& distances, std::span<const int> member_counts, int target_k) {
  const Eigen::Index k = distances.rows();
  if (target_k < 1) fail(ErrorKind::BadTarget, "target_k must be at least 1");
  if (target_k > k) fail(ErrorKind::BadTarget, "target_k exceeds the number of initial clusters");
  if (distances.cols() != k) fail(ErrorKind::DimMismatch, "distance matrix must be square");
  if (static_cast<Eigen::Index>(member_counts.size()) != k) fail(ErrorKind::DimMismatch, "member_counts must have k entries");

  Matrix link = distances;
  // Empty clusters weigh as singletons so the linkage stays defined.
  std::vector<double> weight(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < k; ++i) weight[static_cast<std::size_t>(i)] = std::max(member_counts[static_cast<std::size_t>(i)], 1);
  std::vector<char> active(static_cast<std::size_t>(k), 1);
  std::vector<int> parent(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < k; ++i) parent[static_cast<std::size_t>(i)] = static_cast<int>(i);

  AhcResult out;
  double prev = -std::numeric_limits<double>::infinity();
  for (Eigen::Index remaining = k; remaining > target_k; --remaining) {
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index ba = -1, bb = -1;
    for (Eigen::Index a = 0; a < k; ++a) {
      if (!active[static_cast<std::size_t>(a)]) continue;
      for (Eigen::Index b = a + 1; b < k; ++b) {
        if (!active[static_cast<std::size_t>(b)]) continue;
        if (link(a, b) < best) {
          best = link(a, b);
          ba = a;
          bb = b;
        }
      }
    }
    if (best < prev - 1e-12) {
      ++out.inversions;
      std::cerr << "ahc: linkage inversion " << best << " < " << prev << '\n';
    }
    prev = best;
    out.merges.push_back({static_cast<int>(ba), static_cast<int>(bb), best});
    const double wa = weight[static_cast<std::size_t>(ba)];
    const double wb = weight[static_cast<std::size_t>(bb)];
    for (Eigen::Index c = 0; c < k; ++c) {
      if (!active[static_cast<std::size_t>(c)] || c == ba || c == bb) continue;
      const double merged = (wa * link(ba, c) + wb * link(bb, c)) / (wa + wb);
      link(ba, c) = merged;
      link(c, ba) = merged;
    }
    weight[static_cast<std::size_t>(ba)] = wa + wb;
    active[static_cast<std::size_t>(bb)] = 0;
    parent[static_cast<std::size_t>(bb)] = static_cast<int>(ba);
  }

  auto root = [&](int i) {
    while (parent[static_cast<std::size_t>(i)] != i) i = parent[static_cast<std::size_t>(i)];
    return i;
  };
  std::vector<int> label_of_root(static_cast<std::size_t>(k), -1);
  int next = 0;
  for (Eigen::Index i = 0; i < k; ++i)
    if (active[static_cast<std::size_t>(i)]) label_of_root[static_cast<std::size_t>(i)] = next++;
  out.cluster_map.resize(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < k; ++i)
    out.cluster_map[static_cast<std::size_t>(i)] = label_of_root[static_cast<std::size_t>(root(static_cast<int>(i)))];
  return out;
}

AhcResult ahc_merge(const KMeansModel& model, std::span<const int> member_counts, int target_k) {
  if (target_k < 1) fail(ErrorKind::BadTarget, "target_k must be at least 1");
  return ahc_from_distances(cosine_distance_matrix(model.centroids), member_counts, target_k);
}

PseudoLabelMap assign_pseudo_labels(const EmbeddingMatrix& m, const KMeansModel& model,
                                    std::span<const int> cluster_map, int iteration) {
  if (m.dim() != model.centroids.cols()) fail(ErrorKind::DimMismatch, "embedding and centroid dimensions differ");
  if (static_cast<Eigen::Index>(cluster_map.size()) != model.centroids.rows())
    fail(ErrorKind::DimMismatch, "cluster map must cover every centroid");
  const auto nearest = nearest_centroid(m.data(), model.centroids);
  std::vector<int> raw;
  raw.reserve(nearest.size());
  for (int c : nearest) raw.push_back(cluster_map[static_cast<std::size_t>(c)]);
  return PseudoLabelMap::compact(m.ids(), raw, iteration);
}

ClusterOutcome cluster_embeddings(const EmbeddingMatrix& m, const ClusterOptions& opts, int iteration) {
  if (opts.target_k > opts.k) fail(ErrorKind::BadTarget, "target_k exceeds k");
  EmbeddingMatrix unit(m.ids(), l2_normalize_rows(m.data()));
  auto km = kmeans_fit(unit, KMeansOptions{opts.k, opts.max_iters, opts.tol, opts.seed});
  auto ahc = ahc_merge(km, km.member_counts, opts.target_k);
  auto labels = assign_pseudo_labels(unit, km, ahc.cluster_map, iteration);
  return ClusterOutcome{std::move(km), std::move(ahc), std::move(labels)};
}

}  // namespace forge::clustering
