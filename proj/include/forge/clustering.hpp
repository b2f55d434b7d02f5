#pragma once

#include "forge/core.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace forge::clustering {

struct KMeansModel {
  Matrix centroids;                     // k x d
  double inertia = 0.0;                 // final sum of squared distances
  int iterations_run = 0;
  std::uint64_t seed = 0;
  std::vector<double> inertia_history;  // one entry per Lloyd iteration
  std::vector<int> assignment;          // nearest centroid per input row
  std::vector<int> member_counts;       // rows per centroid

  int k() const { return static_cast<int>(centroids.rows()); }
};

struct KMeansOptions {
  int k = 500;
  int max_iters = 50;
  double tol = 1e-6;
  std::uint64_t seed = 0;
};

// D^2-weighted seeding. Deterministic for a given seed.
Matrix kmeans_plus_plus_init(const Matrix& points, int k, std::uint64_t seed);

// Lloyd iterations from a given initialization. Stops when the largest
// centroid displacement falls below tol. Empty clusters take the point farthest
// from the centroid of the currently highest-inertia cluster.
KMeansModel kmeans_lloyd(const Matrix& points, Matrix init, int max_iters, double tol, std::uint64_t seed = 0);

KMeansModel kmeans_fit(const Matrix& points, const KMeansOptions& opts);
KMeansModel kmeans_fit(const EmbeddingMatrix& m, const KMeansOptions& opts);

// Nearest centroid by squared Euclidean distance, lowest index on ties.
std::vector<int> nearest_centroid(const Matrix& points, const Matrix& centroids);

struct AhcMerge {
  int cluster_a;  // surviving representative (lower index)
  int cluster_b;  // absorbed representative
  double distance;
};

struct AhcResult {
  std::vector<AhcMerge> merges;  // k - target_k entries
  std::vector<int> cluster_map;  // initial cluster -> 0..target_k-1
  int inversions = 0;            // merges whose distance fell below the previous one
};

// Count-weighted average linkage over a symmetric distance matrix between the
// k initial clusters. Ties go to the lowest (a, b) representative pair.
AhcResult ahc_from_distances(const Matrix& distances, std::span<const int> member_counts, int target_k);

// Average linkage on cosine distance between k-means centroids.
AhcResult ahc_merge(const KMeansModel& model, std::span<const int> member_counts, int target_k);

Matrix cosine_distance_matrix(const Matrix& centroids);

PseudoLabelMap assign_pseudo_labels(const EmbeddingMatrix& m, const KMeansModel& model,
                                    std::span<const int> cluster_map, int iteration);

struct ClusterOptions {
  int k = 500;
  int target_k = 60;
  int max_iters = 50;
  double tol = 1e-6;
  std::uint64_t seed = 0;
};

struct ClusterOutcome {
  KMeansModel kmeans;
  AhcResult ahc;
  PseudoLabelMap labels;
};

// k-means on the l2-normalized rows, AHC down to target_k, then labeling.
ClusterOutcome cluster_embeddings(const EmbeddingMatrix& m, const ClusterOptions& opts, int iteration);

}  // namespace forge::clustering
