#pragma once

#include "forge/core.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace forge::lossgate {

struct Gmm1D {
  std::array<double, 2> weights{0.5, 0.5};
  std::array<double, 2> means{0.0, 0.0};  // means[0] <= means[1]
  std::array<double, 2> variances{1.0, 1.0};
  double log_likelihood = 0.0;
  int em_iterations = 0;
  std::vector<double> log_likelihood_history;
};

struct GmmOptions {
  int max_iters = 200;
  double tol = 1e-8;
  std::uint64_t seed = 0;  // initialization is deterministic; kept for API symmetry
  double variance_floor = 1e-8;
};

// EM for a two-component 1-D mixture. Means start at the 25th/75th
// percentiles, variances at the sample variance, weights at 1/2.
// TooFewSamples below 4 samples; DegenerateData when every value is equal.
Gmm1D gmm_fit_em(std::span<const double> losses, const GmmOptions& opts = {});

double component_density(const Gmm1D& g, int k, double x);  // w_k * N(x; mu_k, var_k)
double mixture_density(const Gmm1D& g, double x);

// True when the fitted mixture density has two modes, i.e. the loss
// distribution splits into a low-loss and a high-loss population.
bool is_bimodal(const Gmm1D& g);

struct Threshold {
  double tau1 = 0.0;
  bool fallback = false;  // no intersection inside (mu0, mu1)
};

// Root of w0 N0(x) = w1 N1(x) inside (mu0, mu1); otherwise the
// precision-weighted midpoint (mu0 s1 + mu1 s0) / (s0 + s1).
Threshold intersection_threshold(const Gmm1D& g);

enum class GateStatus { Reliable, UnreliableCorrectable, UnreliableDiscarded };

std::string_view to_string(GateStatus s);

struct GateDecision {
  std::vector<GateStatus> status;
  double tau1 = 0.0;
  double tau2 = 0.5;
  std::size_t reliable = 0;
  std::size_t correctable = 0;
  std::size_t discarded = 0;
};

// Reliable iff loss <= tau1; otherwise correctable iff max class prob > tau2.
GateDecision gate_samples(std::span<const double> losses, const Matrix& probs, double tau1, double tau2);

GateDecision all_reliable(std::size_t n);

}  // namespace forge::lossgate
