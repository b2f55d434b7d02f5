#include "forge/lossgate.hpp"

#include "forge/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace forge::lossgate {

namespace {

double percentile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double log_normal(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
}

}  // namespace

Gmm1D gmm_fit_em(std::span<const double> losses, const GmmOptions& opts) {
  const std::size_t n = losses.size();
  if (n < 4) fail(ErrorKind::TooFewSamples, "GMM fit needs at least 4 samples");
  for (double x : losses)
    if (!std::isfinite(x)) fail(ErrorKind::DegenerateData, "non-finite loss value");
  std::vector<double> sorted(losses.begin(), losses.end());
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front() == sorted.back()) fail(ErrorKind::DegenerateData, "all losses are identical");

  double mean = 0.0;
  for (double x : losses) mean += x;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double x : losses) var += (x - mean) * (x - mean);
  var = std::max(var / static_cast<double>(n), opts.variance_floor);

  Gmm1D g;
  g.means = {percentile(sorted, 0.25), percentile(sorted, 0.75)};
  if (g.means[0] == g.means[1]) g.means = {mean - 0.5 * std::sqrt(var), mean + 0.5 * std::sqrt(var)};
  g.variances = {var, var};
  g.weights = {0.5, 0.5};

  std::vector<double> resp(n);  // responsibility of component 1
  double prev = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < opts.max_iters; ++it) {
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double a = std::log(g.weights[0]) + log_normal(losses[i], g.means[0], g.variances[0]);
      const double b = std::log(g.weights[1]) + log_normal(losses[i], g.means[1], g.variances[1]);
      const double mx = std::max(a, b);
      const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
      ll += lse;
      resp[i] = std::exp(b - lse);
    }
    if (ll < prev - 1e-10 * std::max(1.0, std::abs(prev)))
      throw std::logic_error("EM log-likelihood decreased");
    g.log_likelihood_history.push_back(ll);
    g.log_likelihood = ll;
    if (it > 0 && ll - prev < opts.tol) break;
    prev = ll;

    double n1 = 0.0, s1 = 0.0, s0 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      n1 += resp[i];
      s1 += resp[i] * losses[i];
      s0 += (1.0 - resp[i]) * losses[i];
    }
    const double n0 = static_cast<double>(n) - n1;
    // A component that lost all mass keeps its previous parameters.
    if (n0 <= 0.0 || n1 <= 0.0) break;
    g.means = {s0 / n0, s1 / n1};
    double v0 = 0.0, v1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      v0 += (1.0 - resp[i]) * (losses[i] - g.means[0]) * (losses[i] - g.means[0]);
      v1 += resp[i] * (losses[i] - g.means[1]) * (losses[i] - g.means[1]);
    }
    g.variances = {std::max(v0 / n0, opts.variance_floor), std::max(v1 / n1, opts.variance_floor)};
    g.weights = {n0 / static_cast<double>(n), n1 / static_cast<double>(n)};
    g.em_iterations = it + 1;
  }

  if (g.means[0] > g.means[1]) {
    std::swap(g.means[0], g.means[1]);
    std::swap(g.variances[0], g.variances[1]);
    std::swap(g.weights[0], g.weights[1]);
  }
  return g;
}

double component_density(const Gmm1D& g, int k, double x) {
  const auto i = static_cast<std::size_t>(k);
  return g.weights[i] * std::exp(log_normal(x, g.means[i], g.variances[i]));
}

double mixture_density(const Gmm1D& g, double x) { return component_density(g, 0, x) + component_density(g, 1, x); }

bool is_bimodal(const Gmm1D& g) {
  // Every mode of a two-component mixture lies between the two means.
  constexpr int kGrid = 2001;
  if (!(g.means[1] > g.means[0])) return false;
  std::vector<double> d(kGrid);
  for (int i = 0; i < kGrid; ++i)
    d[static_cast<std::size_t>(i)] = mixture_density(g, g.means[0] + (g.means[1] - g.means[0]) * i / (kGrid - 1));
  std::vector<double> left(kGrid), right(kGrid);
  left[0] = d[0];
  for (int i = 1; i < kGrid; ++i) left[static_cast<std::size_t>(i)] = std::max(left[static_cast<std::size_t>(i - 1)], d[static_cast<std::size_t>(i)]);
  right[kGrid - 1] = d[kGrid - 1];
  for (int i = kGrid - 2; i >= 0; --i)
    right[static_cast<std::size_t>(i)] = std::max(right[static_cast<std::size_t>(i + 1)], d[static_cast<std::size_t>(i)]);
  for (int i = 1; i + 1 < kGrid; ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (d[u] < left[u] * (1.0 - 1e-6) && d[u] < right[u] * (1.0 - 1e-6)) return true;
  }
  return false;
}

Threshold intersection_threshold(const Gmm1D& g) {
  const double m0 = g.means[0], m1 = g.means[1];
  if (m0 == m1) fail(ErrorKind::DegenerateComponents, "components share the same mean");
  const double lo = std::min(m0, m1), hi = std::max(m0, m1);
  const double v0 = g.variances[0], v1 = g.variances[1];
  const double s0 = std::sqrt(v0), s1 = std::sqrt(v1);

  // log(w0 N0(x)) - log(w1 N1(x)) = a x^2 + b x + c
  const double a = 1.0 / (2.0 * v1) - 1.0 / (2.0 * v0);
  const double b = m0 / v0 - m1 / v1;
  const double c = m1 * m1 / (2.0 * v1) - m0 * m0 / (2.0 * v0) + std::log(g.weights[0] / s0) - std::log(g.weights[1] / s1);

  const double midpoint = (m0 * s1 + m1 * s0) / (s0 + s1);
  std::vector<double> roots;
  if (std::abs(a) < 1e-12 * (std::abs(b) + 1e-300)) {
    if (b != 0.0) roots.push_back(-c / b);
  } else {
    const double disc = b * b - 4.0 * a * c;
    if (disc >= 0.0) {
      const double q = -0.5 * (b + std::copysign(std::sqrt(disc), b));
      if (q != 0.0) roots.push_back(c / q);
      roots.push_back(q / a);
    }
  }
  double best = 0.0;
  bool found = false;
  for (double r : roots) {
    if (!(r > lo && r < hi)) continue;
    if (!found || std::abs(r - midpoint) < std::abs(best - midpoint)) {
      best = r;
      found = true;
    }
  }
  if (!found) return {midpoint, true};
  return {best, false};
}

std::string_view to_string(GateStatus s) {
  switch (s) {
    case GateStatus::Reliable: return "reliable";
    case GateStatus::UnreliableCorrectable: return "correctable";
    case GateStatus::UnreliableDiscarded: return "discarded";
  }
  return "unknown";
}

GateDecision gate_samples(std::span<const double> losses, const Matrix& probs, double tau1, double tau2) {
  if (static_cast<Eigen::Index>(losses.size()) != probs.rows())
    fail(ErrorKind::Misaligned, "losses and class probabilities cover different sample counts");
  GateDecision out;
  out.tau1 = tau1;
  out.tau2 = tau2;
  out.status.reserve(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) {
    GateStatus s = GateStatus::Reliable;
    if (losses[i] > tau1) {
      s = probs.row(static_cast<Eigen::Index>(i)).maxCoeff() > tau2 ? GateStatus::UnreliableCorrectable
                                                                     : GateStatus::UnreliableDiscarded;
    }
    out.status.push_back(s);
    switch (s) {
      case GateStatus::Reliable: ++out.reliable; break;
      case GateStatus::UnreliableCorrectable: ++out.correctable; break;
      case GateStatus::UnreliableDiscarded: ++out.discarded; break;
    }
  }
  return out;
}

GateDecision all_reliable(std::size_t n) {
  GateDecision out;
  out.status.assign(n, GateStatus::Reliable);
  out.tau1 = std::numeric_limits<double>::infinity();
  out.reliable = n;
  return out;
}

}  // namespace forge::lossgate
