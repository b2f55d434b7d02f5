#include "forge/simulator.hpp"

#include "forge/error.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace forge::sim {

void validate(const WorldConfig& cfg) {
  if (cfg.num_speakers < 2) fail(ErrorKind::BadConfig, "world needs at least 2 speakers");
  if (cfg.feature_dim < 1) fail(ErrorKind::BadConfig, "feature_dim must be positive");
  if (cfg.utterances_per_speaker < 1 || cfg.frames_per_utterance < 1)
    fail(ErrorKind::BadConfig, "utterance and frame counts must be positive");
  if (cfg.channel_variance < 0.0 || cfg.within_variance < 0.0) fail(ErrorKind::BadConfig, "variances must be nonnegative");
  if (cfg.channel_rank < 0 || cfg.channel_rank > cfg.feature_dim)
    fail(ErrorKind::BadConfig, "channel_rank must be in [0, feature_dim]");
  if (cfg.num_channels < 0) fail(ErrorKind::BadConfig, "num_channels must be nonnegative");
  if (cfg.min_angle_deg < 0.0 || cfg.min_angle_deg >= 90.0) fail(ErrorKind::BadConfig, "min_angle_deg must be in [0, 90)");
}

namespace {

Matrix draw_speakers(const WorldConfig& cfg, Rng& rng) {
  const double max_cos = std::cos(cfg.min_angle_deg * std::numbers::pi / 180.0);
  Matrix means(cfg.num_speakers, cfg.feature_dim);
  for (int s = 0; s < cfg.num_speakers; ++s) {
    int attempts = 0;
    while (true) {
      if (++attempts > 100000) fail(ErrorKind::BadConfig, "cannot place speakers with the requested minimum angle");
      Vector v(cfg.feature_dim);
      for (int j = 0; j < cfg.feature_dim; ++j) v(j) = rng.normal();
      const double n = v.norm();
      if (n < 1e-12) continue;
      v /= n;
      bool ok = true;
      for (int t = 0; t < s && ok; ++t) ok = means.row(t).dot(v) <= max_cos;
      if (!ok) continue;
      means.row(s) = v.transpose();
      break;
    }
  }
  return means;
}

}  // namespace

SpeakerWorld generate_world(const WorldConfig& cfg) {
  validate(cfg);
  Rng rng(mix_seed(cfg.seed, 0));
  SpeakerWorld w;
  w.config = cfg;
  w.speaker_means = draw_speakers(cfg, rng);
  const int rank = cfg.channel_rank == 0 ? cfg.feature_dim : cfg.channel_rank;
  if (rank == cfg.feature_dim) {
    w.channel_basis = Matrix::Identity(cfg.feature_dim, cfg.feature_dim);
  } else {
    Eigen::MatrixXd g(cfg.feature_dim, rank);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    w.channel_basis = Matrix(Eigen::MatrixXd(qr.householderQ() * Eigen::MatrixXd::Identity(cfg.feature_dim, rank)));
  }
  w.channel_bank.resize(cfg.num_channels, cfg.feature_dim);
  for (int c = 0; c < cfg.num_channels; ++c) w.channel_bank.row(c) = channel_offset(w, rng).transpose();
  return w;
}

SpeakerWorld evaluation_world(const SpeakerWorld& train, int num_speakers, int utterances_per_speaker,
                              std::uint64_t seed, const std::string& id_prefix) {
  WorldConfig cfg = train.config;
  cfg.num_speakers = num_speakers;
  cfg.utterances_per_speaker = utterances_per_speaker;
  cfg.seed = seed;
  cfg.id_prefix = id_prefix;
  validate(cfg);
  Rng rng(mix_seed(seed, 0));
  SpeakerWorld w = train;
  w.config = cfg;
  w.speaker_means = draw_speakers(cfg, rng);
  return w;
}

Vector channel_offset(const SpeakerWorld& world, Rng& rng) {
  const double cstd = std::sqrt(world.config.channel_variance);
  Vector z(world.channel_basis.cols());
  for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = cstd * rng.normal();
  return world.channel_basis * z;
}

GeneratedDataset::GeneratedDataset(FeatureSet features, std::vector<int> truth, std::vector<int> channel_ids)
    : features_(std::move(features)), truth_(std::move(truth)), channel_ids_(std::move(channel_ids)) {
  features_.validate();
  if (truth_.size() != features_.size() || channel_ids_.size() != features_.size())
    fail(ErrorKind::LengthMismatch, "truth and channel ids must cover every utterance");
}

const std::vector<int>& GeneratedDataset::truth(TruthUse use) const {
  if (sealed())
    fail(ErrorKind::TruthAccessDenied, use == TruthUse::Reporting ? "truth read for reporting inside a sealed stage"
                                                                   : "truth read for supervision inside a sealed stage");
  return truth_;
}

GeneratedDataset generate_dataset(const SpeakerWorld& world) {
  const auto& cfg = world.config;
  const int f = cfg.feature_dim;
  const double wstd = std::sqrt(cfg.within_variance);
  FeatureSet fs;
  std::vector<int> truth, channels;
  std::vector<std::string> raw_ids;
  for (int s = 0; s < cfg.num_speakers; ++s) {
    for (int u = 0; u < cfg.utterances_per_speaker; ++u) {
      const auto index = static_cast<std::uint64_t>(s * cfg.utterances_per_speaker + u);
      Rng rng(mix_seed(cfg.seed, 1000 + index));
      Vector channel(f);
      int channel_id = static_cast<int>(index);
      if (cfg.num_channels > 0) {
        channel_id = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_channels)));
        channel = world.channel_bank.row(channel_id).transpose();
      } else {
        channel = channel_offset(world, rng);
      }
      Matrix frames(cfg.frames_per_utterance, f);
      for (int t = 0; t < cfg.frames_per_utterance; ++t)
        for (int j = 0; j < f; ++j) frames(t, j) = world.speaker_means(s, j) + channel(j) + wstd * rng.normal();
      raw_ids.push_back(cfg.id_prefix + std::to_string(s) + "_" + std::to_string(u));
      fs.frames.push_back(std::move(frames));
      truth.push_back(s);
      channels.push_back(channel_id);
    }
  }
  fs.ids = make_ids(raw_ids);
  return GeneratedDataset(std::move(fs), std::move(truth), std::move(channels));
}

Matrix perturb(const Matrix& frames, const Perturbation& p, Rng& rng) {
  Matrix out = frames;
  if (p.channel_std > 0.0) {
    Vector offset(frames.cols());
    for (Eigen::Index j = 0; j < frames.cols(); ++j) offset(j) = p.channel_std * rng.normal();
    out.rowwise() += offset.transpose();
  }
  if (p.noise_std > 0.0)
    for (Eigen::Index t = 0; t < out.rows(); ++t)
      for (Eigen::Index j = 0; j < out.cols(); ++j) out(t, j) += p.noise_std * rng.normal();
  return out;
}

Matrix random_crop(const Matrix& frames, int len, Rng& rng) {
  const auto t = static_cast<int>(frames.rows());
  if (t < 1) fail(ErrorKind::EmptyUtterance, "utterance has no frames");
  if (len < 1) fail(ErrorKind::BadConfig, "crop length must be positive");
  const int start = t > len ? static_cast<int>(rng.below(static_cast<std::uint64_t>(t - len + 1))) : 0;
  Matrix out(len, frames.cols());
  for (int i = 0; i < len; ++i) out.row(i) = frames.row((start + i) % t);
  return out;
}

std::vector<Matrix> make_views(const Matrix& frames, const ViewConfig& cfg, std::uint64_t seed) {
  if (frames.rows() < cfg.global_len) fail(ErrorKind::TooShort, "utterance is shorter than a global view");
  if (cfg.num_global < 1 || cfg.num_local < 0 || cfg.local_len < 1) fail(ErrorKind::BadConfig, "invalid view counts");
  Rng rng(seed);
  std::vector<Matrix> views;
  for (int g = 0; g < cfg.num_global; ++g) {
    Matrix crop = random_crop(frames, cfg.global_len, rng);
    views.push_back(perturb(crop, cfg.global, rng));
  }
  for (int l = 0; l < cfg.num_local; ++l) {
    Matrix crop = random_crop(frames, cfg.local_len, rng);
    views.push_back(perturb(crop, cfg.local, rng));
  }
  return views;
}

CorruptedLabels corrupt_labels(std::span<const int> labels, int num_classes, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::BadFraction, "corruption fraction must be in [0,1]");
  if (num_classes < 2 && p > 0.0) fail(ErrorKind::BadConfig, "corruption needs at least two classes");
  const std::size_t n = labels.size();
  CorruptedLabels out{std::vector<int>(labels.begin(), labels.end()), std::vector<char>(n, 0)};
  const auto count = static_cast<std::size_t>(std::floor(p * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = order[i];
    const int old = labels[j];
    if (old < 0 || old >= num_classes) fail(ErrorKind::LabelOutOfRange, "label outside [0, num_classes)");
    int r = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes - 1)));
    if (r >= old) ++r;
    out.labels[j] = r;
    out.corrupted[j] = 1;
  }
  return out;
}

}  // namespace forge::sim
