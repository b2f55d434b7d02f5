#include "forge/eval.hpp"

#include "forge/error.hpp"
#include "forge/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace forge::eval {

std::vector<int> frame_offsets(int length, int frame_len, int num_frames) {
  if (length < 1) fail(ErrorKind::EmptyUtterance, "utterance has no frames");
  if (frame_len < 1 || num_frames < 1) fail(ErrorKind::BadConfig, "frame_len and num_frames must be positive");
  std::vector<int> out(static_cast<std::size_t>(num_frames), 0);
  const int span = std::max(0, length - frame_len);
  if (num_frames == 1) return out;
  for (int i = 0; i < num_frames; ++i)
    out[static_cast<std::size_t>(i)] =
        static_cast<int>(std::lround(static_cast<double>(i) * span / static_cast<double>(num_frames - 1)));
  return out;
}

Matrix frame_window(const Matrix& frames, int offset, int frame_len) {
  const auto t = static_cast<int>(frames.rows());
  if (t < 1) fail(ErrorKind::EmptyUtterance, "utterance has no frames");
  Matrix out(frame_len, frames.cols());
  for (int i = 0; i < frame_len; ++i) out.row(i) = frames.row((offset + i) % t);
  return out;
}

std::vector<Vector> extract_frame_embeddings(const Matrix& utterance, const SpeakerModel& model,
                                             const FrameOptions& opts) {
  if (utterance.rows() < 1) fail(ErrorKind::EmptyUtterance, "utterance has no frames");
  const int len = static_cast<int>(utterance.rows());
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(opts.num_frames));
  for (int offset : frame_offsets(len, opts.frame_len, opts.num_frames))
    out.push_back(embed(model, frame_window(utterance, offset, opts.frame_len)));
  return out;
}

FrameEmbeddings extract_all(const FeatureSet& features, const SpeakerModel& model, const FrameOptions& opts) {
  FrameEmbeddings out;
  out.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i)
    out.emplace(features.ids[i].str(), extract_frame_embeddings(features.frames[i], model, opts));
  return out;
}

EmbeddingMatrix utterance_embeddings(const FeatureSet& features, const SpeakerModel& model, const FrameOptions& opts) {
  Matrix out(static_cast<Eigen::Index>(features.size()), model.embed_dim());
  for (std::size_t i = 0; i < features.size(); ++i) {
    Vector mean = Vector::Zero(model.embed_dim());
    const auto frames = extract_frame_embeddings(features.frames[i], model, opts);
    for (const auto& e : frames) mean += l2_normalize(e);
    out.row(static_cast<Eigen::Index>(i)) = (mean / static_cast<double>(frames.size())).transpose();
  }
  return EmbeddingMatrix(features.ids, std::move(out));
}

double multi_frame_score(const std::vector<Vector>& enroll, const std::vector<Vector>& test) {
  if (enroll.empty() || test.empty()) fail(ErrorKind::EmptyUtterance, "no frame embeddings to score");
  double total = 0.0;
  for (const auto& e : enroll) {
    const Vector eu = l2_normalize(e);
    for (const auto& t : test) total += eu.dot(l2_normalize(t));
  }
  return total / static_cast<double>(enroll.size() * test.size());
}

ScoredTrials score_trials(const TrialList& trials, const FrameEmbeddings& embeddings) {
  ScoredTrials out;
  out.scores.reserve(trials.size());
  out.is_target.reserve(trials.size());
  for (const auto& t : trials.rows()) {
    auto e = embeddings.find(t.enroll.str());
    auto s = embeddings.find(t.test.str());
    if (e == embeddings.end()) fail(ErrorKind::MissingUtterance, "no embeddings for '" + t.enroll.str() + "'");
    if (s == embeddings.end()) fail(ErrorKind::MissingUtterance, "no embeddings for '" + t.test.str() + "'");
    out.scores.push_back(multi_frame_score(e->second, s->second));
    out.is_target.push_back(t.is_target ? 1 : 0);
  }
  return out;
}

TrialList all_pairs_trials(const std::vector<UtteranceId>& ids, std::span<const int> speakers) {
  if (ids.size() != speakers.size()) fail(ErrorKind::LengthMismatch, "ids and speakers differ in length");
  std::vector<Trial> rows;
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = i + 1; j < ids.size(); ++j) rows.push_back(Trial{speakers[i] == speakers[j], ids[i], ids[j]});
  return TrialList(std::move(rows));
}

namespace {

void check_two_classes(const ScoredTrials& scored) {
  if (scored.scores.size() != scored.is_target.size()) fail(ErrorKind::Misaligned, "scores and flags differ in length");
  const auto targets = std::count(scored.is_target.begin(), scored.is_target.end(), 1);
  if (targets == 0 || targets == static_cast<long>(scored.size()))
    fail(ErrorKind::OneClassOnly, "need at least one target and one nontarget trial");
  for (double s : scored.scores)
    if (!std::isfinite(s)) fail(ErrorKind::DegenerateData, "non-finite score");
}

}  // namespace

std::vector<RocPoint> roc_points(const ScoredTrials& scored) {
  check_two_classes(scored);
  std::vector<std::pair<double, char>> sorted;
  sorted.reserve(scored.size());
  for (std::size_t i = 0; i < scored.size(); ++i) sorted.emplace_back(scored.scores[i], scored.is_target[i]);
  std::sort(sorted.begin(), sorted.end());
  const double n_tar = static_cast<double>(std::count(scored.is_target.begin(), scored.is_target.end(), 1));
  const double n_non = static_cast<double>(scored.size()) - n_tar;

  std::vector<RocPoint> out;
  std::size_t below_tar = 0, below_non = 0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    const double thr = sorted[i].first;
    out.push_back({thr, below_tar / n_tar, (n_non - below_non) / n_non});
    while (i < sorted.size() && sorted[i].first == thr) {
      if (sorted[i].second) ++below_tar;
      else ++below_non;
      ++i;
    }
  }
  out.push_back({sorted.back().first, 1.0, 0.0});
  return out;
}

EerResult eer(const ScoredTrials& scored) {
  const auto roc = roc_points(scored);
  for (std::size_t i = 0; i + 1 < roc.size(); ++i) {
    const double d0 = roc[i].frr - roc[i].far;
    const double d1 = roc[i + 1].frr - roc[i + 1].far;
    if (d0 == 0.0) return {roc[i].frr, roc[i].threshold};
    if (d0 < 0.0 && d1 >= 0.0) {
      const double t = d0 / (d0 - d1);
      return {roc[i].frr + t * (roc[i + 1].frr - roc[i].frr),
              roc[i].threshold + t * (roc[i + 1].threshold - roc[i].threshold)};
    }
  }
  return {roc.back().frr, roc.back().threshold};
}

DcfResult min_dcf(const ScoredTrials& scored, const DcfParams& params) {
  if (!(params.p_target > 0.0 && params.p_target < 1.0)) fail(ErrorKind::BadConfig, "p_target must be in (0,1)");
  if (!(params.c_miss > 0.0 && params.c_fa > 0.0)) fail(ErrorKind::BadConfig, "costs must be positive");
  const auto roc = roc_points(scored);
  const double norm = std::min(params.c_miss * params.p_target, params.c_fa * (1.0 - params.p_target));
  DcfResult best;
  best.raw = std::numeric_limits<double>::infinity();
  for (const auto& p : roc) {
    const double dcf = params.c_miss * params.p_target * p.frr + params.c_fa * (1.0 - params.p_target) * p.far;
    if (dcf < best.raw) {
      best.raw = dcf;
      best.threshold = p.threshold;
    }
  }
  best.normalized = best.raw / norm;
  best.min_dcf = params.normalized ? best.normalized : best.raw;
  return best;
}

namespace {

struct Contingency {
  std::map<std::pair<int, int>, double> cells;
  std::map<int, double> rows;
  std::map<int, double> cols;
  double n = 0.0;
};

Contingency contingency(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) fail(ErrorKind::LengthMismatch, "partitions differ in length");
  if (a.empty()) fail(ErrorKind::LengthMismatch, "partitions are empty");
  Contingency c;
  for (std::size_t i = 0; i < a.size(); ++i) {
    c.cells[{a[i], b[i]}] += 1.0;
    c.rows[a[i]] += 1.0;
    c.cols[b[i]] += 1.0;
  }
  c.n = static_cast<double>(a.size());
  return c;
}

double comb2(double x) { return x * (x - 1.0) / 2.0; }

double entropy(const std::map<int, double>& counts, double n) {
  double h = 0.0;
  for (const auto& [label, c] : counts) h -= (c / n) * std::log(c / n);
  return h;
}

}  // namespace

double ari(std::span<const int> labels_a, std::span<const int> labels_b) {
  const auto c = contingency(labels_a, labels_b);
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [cell, v] : c.cells) index += comb2(v);
  for (const auto& [l, v] : c.rows) sum_a += comb2(v);
  for (const auto& [l, v] : c.cols) sum_b += comb2(v);
  const double total = comb2(c.n);
  const double expected = total > 0.0 ? sum_a * sum_b / total : 0.0;
  const double max_index = 0.5 * (sum_a + sum_b);
  // Both partitions trivial in the same way (one cluster, or all singletons).
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

NmiResult nmi(std::span<const int> labels_a, std::span<const int> labels_b, NmiNormalization norm) {
  const auto c = contingency(labels_a, labels_b);
  if (c.rows.size() == 1 && c.cols.size() == 1) return {1.0, true};
  double mi = 0.0;
  for (const auto& [cell, v] : c.cells)
    mi += (v / c.n) * std::log(v * c.n / (c.rows.at(cell.first) * c.cols.at(cell.second)));
  const double ha = entropy(c.rows, c.n);
  const double hb = entropy(c.cols, c.n);
  double denom = 0.0;
  switch (norm) {
    case NmiNormalization::Arithmetic: denom = 0.5 * (ha + hb); break;
    case NmiNormalization::Geometric: denom = std::sqrt(ha * hb); break;
    case NmiNormalization::Min: denom = std::min(ha, hb); break;
  }
  if (denom <= 0.0) return {0.0, false};
  return {std::clamp(mi / denom, 0.0, 1.0), false};
}

NmiNormalization parse_nmi_normalization(const std::string& name) {
  if (name == "arithmetic") return NmiNormalization::Arithmetic;
  if (name == "geometric") return NmiNormalization::Geometric;
  if (name == "min") return NmiNormalization::Min;
  fail(ErrorKind::BadConfig, "unknown NMI normalization '" + name + "'");
}

}  // namespace forge::eval
