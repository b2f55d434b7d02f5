#pragma once

#include "forge/core.hpp"

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace forge {
struct SpeakerModel;
}

namespace forge::eval {

struct ScoredTrials {
  std::vector<double> scores;
  std::vector<char> is_target;

  std::size_t size() const noexcept { return scores.size(); }
};

using FrameEmbeddings = std::unordered_map<std::string, std::vector<Vector>>;

// ---------------------------------------------------------------------------
// Multi-frame extraction and trial scoring.

struct FrameOptions {
  int num_frames = 15;
  int frame_len = 12;  // frames per scoring window
};

// Start offsets of num_frames windows evenly spaced over [0, length - frame_len].
std::vector<int> frame_offsets(int length, int frame_len, int num_frames);

// Window starting at `offset`, repeat-padded when the utterance is shorter
// than frame_len.
Matrix frame_window(const Matrix& frames, int offset, int frame_len);

std::vector<Vector> extract_frame_embeddings(const Matrix& utterance, const SpeakerModel& model,
                                             const FrameOptions& opts);

FrameEmbeddings extract_all(const FeatureSet& features, const SpeakerModel& model, const FrameOptions& opts);

// One row per utterance: mean of its l2-normalized frame embeddings.
EmbeddingMatrix utterance_embeddings(const FeatureSet& features, const SpeakerModel& model, const FrameOptions& opts);

// Mean of all cross-pair cosines between the l2-normalized frame embeddings.
double multi_frame_score(const std::vector<Vector>& enroll, const std::vector<Vector>& test);

ScoredTrials score_trials(const TrialList& trials, const FrameEmbeddings& embeddings);

// All pairs of utterances, target when speaker labels agree.
TrialList all_pairs_trials(const std::vector<UtteranceId>& ids, std::span<const int> speakers);

// ---------------------------------------------------------------------------
// Detection metrics. An utterance is accepted when score >= threshold.

struct RocPoint {
  double threshold;
  double frr;  // targets rejected
  double far;  // nontargets accepted
};

// One point per distinct score plus a final reject-everything point.
std::vector<RocPoint> roc_points(const ScoredTrials& scored);

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// Linear interpolation between the two ROC points where FRR - FAR changes sign.
EerResult eer(const ScoredTrials& scored);

struct DcfParams {
  double p_target = 0.01;
  double c_miss = 1.0;
  double c_fa = 1.0;
  bool normalized = true;
};

struct DcfResult {
  double min_dcf = 0.0;  // normalized or raw per DcfParams::normalized
  double normalized = 0.0;
  double raw = 0.0;
  double threshold = 0.0;
};

DcfResult min_dcf(const ScoredTrials& scored, const DcfParams& params);

// ---------------------------------------------------------------------------
// Partition agreement.

double ari(std::span<const int> labels_a, std::span<const int> labels_b);

enum class NmiNormalization { Arithmetic, Geometric, Min };

struct NmiResult {
  double value = 0.0;
  bool degenerate = false;  // both sides a single cluster
};

NmiResult nmi(std::span<const int> labels_a, std::span<const int> labels_b,
              NmiNormalization norm = NmiNormalization::Arithmetic);

NmiNormalization parse_nmi_normalization(const std::string& name);

}  // namespace forge::eval
