#pragma once

#include "forge/core.hpp"
#include "forge/random.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace forge::sim {

struct WorldConfig {
  int num_speakers = 60;
  int feature_dim = 32;
  int utterances_per_speaker = 20;
  int frames_per_utterance = 30;
  double channel_variance = 0.2;   // per channel-subspace coordinate
  // Channel offsets live in a random subspace of this rank; 0 means full rank.
  int channel_rank = 4;
  double within_variance = 0.1;    // per dimension, per frame
  // Size of the shared channel bank. 0 gives every utterance its own channel.
  int num_channels = 0;
  double min_angle_deg = 45.0;
  std::string id_prefix = "s";
  std::uint64_t seed = 0;
};

void validate(const WorldConfig& cfg);

struct SpeakerWorld {
  WorldConfig config;
  Matrix speaker_means;  // S x f, unit rows
  Matrix channel_basis;  // f x r, orthonormal columns
  Matrix channel_bank;   // C x f, empty when channels are per utterance
};

SpeakerWorld generate_world(const WorldConfig& cfg);

// Fresh speakers in the same acoustic conditions: the channel subspace and
// channel bank are kept, speaker means are redrawn from `seed`.
SpeakerWorld evaluation_world(const SpeakerWorld& train, int num_speakers, int utterances_per_speaker,
                              std::uint64_t seed, const std::string& id_prefix = "e");

// One draw from the world's channel distribution.
Vector channel_offset(const SpeakerWorld& world, Rng& rng);

enum class TruthUse { Reporting, SupervisedDiagnostic };

// Features and channel ids are freely readable. Ground-truth speakers are
// behind truth(), which throws TruthAccessDenied while the dataset is sealed.
class GeneratedDataset {
 public:
  GeneratedDataset(FeatureSet features, std::vector<int> truth, std::vector<int> channel_ids);

  const FeatureSet& features() const noexcept { return features_; }
  const std::vector<int>& channel_ids() const noexcept { return channel_ids_; }
  std::size_t size() const noexcept { return features_.size(); }

  const std::vector<int>& truth(TruthUse use) const;

  bool sealed() const noexcept { return sealed_ > 0; }

  class Seal {
   public:
    explicit Seal(const GeneratedDataset& d) : d_(&d) { ++d_->sealed_; }
    ~Seal() { --d_->sealed_; }
    Seal(const Seal&) = delete;
    Seal& operator=(const Seal&) = delete;

   private:
    const GeneratedDataset* d_;
  };
  Seal seal() const { return Seal(*this); }

 private:
  FeatureSet features_;
  std::vector<int> truth_;
  std::vector<int> channel_ids_;
  mutable int sealed_ = 0;
};

// Utterance u of speaker s is "<prefix><s>_<u>", frames drawn from a stream
// derived from (seed, utterance index).
GeneratedDataset generate_dataset(const SpeakerWorld& world);

// ---------------------------------------------------------------------------
// Views and augmentation.

struct Perturbation {
  double noise_std = 0.0;
  double channel_std = 0.0;  // one fresh offset for the whole view
};

Matrix perturb(const Matrix& frames, const Perturbation& p, Rng& rng);

// Contiguous crop of `len` frames at a random offset, repeat-padded when the
// utterance is shorter.
Matrix random_crop(const Matrix& frames, int len, Rng& rng);

struct ViewConfig {
  int num_global = 2;
  int num_local = 4;
  int global_len = 20;
  int local_len = 8;
  Perturbation global{0.1, 0.05};
  Perturbation local{0.2, 0.1};
};

// Globals first, then locals. TooShort when the utterance has fewer frames
// than a global view.
std::vector<Matrix> make_views(const Matrix& frames, const ViewConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------

struct CorruptedLabels {
  std::vector<int> labels;
  std::vector<char> corrupted;
};

// Exactly floor(p * N) labels moved to a uniformly drawn different class.
CorruptedLabels corrupt_labels(std::span<const int> labels, int num_classes, double p, std::uint64_t seed);

}  // namespace forge::sim
