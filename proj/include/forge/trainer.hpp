#pragma once

#include "forge/core.hpp"
#include "forge/losses.hpp"
#include "forge/lossgate.hpp"
#include "forge/model.hpp"
#include "forge/simulator.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace forge::train {

enum class OptimizerKind { Sgd, Adam };

OptimizerKind parse_optimizer(const std::string& name);
std::string to_string(OptimizerKind k);

struct TrainConfig {
  double base_lr = 0.1;
  double lr_epoch_multiplier = 0.95;
  double layer_decay = 0.8;  // lr_l = base_lr * layer_decay^(L - l)
  double anchor_l2 = 0.2;
  int batch_size = 32;
  int epochs = 5;
  double margin = 0.2;
  double scale = 30.0;
  int segment_frames = 12;  // one 3 s segment
  double input_length_multiplier = 1.0;
  sim::Perturbation augment{0.1, 0.05};
  double lc_weight = 1.0;
  double lc_sharpen = 0.1;
  double tau2 = 0.5;
  bool gating = true;
  bool label_correction = true;
  int gate_warmup_epochs = 2;
  int lc_delay_epochs = 1;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

void validate(const TrainConfig& cfg);

int crop_frames(const TrainConfig& cfg);

struct LmftConfig {
  double margin = 0.5;
  double length_multiplier = 5.0 / 3.0;  // 3 s segments become 5 s
  int epochs = 2;
};

// Larger margin, longer inputs, fewer epochs; everything else kept.
TrainConfig lmft_switch(TrainConfig cfg, const LmftConfig& lmft = {});

// Rates for parameter groups 1..L+1 (index 0 is group 1) at a given epoch.
// Nondecreasing in the group index whenever layer_decay <= 1.
std::vector<double> group_learning_rates(double base_lr, double layer_decay, double epoch_multiplier, int epoch,
                                         int num_layers);

// Frozen copy of the weights fine-tuning starts from.
class AnchorSnapshot {
 public:
  explicit AnchorSnapshot(SpeakerModel model) : model_(std::move(model)) {}
  const SpeakerModel& model() const noexcept { return model_; }

 private:
  SpeakerModel model_;
};

// Per-layer ||theta_l - theta_l^anchor|| over weights and biases.
std::vector<double> layer_weight_distance(const LayeredEncoder& now, const AnchorSnapshot& anchor);

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Sgd;
  Vector m, v;  // model parameters followed by the output-layer weights
  long step = 0;
};

// The model plus an output layer: AAM class weights or the DINO projector.
struct TrainState {
  SpeakerModel model;
  Matrix out_weights;
  OptimizerState opt;
};

struct UpdateRule {
  std::vector<double> group_lr;  // groups 1..L+1; the output layer uses the last
  double anchor_l2 = 0.0;
  OptimizerKind kind = OptimizerKind::Sgd;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// One optimizer step on accumulated gradients. The anchor term
// lambda * ||theta - theta_anchor||^2 covers encoder parameters only and is
// skipped when anchor is null.
void apply_update(TrainState& st, const SpeakerModel& grads, const Matrix& out_grads, const UpdateRule& rule,
                  const AnchorSnapshot* anchor);

// Normalized class means of full-utterance embeddings.
Matrix init_class_weights(const FeatureSet& data, std::span<const int> labels, int num_classes, const SpeakerModel& model);

// ---------------------------------------------------------------------------
// Pseudo-label fine-tuning.

struct EpochRecord {
  int epoch = 0;
  std::vector<double> losses;  // AAM loss per sample, before gating
  Matrix probs;                // clean-view class posteriors
  double mean_loss = 0.0;
  double learning_rate = 0.0;
  std::size_t reliable = 0, correctable = 0, discarded = 0;
  bool gate_active = false;
  bool lc_active = false;
};

struct EpochOptions {
  int epoch = 0;
  const lossgate::GateDecision* gate = nullptr;  // null: every sample reliable
  bool lc_active = false;
  std::uint64_t seed = 0;
};

EpochRecord train_epoch(const FeatureSet& data, std::span<const int> labels, TrainState& state, const TrainConfig& cfg,
                        const AnchorSnapshot& anchor, const EpochOptions& opts);

struct GateEpoch {
  int epoch = 0;
  bool active = false;
  bool unimodal = false;          // no gating this epoch
  bool threshold_fallback = false;
  bool degenerate = false;
  lossgate::Gmm1D gmm;
  double tau1 = 0.0;
  std::size_t reliable = 0, correctable = 0, discarded = 0;
};

struct FinetuneOutcome {
  TrainState state;
  std::vector<EpochRecord> epochs;
  std::vector<GateEpoch> gates;
  std::vector<std::vector<double>> drift;  // per epoch, per layer
};

using EpochHook = std::function<void(const EpochRecord&, const GateEpoch&)>;

// Epochs 0..warmup-1 train on every sample. From then on, each epoch fits the
// gate to the previous epoch's losses; label correction starts lc_delay epochs
// after gating.
FinetuneOutcome finetune(const FeatureSet& data, std::span<const int> labels, int num_classes, TrainState init,
                         const AnchorSnapshot& anchor, const TrainConfig& cfg, std::uint64_t seed,
                         const EpochHook& hook = {});

GateEpoch decide_gate(const EpochRecord& previous, int epoch, double tau2);

// ---------------------------------------------------------------------------
// Step 1: DINO self-distillation on simulator views.

struct DinoTrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double lr = 0.1;
  double layer_decay = 1.0;
  double lr_epoch_multiplier = 0.95;
  losses::DinoConfig dino;
  sim::ViewConfig views;
  OptimizerKind optimizer = OptimizerKind::Sgd;
};

void validate(const DinoTrainConfig& cfg);

struct DinoOutcome {
  SpeakerModel student;
  SpeakerModel teacher;
  Matrix teacher_projector;
  std::vector<double> epoch_loss;
};

DinoOutcome train_dino(const FeatureSet& data, const SpeakerModel& init, const DinoTrainConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// End-to-end contrastive training.

enum class PositiveSampling { SameUtterance, TruthDifferentUtterance };

PositiveSampling parse_positive_sampling(const std::string& name);
std::string to_string(PositiveSampling p);

struct ContrastiveConfig {
  int epochs = 5;
  int batch_pairs = 32;
  double lr = 0.1;
  double layer_decay = 1.0;
  double anchor_l2 = 0.0;
  double lr_epoch_multiplier = 0.95;
  double temperature = 0.1;
  int segment_frames = 12;
  sim::Perturbation augment{0.1, 0.05};
  OptimizerKind optimizer = OptimizerKind::Sgd;
};

void validate(const ContrastiveConfig& cfg);

struct ContrastiveOutcome {
  SpeakerModel model;
  std::vector<double> epoch_loss;
  std::vector<std::vector<double>> drift;
};

// `speakers` is only read for TruthDifferentUtterance.
ContrastiveOutcome train_contrastive(const FeatureSet& data, const SpeakerModel& init, const ContrastiveConfig& cfg,
                                     PositiveSampling sampling, std::span<const int> speakers, std::uint64_t seed);

}  // namespace forge::train
