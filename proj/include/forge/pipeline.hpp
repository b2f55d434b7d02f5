#pragma once

#include "forge/clustering.hpp"
#include "forge/eval.hpp"
#include "forge/model.hpp"
#include "forge/simulator.hpp"
#include "forge/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace forge::pipeline {

enum class Mode { PseudoLabel, SslContrastiveE2e };

Mode parse_mode(const std::string& name);
std::string to_string(Mode m);

struct RunConfig {
  std::uint64_t seed = 0;
  Mode mode = Mode::PseudoLabel;
  int num_refinement_iterations = 2;
  train::PositiveSampling positive_sampling = train::PositiveSampling::SameUtterance;

  sim::WorldConfig world;
  int eval_speakers = 20;
  int eval_utterances = 10;
  double frames_per_second = 4.0;
  // EMB1 file replacing Step 1; rows must cover the training utterances.
  std::string external_embeddings;

  ModelShape model;
  double init_gain = 1.0;

  train::DinoTrainConfig dino;
  clustering::ClusterOptions cluster;
  train::TrainConfig train;
  bool lmft_enabled = true;
  train::LmftConfig lmft;
  train::ContrastiveConfig contrastive;
  eval::FrameOptions scoring;
  eval::DcfParams dcf;

  // Every `section.key = value` line in file order, value exactly as written.
  std::vector<std::pair<std::string, std::string>> entries;
};

// Grammar, one statement per line:
//   line    := blank | comment | setting
//   comment := optional spaces, '#', anything
//   setting := section '.' key spaces? '=' spaces? value
// Values run to the end of the line with surrounding spaces trimmed and may
// not contain '#'. Unknown or repeated keys are BadConfig. Durations are in
// seconds and turned into frames with data.frames_per_second, which is applied
// first wherever it appears.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

// Applies `key=value` overrides on top of an existing config.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides);

// Every key the parser accepts, in documentation order.
std::vector<std::string> config_keys();

void validate(const RunConfig& cfg);

// ---------------------------------------------------------------------------

struct StageMetrics {
  std::string stage;
  int iteration = 0;  // label iteration produced by the stage
  int num_classes = 0;
  double eer = 0.0;
  double min_dcf = 0.0;
  double ari = 0.0;
  double nmi = 0.0;
  // Last epoch of the stage; zeros when it ran without a gate.
  std::size_t reliable = 0, correctable = 0, discarded = 0;
  std::vector<std::vector<double>> drift;  // per recorded epoch, per encoder layer
  std::vector<double> epoch_loss;
};

struct PipelineState {
  int iteration = 0;
  std::optional<PseudoLabelMap> label_map;
  std::filesystem::path checkpoint;
  std::vector<StageMetrics> metric_history;  // one entry per completed stage
};

// Stage names in execution order for a config.
std::vector<std::string> stage_plan(const RunConfig& cfg);

struct RunOptions {
  bool resume = false;
  // Stop after this many stages in total (resume picks up from there).
  std::optional<int> stop_after;
  std::ostream* progress = nullptr;
};

// Writes into out_dir:
//   state.json    after every stage, atomically
//   events.jsonl  one JSON object per stage/epoch event
//   drift.tsv     stage, epoch, layer, drift
//   summary.json  once the last stage is done
//   *.ckpt, labels_<i>.tsv, <stage>.emb
PipelineState run_full(const RunConfig& cfg, const std::filesystem::path& out_dir, const RunOptions& opts = {});

// Mean drift over the first half of the encoder layers (at least one).
double early_layer_drift(const std::vector<double>& drift);

std::string summary_json(const RunConfig& cfg, const PipelineState& state);

}  // namespace forge::pipeline
