#include "forge/pipeline.hpp"

#include "forge/error.hpp"
#include "forge/io.hpp"
#include "forge/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace forge::pipeline {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

constexpr const char* kStep1 = "step1_dino";
constexpr const char* kExternal = "step1_external";
constexpr const char* kLmft = "lmft";
constexpr const char* kContrastive = "contrastive";

std::string refine_stage(int i) { return "refine_" + std::to_string(i); }

SpeakerModel rounded(SpeakerModel m) {
  Checkpoint c{std::move(m), Matrix(0, 0)};
  quantize_to_f32(c);
  return std::move(c.model);
}

Json metrics_to_json(const StageMetrics& m) {
  Json drift = Json::array();
  for (const auto& row : m.drift) drift.push_back(row);
  return Json{{"stage", m.stage},
              {"iteration", m.iteration},
              {"num_classes", m.num_classes},
              {"eer", m.eer},
              {"min_dcf", m.min_dcf},
              {"ari", m.ari},
              {"nmi", m.nmi},
              {"gate", {{"reliable", m.reliable}, {"correctable", m.correctable}, {"discarded", m.discarded}}},
              {"drift", drift},
              {"epoch_loss", m.epoch_loss}};
}

StageMetrics metrics_from_json(const Json& j) {
  StageMetrics m;
  m.stage = j.at("stage").get<std::string>();
  m.iteration = j.at("iteration").get<int>();
  m.num_classes = j.at("num_classes").get<int>();
  m.eer = j.at("eer").get<double>();
  m.min_dcf = j.at("min_dcf").get<double>();
  m.ari = j.at("ari").get<double>();
  m.nmi = j.at("nmi").get<double>();
  m.reliable = j.at("gate").at("reliable").get<std::size_t>();
  m.correctable = j.at("gate").at("correctable").get<std::size_t>();
  m.discarded = j.at("gate").at("discarded").get<std::size_t>();
  for (const auto& row : j.at("drift")) m.drift.push_back(row.get<std::vector<double>>());
  m.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
  return m;
}

Json config_entries(const RunConfig& cfg) {
  Json j = Json::object();
  for (const auto& [k, v] : cfg.entries) j[k] = v;
  return j;
}

std::string labels_file(int iteration) { return "labels_" + std::to_string(iteration) + ".tsv"; }

class Run {
 public:
  Run(const RunConfig& cfg, const fs::path& dir, const RunOptions& opts) : cfg_(cfg), dir_(dir), opts_(opts) {
    validate(cfg_);
    cfg_.model.input_dim = cfg_.world.feature_dim;
    sim::WorldConfig wc = cfg_.world;
    wc.seed = mix_seed(cfg_.seed, cfg_.world.seed);
    world_ = sim::generate_world(wc);
    data_.emplace(sim::generate_dataset(world_));
    eval_data_.emplace(sim::generate_dataset(
        sim::evaluation_world(world_, cfg_.eval_speakers, cfg_.eval_utterances, mix_seed(wc.seed, 0xE7A1))));
    trials_ = eval::all_pairs_trials(eval_data_->features().ids, eval_data_->truth(sim::TruthUse::Reporting));
    anchor_.emplace(rounded(init_model(cfg_.model, mix_seed(cfg_.seed, 7), cfg_.init_gain)));
  }

  PipelineState execute() {
    fs::create_directories(dir_);
    const auto plan = stage_plan(cfg_);
    std::size_t done = 0;
    if (opts_.resume && fs::exists(dir_ / "state.json")) {
      done = restore();
      events_.open(dir_ / "events.jsonl", std::ios::app);
      emit(Json{{"event", "resume"}, {"completed_stages", done}});
    } else {
      events_.open(dir_ / "events.jsonl", std::ios::trunc);
      save_checkpoint({anchor_->model(), Matrix(0, 0)}, dir_ / "pretrained.ckpt");
    }
    if (!events_) fail(ErrorKind::Io, "cannot open event log in '" + dir_.string() + "'");

    for (std::size_t s = done; s < plan.size(); ++s) {
      if (opts_.stop_after && static_cast<int>(s) >= *opts_.stop_after) {
        io::write_file_atomic(dir_ / "summary.json", summary_json(cfg_, state_) + "\n");
        return state_;
      }
      const auto& name = plan[s];
      emit(Json{{"event", "stage_start"}, {"stage", name}});
      if (opts_.progress) *opts_.progress << "[" << s + 1 << "/" << plan.size() << "] " << name << std::endl;
      StageMetrics m;
      try {
        m = run_stage(name, static_cast<int>(s));
      } catch (const std::exception& e) {
        emit(Json{{"event", "stage_failed"}, {"stage", name}, {"error", e.what()}});
        throw;
      }
      state_.metric_history.push_back(m);
      emit(Json{{"event", "stage_end"}, {"metrics", metrics_to_json(m)}});
      persist();
      if (opts_.progress)
        *opts_.progress << "  ARI " << m.ari << "  NMI " << m.nmi << "  EER " << m.eer << "  minDCF " << m.min_dcf
                        << std::endl;
    }
    io::write_file_atomic(dir_ / "summary.json", summary_json(cfg_, state_) + "\n");
    emit(Json{{"event", "run_end"}});
    return state_;
  }

 private:
  StageMetrics run_stage(const std::string& name, int index) {
    if (name == kStep1 || name == kExternal) return step1(name);
    if (name == kLmft) return lmft();
    if (name == kContrastive) return contrastive();
    return refine(index);
  }

  // Step 1 then Step 2 on its embeddings: iteration 0 labels.
  StageMetrics step1(const std::string& name) {
    SpeakerModel model = anchor_->model();
    std::vector<double> losses;
    {
      const auto seal = data_->seal();
      EmbeddingMatrix emb = name == kExternal ? external_embeddings() : [&] {
        auto d = train::train_dino(data_->features(), anchor_->model(), cfg_.dino, mix_seed(cfg_.seed, 11));
        for (std::size_t e = 0; e < d.epoch_loss.size(); ++e)
          emit(Json{{"event", "epoch"}, {"stage", name}, {"epoch", e}, {"mean_loss", d.epoch_loss[e]}});
        losses = d.epoch_loss;
        model = rounded(std::move(d.teacher));
        return embeddings_of(model, name);
      }();
      pseudo_label(emb, 0);
    }
    save_stage_checkpoint(name, {model, Matrix(0, 0)});
    StageMetrics m = evaluate(name, model);
    m.drift.push_back(train::layer_weight_distance(model.encoder, *anchor_));
    m.epoch_loss = losses;
    return m;
  }

  EmbeddingMatrix external_embeddings() {
    auto loaded = io::load_embeddings(cfg_.external_embeddings);
    const auto& ids = data_->features().ids;
    Matrix rows(static_cast<Eigen::Index>(ids.size()), loaded.dim());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto at = loaded.index_of(ids[i]);
      if (!at) fail(ErrorKind::MissingUtterance, "external embeddings lack '" + ids[i].str() + "'");
      rows.row(static_cast<Eigen::Index>(i)) = loaded.data().row(static_cast<Eigen::Index>(*at));
    }
    return EmbeddingMatrix(ids, std::move(rows));
  }

  // Step 3 from the pretrained weights on the previous labels, then Step 2.
  StageMetrics refine(int index) {
    const std::string name = stage_name(index);
    const auto& prev = *state_.label_map;
    const int iteration = prev.iteration() + 1;
    train::FinetuneOutcome out;
    {
      const auto seal = data_->seal();
      const auto labels = prev.labels_for(data_->features().ids);
      const SpeakerModel& start = anchor_->model();
      train::TrainState init{start, train::init_class_weights(data_->features(), labels, prev.num_classes(), start), {}};
      out = train::finetune(data_->features(), labels, prev.num_classes(), std::move(init), *anchor_, cfg_.train,
                            mix_seed(cfg_.seed, 200 + static_cast<std::uint64_t>(iteration)), epoch_logger(name));
      Checkpoint ck{std::move(out.state.model), std::move(out.state.out_weights)};
      quantize_to_f32(ck);
      save_stage_checkpoint(name, ck);
      pseudo_label(embeddings_of(ck.model, name), iteration);
      out.state.model = std::move(ck.model);
    }
    return finetune_metrics(name, out);
  }

  // Continues the last model on the last labels with the large-margin
  // settings, then re-clusters once more for the final labels.
  StageMetrics lmft() {
    const auto& prev = *state_.label_map;
    Checkpoint last = load_checkpoint(state_.checkpoint);
    train::FinetuneOutcome out;
    {
      const auto seal = data_->seal();
      const auto labels = prev.labels_for(data_->features().ids);
      train::TrainState init{std::move(last.model), std::move(last.class_weights), {}};
      out = train::finetune(data_->features(), labels, prev.num_classes(), std::move(init), *anchor_,
                            train::lmft_switch(cfg_.train, cfg_.lmft), mix_seed(cfg_.seed, 300), epoch_logger(kLmft));
      Checkpoint ck{std::move(out.state.model), std::move(out.state.out_weights)};
      quantize_to_f32(ck);
      save_stage_checkpoint(kLmft, ck);
      pseudo_label(embeddings_of(ck.model, kLmft), prev.iteration() + 1);
      out.state.model = std::move(ck.model);
    }
    return finetune_metrics(kLmft, out);
  }

  StageMetrics contrastive() {
    const bool truth_pairs = cfg_.positive_sampling == train::PositiveSampling::TruthDifferentUtterance;
    std::vector<int> speakers;
    // Truth-sampled positives are the supervised diagnostic; nothing else
    // sees the labels.
    if (truth_pairs) speakers = data_->truth(sim::TruthUse::SupervisedDiagnostic);
    train::ContrastiveOutcome out;
    SpeakerModel model;
    {
      const auto seal = data_->seal();
      out = train::train_contrastive(data_->features(), anchor_->model(), cfg_.contrastive, cfg_.positive_sampling,
                                     speakers, mix_seed(cfg_.seed, 400));
      for (std::size_t e = 0; e < out.epoch_loss.size(); ++e)
        emit(Json{{"event", "epoch"}, {"stage", kContrastive}, {"epoch", e}, {"mean_loss", out.epoch_loss[e]}});
      model = rounded(std::move(out.model));
      save_stage_checkpoint(kContrastive, {model, Matrix(0, 0)});
      pseudo_label(embeddings_of(model, kContrastive), 0);
    }
    StageMetrics m = evaluate(kContrastive, model);
    m.drift = out.drift;
    m.epoch_loss = out.epoch_loss;
    return m;
  }

  train::EpochHook epoch_logger(const std::string& stage) {
    return [this, stage](const train::EpochRecord& r, const train::GateEpoch& g) {
      emit(Json{{"event", "epoch"},
                {"stage", stage},
                {"epoch", r.epoch},
                {"mean_loss", r.mean_loss},
                {"learning_rate", r.learning_rate},
                {"gate_active", g.active},
                {"unimodal", g.unimodal},
                {"tau1", g.tau1},
                {"reliable", r.reliable},
                {"correctable", r.correctable},
                {"discarded", r.discarded},
                {"lc_active", r.lc_active}});
    };
  }

  StageMetrics finetune_metrics(const std::string& name, const train::FinetuneOutcome& out) {
    StageMetrics m = evaluate(name, out.state.model);
    if (!out.epochs.empty()) {
      const auto& last = out.epochs.back();
      if (last.gate_active) m.reliable = last.reliable, m.correctable = last.correctable, m.discarded = last.discarded;
    }
    m.drift = out.drift;
    for (const auto& e : out.epochs) m.epoch_loss.push_back(e.mean_loss);
    return m;
  }

  // Embeddings go through the EMB1 file so a resumed or external run clusters
  // exactly the same float32 values.
  EmbeddingMatrix embeddings_of(const SpeakerModel& model, const std::string& stage) {
    const auto path = dir_ / (stage + ".emb");
    io::save_embeddings(eval::utterance_embeddings(data_->features(), model, cfg_.scoring), path);
    return io::load_embeddings(path);
  }

  void pseudo_label(const EmbeddingMatrix& emb, int iteration) {
    auto opts = cfg_.cluster;
    opts.seed = mix_seed(cfg_.seed, 100 + static_cast<std::uint64_t>(iteration));
    auto labels = clustering::cluster_embeddings(emb, opts, iteration).labels;
    io::save_labels(labels, dir_ / labels_file(iteration));
    state_.iteration = iteration;
    state_.label_map = std::move(labels);
  }

  void save_stage_checkpoint(const std::string& stage, const Checkpoint& ck) {
    state_.checkpoint = dir_ / (stage + ".ckpt");
    save_checkpoint(ck, state_.checkpoint);
  }

  StageMetrics evaluate(const std::string& stage, const SpeakerModel& model) {
    StageMetrics m;
    m.stage = stage;
    m.iteration = state_.iteration;
    m.num_classes = state_.label_map->num_classes();
    const auto& truth = data_->truth(sim::TruthUse::Reporting);
    const auto labels = state_.label_map->labels_for(data_->features().ids);
    m.ari = eval::ari(labels, truth);
    m.nmi = eval::nmi(labels, truth).value;
    const auto scored = eval::score_trials(trials_, eval::extract_all(eval_data_->features(), model, cfg_.scoring));
    m.eer = eval::eer(scored).eer;
    m.min_dcf = eval::min_dcf(scored, cfg_.dcf).min_dcf;
    return m;
  }

  std::string stage_name(int index) const { return stage_plan(cfg_)[static_cast<std::size_t>(index)]; }

  void emit(const Json& j) { events_ << j.dump() << '\n' << std::flush; }

  void persist() {
    Json history = Json::array();
    for (const auto& m : state_.metric_history) history.push_back(metrics_to_json(m));
    const Json j{{"seed", cfg_.seed},
                 {"config", config_entries(cfg_)},
                 {"iteration", state_.iteration},
                 {"labels", labels_file(state_.iteration)},
                 {"checkpoint", state_.checkpoint.filename().string()},
                 {"metric_history", history}};
    io::write_file_atomic(dir_ / "drift.tsv", drift_tsv());
    io::write_file_atomic(dir_ / "state.json", j.dump(2) + "\n");
  }

  std::string drift_tsv() const {
    std::ostringstream out;
    out.precision(17);
    out << "mode\tstage\tepoch\tlayer\tdrift\n";
    for (const auto& m : state_.metric_history)
      for (std::size_t e = 0; e < m.drift.size(); ++e)
        for (std::size_t l = 0; l < m.drift[e].size(); ++l)
          out << to_string(cfg_.mode) << '\t' << m.stage << '\t' << e << '\t' << l + 1 << '\t' << m.drift[e][l] << '\n';
    return out.str();
  }

  std::size_t restore() {
    const Json j = Json::parse(io::read_file(dir_ / "state.json"));
    if (j.at("seed").get<std::uint64_t>() != cfg_.seed || j.at("config") != config_entries(cfg_))
      fail(ErrorKind::BadConfig, "state.json in '" + dir_.string() + "' belongs to a different config");
    for (const auto& m : j.at("metric_history")) state_.metric_history.push_back(metrics_from_json(m));
    state_.iteration = j.at("iteration").get<int>();
    state_.checkpoint = dir_ / j.at("checkpoint").get<std::string>();
    if (!state_.metric_history.empty())
      state_.label_map = io::load_labels(dir_ / j.at("labels").get<std::string>(), state_.iteration);
    return state_.metric_history.size();
  }

  RunConfig cfg_;
  fs::path dir_;
  RunOptions opts_;
  sim::SpeakerWorld world_;
  std::optional<sim::GeneratedDataset> data_;
  std::optional<sim::GeneratedDataset> eval_data_;
  TrialList trials_;
  std::optional<train::AnchorSnapshot> anchor_;
  PipelineState state_;
  std::ofstream events_;
};

}  // namespace

std::vector<std::string> stage_plan(const RunConfig& cfg) {
  if (cfg.mode == Mode::SslContrastiveE2e) return {kContrastive};
  std::vector<std::string> plan{cfg.external_embeddings.empty() ? kStep1 : kExternal};
  for (int i = 1; i <= cfg.num_refinement_iterations; ++i) plan.push_back(refine_stage(i));
  if (cfg.num_refinement_iterations > 0 && cfg.lmft_enabled) plan.push_back(kLmft);
  return plan;
}

PipelineState run_full(const RunConfig& cfg, const fs::path& out_dir, const RunOptions& opts) {
  return Run(cfg, out_dir, opts).execute();
}

double early_layer_drift(const std::vector<double>& drift) {
  if (drift.empty()) fail(ErrorKind::BadConfig, "empty drift vector");
  const std::size_t half = std::max<std::size_t>(1, drift.size() / 2);
  return std::accumulate(drift.begin(), drift.begin() + static_cast<std::ptrdiff_t>(half), 0.0) /
         static_cast<double>(half);
}

std::string summary_json(const RunConfig& cfg, const PipelineState& state) {
  Json stages = Json::array();
  for (const auto& m : state.metric_history) stages.push_back(metrics_to_json(m));
  Json j{{"mode", to_string(cfg.mode)},
         {"seed", cfg.seed},
         {"config", config_entries(cfg)},
         {"complete", state.metric_history.size() == stage_plan(cfg).size()},
         {"stages", stages}};
  if (!state.metric_history.empty()) {
    const auto& first = state.metric_history.front();
    const auto& last = state.metric_history.back();
    auto brief = [](const StageMetrics& m) {
      return Json{{"stage", m.stage}, {"ari", m.ari}, {"nmi", m.nmi}, {"eer", m.eer}, {"min_dcf", m.min_dcf}};
    };
    j["initial"] = brief(first);
    j["final"] = brief(last);
    j["final_labels"] = labels_file(state.iteration);
  }
  return j.dump(2);
}

}  // namespace forge::pipeline
