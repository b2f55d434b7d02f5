// Command-line front end: `forge <command> --help` lists the options.

#include "forge/clustering.hpp"
#include "forge/error.hpp"
#include "forge/eval.hpp"
#include "forge/io.hpp"
#include "forge/lossgate.hpp"
#include "forge/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>

using namespace forge;
namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

pipeline::RunConfig config_from(const std::string& path, const std::vector<std::string>& overrides) {
  auto cfg = path.empty() ? pipeline::RunConfig{} : pipeline::load_config(path);
  pipeline::apply_overrides(cfg, overrides);
  pipeline::validate(cfg);
  return cfg;
}

sim::SpeakerWorld world_for(const pipeline::RunConfig& cfg) {
  sim::WorldConfig wc = cfg.world;
  wc.seed = mix_seed(cfg.seed, cfg.world.seed);
  return sim::generate_world(wc);
}

// An embedding file becomes a feature set of one-frame utterances.
FeatureSet features_from(const std::string& features, const std::string& embeddings) {
  if (!features.empty()) return io::load_features(features);
  const auto e = io::load_embeddings(embeddings);
  FeatureSet f;
  f.ids = e.ids();
  for (std::size_t i = 0; i < e.size(); ++i) f.frames.push_back(e.data().row(static_cast<Eigen::Index>(i)));
  return f;
}

void print(const Json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised speaker verification training framework at desk scale"};
  app.require_subcommand(1);

  std::string config;
  std::vector<std::string> overrides;
  auto add_config = [&](CLI::App* cmd, bool required) {
    auto* opt = cmd->add_option("--config", config, "flat key = value config file");
    if (required) opt->required()->check(CLI::ExistingFile);
    cmd->add_option("--set", overrides, "override a config entry, key=value (repeatable)");
  };

  // run
  auto* run = app.add_subcommand("run", "run the full pipeline or the contrastive counter-experiment");
  std::string out_dir;
  bool resume = false;
  int stop_after = -1;
  add_config(run, true);
  run->add_option("--out-dir", out_dir, "directory for checkpoints, labels and reports")->required();
  run->add_flag("--resume", resume, "continue from out-dir/state.json");
  run->add_option("--stop-after", stop_after, "stop once this many stages are complete");

  // validate
  auto* val = app.add_subcommand("validate", "parse and check a config, print the resolved values");
  add_config(val, true);

  // simulate
  auto* simc = app.add_subcommand("simulate", "generate a synthetic speaker dataset");
  std::string out_features, out_truth, out_trials;
  bool held_out = false;
  add_config(simc, false);
  simc->add_option("--out-features", out_features, "FEA1 feature file")->required();
  simc->add_option("--out-truth", out_truth, "utterance<TAB>speaker file")->required();
  simc->add_option("--out-trials", out_trials, "all-pairs trial list for the generated utterances");
  simc->add_flag("--evaluation", held_out, "draw the held-out evaluation speakers instead of the training set");

  // cluster
  auto* clu = app.add_subcommand("cluster", "k-means then AHC pseudo-labels for an embedding file");
  std::string embeddings, out_labels;
  clustering::ClusterOptions copts;
  int iteration = 0;
  clu->add_option("--embeddings", embeddings, "EMB1 embedding file")->required()->check(CLI::ExistingFile);
  clu->add_option("--out-labels", out_labels, "utterance<TAB>label output")->required();
  clu->add_option("--kmeans-clusters", copts.k, "k-means clusters")->capture_default_str();
  clu->add_option("--ahc-clusters", copts.target_k, "clusters after AHC")->capture_default_str();
  clu->add_option("--seed", copts.seed, "k-means++ seed")->capture_default_str();
  clu->add_option("--iteration", iteration, "pipeline iteration recorded with the labels")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "gated AAM fine-tuning on pseudo-labels");
  std::string features, labels, checkpoint_out, init_ckpt, losses_out;
  add_config(tr, false);
  auto* feat_opt = tr->add_option("--features", features, "FEA1 feature file");
  auto* emb_opt = tr->add_option("--embeddings", embeddings, "EMB1 file, one frame per utterance");
  feat_opt->excludes(emb_opt);
  tr->add_option("--labels", labels, "utterance<TAB>label file")->required()->check(CLI::ExistingFile);
  tr->add_option("--checkpoint-out", checkpoint_out, "CKP1 output")->required();
  tr->add_option("--init", init_ckpt, "starting checkpoint; default is the pretrained stand-in");
  tr->add_option("--losses-out", losses_out, "per-utterance losses of the last epoch");

  // embed
  auto* emb = app.add_subcommand("embed", "utterance embeddings from a checkpoint");
  std::string checkpoint, out_embeddings;
  add_config(emb, false);
  emb->add_option("--checkpoint", checkpoint, "CKP1 file")->required()->check(CLI::ExistingFile);
  emb->add_option("--features", features, "FEA1 feature file")->required()->check(CLI::ExistingFile);
  emb->add_option("--out-embeddings", out_embeddings, "EMB1 output")->required();

  // gate
  auto* gate = app.add_subcommand("gate", "fit the loss gate to a loss record");
  std::string losses_in, out_status;
  double tau2 = 0.5;
  gate->add_option("--losses", losses_in, "utterance<TAB>loss file")->required()->check(CLI::ExistingFile);
  gate->add_option("--tau2", tau2, "class-probability threshold")->capture_default_str();
  gate->add_option("--out", out_status, "utterance<TAB>status output");

  // score
  auto* sc = app.add_subcommand("score", "multi-frame cosine scoring of a trial list");
  std::string trials, out_scores;
  add_config(sc, false);
  sc->add_option("--checkpoint", checkpoint, "CKP1 file")->required()->check(CLI::ExistingFile);
  sc->add_option("--features", features, "FEA1 feature file")->required()->check(CLI::ExistingFile);
  sc->add_option("--trials", trials, "trial list")->required()->check(CLI::ExistingFile);
  sc->add_option("--out-scores", out_scores, "enroll<TAB>test<TAB>score<TAB>target output")->required();

  // metrics
  auto* met = app.add_subcommand("metrics", "EER/minDCF of a score file or ARI/NMI of a labeling");
  std::string scores, truth;
  double p_target = 0.01;
  met->add_option("--scores", scores, "score file")->check(CLI::ExistingFile);
  met->add_option("--p-target", p_target, "target prior for minDCF")->capture_default_str();
  met->add_option("--labels", labels, "utterance<TAB>label file")->check(CLI::ExistingFile);
  met->add_option("--truth", truth, "utterance<TAB>speaker file")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      auto cfg = config_from(config, overrides);
      pipeline::RunOptions opts;
      opts.resume = resume;
      if (stop_after >= 0) opts.stop_after = stop_after;
      opts.progress = &std::cerr;
      const auto st = pipeline::run_full(cfg, out_dir, opts);
      std::cout << pipeline::summary_json(cfg, st) << '\n';
    } else if (*val) {
      const auto cfg = config_from(config, overrides);
      Json entries = Json::object();
      for (const auto& [k, v] : cfg.entries) entries[k] = v;
      print(Json{{"valid", true},
                 {"mode", pipeline::to_string(cfg.mode)},
                 {"stages", pipeline::stage_plan(cfg)},
                 {"config", entries},
                 {"resolved",
                  {{"train.segment_frames", cfg.train.segment_frames},
                   {"lmft.segment_frames", train::crop_frames(train::lmft_switch(cfg.train, cfg.lmft))},
                   {"scoring.frame_len", cfg.scoring.frame_len},
                   {"train.lr_epoch_multiplier", cfg.train.lr_epoch_multiplier}}}});
    } else if (*simc) {
      const auto cfg = config_from(config, overrides);
      auto world = world_for(cfg);
      if (held_out) world = sim::evaluation_world(world, cfg.eval_speakers, cfg.eval_utterances, mix_seed(world.config.seed, 0xE7A1));
      const auto data = sim::generate_dataset(world);
      const auto& speakers = data.truth(sim::TruthUse::Reporting);
      io::save_features(data.features(), out_features);
      io::save_labels(PseudoLabelMap(data.features().ids, speakers, 0), out_truth);
      if (!out_trials.empty()) io::save_trials(eval::all_pairs_trials(data.features().ids, speakers), out_trials);
      print(Json{{"utterances", data.size()}, {"speakers", world.speaker_means.rows()}});
    } else if (*clu) {
      const auto m = io::load_embeddings(embeddings);
      const auto out = clustering::cluster_embeddings(m, copts, iteration);
      io::save_labels(out.labels, out_labels);
      print(Json{{"utterances", m.size()},
                 {"classes", out.labels.num_classes()},
                 {"kmeans_inertia", out.kmeans.inertia},
                 {"ahc_inversions", out.ahc.inversions}});
    } else if (*tr) {
      if (features.empty() == embeddings.empty()) throw CLI::ValidationError("give exactly one of --features, --embeddings");
      const auto cfg = config_from(config, overrides);
      const auto data = features_from(features, embeddings);
      const auto map = io::load_labels(labels);
      const auto y = map.labels_for(data.ids);
      ModelShape shape = cfg.model;
      shape.input_dim = static_cast<int>(data.dim());
      const SpeakerModel pretrained = init_model(shape, mix_seed(cfg.seed, 7), cfg.init_gain);
      train::TrainState init{pretrained, Matrix(), {}};
      if (!init_ckpt.empty()) {
        auto ck = load_checkpoint(init_ckpt);
        init.model = std::move(ck.model);
        init.out_weights = std::move(ck.class_weights);
      }
      if (init.out_weights.rows() != map.num_classes())
        init.out_weights = train::init_class_weights(data, y, map.num_classes(), init.model);
      auto cfg_train = cfg.train;
      cfg_train.segment_frames = std::min<int>(cfg_train.segment_frames, static_cast<int>(data.frames.front().rows()));
      const train::AnchorSnapshot anchor(init.model);
      const auto out = train::finetune(data, y, map.num_classes(), init, anchor, cfg_train, cfg.seed,
                                       [](const train::EpochRecord& r, const train::GateEpoch& g) {
                                         std::cerr << "epoch " << r.epoch << " loss " << r.mean_loss
                                                   << (g.active ? " gated tau1 " + std::to_string(g.tau1) : "") << '\n';
                                       });
      save_checkpoint({out.state.model, out.state.out_weights}, checkpoint_out);
      if (!losses_out.empty()) {
        std::vector<io::LossRow> rows;
        for (std::size_t i = 0; i < data.size(); ++i) rows.push_back({data.ids[i], out.epochs.back().losses[i]});
        io::save_losses(rows, losses_out);
      }
      Json losses = Json::array();
      for (const auto& e : out.epochs) losses.push_back(e.mean_loss);
      print(Json{{"epochs", out.epochs.size()}, {"mean_loss", losses}, {"drift", out.drift.back()}});
    } else if (*emb) {
      const auto cfg = config_from(config, overrides);
      const auto ck = load_checkpoint(checkpoint);
      const auto data = io::load_features(features);
      io::save_embeddings(eval::utterance_embeddings(data, ck.model, cfg.scoring), out_embeddings);
      print(Json{{"utterances", data.size()}, {"dim", ck.model.embed_dim()}});
    } else if (*gate) {
      const auto rows = io::load_losses(losses_in);
      std::vector<double> values;
      for (const auto& r : rows) values.push_back(r.loss);
      const auto g = lossgate::gmm_fit_em(values);
      Json out{{"weights", g.weights}, {"means", g.means}, {"variances", g.variances}, {"bimodal", lossgate::is_bimodal(g)}};
      if (lossgate::is_bimodal(g)) {
        const auto t = lossgate::intersection_threshold(g);
        // No class posteriors here, so nothing clears tau2.
        const auto d = lossgate::gate_samples(values, Matrix::Zero(static_cast<Eigen::Index>(values.size()), 1), t.tau1, tau2);
        out["tau1"] = t.tau1;
        out["fallback"] = t.fallback;
        out["reliable"] = d.reliable;
        out["unreliable"] = d.correctable + d.discarded;
        if (!out_status.empty()) {
          std::string text;
          for (std::size_t i = 0; i < rows.size(); ++i)
            text += rows[i].id.str() + '\t' + std::string(lossgate::to_string(d.status[i])) + '\n';
          io::write_file_atomic(out_status, text);
        }
      }
      print(out);
    } else if (*sc) {
      const auto cfg = config_from(config, overrides);
      const auto ck = load_checkpoint(checkpoint);
      const auto data = io::load_features(features);
      const auto list = io::load_trials(trials);
      const auto scored = eval::score_trials(list, eval::extract_all(data, ck.model, cfg.scoring));
      std::vector<io::ScoredRow> rows;
      for (std::size_t i = 0; i < list.size(); ++i)
        rows.push_back({list.rows()[i].enroll, list.rows()[i].test, scored.scores[i], list.rows()[i].is_target});
      io::save_scores(rows, out_scores);
      print(Json{{"trials", rows.size()}, {"eer", eval::eer(scored).eer}});
    } else if (*met) {
      Json out = Json::object();
      if (!scores.empty()) {
        eval::ScoredTrials s;
        for (const auto& r : io::load_scores(scores)) {
          s.scores.push_back(r.score);
          s.is_target.push_back(r.is_target);
        }
        const auto e = eval::eer(s);
        const auto d = eval::min_dcf(s, {p_target, 1.0, 1.0, true});
        out["eer"] = e.eer;
        out["eer_threshold"] = e.threshold;
        out["min_dcf"] = d.min_dcf;
        out["min_dcf_threshold"] = d.threshold;
      }
      if (!labels.empty() || !truth.empty()) {
        if (labels.empty() || truth.empty()) throw CLI::ValidationError("--labels and --truth go together");
        const auto l = io::load_labels(labels);
        const auto t = io::load_labels(truth);
        const auto a = l.labels();
        const auto b = t.labels_for(l.ids());
        out["ari"] = eval::ari(a, b);
        out["nmi"] = eval::nmi(a, b).value;
      }
      if (out.empty()) throw CLI::ValidationError("give --scores and/or --labels with --truth");
      print(out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
