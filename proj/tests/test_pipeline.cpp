#include "doctest.h"
#include "test_util.hpp"

#include "forge/error.hpp"
#include "forge/io.hpp"
#include "forge/pipeline.hpp"

#include <json.hpp>

using namespace forge;
using namespace forge::pipeline;
using Json = nlohmann::ordered_json;

namespace {

const char* kTiny = R"(# tiny world for plumbing tests
run.seed = 3
data.num_speakers = 6
data.utterances_per_speaker = 5
data.frames_per_utterance = 24
data.eval_speakers = 4
data.eval_utterances = 3
dino.epochs = 1
cluster.kmeans_clusters = 12
cluster.ahc_clusters = 6
train.epochs = 2
train.gate_warmup_epochs = 1
lmft.epochs = 1
scoring.num_frames = 3
)";

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::Io;
}

}  // namespace

TEST_CASE("config parsing") {
  const auto c = parse_config(kTiny);
  CHECK(c.seed == 3);
  CHECK(c.world.num_speakers == 6);
  CHECK(c.cluster.k == 12);
  CHECK(c.cluster.target_k == 6);
  CHECK(c.train.gate_warmup_epochs == 1);
  CHECK(c.entries.size() == 13);
  CHECK(c.entries.front() == std::pair<std::string, std::string>{"run.seed", "3"});
  // untouched defaults survive
  CHECK(c.train.tau2 == 0.5);
  CHECK(c.num_refinement_iterations == 2);
  CHECK_NOTHROW(validate(c));
}

TEST_CASE("config durations use the frame rate wherever it appears") {
  const auto c = parse_config(
      "train.segment_seconds = 3\n"
      "lmft.segment_seconds = 5\n"
      "scoring.frame_seconds = 2\n"
      "data.frames_per_second = 10\n");
  CHECK(c.train.segment_frames == 30);
  CHECK(c.scoring.frame_len == 20);
  CHECK(c.lmft.length_multiplier == doctest::Approx(5.0 / 3.0));
  CHECK(train::crop_frames(train::lmft_switch(c.train, c.lmft)) == 50);
  const auto d = parse_config("train.lr_decay_per_epoch = 0.05\n");
  CHECK(d.train.lr_epoch_multiplier == doctest::Approx(0.95).epsilon(1e-15));
}

TEST_CASE("config grammar errors") {
  CHECK(kind_of([] { parse_config("run.seed 3\n"); }) == ErrorKind::BadConfig);
  CHECK(kind_of([] { parse_config("seed = 3\n"); }) == ErrorKind::BadConfig);
  CHECK(kind_of([] { parse_config("run.nope = 3\n"); }) == ErrorKind::BadConfig);
  CHECK(kind_of([] { parse_config("run.seed = 3\nrun.seed = 4\n"); }) == ErrorKind::BadConfig);
  CHECK(kind_of([] { parse_config("run.seed = 3 # note\n"); }) == ErrorKind::BadConfig);
  CHECK(kind_of([] { parse_config("run.seed =\n"); }) == ErrorKind::BadConfig);
  CHECK(kind_of([] { parse_config("train.epochs = 2.5\n"); }) == ErrorKind::BadConfig);
  CHECK(kind_of([] { parse_config("train.gating = yes\n"); }) == ErrorKind::BadConfig);
  CHECK(kind_of([] { parse_config("run.mode = supervised\n"); }) == ErrorKind::BadConfig);
  CHECK(kind_of([] { parse_config("train.optimizer = rmsprop\n"); }) == ErrorKind::BadConfig);
  CHECK_NOTHROW(parse_config("\n   \n  # indented comment\n\ttrain.epochs=3\r\n"));
}

TEST_CASE("config validation") {
  auto c = parse_config("cluster.kmeans_clusters = 10\ncluster.ahc_clusters = 20\n");
  CHECK(kind_of([&] { validate(c); }) == ErrorKind::BadConfig);
  c = parse_config("train.layer_decay = 1.5\n");
  CHECK(kind_of([&] { validate(c); }) == ErrorKind::BadConfig);
  c = parse_config("scoring.p_target = 1\n");
  CHECK(kind_of([&] { validate(c); }) == ErrorKind::BadConfig);
  c = parse_config("data.frames_per_utterance = 10\n");
  CHECK(kind_of([&] { validate(c); }) == ErrorKind::BadConfig);
}

TEST_CASE("overrides replace or append entries") {
  auto c = parse_config(kTiny);
  apply_overrides(c, {"run.seed=9", "train.tau2 = 0.6"});
  CHECK(c.seed == 9);
  CHECK(c.train.tau2 == 0.6);
  CHECK(c.entries.size() == 14);
  CHECK(c.entries.front().second == "9");
  CHECK(c.entries.back() == std::pair<std::string, std::string>{"train.tau2", "0.6"});
  CHECK(kind_of([&] { apply_overrides(c, {"bogus.key=1"}); }) == ErrorKind::BadConfig);
}

TEST_CASE("every documented key parses") {
  for (const auto& k : config_keys()) {
    CHECK(k.find('.') != std::string::npos);
  }
  CHECK(config_keys().size() > 60);
}

TEST_CASE("stage plan") {
  RunConfig c;
  CHECK(stage_plan(c) == std::vector<std::string>{"step1_dino", "refine_1", "refine_2", "lmft"});
  c.num_refinement_iterations = 0;
  CHECK(stage_plan(c) == std::vector<std::string>{"step1_dino"});
  c.num_refinement_iterations = 3;
  c.lmft_enabled = false;
  CHECK(stage_plan(c).back() == "refine_3");
  c.mode = Mode::SslContrastiveE2e;
  CHECK(stage_plan(c) == std::vector<std::string>{"contrastive"});
}

TEST_CASE("early layer drift averages the first half") {
  CHECK(early_layer_drift({1.0, 3.0, 10.0, 10.0}) == 2.0);
  CHECK(early_layer_drift({4.0, 8.0, 100.0}) == 4.0);
  CHECK(early_layer_drift({5.0}) == 5.0);
}

TEST_CASE("tiny run writes every artifact") {
  const auto dir = testing::temp_dir("pipeline_tiny");
  const auto cfg = parse_config(kTiny);
  const auto st = run_full(cfg, dir);
  REQUIRE(st.metric_history.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(st.metric_history[static_cast<std::size_t>(i)].iteration == i);
  CHECK(st.iteration == 3);
  REQUIRE(st.label_map);
  CHECK(st.label_map->iteration() == 3);
  CHECK(st.label_map->num_classes() == 6);
  for (const char* f : {"state.json", "events.jsonl", "drift.tsv", "summary.json", "pretrained.ckpt", "step1_dino.ckpt",
                        "refine_1.ckpt", "lmft.ckpt", "labels_0.tsv", "labels_3.tsv", "step1_dino.emb"})
    CHECK(std::filesystem::exists(dir / f));
  CHECK(io::load_embeddings(dir / "step1_dino.emb").size() == 30);
  CHECK(io::load_labels(dir / "labels_3.tsv", 3) == *st.label_map);

  const auto summary = Json::parse(io::read_file(dir / "summary.json"));
  CHECK(summary["stages"].size() == 4);
  CHECK(summary["config"]["cluster.ahc_clusters"] == "6");
  CHECK(summary["final"]["stage"] == "lmft");
  CHECK(io::read_file(dir / "summary.json").find("time") == std::string::npos);

  // one drift row per recorded epoch and layer
  const auto drift = io::read_file(dir / "drift.tsv");
  const auto rows = std::count(drift.begin(), drift.end(), '\n');
  CHECK(rows == 1 + 4 * (1 + 2 + 2 + 1));

  int epochs = 0;
  std::istringstream events(io::read_file(dir / "events.jsonl"));
  for (std::string line; std::getline(events, line);) epochs += Json::parse(line)["event"] == "epoch";
  CHECK(epochs == 1 + 2 + 2 + 1);
}

TEST_CASE("identical seeds give identical summaries") {
  const auto a = testing::temp_dir("pipeline_det_a");
  const auto b = testing::temp_dir("pipeline_det_b");
  auto cfg = parse_config(kTiny);
  apply_overrides(cfg, {"lmft.enabled=false"});
  run_full(cfg, a);
  run_full(cfg, b);
  CHECK(io::read_file(a / "summary.json") == io::read_file(b / "summary.json"));
  CHECK(io::read_file(a / "events.jsonl") == io::read_file(b / "events.jsonl"));
  CHECK(io::read_file(a / "refine_2.ckpt") == io::read_file(b / "refine_2.ckpt"));
}

TEST_CASE("resuming mid-pipeline reproduces the uninterrupted run") {
  const auto whole = testing::temp_dir("pipeline_whole");
  const auto split = testing::temp_dir("pipeline_split");
  const auto cfg = parse_config(kTiny);
  run_full(cfg, whole);
  RunOptions first;
  first.stop_after = 2;
  const auto partial = run_full(cfg, split, first);
  CHECK(partial.metric_history.size() == 2);
  const auto early = nlohmann::json::parse(io::read_file(split / "summary.json"));
  CHECK_FALSE(early.at("complete").get<bool>());
  CHECK(early.at("stages").size() == 2);
  RunOptions rest;
  rest.resume = true;
  const auto resumed = run_full(cfg, split, rest);
  CHECK(resumed.metric_history.size() == 4);
  CHECK(io::read_file(whole / "summary.json") == io::read_file(split / "summary.json"));
  CHECK(io::read_file(whole / "lmft.ckpt") == io::read_file(split / "lmft.ckpt"));

  auto other = cfg;
  apply_overrides(other, {"train.tau2=0.7"});
  CHECK(kind_of([&] { run_full(other, split, rest); }) == ErrorKind::BadConfig);
}

TEST_CASE("zero refinement rounds evaluates the step 1 labels only") {
  const auto dir = testing::temp_dir("pipeline_r0");
  auto cfg = parse_config(kTiny);
  apply_overrides(cfg, {"run.num_refinement_iterations=0"});
  const auto st = run_full(cfg, dir);
  REQUIRE(st.metric_history.size() == 1);
  CHECK(st.metric_history[0].stage == "step1_dino");
  CHECK(st.label_map->iteration() == 0);
}

TEST_CASE("step 1 separates a channel-free world") {
  const auto dir = testing::temp_dir("pipeline_separable");
  auto cfg = parse_config(
      "data.num_speakers = 20\n"
      "data.utterances_per_speaker = 8\n"
      "data.channel_variance = 0\n"
      "dino.epochs = 3\n"
      "cluster.kmeans_clusters = 60\n"
      "cluster.ahc_clusters = 20\n"
      "run.num_refinement_iterations = 0\n");
  const auto st = run_full(cfg, dir);
  CHECK(st.metric_history[0].ari >= 0.8);
  CHECK(st.label_map->num_classes() == 20);
}

TEST_CASE("external embeddings replace step 1") {
  const auto dir = testing::temp_dir("pipeline_external");
  auto cfg = parse_config(kTiny);
  // Embeddings that put each speaker at its own axis.
  sim::WorldConfig wc = cfg.world;
  wc.seed = mix_seed(cfg.seed, wc.seed);
  const auto data = sim::generate_dataset(sim::generate_world(wc));
  const auto& truth = data.truth(sim::TruthUse::Reporting);
  Matrix rows = Matrix::Zero(static_cast<Eigen::Index>(data.size()), 8);
  Rng rng(1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    rows(static_cast<Eigen::Index>(i), truth[i]) = 1.0;
    rows.row(static_cast<Eigen::Index>(i)) += 0.01 * testing::random_vector(rng, 8).transpose();
  }
  io::save_embeddings(EmbeddingMatrix(data.features().ids, rows), dir / "given.emb");
  apply_overrides(cfg, {"data.embeddings=" + (dir / "given.emb").string(), "run.num_refinement_iterations=0"});
  const auto st = run_full(cfg, dir / "run");
  REQUIRE(st.metric_history.size() == 1);
  CHECK(st.metric_history[0].stage == "step1_external");
  CHECK(st.metric_history[0].ari == 1.0);

  io::save_embeddings(EmbeddingMatrix(testing::numbered_ids("x", 3), Matrix::Ones(3, 2)), dir / "wrong.emb");
  apply_overrides(cfg, {"data.embeddings=" + (dir / "wrong.emb").string()});
  CHECK(kind_of([&] { run_full(cfg, dir / "run2"); }) == ErrorKind::MissingUtterance);
}

TEST_CASE("contrastive mode emits drift per epoch") {
  const auto dir = testing::temp_dir("pipeline_contrastive");
  auto cfg = parse_config(kTiny);
  apply_overrides(cfg, {"run.mode=ssl_contrastive_e2e", "contrastive.epochs=2"});
  const auto st = run_full(cfg, dir);
  REQUIRE(st.metric_history.size() == 1);
  CHECK(st.metric_history[0].stage == "contrastive");
  CHECK(st.metric_history[0].drift.size() == 2);
  const auto drift = io::read_file(dir / "drift.tsv");
  CHECK(drift.rfind("mode\tstage\tepoch\tlayer\tdrift\n", 0) == 0);
  CHECK(drift.find("ssl_contrastive_e2e\tcontrastive\t1\t4\t") != std::string::npos);
}
