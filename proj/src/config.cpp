#include "forge/error.hpp"
#include "forge/io.hpp"
#include "forge/pipeline.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <optional>

namespace forge::pipeline {

namespace {

using Setter = std::function<void(RunConfig&, const std::string&)>;

[[noreturn]] void bad_value(const std::string& v, const char* what) {
  fail(ErrorKind::BadConfig, "'" + v + "' is not " + what);
}

double as_double(const std::string& v) {
  double x = 0.0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || end != v.data() + v.size() || !std::isfinite(x)) bad_value(v, "a number");
  return x;
}

long long as_integer(const std::string& v) {
  long long x = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || end != v.data() + v.size()) bad_value(v, "an integer");
  return x;
}

int as_int(const std::string& v) {
  const long long x = as_integer(v);
  if (x < INT32_MIN || x > INT32_MAX) bad_value(v, "a 32-bit integer");
  return static_cast<int>(x);
}

std::uint64_t as_u64(const std::string& v) {
  std::uint64_t x = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || end != v.data() + v.size()) bad_value(v, "an unsigned integer");
  return x;
}

bool as_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(v, "true or false");
}

int seconds_to_frames(const RunConfig& c, const std::string& v) {
  const double s = as_double(v);
  if (!(s > 0.0)) bad_value(v, "a positive duration");
  return std::max(1, static_cast<int>(std::lround(s * c.frames_per_second)));
}

#define FIELD(expr, conv) [](RunConfig& c, const std::string& v) { c.expr = conv(v); }

// Ordered so config_keys() documents the grammar section by section.
const std::vector<std::pair<std::string, Setter>>& setters() {
  static const std::vector<std::pair<std::string, Setter>> table = {
      {"run.seed", FIELD(seed, as_u64)},
      {"run.mode", FIELD(mode, parse_mode)},
      {"run.num_refinement_iterations", FIELD(num_refinement_iterations, as_int)},
      {"run.positive_sampling", FIELD(positive_sampling, train::parse_positive_sampling)},

      {"data.frames_per_second", FIELD(frames_per_second, as_double)},
      {"data.num_speakers", FIELD(world.num_speakers, as_int)},
      {"data.utterances_per_speaker", FIELD(world.utterances_per_speaker, as_int)},
      {"data.frames_per_utterance", FIELD(world.frames_per_utterance, as_int)},
      {"data.feature_dim", FIELD(world.feature_dim, as_int)},
      {"data.channel_variance", FIELD(world.channel_variance, as_double)},
      {"data.channel_rank", FIELD(world.channel_rank, as_int)},
      {"data.within_variance", FIELD(world.within_variance, as_double)},
      {"data.num_channels", FIELD(world.num_channels, as_int)},
      {"data.min_angle_deg", FIELD(world.min_angle_deg, as_double)},
      {"data.seed", FIELD(world.seed, as_u64)},
      {"data.eval_speakers", FIELD(eval_speakers, as_int)},
      {"data.eval_utterances", FIELD(eval_utterances, as_int)},
      {"data.embeddings", FIELD(external_embeddings, std::string)},

      {"model.hidden_dim", FIELD(model.hidden_dim, as_int)},
      {"model.num_layers", FIELD(model.num_layers, as_int)},
      {"model.embed_dim", FIELD(model.embed_dim, as_int)},
      {"model.init_gain", FIELD(init_gain, as_double)},

      {"dino.epochs", FIELD(dino.epochs, as_int)},
      {"dino.batch_size", FIELD(dino.batch_size, as_int)},
      {"dino.lr", FIELD(dino.lr, as_double)},
      {"dino.layer_decay", FIELD(dino.layer_decay, as_double)},
      {"dino.lr_decay_per_epoch", [](RunConfig& c, const std::string& v) { c.dino.lr_epoch_multiplier = 1.0 - as_double(v); }},
      {"dino.optimizer", FIELD(dino.optimizer, train::parse_optimizer)},
      {"dino.output_dim", FIELD(dino.dino.output_dim, as_int)},
      {"dino.teacher_temp", FIELD(dino.dino.teacher_temp, as_double)},
      {"dino.student_temp", FIELD(dino.dino.student_temp, as_double)},
      {"dino.center_momentum", FIELD(dino.dino.center_momentum, as_double)},
      {"dino.ema_momentum", FIELD(dino.dino.ema_momentum, as_double)},
      {"dino.num_global", [](RunConfig& c, const std::string& v) { c.dino.dino.num_global = c.dino.views.num_global = as_int(v); }},
      {"dino.num_local", [](RunConfig& c, const std::string& v) { c.dino.dino.num_local = c.dino.views.num_local = as_int(v); }},
      {"dino.global_seconds", [](RunConfig& c, const std::string& v) { c.dino.views.global_len = seconds_to_frames(c, v); }},
      {"dino.local_seconds", [](RunConfig& c, const std::string& v) { c.dino.views.local_len = seconds_to_frames(c, v); }},

      {"cluster.kmeans_clusters", FIELD(cluster.k, as_int)},
      {"cluster.ahc_clusters", FIELD(cluster.target_k, as_int)},
      {"cluster.max_iters", FIELD(cluster.max_iters, as_int)},
      {"cluster.tol", FIELD(cluster.tol, as_double)},

      {"train.epochs", FIELD(train.epochs, as_int)},
      {"train.batch_size", FIELD(train.batch_size, as_int)},
      {"train.optimizer", FIELD(train.optimizer, train::parse_optimizer)},
      {"train.lr", FIELD(train.base_lr, as_double)},
      {"train.lr_decay_per_epoch", [](RunConfig& c, const std::string& v) { c.train.lr_epoch_multiplier = 1.0 - as_double(v); }},
      {"train.layer_decay", FIELD(train.layer_decay, as_double)},
      {"train.anchor_l2", FIELD(train.anchor_l2, as_double)},
      {"train.margin", FIELD(train.margin, as_double)},
      {"train.scale", FIELD(train.scale, as_double)},
      {"train.segment_seconds", [](RunConfig& c, const std::string& v) { c.train.segment_frames = seconds_to_frames(c, v); }},
      {"train.augment_noise", FIELD(train.augment.noise_std, as_double)},
      {"train.augment_channel", FIELD(train.augment.channel_std, as_double)},
      {"train.gating", FIELD(train.gating, as_bool)},
      {"train.gate_warmup_epochs", FIELD(train.gate_warmup_epochs, as_int)},
      {"train.label_correction", FIELD(train.label_correction, as_bool)},
      {"train.lc_delay_epochs", FIELD(train.lc_delay_epochs, as_int)},
      {"train.lc_weight", FIELD(train.lc_weight, as_double)},
      {"train.tau2", FIELD(train.tau2, as_double)},
      {"train.epsilon_c", FIELD(train.lc_sharpen, as_double)},

      {"lmft.enabled", FIELD(lmft_enabled, as_bool)},
      {"lmft.epochs", FIELD(lmft.epochs, as_int)},
      {"lmft.margin", FIELD(lmft.margin, as_double)},
      {"lmft.segment_seconds", [](RunConfig&, const std::string& v) { as_double(v); }},

      {"contrastive.epochs", FIELD(contrastive.epochs, as_int)},
      {"contrastive.batch_pairs", FIELD(contrastive.batch_pairs, as_int)},
      {"contrastive.optimizer", FIELD(contrastive.optimizer, train::parse_optimizer)},
      {"contrastive.lr", FIELD(contrastive.lr, as_double)},
      {"contrastive.lr_decay_per_epoch", [](RunConfig& c, const std::string& v) { c.contrastive.lr_epoch_multiplier = 1.0 - as_double(v); }},
      {"contrastive.layer_decay", FIELD(contrastive.layer_decay, as_double)},
      {"contrastive.anchor_l2", FIELD(contrastive.anchor_l2, as_double)},
      {"contrastive.temperature", FIELD(contrastive.temperature, as_double)},
      {"contrastive.segment_seconds", [](RunConfig& c, const std::string& v) { c.contrastive.segment_frames = seconds_to_frames(c, v); }},
      {"contrastive.augment_noise", FIELD(contrastive.augment.noise_std, as_double)},
      {"contrastive.augment_channel", FIELD(contrastive.augment.channel_std, as_double)},

      {"scoring.num_frames", FIELD(scoring.num_frames, as_int)},
      {"scoring.frame_seconds", [](RunConfig& c, const std::string& v) { c.scoring.frame_len = seconds_to_frames(c, v); }},
      {"scoring.p_target", FIELD(dcf.p_target, as_double)},
      {"scoring.c_miss", FIELD(dcf.c_miss, as_double)},
      {"scoring.c_fa", FIELD(dcf.c_fa, as_double)},
  };
  return table;
}

#undef FIELD

const Setter& setter_for(const std::string& key) {
  static const std::map<std::string, const Setter*> index = [] {
    std::map<std::string, const Setter*> m;
    for (const auto& [k, s] : setters()) m[k] = &s;
    return m;
  }();
  const auto it = index.find(key);
  if (it == index.end()) fail(ErrorKind::BadConfig, "unknown config key '" + key + "'");
  return *it->second;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::pair<std::string, std::string> split_setting(const std::string& line, int lineno) {
  const auto where = " (line " + std::to_string(lineno) + ")";
  const auto eq = line.find('=');
  if (eq == std::string::npos) fail(ErrorKind::BadConfig, "expected 'section.key = value'" + where);
  auto key = trim(std::string_view(line).substr(0, eq));
  auto value = trim(std::string_view(line).substr(eq + 1));
  const auto dot = key.find('.');
  if (key.empty() || dot == 0 || dot == std::string::npos || dot + 1 == key.size() ||
      key.find_first_of(" \t") != std::string::npos)
    fail(ErrorKind::BadConfig, "malformed key '" + key + "'" + where);
  if (value.empty()) fail(ErrorKind::BadConfig, "missing value for '" + key + "'" + where);
  if (value.find('#') != std::string::npos)
    fail(ErrorKind::BadConfig, "comments after values are not allowed" + where);
  return {key, value};
}

void apply_entries(RunConfig& cfg, const std::vector<std::pair<std::string, std::string>>& entries) {
  for (const auto& [k, v] : entries) setter_for(k);  // reject unknown keys before changing anything
  // Durations depend on the frame rate, and the LMFT length on the training one.
  for (const auto& [k, v] : entries)
    if (k == "data.frames_per_second") setter_for(k)(cfg, v);
  if (!(cfg.frames_per_second > 0.0)) fail(ErrorKind::BadConfig, "data.frames_per_second must be positive");
  double train_seconds = cfg.train.segment_frames / cfg.frames_per_second;
  std::optional<double> lmft_seconds;
  for (const auto& [k, v] : entries) {
    if (k == "data.frames_per_second") continue;
    setter_for(k)(cfg, v);
    if (k == "train.segment_seconds") train_seconds = as_double(v);
    if (k == "lmft.segment_seconds") lmft_seconds = as_double(v);
  }
  if (lmft_seconds) {
    if (!(*lmft_seconds > 0.0)) fail(ErrorKind::BadConfig, "lmft.segment_seconds must be positive");
    cfg.lmft.length_multiplier = *lmft_seconds / train_seconds;
  }
}

}  // namespace

Mode parse_mode(const std::string& name) {
  if (name == "pseudo_label") return Mode::PseudoLabel;
  if (name == "ssl_contrastive_e2e") return Mode::SslContrastiveE2e;
  fail(ErrorKind::BadConfig, "unknown mode '" + name + "'");
}

std::string to_string(Mode m) { return m == Mode::PseudoLabel ? "pseudo_label" : "ssl_contrastive_e2e"; }

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, s] : setters()) keys.push_back(k);
  return keys;
}

RunConfig parse_config(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> entries;
  int lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    auto kv = split_setting(line, lineno);
    for (const auto& e : entries)
      if (e.first == kv.first) fail(ErrorKind::BadConfig, "repeated key '" + kv.first + "' (line " + std::to_string(lineno) + ")");
    entries.push_back(std::move(kv));
  }
  RunConfig cfg;
  apply_entries(cfg, entries);
  cfg.entries = std::move(entries);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(io::read_file(path)); }

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
  if (overrides.empty()) return;
  auto entries = cfg.entries;
  for (const auto& o : overrides) {
    auto kv = split_setting(o, 0);
    bool replaced = false;
    for (auto& e : entries)
      if (e.first == kv.first) e.second = kv.second, replaced = true;
    if (!replaced) entries.push_back(std::move(kv));
  }
  RunConfig fresh;
  apply_entries(fresh, entries);
  fresh.entries = std::move(entries);
  cfg = std::move(fresh);
}

void validate(const RunConfig& cfg) {
  sim::validate(cfg.world);
  train::validate(cfg.train);
  train::lmft_switch(cfg.train, cfg.lmft);
  train::validate(cfg.dino);
  train::validate(cfg.contrastive);
  if (cfg.num_refinement_iterations < 0) fail(ErrorKind::BadConfig, "num_refinement_iterations must be nonnegative");
  if (cfg.eval_speakers < 2 || cfg.eval_utterances < 1) fail(ErrorKind::BadConfig, "evaluation set needs two speakers");
  if (cfg.model.hidden_dim < 1 || cfg.model.num_layers < 1 || cfg.model.embed_dim < 1)
    fail(ErrorKind::BadConfig, "model dimensions must be positive");
  if (!(cfg.init_gain > 0.0)) fail(ErrorKind::BadConfig, "model.init_gain must be positive");
  if (cfg.cluster.target_k < 1 || cfg.cluster.k < cfg.cluster.target_k)
    fail(ErrorKind::BadConfig, "need 1 <= ahc_clusters <= kmeans_clusters");
  if (cfg.cluster.max_iters < 1 || cfg.cluster.tol < 0.0) fail(ErrorKind::BadConfig, "invalid k-means stopping rule");
  if (cfg.scoring.num_frames < 1 || cfg.scoring.frame_len < 1) fail(ErrorKind::BadConfig, "invalid scoring frames");
  if (!(cfg.dcf.p_target > 0.0 && cfg.dcf.p_target < 1.0) || !(cfg.dcf.c_miss > 0.0) || !(cfg.dcf.c_fa > 0.0))
    fail(ErrorKind::BadConfig, "invalid detection cost parameters");
  if (cfg.external_embeddings.empty() && cfg.mode == Mode::PseudoLabel &&
      cfg.world.frames_per_utterance < cfg.dino.views.global_len)
    fail(ErrorKind::BadConfig, "utterances are shorter than a DINO global view");
}

}  // namespace forge::pipeline
