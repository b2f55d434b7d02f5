#include "forge/trainer.hpp"

#include "forge/error.hpp"
#include "forge/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

namespace forge::train {

namespace {

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  return order;
}

UpdateRule make_rule(std::vector<double> rates, double anchor_l2, OptimizerKind kind) {
  UpdateRule r;
  r.group_lr = std::move(rates);
  r.anchor_l2 = anchor_l2;
  r.kind = kind;
  return r;
}

// Gradient of a scalar w.r.t. e given its gradient w.r.t. e / ||e||.
Vector through_normalization(const Vector& e, const Vector& grad_unit) {
  const double n = std::max(e.norm(), 1e-12);
  const Vector u = e / n;
  return (grad_unit - u * u.dot(grad_unit)) / n;
}

}  // namespace

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  fail(ErrorKind::BadConfig, "unknown optimizer '" + name + "'");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

void validate(const TrainConfig& cfg) {
  if (!(cfg.base_lr > 0.0)) fail(ErrorKind::BadConfig, "base_lr must be positive");
  if (!(cfg.lr_epoch_multiplier > 0.0)) fail(ErrorKind::BadConfig, "lr_epoch_multiplier must be positive");
  if (!(cfg.layer_decay > 0.0 && cfg.layer_decay <= 1.0)) fail(ErrorKind::BadConfig, "layer_decay must be in (0, 1]");
  if (cfg.anchor_l2 < 0.0) fail(ErrorKind::BadConfig, "anchor_l2 must be nonnegative");
  if (cfg.batch_size < 1 || cfg.epochs < 0) fail(ErrorKind::BadConfig, "batch_size and epochs must be positive");
  if (!(cfg.scale > 0.0) || cfg.margin < 0.0) fail(ErrorKind::BadConfig, "invalid margin or scale");
  if (cfg.segment_frames < 1 || !(cfg.input_length_multiplier > 0.0)) fail(ErrorKind::BadConfig, "invalid segment length");
  if (!(cfg.lc_sharpen > 0.0) || cfg.lc_weight < 0.0) fail(ErrorKind::BadConfig, "invalid label correction settings");
  if (!(cfg.tau2 >= 0.0 && cfg.tau2 < 1.0)) fail(ErrorKind::BadConfig, "tau2 must be in [0, 1)");
  if (cfg.gate_warmup_epochs < 1 || cfg.lc_delay_epochs < 0) fail(ErrorKind::BadConfig, "invalid gate schedule");
}

int crop_frames(const TrainConfig& cfg) {
  return std::max(1, static_cast<int>(std::lround(cfg.segment_frames * cfg.input_length_multiplier)));
}

TrainConfig lmft_switch(TrainConfig cfg, const LmftConfig& lmft) {
  cfg.margin = lmft.margin;
  cfg.input_length_multiplier = lmft.length_multiplier;
  cfg.epochs = lmft.epochs;
  validate(cfg);
  return cfg;
}

std::vector<double> group_learning_rates(double base_lr, double layer_decay, double epoch_multiplier, int epoch,
                                         int num_layers) {
  if (!(layer_decay > 0.0 && layer_decay <= 1.0)) fail(ErrorKind::BadConfig, "layer_decay must be in (0, 1]");
  const double base = base_lr * std::pow(epoch_multiplier, epoch);
  std::vector<double> rates;
  for (int l = 1; l <= num_layers; ++l) rates.push_back(base * std::pow(layer_decay, num_layers - l));
  rates.push_back(base);
  if (!std::is_sorted(rates.begin(), rates.end())) throw std::logic_error("layer learning rates are not monotone");
  return rates;
}

std::vector<double> layer_weight_distance(const LayeredEncoder& now, const AnchorSnapshot& anchor) {
  const auto& ref = anchor.model().encoder;
  if (now.num_layers() != ref.num_layers()) fail(ErrorKind::ShapeMismatch, "encoders differ in depth");
  std::vector<double> out;
  for (std::size_t l = 0; l < now.weights.size(); ++l) {
    if (now.weights[l].rows() != ref.weights[l].rows() || now.weights[l].cols() != ref.weights[l].cols() ||
        now.biases[l].size() != ref.biases[l].size())
      fail(ErrorKind::ShapeMismatch, "layer " + std::to_string(l + 1) + " differs in shape");
    out.push_back(std::sqrt((now.weights[l] - ref.weights[l]).squaredNorm() + (now.biases[l] - ref.biases[l]).squaredNorm()));
  }
  return out;
}

void apply_update(TrainState& st, const SpeakerModel& grads, const Matrix& out_grads, const UpdateRule& rule,
                  const AnchorSnapshot* anchor) {
  const int layers = st.model.encoder.num_layers();
  if (static_cast<int>(rule.group_lr.size()) != layers + 1) fail(ErrorKind::BadConfig, "need one learning rate per group");
  if (out_grads.rows() != st.out_weights.rows() || out_grads.cols() != st.out_weights.cols())
    fail(ErrorKind::ShapeMismatch, "output-layer gradient has the wrong shape");
  if (parameter_count(grads) != parameter_count(st.model)) fail(ErrorKind::ShapeMismatch, "gradient shape differs from model");

  struct Block {
    int group;
    double* p;
    const double* g;
    const double* a;
    Eigen::Index n;
  };
  std::vector<Block> blocks;
  visit_params(st.model, [&](int group, double* p, Eigen::Index n) { blocks.push_back({group, p, nullptr, nullptr, n}); });
  std::size_t i = 0;
  visit_params(grads, [&](int, const double* g, Eigen::Index) { blocks[i++].g = g; });
  if (anchor && rule.anchor_l2 > 0.0) {
    if (parameter_count(anchor->model()) != parameter_count(st.model)) fail(ErrorKind::ShapeMismatch, "anchor shape differs");
    i = 0;
    visit_params(anchor->model(), [&](int, const double* a, Eigen::Index) { blocks[i++].a = a; });
  }
  blocks.push_back({layers + 1, st.out_weights.data(), out_grads.data(), nullptr, st.out_weights.size()});

  const Eigen::Index total = parameter_count(st.model) + st.out_weights.size();
  auto& opt = st.opt;
  if (rule.kind == OptimizerKind::Adam) {
    if (opt.m.size() != total) {
      opt.m = Vector::Zero(total);
      opt.v = Vector::Zero(total);
      opt.step = 0;
    }
    ++opt.step;
  }
  opt.kind = rule.kind;
  const double bc1 = 1.0 - std::pow(rule.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(rule.beta2, static_cast<double>(opt.step));

  Eigen::Index flat = 0;
  for (const auto& b : blocks) {
    const double lr = rule.group_lr[static_cast<std::size_t>(b.group - 1)];
    const bool anchored = b.a != nullptr && b.group <= layers;
    for (Eigen::Index k = 0; k < b.n; ++k, ++flat) {
      double g = b.g[k];
      if (anchored) g += 2.0 * rule.anchor_l2 * (b.p[k] - b.a[k]);
      if (rule.kind == OptimizerKind::Sgd) {
        b.p[k] -= lr * g;
      } else {
        opt.m(flat) = rule.beta1 * opt.m(flat) + (1.0 - rule.beta1) * g;
        opt.v(flat) = rule.beta2 * opt.v(flat) + (1.0 - rule.beta2) * g * g;
        b.p[k] -= lr * (opt.m(flat) / bc1) / (std::sqrt(opt.v(flat) / bc2) + rule.eps);
      }
    }
  }
  ++st.model.version;
}

Matrix init_class_weights(const FeatureSet& data, std::span<const int> labels, int num_classes, const SpeakerModel& model) {
  if (labels.size() != data.size()) fail(ErrorKind::Misaligned, "labels must cover the dataset");
  if (num_classes < 1) fail(ErrorKind::BadConfig, "need at least one class");
  Matrix w = Matrix::Zero(num_classes, model.embed_dim());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int c = labels[i];
    if (c < 0 || c >= num_classes) fail(ErrorKind::LabelOutOfRange, "label outside [0, num_classes)");
    const Vector e = embed(model, data.frames[i]);
    w.row(c) += (e / std::max(e.norm(), 1e-12)).transpose();
  }
  for (int c = 0; c < num_classes; ++c) {
    const double n = w.row(c).norm();
    if (n < 1e-12) {
      w.row(c).setZero();
      w(c, c % w.cols()) = 1.0;
    } else {
      w.row(c) /= n;
    }
  }
  return w;
}

EpochRecord train_epoch(const FeatureSet& data, std::span<const int> labels, TrainState& state, const TrainConfig& cfg,
                        const AnchorSnapshot& anchor, const EpochOptions& opts) {
  validate(cfg);
  const std::size_t n = data.size();
  if (labels.size() != n) fail(ErrorKind::Misaligned, "labels must cover the dataset");
  if (opts.gate && opts.gate->status.size() != n) fail(ErrorKind::Misaligned, "gate decision must cover the dataset");
  const auto classes = static_cast<int>(state.out_weights.rows());
  for (int c : labels)
    if (c < 0 || c >= classes) fail(ErrorKind::LabelOutOfRange, "label outside [0, num_classes)");

  const int layers = state.model.encoder.num_layers();
  const auto rates = group_learning_rates(cfg.base_lr, cfg.layer_decay, cfg.lr_epoch_multiplier, opts.epoch, layers);
  const UpdateRule rule = make_rule(rates, cfg.anchor_l2, cfg.optimizer);
  const losses::AamConfig aam{cfg.margin, cfg.scale, classes};
  const int len = crop_frames(cfg);
  const auto order = shuffled_order(n, mix_seed(opts.seed, 0));

  EpochRecord rec;
  rec.epoch = opts.epoch;
  rec.learning_rate = rates.back();
  rec.losses.assign(n, 0.0);
  rec.probs = Matrix::Zero(static_cast<Eigen::Index>(n), classes);
  rec.gate_active = opts.gate != nullptr;
  rec.lc_active = opts.lc_active;

  const auto embed_dim = state.model.embed_dim();
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t batch = std::min(static_cast<std::size_t>(cfg.batch_size), n - start);
    const auto rows = static_cast<Eigen::Index>(batch);
    Matrix e_aug(rows, embed_dim), e_clean(rows, embed_dim);
    std::vector<ForwardCache> caches(batch);
    std::vector<int> batch_labels(batch);
    std::vector<double> aam_w(batch), lc_w(batch, 0.0);
    bool any_correctable = false;
    for (std::size_t j = 0; j < batch; ++j) {
      const std::size_t idx = order[start + j];
      Rng rng(mix_seed(opts.seed, 1 + idx));
      const Matrix crop = sim::random_crop(data.frames[idx], len, rng);
      const Matrix aug = sim::perturb(crop, cfg.augment, rng);
      e_clean.row(static_cast<Eigen::Index>(j)) = embed(state.model, crop).transpose();
      e_aug.row(static_cast<Eigen::Index>(j)) = forward(state.model, aug, &caches[j]).transpose();
      batch_labels[j] = labels[idx];
      const auto status = opts.gate ? opts.gate->status[idx] : lossgate::GateStatus::Reliable;
      aam_w[j] = status == lossgate::GateStatus::Reliable ? 1.0 : 0.0;
      if (opts.lc_active && status == lossgate::GateStatus::UnreliableCorrectable) {
        lc_w[j] = cfg.lc_weight;
        any_correctable = true;
      }
    }

    auto res = losses::aam_softmax_loss(e_aug, state.out_weights, batch_labels, aam, aam_w);
    const Matrix no_targets = Matrix::Zero(rows, classes);
    const Matrix clean_probs =
        losses::cosine_softmax_cross_entropy(e_clean, state.out_weights, no_targets, cfg.scale).probs;
    Matrix grad_emb = res.grad_embeddings;
    Matrix grad_w = res.grad_weights;
    if (any_correctable) {
      Matrix targets = Matrix::Zero(rows, classes);
      for (std::size_t j = 0; j < batch; ++j)
        if (lc_w[j] > 0.0)
          targets.row(static_cast<Eigen::Index>(j)) =
              losses::lc_soft_target(clean_probs.row(static_cast<Eigen::Index>(j)).transpose(), cfg.lc_sharpen).transpose();
      const auto lc = losses::cosine_softmax_cross_entropy(e_aug, state.out_weights, targets, cfg.scale, lc_w);
      grad_emb += lc.grad_embeddings;
      grad_w += lc.grad_weights;
    }

    SpeakerModel grads = zeros_like(state.model);
    for (std::size_t j = 0; j < batch; ++j)
      backward(state.model, caches[j], grad_emb.row(static_cast<Eigen::Index>(j)).transpose(), grads);
    apply_update(state, grads, grad_w, rule, &anchor);

    for (std::size_t j = 0; j < batch; ++j) {
      const std::size_t idx = order[start + j];
      rec.losses[idx] = res.per_sample(static_cast<Eigen::Index>(j));
      rec.probs.row(static_cast<Eigen::Index>(idx)) = clean_probs.row(static_cast<Eigen::Index>(j));
      const double w = aam_w[j];
      if (w > 0.0) ++rec.reliable;
      else if (opts.gate && opts.gate->status[idx] == lossgate::GateStatus::UnreliableCorrectable) ++rec.correctable;
      else ++rec.discarded;
    }
  }
  rec.mean_loss = n ? std::accumulate(rec.losses.begin(), rec.losses.end(), 0.0) / static_cast<double>(n) : 0.0;
  return rec;
}

GateEpoch decide_gate(const EpochRecord& previous, int epoch, double tau2) {
  GateEpoch ge;
  ge.epoch = epoch;
  try {
    ge.gmm = lossgate::gmm_fit_em(previous.losses);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::DegenerateData && e.kind() != ErrorKind::TooFewSamples) throw;
    ge.degenerate = true;
    return ge;
  }
  if (!lossgate::is_bimodal(ge.gmm)) {
    ge.unimodal = true;
    return ge;
  }
  const auto t = lossgate::intersection_threshold(ge.gmm);
  ge.tau1 = t.tau1;
  ge.threshold_fallback = t.fallback;
  ge.active = true;
  const auto d = lossgate::gate_samples(previous.losses, previous.probs, ge.tau1, tau2);
  ge.reliable = d.reliable;
  ge.correctable = d.correctable;
  ge.discarded = d.discarded;
  return ge;
}

FinetuneOutcome finetune(const FeatureSet& data, std::span<const int> labels, int num_classes, TrainState init,
                         const AnchorSnapshot& anchor, const TrainConfig& cfg, std::uint64_t seed, const EpochHook& hook) {
  validate(cfg);
  if (init.out_weights.rows() != num_classes) fail(ErrorKind::ShapeMismatch, "class weights do not match the label count");
  FinetuneOutcome out;
  out.state = std::move(init);
  for (int e = 0; e < cfg.epochs; ++e) {
    GateEpoch ge;
    ge.epoch = e;
    std::optional<lossgate::GateDecision> gate;
    const bool gating_on = cfg.gating && e >= cfg.gate_warmup_epochs && !out.epochs.empty();
    if (gating_on) {
      ge = decide_gate(out.epochs.back(), e, cfg.tau2);
      if (ge.active) gate = lossgate::gate_samples(out.epochs.back().losses, out.epochs.back().probs, ge.tau1, cfg.tau2);
    }
    const bool lc = cfg.label_correction && gate.has_value() && e >= cfg.gate_warmup_epochs + cfg.lc_delay_epochs;
    auto rec = train_epoch(data, labels, out.state, cfg, anchor,
                           EpochOptions{e, gate ? &*gate : nullptr, lc, mix_seed(seed, static_cast<std::uint64_t>(e))});
    out.drift.push_back(layer_weight_distance(out.state.model.encoder, anchor));
    if (hook) hook(rec, ge);
    out.epochs.push_back(std::move(rec));
    out.gates.push_back(std::move(ge));
  }
  return out;
}

// ---------------------------------------------------------------------------

void validate(const DinoTrainConfig& cfg) {
  if (cfg.epochs < 0 || cfg.batch_size < 1) fail(ErrorKind::BadConfig, "invalid DINO epochs or batch size");
  if (!(cfg.lr > 0.0)) fail(ErrorKind::BadConfig, "DINO lr must be positive");
  if (cfg.dino.num_global != cfg.views.num_global || cfg.dino.num_local != cfg.views.num_local)
    fail(ErrorKind::BadConfig, "DINO view counts disagree with the view generator");
  if (cfg.dino.output_dim < 2) fail(ErrorKind::BadConfig, "DINO output_dim must be at least 2");
}

DinoOutcome train_dino(const FeatureSet& data, const SpeakerModel& init, const DinoTrainConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  const int k = cfg.dino.output_dim;
  const int e_dim = init.embed_dim();
  const int layers = init.encoder.num_layers();
  const int globals = cfg.views.num_global;
  const int views_per = cfg.views.num_global + cfg.views.num_local;

  Rng rng(mix_seed(seed, 0));
  TrainState st{init, Matrix(k, e_dim), {}};
  for (Eigen::Index i = 0; i < st.out_weights.size(); ++i) st.out_weights.data()[i] = rng.normal() / std::sqrt(e_dim);
  SpeakerModel teacher = init;
  Matrix teacher_proj = st.out_weights;
  Vector center = Vector::Zero(k);

  const std::size_t n = data.size();
  const long steps_per_epoch = static_cast<long>((n + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size));
  const long total_steps = std::max(1L, steps_per_epoch * cfg.epochs);
  long step = 0;

  DinoOutcome out;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::uint64_t epoch_seed = mix_seed(seed, static_cast<std::uint64_t>(epoch) + 1);
    const UpdateRule rule =
        make_rule(group_learning_rates(cfg.lr, cfg.layer_decay, cfg.lr_epoch_multiplier, epoch, layers), 0.0, cfg.optimizer);
    const auto order = shuffled_order(n, mix_seed(epoch_seed, 0));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t batch = std::min(static_cast<std::size_t>(cfg.batch_size), n - start);
      SpeakerModel grads = zeros_like(st.model);
      Matrix grad_proj = Matrix::Zero(k, e_dim);
      Vector teacher_sum = Vector::Zero(k);
      losses::DinoConfig dcfg = cfg.dino;
      dcfg.center = center;
      for (std::size_t j = 0; j < batch; ++j) {
        const std::size_t idx = order[start + j];
        const auto views = sim::make_views(data.frames[idx], cfg.views, mix_seed(epoch_seed, 1 + idx));
        Matrix s_logits(views_per, k), t_logits(globals, k);
        std::vector<ForwardCache> caches(static_cast<std::size_t>(views_per));
        std::vector<Vector> raw(static_cast<std::size_t>(views_per)), unit(static_cast<std::size_t>(views_per));
        for (int v = 0; v < views_per; ++v) {
          const auto vi = static_cast<std::size_t>(v);
          raw[vi] = forward(st.model, views[vi], &caches[vi]);
          unit[vi] = raw[vi] / std::max(raw[vi].norm(), 1e-12);
          s_logits.row(v) = (st.out_weights * unit[vi]).transpose();
        }
        for (int g = 0; g < globals; ++g) {
          const Vector te = embed(teacher, views[static_cast<std::size_t>(g)]);
          t_logits.row(g) = (teacher_proj * (te / std::max(te.norm(), 1e-12))).transpose();
        }
        const auto r = losses::dino_loss(s_logits, t_logits, dcfg);
        epoch_loss += r.loss;
        teacher_sum += t_logits.colwise().sum().transpose();
        for (int v = 0; v < views_per; ++v) {
          const auto vi = static_cast<std::size_t>(v);
          const Vector gl = r.grad.row(v).transpose() / static_cast<double>(batch);
          grad_proj += gl * unit[vi].transpose();
          backward(st.model, caches[vi], through_normalization(raw[vi], st.out_weights.transpose() * gl), grads);
        }
      }
      apply_update(st, grads, grad_proj, rule, nullptr);
      center = losses::dino_center_update(center, teacher_sum / static_cast<double>(batch * static_cast<std::size_t>(globals)),
                                          cfg.dino.center_momentum);
      const double m = losses::ema_momentum_at(cfg.dino.ema_momentum, cfg.dino.ema_momentum_final, step, total_steps);
      unflatten(teacher, losses::ema_update(flatten(teacher), flatten(st.model), m));
      Eigen::Map<Vector> tp(teacher_proj.data(), teacher_proj.size());
      Eigen::Map<const Vector> sp(st.out_weights.data(), st.out_weights.size());
      tp = losses::ema_update(Vector(tp), Vector(sp), m);
      ++step;
    }
    out.epoch_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(n, 1)));
  }
  out.student = std::move(st.model);
  out.teacher = std::move(teacher);
  out.teacher_projector = std::move(teacher_proj);
  return out;
}

// ---------------------------------------------------------------------------

PositiveSampling parse_positive_sampling(const std::string& name) {
  if (name == "same_utterance") return PositiveSampling::SameUtterance;
  if (name == "truth_different_utterance") return PositiveSampling::TruthDifferentUtterance;
  fail(ErrorKind::BadConfig, "unknown positive sampling '" + name + "'");
}

std::string to_string(PositiveSampling p) {
  return p == PositiveSampling::SameUtterance ? "same_utterance" : "truth_different_utterance";
}

void validate(const ContrastiveConfig& cfg) {
  if (cfg.epochs < 0 || cfg.batch_pairs < 2) fail(ErrorKind::BadConfig, "contrastive training needs >= 2 pairs per batch");
  if (!(cfg.lr > 0.0) || !(cfg.temperature > 0.0)) fail(ErrorKind::BadConfig, "lr and temperature must be positive");
  if (!(cfg.layer_decay > 0.0 && cfg.layer_decay <= 1.0)) fail(ErrorKind::BadConfig, "layer_decay must be in (0, 1]");
  if (cfg.segment_frames < 1) fail(ErrorKind::BadConfig, "segment_frames must be positive");
}

ContrastiveOutcome train_contrastive(const FeatureSet& data, const SpeakerModel& init, const ContrastiveConfig& cfg,
                                     PositiveSampling sampling, std::span<const int> speakers, std::uint64_t seed) {
  validate(cfg);
  const std::size_t n = data.size();
  std::unordered_map<int, std::vector<std::size_t>> by_speaker;
  if (sampling == PositiveSampling::TruthDifferentUtterance) {
    if (speakers.size() != n) fail(ErrorKind::LengthMismatch, "speaker labels must cover the dataset");
    for (std::size_t i = 0; i < n; ++i) by_speaker[speakers[i]].push_back(i);
  }
  const AnchorSnapshot anchor(init);
  TrainState st{init, Matrix(0, init.embed_dim()), {}};
  const Matrix no_out(0, init.embed_dim());
  const int layers = init.encoder.num_layers();
  const std::size_t pairs = static_cast<std::size_t>(cfg.batch_pairs);

  ContrastiveOutcome out;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::uint64_t epoch_seed = mix_seed(seed, static_cast<std::uint64_t>(epoch) + 1);
    const UpdateRule rule = make_rule(group_learning_rates(cfg.lr, cfg.layer_decay, cfg.lr_epoch_multiplier, epoch, layers),
                                      cfg.anchor_l2, cfg.optimizer);
    const auto order = shuffled_order(n, mix_seed(epoch_seed, 0));
    double loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start + 2 <= n; start += pairs) {
      const std::size_t batch = std::min(pairs, n - start);
      if (batch < 2) break;
      const auto rows = static_cast<Eigen::Index>(2 * batch);
      Matrix z(rows, init.embed_dim());
      std::vector<ForwardCache> caches(2 * batch);
      for (std::size_t j = 0; j < batch; ++j) {
        const std::size_t idx = order[start + j];
        Rng rng(mix_seed(epoch_seed, 1 + idx));
        std::size_t other = idx;
        if (sampling == PositiveSampling::TruthDifferentUtterance) {
          const auto& same = by_speaker.at(speakers[idx]);
          if (same.size() > 1) {
            other = same[static_cast<std::size_t>(rng.below(same.size() - 1))];
            if (other == idx) other = same.back();
          }
        }
        const Matrix a = sim::perturb(sim::random_crop(data.frames[idx], cfg.segment_frames, rng), cfg.augment, rng);
        const Matrix b = sim::perturb(sim::random_crop(data.frames[other], cfg.segment_frames, rng), cfg.augment, rng);
        z.row(static_cast<Eigen::Index>(2 * j)) = forward(st.model, a, &caches[2 * j]).transpose();
        z.row(static_cast<Eigen::Index>(2 * j + 1)) = forward(st.model, b, &caches[2 * j + 1]).transpose();
      }
      const auto pairing = losses::adjacent_pairing(static_cast<int>(batch));
      const auto r = losses::nt_xent_loss(z, pairing, losses::NtXentConfig{cfg.temperature, static_cast<int>(batch)});
      loss += r.loss;
      ++batches;
      SpeakerModel grads = zeros_like(st.model);
      for (std::size_t j = 0; j < 2 * batch; ++j)
        backward(st.model, caches[j], r.grad.row(static_cast<Eigen::Index>(j)).transpose(), grads);
      apply_update(st, grads, no_out, rule, &anchor);
    }
    out.epoch_loss.push_back(batches ? loss / batches : 0.0);
    out.drift.push_back(layer_weight_distance(st.model.encoder, anchor));
  }
  out.model = std::move(st.model);
  return out;
}

}  // namespace forge::train
