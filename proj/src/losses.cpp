#include "forge/losses.hpp"

#include "forge/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace forge::losses {

namespace {

constexpr double kZeroNorm = 1e-12;

struct Normalized {
  Matrix unit;
  Vector norms;
};

Normalized normalize_rows(const Matrix& m) {
  Normalized out{Matrix(m.rows(), m.cols()), Vector(m.rows())};
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n >= kZeroNorm)) fail(ErrorKind::ZeroNorm, "row norm below 1e-12");
    out.norms(i) = n;
    out.unit.row(i) = m.row(i) / n;
  }
  return out;
}

// d/dz of z/|z| applied to an upstream gradient, row-wise.
Matrix normalize_rows_backward(const Normalized& n, const Matrix& grad_unit) {
  Matrix out(grad_unit.rows(), grad_unit.cols());
  for (Eigen::Index i = 0; i < grad_unit.rows(); ++i) {
    const double proj = n.unit.row(i).dot(grad_unit.row(i));
    out.row(i) = (grad_unit.row(i) - proj * n.unit.row(i)) / n.norms(i);
  }
  return out;
}

std::vector<double> resolve_weights(std::span<const double> w, Eigen::Index batch) {
  if (w.empty()) return std::vector<double>(static_cast<std::size_t>(batch), 1.0);
  if (static_cast<Eigen::Index>(w.size()) != batch) fail(ErrorKind::Misaligned, "sample weights do not match batch");
  return {w.begin(), w.end()};
}

}  // namespace

Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

double log_sum_exp(const Vector& v) {
  const double mx = v.maxCoeff();
  return mx + std::log((v.array() - mx).exp().sum());
}

void check_distribution(const Vector& p, const char* what) {
  if (p.size() == 0) fail(ErrorKind::NotADistribution, std::string(what) + " is empty");
  if (!p.allFinite() || p.minCoeff() < -1e-12 || std::abs(p.sum() - 1.0) > 1e-6)
    fail(ErrorKind::NotADistribution, std::string(what) + " is not a probability vector");
}

std::vector<int> adjacent_pairing(int batch_pairs) {
  std::vector<int> p(static_cast<std::size_t>(2 * batch_pairs));
  for (int i = 0; i < batch_pairs; ++i) {
    p[2 * i] = 2 * i + 1;
    p[2 * i + 1] = 2 * i;
  }
  return p;
}

LossAndGrad nt_xent_loss(const Matrix& embeddings, std::span<const int> pairing, const NtXentConfig& cfg) {
  if (!(cfg.temperature > 0.0)) fail(ErrorKind::BadConfig, "temperature must be positive");
  const Eigen::Index n2 = embeddings.rows();
  if (cfg.batch_pairs < 1 || n2 != 2 * cfg.batch_pairs)
    fail(ErrorKind::BadPairing, "embedding count must equal 2 * batch_pairs");
  if (static_cast<Eigen::Index>(pairing.size()) != n2) fail(ErrorKind::BadPairing, "pairing length mismatch");
  for (Eigen::Index i = 0; i < n2; ++i) {
    const int j = pairing[static_cast<std::size_t>(i)];
    if (j < 0 || j >= n2 || j == i || pairing[static_cast<std::size_t>(j)] != i)
      fail(ErrorKind::BadPairing, "pairing is not a fixed-point-free involution");
  }

  const auto nz = normalize_rows(embeddings);
  const Matrix sim = nz.unit * nz.unit.transpose() / cfg.temperature;
  const double inv = 1.0 / static_cast<double>(n2);

  Matrix g = Matrix::Zero(n2, n2);  // dL/dsim
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n2; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index a = 0; a < n2; ++a)
      if (a != i) mx = std::max(mx, sim(i, a));
    double denom = 0.0;
    for (Eigen::Index a = 0; a < n2; ++a)
      if (a != i) denom += std::exp(sim(i, a) - mx);
    const Eigen::Index j = pairing[static_cast<std::size_t>(i)];
    loss += -(sim(i, j) - mx - std::log(denom));
    for (Eigen::Index a = 0; a < n2; ++a) {
      if (a == i) continue;
      g(i, a) = inv * std::exp(sim(i, a) - mx) / denom;
    }
    g(i, j) -= inv;
  }
  loss *= inv;

  const Matrix grad_unit = (g + g.transpose()) * nz.unit / cfg.temperature;
  return {std::max(loss, 0.0), normalize_rows_backward(nz, grad_unit)};
}

DinoResult dino_loss(const Matrix& student_logits, const Matrix& teacher_logits, const DinoConfig& cfg) {
  if (!(cfg.teacher_temp > 0.0) || !(cfg.student_temp > 0.0)) fail(ErrorKind::BadConfig, "temperatures must be positive");
  const Eigen::Index k = student_logits.cols();
  if (k != cfg.output_dim || teacher_logits.cols() != k) fail(ErrorKind::DimMismatch, "logit width differs from K");
  if (teacher_logits.rows() != cfg.num_global) fail(ErrorKind::DimMismatch, "teacher rows must equal num_global");
  if (student_logits.rows() != cfg.num_global + cfg.num_local)
    fail(ErrorKind::DimMismatch, "student rows must equal num_global + num_local");
  Vector center = cfg.center.size() == 0 ? Vector::Zero(k) : cfg.center;
  if (center.size() != k) fail(ErrorKind::DimMismatch, "center width differs from K");
  if (!center.allFinite()) fail(ErrorKind::BadConfig, "center is not finite");

  const Eigen::Index views = student_logits.rows();
  Matrix ps(views, k);
  Matrix log_ps(views, k);
  for (Eigen::Index v = 0; v < views; ++v) {
    const Vector z = student_logits.row(v).transpose() / cfg.student_temp;
    const double lse = log_sum_exp(z);
    log_ps.row(v) = (z.array() - lse).matrix().transpose();
    ps.row(v) = log_ps.row(v).array().exp().matrix();
  }
  DinoResult out;
  out.teacher_probs.resize(cfg.num_global, k);
  for (Eigen::Index g = 0; g < cfg.num_global; ++g)
    out.teacher_probs.row(g) = softmax((teacher_logits.row(g).transpose() - center) / cfg.teacher_temp).transpose();

  out.grad = Matrix::Zero(views, k);
  for (Eigen::Index g = 0; g < cfg.num_global; ++g) {
    for (Eigen::Index v = 0; v < views; ++v) {
      if (v == g) continue;
      out.loss -= out.teacher_probs.row(g).dot(log_ps.row(v));
      out.grad.row(v) += (ps.row(v) - out.teacher_probs.row(g)) / cfg.student_temp;
      ++out.cross_terms;
    }
  }
  if (cfg.normalize && out.cross_terms > 0) {
    out.loss /= out.cross_terms;
    out.grad /= out.cross_terms;
  }
  return out;
}

Vector dino_center_update(const Vector& center, const Vector& teacher_batch_mean, double momentum) {
  if (center.size() != teacher_batch_mean.size()) fail(ErrorKind::DimMismatch, "center and batch mean differ in size");
  return momentum * center + (1.0 - momentum) * teacher_batch_mean;
}

Vector ema_update(const Vector& teacher_params, const Vector& student_params, double momentum) {
  if (teacher_params.size() != student_params.size()) fail(ErrorKind::DimMismatch, "teacher and student differ in size");
  if (momentum < 0.0 || momentum > 1.0) fail(ErrorKind::BadConfig, "EMA momentum must be in [0,1]");
  return momentum * teacher_params + (1.0 - momentum) * student_params;
}

double ema_momentum_at(double base, double final_value, long step, long total_steps) {
  if (total_steps <= 0) return final_value;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return final_value - (final_value - base) * (std::cos(std::numbers::pi * t) + 1.0) / 2.0;
}

MarginLogit additive_angular_margin(double cosine, double margin) {
  const double c = std::clamp(cosine, -1.0, 1.0);
  if (margin == 0.0) return {c, 1.0};
  if (c > std::cos(std::numbers::pi - margin)) {
    const double sin_theta = std::max(std::sqrt(std::max(0.0, 1.0 - c * c)), 1e-12);
    return {c * std::cos(margin) - sin_theta * std::sin(margin), std::cos(margin) + c * std::sin(margin) / sin_theta};
  }
  return {c - margin * std::sin(margin), 1.0};
}

namespace {

struct CosineForward {
  Normalized e;
  Normalized w;
  Matrix cos;
};

CosineForward cosine_forward(const Matrix& embeddings, const Matrix& class_weights) {
  if (embeddings.cols() != class_weights.cols()) fail(ErrorKind::DimMismatch, "embedding and class weight widths differ");
  CosineForward f{normalize_rows(embeddings), normalize_rows(class_weights), {}};
  f.cos = f.e.unit * f.w.unit.transpose();
  return f;
}

void cosine_backward(const CosineForward& f, const Matrix& grad_cos, Matrix& grad_e, Matrix& grad_w) {
  grad_e = normalize_rows_backward(f.e, grad_cos * f.w.unit);
  grad_w = normalize_rows_backward(f.w, grad_cos.transpose() * f.e.unit);
}

}  // namespace

AamResult aam_softmax_loss(const Matrix& embeddings, const Matrix& class_weights, std::span<const int> labels,
                           const AamConfig& cfg, std::span<const double> sample_weights) {
  if (!(cfg.scale > 0.0) || cfg.margin < 0.0) fail(ErrorKind::BadConfig, "AAM needs scale > 0 and margin >= 0");
  const Eigen::Index batch = embeddings.rows();
  const Eigen::Index classes = class_weights.rows();
  if (classes != cfg.num_classes) fail(ErrorKind::DimMismatch, "class weight rows differ from num_classes");
  if (static_cast<Eigen::Index>(labels.size()) != batch) fail(ErrorKind::Misaligned, "label count differs from batch");
  for (int l : labels)
    if (l < 0 || l >= classes) fail(ErrorKind::LabelOutOfRange, "label outside [0, num_classes)");
  const auto weights = resolve_weights(sample_weights, batch);

  const auto f = cosine_forward(embeddings, class_weights);
  AamResult out;
  out.per_sample.resize(batch);
  out.probs.resize(batch, classes);
  Matrix grad_cos(batch, classes);
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (Eigen::Index j = 0; j < batch; ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    Vector logits = cfg.scale * f.cos.row(j).transpose();
    out.probs.row(j) = softmax(logits).transpose();
    const auto target = additive_angular_margin(f.cos(j, y), cfg.margin);
    logits(y) = cfg.scale * target.value;
    const double lse = log_sum_exp(logits);
    out.per_sample(j) = lse - logits(y);
    const double w = weights[static_cast<std::size_t>(j)];
    out.loss += w * out.per_sample(j) * inv_b;
    Vector q = (logits.array() - lse).exp().matrix();
    q(y) -= 1.0;
    grad_cos.row(j) = (w * inv_b * cfg.scale) * q.transpose();
    grad_cos(j, y) *= target.derivative;
  }
  cosine_backward(f, grad_cos, out.grad_embeddings, out.grad_weights);
  return out;
}

CosineCeResult cosine_softmax_cross_entropy(const Matrix& embeddings, const Matrix& class_weights,
                                            const Matrix& targets, double scale,
                                            std::span<const double> sample_weights) {
  const Eigen::Index batch = embeddings.rows();
  if (targets.rows() != batch || targets.cols() != class_weights.rows())
    fail(ErrorKind::DimMismatch, "targets must be B x C");
  const auto weights = resolve_weights(sample_weights, batch);
  const auto f = cosine_forward(embeddings, class_weights);
  CosineCeResult out;
  out.per_sample.resize(batch);
  out.probs.resize(batch, class_weights.rows());
  Matrix grad_cos(batch, class_weights.rows());
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (Eigen::Index j = 0; j < batch; ++j) {
    const Vector logits = scale * f.cos.row(j).transpose();
    const Vector target = targets.row(j).transpose();
    const Vector p = softmax(logits);
    out.probs.row(j) = p.transpose();
    const double lse = log_sum_exp(logits);
    out.per_sample(j) = -(target.array() * (logits.array() - lse)).sum();
    const double w = weights[static_cast<std::size_t>(j)];
    out.loss += w * out.per_sample(j) * inv_b;
    grad_cos.row(j) = (w * inv_b * scale) * (p * target.sum() - target).transpose();
  }
  cosine_backward(f, grad_cos, out.grad_embeddings, out.grad_weights);
  return out;
}

Vector lc_soft_target(const Vector& probs_clean, double sharpen) {
  if (!(sharpen > 0.0)) fail(ErrorKind::BadConfig, "sharpen parameter must be positive");
  check_distribution(probs_clean, "clean-view probabilities");
  // p^(1/eps) in the log domain; zero entries stay zero.
  Vector logp(probs_clean.size());
  for (Eigen::Index k = 0; k < probs_clean.size(); ++k)
    logp(k) = probs_clean(k) > 0.0 ? std::log(probs_clean(k)) / sharpen : -std::numeric_limits<double>::infinity();
  const double mx = logp.maxCoeff();
  Vector out(probs_clean.size());
  for (Eigen::Index k = 0; k < logp.size(); ++k) out(k) = std::isinf(logp(k)) ? 0.0 : std::exp(logp(k) - mx);
  return out / out.sum();
}

LcLoss lc_loss(const Vector& probs_augmented, const Vector& soft_target) {
  check_distribution(probs_augmented, "augmented-view probabilities");
  check_distribution(soft_target, "soft target");
  if (probs_augmented.size() != soft_target.size()) fail(ErrorKind::DimMismatch, "distribution sizes differ");
  LcLoss out;
  for (Eigen::Index k = 0; k < soft_target.size(); ++k)
    if (soft_target(k) > 0.0) out.loss -= soft_target(k) * std::log(std::max(probs_augmented(k), 1e-300));
  out.grad_logits = probs_augmented - soft_target;
  return out;
}

LcLoss lc_loss_from_logits(const Vector& logits, const Vector& soft_target) {
  if (logits.size() != soft_target.size()) fail(ErrorKind::DimMismatch, "logit and target sizes differ");
  check_distribution(soft_target, "soft target");
  LcLoss out;
  const double lse = log_sum_exp(logits);
  out.loss = -(soft_target.array() * (logits.array() - lse)).sum();
  out.grad_logits = softmax(logits) - soft_target;
  return out;
}

}  // namespace forge::losses
