#pragma once

#include "forge/core.hpp"

#include <functional>
#include <span>

namespace forge::losses {

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;
};

// ---------------------------------------------------------------------------
// NT-Xent contrastive loss over a batch of 2N embeddings.
//
// pairing[i] is the index of the other view of item i; it must be an
// involution without fixed points. Similarity is exp(cos(z_i, z_a) / tau) and
// the denominator for anchor i runs over every a != i. The gradient is taken
// w.r.t. the raw (unnormalized) rows.
struct NtXentConfig {
  double temperature = 0.1;
  int batch_pairs = 1;
};

LossAndGrad nt_xent_loss(const Matrix& embeddings, std::span<const int> pairing, const NtXentConfig& cfg);

// Standard pairing for rows laid out as [a_0, b_0, a_1, b_1, ...].
std::vector<int> adjacent_pairing(int batch_pairs);

// ---------------------------------------------------------------------------
// DINO self-distillation.
//
// Student rows are the views in order [global_0 .. global_{G-1}, local_0 ..];
// teacher rows are the G global views in the same order. The teacher
// distribution is softmax((t - center) / teacher_temp), the student one
// softmax(s / student_temp). Cross terms pair teacher view g with every student
// view v != g.
struct DinoConfig {
  int output_dim = 64;
  double teacher_temp = 0.04;
  double student_temp = 0.1;
  Vector center;  // empty means zeros(output_dim)
  double center_momentum = 0.9;
  double ema_momentum = 0.996;
  double ema_momentum_final = 1.0;
  int num_global = 2;
  int num_local = 4;
  // Divide by the number of cross terms. Off reproduces the raw double sum.
  bool normalize = true;
};

struct DinoResult {
  double loss = 0.0;
  Matrix grad;           // w.r.t. student logits
  Matrix teacher_probs;  // G x K
  int cross_terms = 0;
};

DinoResult dino_loss(const Matrix& student_logits, const Matrix& teacher_logits, const DinoConfig& cfg);

Vector dino_center_update(const Vector& center, const Vector& teacher_batch_mean, double momentum);

Vector ema_update(const Vector& teacher_params, const Vector& student_params, double momentum);

// Cosine ramp from `base` at step 0 to `final_value` at `total_steps`.
double ema_momentum_at(double base, double final_value, long step, long total_steps);

// Extension point for additional teacher/student regularizers on the student
// embeddings (B x e). Returns the added loss and accumulates into grad.
// Nothing is registered by default.
using DinoRegularizer = std::function<double(const Matrix& student_embeddings, Matrix& grad)>;

// ---------------------------------------------------------------------------
// Additive angular margin softmax.
struct AamConfig {
  double margin = 0.2;
  double scale = 30.0;
  int num_classes = 1;
};

struct AamResult {
  double loss = 0.0;         // sum_j w_j * CE_j / B
  Vector per_sample;         // unweighted CE_j, for the loss gate
  Matrix grad_embeddings;    // B x d
  Matrix grad_weights;       // C x d
  // softmax(scale * cos) without the margin: the model's own class posterior,
  // independent of the (possibly wrong) label. Used by label correction.
  Matrix probs;
};

// sample_weights defaults to all ones.
AamResult aam_softmax_loss(const Matrix& embeddings, const Matrix& class_weights, std::span<const int> labels,
                           const AamConfig& cfg, std::span<const double> sample_weights = {});

// Target-class logit after the margin, and its derivative w.r.t. the cosine.
// Falls back to cos - m*sin(m) once theta + m would exceed pi.
struct MarginLogit {
  double value;
  double derivative;
};
MarginLogit additive_angular_margin(double cosine, double margin);

// Soft-target cross-entropy on scale * cos(embedding, class weight) logits,
// with gradients through both l2 normalizations. targets is B x C.
struct CosineCeResult {
  double loss = 0.0;
  Vector per_sample;
  Matrix grad_embeddings;
  Matrix grad_weights;
  Matrix probs;
};
CosineCeResult cosine_softmax_cross_entropy(const Matrix& embeddings, const Matrix& class_weights,
                                            const Matrix& targets, double scale,
                                            std::span<const double> sample_weights = {});

// ---------------------------------------------------------------------------
// Label correction.
Vector lc_soft_target(const Vector& probs_clean, double sharpen);

// Cross-entropy -sum target * log probs. The gradient is w.r.t. the logits that
// produced probs_augmented (probs - target).
struct LcLoss {
  double loss = 0.0;
  Vector grad_logits;
};
LcLoss lc_loss(const Vector& probs_augmented, const Vector& soft_target);
LcLoss lc_loss_from_logits(const Vector& logits, const Vector& soft_target);

// Shared helpers.
Vector softmax(const Vector& logits);
double log_sum_exp(const Vector& v);
void check_distribution(const Vector& p, const char* what);

}  // namespace forge::losses
