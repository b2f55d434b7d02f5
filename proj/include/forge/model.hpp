#pragma once

#include "forge/core.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>

namespace forge {

// Stack of L tanh layers; layer l maps hidden_{l-1} -> hidden_l, applied
// frame-wise. Stand-in for a pretrained multi-layer speech encoder.
struct LayeredEncoder {
  std::vector<Matrix> weights;  // layer l: hidden x (l == 0 ? input : hidden)
  std::vector<Vector> biases;
  int input_dim = 0;
  int hidden_dim = 0;

  int num_layers() const { return static_cast<int>(weights.size()); }
};

// Single-head attentive pooling over frames. Keys and values are two separate
// softmax-weighted combinations of the per-layer hidden states; the query
// scores key frames and the attention-pooled values are projected to the
// embedding.
struct AttentivePoolingHead {
  Vector key_layer_logits;    // L
  Vector value_layer_logits;  // L
  Vector query;               // hidden
  Matrix projection;          // embed x hidden
  Vector projection_bias;     // embed
};

struct SpeakerModel {
  LayeredEncoder encoder;
  AttentivePoolingHead head;
  // Bumped on every parameter update; forward caches remember it.
  std::uint64_t version = 0;

  int embed_dim() const { return static_cast<int>(head.projection.rows()); }
};

struct ModelShape {
  int input_dim = 32;
  int hidden_dim = 32;
  int num_layers = 4;
  int embed_dim = 32;
};

ModelShape shape_of(const SpeakerModel& m);

// Scaled orthogonal weights, small random biases, uniform layer weights.
SpeakerModel init_model(const ModelShape& shape, std::uint64_t seed, double gain = 1.0);

SpeakerModel zeros_like(const SpeakerModel& m);

struct ForwardCache {
  std::vector<Matrix> hidden;  // hidden[0] is the input, hidden[l] layer l output
  Vector layer_key_weights;
  Vector layer_value_weights;
  Matrix keys;
  Matrix values;
  Vector attention;
  Vector pooled;
  std::uint64_t version = 0;
};

Vector forward(const SpeakerModel& model, const Matrix& input, ForwardCache* cache);

inline Vector embed(const SpeakerModel& model, const Matrix& input) { return forward(model, input, nullptr); }

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(embedding).
// Throws StaleCache if the model changed since the forward pass.
void backward(const SpeakerModel& model, const ForwardCache& cache, const Vector& grad_embedding, SpeakerModel& grads);

// Parameter group used for layer-wise learning rates: encoder layer l -> l+1
// (1-based), every head parameter -> L+1.
template <typename Model, typename Fn>
void visit_params(Model& m, Fn&& fn) {
  const int layers = m.encoder.num_layers();
  for (int l = 0; l < layers; ++l) {
    fn(l + 1, m.encoder.weights[static_cast<std::size_t>(l)].data(), m.encoder.weights[static_cast<std::size_t>(l)].size());
    fn(l + 1, m.encoder.biases[static_cast<std::size_t>(l)].data(), m.encoder.biases[static_cast<std::size_t>(l)].size());
  }
  fn(layers + 1, m.head.key_layer_logits.data(), m.head.key_layer_logits.size());
  fn(layers + 1, m.head.value_layer_logits.data(), m.head.value_layer_logits.size());
  fn(layers + 1, m.head.query.data(), m.head.query.size());
  fn(layers + 1, m.head.projection.data(), m.head.projection.size());
  fn(layers + 1, m.head.projection_bias.data(), m.head.projection_bias.size());
}

Vector flatten(const SpeakerModel& m);
void unflatten(SpeakerModel& m, const Vector& flat);
Eigen::Index parameter_count(const SpeakerModel& m);

// Checkpoint file:
//   "CKP1" | u32 L | u32 input | u32 hidden | u32 embed | u32 classes |
//   f32 LE parameters in visit_params order | classes x embed f32 class weights
struct Checkpoint {
  SpeakerModel model;
  Matrix class_weights;  // 0 x embed when absent
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Rounds every parameter to float32, matching what a checkpoint round trip does.
void quantize_to_f32(Checkpoint& ckpt);

}  // namespace forge
