#include "forge/model.hpp"

#include "forge/error.hpp"
#include "forge/io.hpp"
#include "forge/losses.hpp"
#include "forge/random.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace forge {

namespace {

// Rows (or columns, whichever are fewer) orthonormal. Q factor of a Gaussian
// matrix with the sign of R's diagonal folded in.
Matrix random_orthogonal(int rows, int cols, Rng& rng) {
  const int big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd g(big, small);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  const Eigen::MatrixXd r = qr.matrixQR();
  for (int j = 0; j < small; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return rows >= cols ? Matrix(q) : Matrix(q.transpose());
}

}  // namespace

ModelShape shape_of(const SpeakerModel& m) {
  return {m.encoder.input_dim, m.encoder.hidden_dim, m.encoder.num_layers(), m.embed_dim()};
}

SpeakerModel init_model(const ModelShape& shape, std::uint64_t seed, double gain) {
  if (shape.input_dim < 1 || shape.hidden_dim < 1 || shape.embed_dim < 1)
    fail(ErrorKind::BadConfig, "model dimensions must be positive");
  if (shape.num_layers < 2) fail(ErrorKind::BadConfig, "encoder needs at least two layers");
  Rng rng(seed);
  SpeakerModel m;
  m.encoder.input_dim = shape.input_dim;
  m.encoder.hidden_dim = shape.hidden_dim;
  for (int l = 0; l < shape.num_layers; ++l) {
    const int fan_in = l == 0 ? shape.input_dim : shape.hidden_dim;
    Matrix w = gain * random_orthogonal(shape.hidden_dim, fan_in, rng);
    Vector b(shape.hidden_dim);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = 0.1 * rng.normal();
    m.encoder.weights.push_back(std::move(w));
    m.encoder.biases.push_back(std::move(b));
  }
  m.head.key_layer_logits = Vector::Zero(shape.num_layers);
  m.head.value_layer_logits = Vector::Zero(shape.num_layers);
  m.head.query = Vector(shape.hidden_dim);
  for (Eigen::Index i = 0; i < m.head.query.size(); ++i)
    m.head.query(i) = rng.normal() / std::sqrt(static_cast<double>(shape.hidden_dim));
  m.head.projection = random_orthogonal(shape.embed_dim, shape.hidden_dim, rng);
  m.head.projection_bias = Vector::Zero(shape.embed_dim);
  return m;
}

SpeakerModel zeros_like(const SpeakerModel& m) {
  SpeakerModel z = m;
  visit_params(z, [](int, double* p, Eigen::Index n) { std::fill(p, p + n, 0.0); });
  z.version = 0;
  return z;
}

Vector forward(const SpeakerModel& model, const Matrix& input, ForwardCache* cache) {
  const auto& enc = model.encoder;
  if (input.cols() != enc.input_dim) fail(ErrorKind::DimMismatch, "frame dimension differs from encoder input");
  if (input.rows() < 1) fail(ErrorKind::EmptyUtterance, "no frames to encode");
  const int layers = enc.num_layers();

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.hidden.resize(static_cast<std::size_t>(layers + 1));
  c.hidden[0] = input;
  for (int l = 0; l < layers; ++l) {
    Matrix pre = c.hidden[static_cast<std::size_t>(l)] * enc.weights[static_cast<std::size_t>(l)].transpose();
    pre.rowwise() += enc.biases[static_cast<std::size_t>(l)].transpose();
    c.hidden[static_cast<std::size_t>(l + 1)] = pre.array().tanh().matrix();
  }
  c.layer_key_weights = losses::softmax(model.head.key_layer_logits);
  c.layer_value_weights = losses::softmax(model.head.value_layer_logits);
  c.keys = Matrix::Zero(input.rows(), enc.hidden_dim);
  c.values = Matrix::Zero(input.rows(), enc.hidden_dim);
  for (int l = 0; l < layers; ++l) {
    c.keys += c.layer_key_weights(l) * c.hidden[static_cast<std::size_t>(l + 1)];
    c.values += c.layer_value_weights(l) * c.hidden[static_cast<std::size_t>(l + 1)];
  }
  c.attention = losses::softmax(c.keys * model.head.query);
  c.pooled = c.values.transpose() * c.attention;
  c.version = model.version;
  return model.head.projection * c.pooled + model.head.projection_bias;
}

void backward(const SpeakerModel& model, const ForwardCache& cache, const Vector& grad_embedding, SpeakerModel& grads) {
  if (cache.version != model.version || cache.hidden.empty())
    fail(ErrorKind::StaleCache, "forward cache does not match the current parameters");
  if (grad_embedding.size() != model.embed_dim()) fail(ErrorKind::DimMismatch, "embedding gradient has wrong size");
  const auto& enc = model.encoder;
  const int layers = enc.num_layers();

  grads.head.projection += grad_embedding * cache.pooled.transpose();
  grads.head.projection_bias += grad_embedding;
  const Vector grad_pooled = model.head.projection.transpose() * grad_embedding;

  const Matrix grad_values = cache.attention * grad_pooled.transpose();
  const Vector grad_attn = cache.values * grad_pooled;
  const Vector grad_scores = cache.attention.cwiseProduct(
      (grad_attn.array() - cache.attention.dot(grad_attn)).matrix());
  const Matrix grad_keys = grad_scores * model.head.query.transpose();
  grads.head.query += cache.keys.transpose() * grad_scores;

  Vector grad_key_w(layers), grad_value_w(layers);
  std::vector<Matrix> grad_hidden(static_cast<std::size_t>(layers + 1));
  for (int l = 0; l < layers; ++l) {
    const Matrix& h = cache.hidden[static_cast<std::size_t>(l + 1)];
    grad_key_w(l) = (h.array() * grad_keys.array()).sum();
    grad_value_w(l) = (h.array() * grad_values.array()).sum();
    grad_hidden[static_cast<std::size_t>(l + 1)] =
        cache.layer_key_weights(l) * grad_keys + cache.layer_value_weights(l) * grad_values;
  }
  const auto softmax_back = [](const Vector& w, const Vector& g) {
    return Vector(w.cwiseProduct((g.array() - w.dot(g)).matrix()));
  };
  grads.head.key_layer_logits += softmax_back(cache.layer_key_weights, grad_key_w);
  grads.head.value_layer_logits += softmax_back(cache.layer_value_weights, grad_value_w);

  for (int l = layers - 1; l >= 0; --l) {
    const Matrix& out = cache.hidden[static_cast<std::size_t>(l + 1)];
    const Matrix grad_pre = (grad_hidden[static_cast<std::size_t>(l + 1)].array() * (1.0 - out.array().square())).matrix();
    grads.encoder.weights[static_cast<std::size_t>(l)] += grad_pre.transpose() * cache.hidden[static_cast<std::size_t>(l)];
    grads.encoder.biases[static_cast<std::size_t>(l)] += grad_pre.colwise().sum().transpose();
    if (l > 0) grad_hidden[static_cast<std::size_t>(l)] += grad_pre * enc.weights[static_cast<std::size_t>(l)];
  }
}

Eigen::Index parameter_count(const SpeakerModel& m) {
  Eigen::Index n = 0;
  visit_params(m, [&](int, const double*, Eigen::Index size) { n += size; });
  return n;
}

Vector flatten(const SpeakerModel& m) {
  Vector flat(parameter_count(m));
  Eigen::Index at = 0;
  visit_params(m, [&](int, const double* p, Eigen::Index n) {
    std::copy(p, p + n, flat.data() + at);
    at += n;
  });
  return flat;
}

void unflatten(SpeakerModel& m, const Vector& flat) {
  if (flat.size() != parameter_count(m)) fail(ErrorKind::ShapeMismatch, "flat parameter vector has the wrong length");
  Eigen::Index at = 0;
  visit_params(m, [&](int, double* p, Eigen::Index n) {
    std::copy(flat.data() + at, flat.data() + at + n, p);
    at += n;
  });
  ++m.version;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto shape = shape_of(ckpt.model);
  std::ostringstream out(std::ios::binary);
  io::write_magic(out, "CKP1");
  io::write_u32(out, static_cast<std::uint32_t>(shape.num_layers));
  io::write_u32(out, static_cast<std::uint32_t>(shape.input_dim));
  io::write_u32(out, static_cast<std::uint32_t>(shape.hidden_dim));
  io::write_u32(out, static_cast<std::uint32_t>(shape.embed_dim));
  io::write_u32(out, static_cast<std::uint32_t>(ckpt.class_weights.rows()));
  visit_params(ckpt.model, [&](int, const double* p, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) io::write_f32(out, p[i]);
  });
  if (ckpt.class_weights.rows() > 0 && ckpt.class_weights.cols() != shape.embed_dim)
    fail(ErrorKind::ShapeMismatch, "class weights width differs from embedding size");
  for (Eigen::Index i = 0; i < ckpt.class_weights.size(); ++i) io::write_f32(out, ckpt.class_weights.data()[i]);
  io::write_file_atomic(path, out.str());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path), std::ios::binary);
  io::expect_magic(in, "CKP1");
  ModelShape shape;
  shape.num_layers = static_cast<int>(io::read_u32(in));
  shape.input_dim = static_cast<int>(io::read_u32(in));
  shape.hidden_dim = static_cast<int>(io::read_u32(in));
  shape.embed_dim = static_cast<int>(io::read_u32(in));
  const auto classes = static_cast<Eigen::Index>(io::read_u32(in));
  Checkpoint ckpt{init_model(shape, 0), Matrix(classes, shape.embed_dim)};
  visit_params(ckpt.model, [&](int, double* p, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) p[i] = io::read_f32(in);
  });
  for (Eigen::Index i = 0; i < ckpt.class_weights.size(); ++i) ckpt.class_weights.data()[i] = io::read_f32(in);
  if (in.peek() != std::char_traits<char>::eof()) fail(ErrorKind::ShapeMismatch, "trailing bytes in checkpoint");
  return ckpt;
}

void quantize_to_f32(Checkpoint& ckpt) {
  visit_params(ckpt.model, [](int, double* p, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) p[i] = static_cast<double>(static_cast<float>(p[i]));
  });
  ckpt.class_weights = ckpt.class_weights.cast<float>().cast<double>();
  ++ckpt.model.version;
}

}  // namespace forge
