#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace forge {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using VectorRef = Eigen::Ref<const Vector>;

// Non-empty, whitespace-free utterance identifier.
class UtteranceId {
 public:
  explicit UtteranceId(std::string value);

  const std::string& str() const noexcept { return value_; }

  friend bool operator==(const UtteranceId&, const UtteranceId&) = default;
  friend auto operator<=>(const UtteranceId&, const UtteranceId&) = default;

 private:
  std::string value_;
};

std::vector<UtteranceId> make_ids(const std::vector<std::string>& raw);

// N x d matrix of utterance embeddings with one unique ID per row.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix(std::vector<UtteranceId> ids, Matrix data);

  std::size_t size() const noexcept { return ids_.size(); }
  Eigen::Index dim() const noexcept { return data_.cols(); }
  const std::vector<UtteranceId>& ids() const noexcept { return ids_; }
  const Matrix& data() const noexcept { return data_; }
  Vector row(std::size_t i) const { return data_.row(static_cast<Eigen::Index>(i)).transpose(); }

  std::optional<std::size_t> index_of(const UtteranceId& id) const;

  friend bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
    return a.ids_ == b.ids_ && a.data_.rows() == b.data_.rows() && a.data_.cols() == b.data_.cols() &&
           a.data_ == b.data_;
  }

 private:
  std::vector<UtteranceId> ids_;
  Matrix data_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Utterance -> compact class assignment produced by one pipeline iteration.
// Labels are always 0..num_classes-1 with every class populated.
class PseudoLabelMap {
 public:
  // Validates compactness; throws LabelOutOfRange / BadConfig otherwise.
  PseudoLabelMap(std::vector<UtteranceId> ids, std::vector<int> labels, int iteration);

  // Renumbers arbitrary non-negative labels to 0..C-1 in ascending order of the
  // original label value.
  static PseudoLabelMap compact(std::vector<UtteranceId> ids, const std::vector<int>& raw_labels,
                                int iteration);

  std::size_t size() const noexcept { return ids_.size(); }
  int num_classes() const noexcept { return num_classes_; }
  int iteration() const noexcept { return iteration_; }
  const std::vector<UtteranceId>& ids() const noexcept { return ids_; }
  const std::vector<int>& labels() const noexcept { return labels_; }

  std::optional<int> label_of(const UtteranceId& id) const;

  // Labels reordered to follow `order`; MissingUtterance if any ID is absent.
  std::vector<int> labels_for(const std::vector<UtteranceId>& order) const;

  PseudoLabelMap with_iteration(int iteration) const;

  friend bool operator==(const PseudoLabelMap& a, const PseudoLabelMap& b) {
    return a.ids_ == b.ids_ && a.labels_ == b.labels_ && a.iteration_ == b.iteration_;
  }

 private:
  std::vector<UtteranceId> ids_;
  std::vector<int> labels_;
  int num_classes_ = 0;
  int iteration_ = 0;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Trial {
  bool is_target;
  UtteranceId enroll;
  UtteranceId test;
};

class TrialList {
 public:
  TrialList() = default;
  explicit TrialList(std::vector<Trial> rows);

  const std::vector<Trial>& rows() const noexcept { return rows_; }
  std::size_t size() const noexcept { return rows_.size(); }

 private:
  std::vector<Trial> rows_;
};

// Per-utterance frame sequences (T_i x f), the input of the encoder.
struct FeatureSet {
  std::vector<UtteranceId> ids;
  std::vector<Matrix> frames;

  std::size_t size() const noexcept { return ids.size(); }
  Eigen::Index dim() const { return frames.empty() ? 0 : frames.front().cols(); }
  void validate() const;
};

Vector l2_normalize(VectorRef v);
double cosine_similarity(VectorRef u, VectorRef v);

// Row-wise l2 normalization; ZeroNorm on any zero row.
Matrix l2_normalize_rows(const Matrix& m);

}  // namespace forge
