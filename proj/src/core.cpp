#include "forge/core.hpp"

#include "forge/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace forge {

namespace {

constexpr double kZeroNorm = 1e-12;

bool has_whitespace(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f' || c == '\0';
  });
}

}  // namespace

UtteranceId::UtteranceId(std::string value) : value_(std::move(value)) {
  if (value_.empty()) fail(ErrorKind::BadId, "utterance id is empty");
  if (has_whitespace(value_)) fail(ErrorKind::BadId, "utterance id contains whitespace: '" + value_ + "'");
}

std::vector<UtteranceId> make_ids(const std::vector<std::string>& raw) {
  std::vector<UtteranceId> ids;
  ids.reserve(raw.size());
  for (const auto& s : raw) ids.emplace_back(s);
  return ids;
}

EmbeddingMatrix::EmbeddingMatrix(std::vector<UtteranceId> ids, Matrix data)
    : ids_(std::move(ids)), data_(std::move(data)) {
  if (static_cast<Eigen::Index>(ids_.size()) != data_.rows())
    fail(ErrorKind::DimMismatch, "id count does not match row count");
  if (data_.cols() < 1) fail(ErrorKind::DimMismatch, "embedding dimension must be at least 1");
  if (!data_.allFinite()) fail(ErrorKind::DegenerateData, "embedding matrix contains non-finite values");
  index_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!index_.emplace(ids_[i].str(), i).second)
      fail(ErrorKind::DuplicateId, "duplicate utterance id '" + ids_[i].str() + "'");
  }
}

std::optional<std::size_t> EmbeddingMatrix::index_of(const UtteranceId& id) const {
  auto it = index_.find(id.str());
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

PseudoLabelMap::PseudoLabelMap(std::vector<UtteranceId> ids, std::vector<int> labels, int iteration)
    : ids_(std::move(ids)), labels_(std::move(labels)), iteration_(iteration) {
  if (ids_.size() != labels_.size()) fail(ErrorKind::LengthMismatch, "ids and labels differ in length");
  if (ids_.empty()) fail(ErrorKind::BadConfig, "label map is empty");
  if (iteration_ < 0) fail(ErrorKind::BadConfig, "iteration must be non-negative");
  int max_label = -1;
  for (int l : labels_) {
    if (l < 0) fail(ErrorKind::LabelOutOfRange, "negative label");
    max_label = std::max(max_label, l);
  }
  num_classes_ = max_label + 1;
  std::vector<char> used(static_cast<std::size_t>(num_classes_), 0);
  for (int l : labels_) used[static_cast<std::size_t>(l)] = 1;
  if (std::find(used.begin(), used.end(), 0) != used.end())
    fail(ErrorKind::LabelOutOfRange, "labels are not compact (an intermediate class is unused)");
  index_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!index_.emplace(ids_[i].str(), i).second)
      fail(ErrorKind::DuplicateId, "duplicate utterance id '" + ids_[i].str() + "'");
  }
}

PseudoLabelMap PseudoLabelMap::compact(std::vector<UtteranceId> ids, const std::vector<int>& raw_labels,
                                       int iteration) {
  std::map<int, int> renumber;
  for (int l : raw_labels) {
    if (l < 0) fail(ErrorKind::LabelOutOfRange, "negative label");
    renumber.emplace(l, 0);
  }
  int next = 0;
  for (auto& [raw, compacted] : renumber) compacted = next++;
  std::vector<int> labels;
  labels.reserve(raw_labels.size());
  for (int l : raw_labels) labels.push_back(renumber.at(l));
  return PseudoLabelMap(std::move(ids), std::move(labels), iteration);
}

std::optional<int> PseudoLabelMap::label_of(const UtteranceId& id) const {
  auto it = index_.find(id.str());
  if (it == index_.end()) return std::nullopt;
  return labels_[it->second];
}

std::vector<int> PseudoLabelMap::labels_for(const std::vector<UtteranceId>& order) const {
  std::vector<int> out;
  out.reserve(order.size());
  for (const auto& id : order) {
    auto l = label_of(id);
    if (!l) fail(ErrorKind::MissingUtterance, "no label for utterance '" + id.str() + "'");
    out.push_back(*l);
  }
  return out;
}

PseudoLabelMap PseudoLabelMap::with_iteration(int iteration) const {
  return PseudoLabelMap(ids_, labels_, iteration);
}

TrialList::TrialList(std::vector<Trial> rows) : rows_(std::move(rows)) {
  for (const auto& t : rows_) {
    if (t.enroll == t.test) fail(ErrorKind::BadConfig, "trial enrolls and tests the same utterance '" + t.enroll.str() + "'");
  }
}

void FeatureSet::validate() const {
  if (ids.size() != frames.size()) fail(ErrorKind::LengthMismatch, "feature ids and frame sequences differ in count");
  if (frames.empty()) return;
  const auto f = frames.front().cols();
  if (f < 1) fail(ErrorKind::DimMismatch, "feature dimension must be at least 1");
  for (const auto& m : frames) {
    if (m.cols() != f) fail(ErrorKind::DimMismatch, "inconsistent feature dimension");
    if (m.rows() < 1) fail(ErrorKind::EmptyUtterance, "utterance has no frames");
    if (!m.allFinite()) fail(ErrorKind::DegenerateData, "features contain non-finite values");
  }
}

Vector l2_normalize(VectorRef v) {
  if (v.size() < 1) fail(ErrorKind::DimMismatch, "cannot normalize an empty vector");
  const double n = v.norm();
  if (!(n >= kZeroNorm)) fail(ErrorKind::ZeroNorm, "vector norm below 1e-12");
  return v / n;
}

double cosine_similarity(VectorRef u, VectorRef v) {
  if (u.size() != v.size()) fail(ErrorKind::DimMismatch, "cosine of vectors with different dimensions");
  const double nu = u.norm();
  const double nv = v.norm();
  if (!(nu >= kZeroNorm) || !(nv >= kZeroNorm)) fail(ErrorKind::ZeroNorm, "cosine of a zero vector");
  return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

Matrix l2_normalize_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n >= kZeroNorm)) fail(ErrorKind::ZeroNorm, "row norm below 1e-12");
    out.row(i) = m.row(i) / n;
  }
  return out;
}

}  // namespace forge
