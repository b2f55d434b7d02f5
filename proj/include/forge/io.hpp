#pragma once

#include "forge/core.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace forge::io {

// Binary embedding file:
//   "EMB1" | u32 LE count N | u32 LE dim d | N newline-terminated IDs | N*d f32 LE
// Values are rounded to float32 on save.
void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);
EmbeddingMatrix load_embeddings(const std::filesystem::path& path);

// Binary feature file:
//   "FEA1" | u32 N | u32 f | N IDs | N u32 frame counts | sum(T_i)*f f32 LE
void save_features(const FeatureSet& features, const std::filesystem::path& path);
FeatureSet load_features(const std::filesystem::path& path);

// `utterance_id<TAB>label` per line.
void save_labels(const PseudoLabelMap& labels, const std::filesystem::path& path);
PseudoLabelMap load_labels(const std::filesystem::path& path, int iteration = 0);

// `1|0 enroll test` per line.
void save_trials(const TrialList& trials, const std::filesystem::path& path);
TrialList load_trials(const std::filesystem::path& path);

struct ScoredRow {
  UtteranceId enroll;
  UtteranceId test;
  double score;
  bool is_target;
};

// `enroll<TAB>test<TAB>score<TAB>1|0` per line.
void save_scores(const std::vector<ScoredRow>& rows, const std::filesystem::path& path);
std::vector<ScoredRow> load_scores(const std::filesystem::path& path);

struct LossRow {
  UtteranceId id;
  double loss;
};

// `utterance_id<TAB>loss` per line.
void save_losses(const std::vector<LossRow>& rows, const std::filesystem::path& path);
std::vector<LossRow> load_losses(const std::filesystem::path& path);

// Little-endian primitives shared with the checkpoint format.
void write_u32(std::ostream& out, std::uint32_t v);
void write_f32(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in);
double read_f32(std::istream& in);
void write_magic(std::ostream& out, const char (&magic)[5]);
void expect_magic(std::istream& in, const char (&magic)[5]);

// Writes `content` to a temporary sibling then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

std::string read_file(const std::filesystem::path& path);

}  // namespace forge::io
