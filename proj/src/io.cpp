#include "forge/io.hpp"

#include "forge/error.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace forge::io {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  return out;
}

std::ifstream open_in(const fs::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for reading");
  return in;
}

void check_written(std::ostream& out, const fs::path& path) {
  out.flush();
  if (!out) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::istringstream ss(line);
  std::string f;
  while (ss >> f) fields.push_back(f);
  return fields;
}

double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v))
    fail(ErrorKind::BadConfig, "cannot parse " + what + " from '" + s + "'");
  return v;
}

int parse_int(const std::string& s, const std::string& what) {
  int v = 0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) fail(ErrorKind::BadConfig, "cannot parse " + what + " from '" + s + "'");
  return v;
}

bool parse_target_flag(const std::string& s) {
  if (s == "1" || s == "target") return true;
  if (s == "0" || s == "nontarget") return false;
  fail(ErrorKind::BadConfig, "target flag must be 1 or 0, got '" + s + "'");
}

template <typename Fn>
void for_each_line(const fs::path& path, Fn&& fn) {
  auto in = open_in(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    fn(line, lineno);
  }
}

std::string read_id_line(std::istream& in) {
  std::string id;
  if (!std::getline(in, id)) fail(ErrorKind::TruncatedData, "file ends inside the id block");
  return id;
}

std::uint64_t remaining_bytes(std::istringstream& in) {
  const auto pos = in.tellg();
  if (pos < 0) return 0;
  return in.str().size() - static_cast<std::uint64_t>(pos);
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

void write_f32(std::ostream& out, double v) { write_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

std::uint32_t read_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (in.gcount() != 4) fail(ErrorKind::TruncatedData, "unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

double read_f32(std::istream& in) { return static_cast<double>(std::bit_cast<float>(read_u32(in))); }

void write_magic(std::ostream& out, const char (&magic)[5]) { out.write(magic, 4); }

void expect_magic(std::istream& in, const char (&magic)[5]) {
  std::array<char, 4> got{};
  in.read(got.data(), 4);
  if (in.gcount() != 4 || std::string_view(got.data(), 4) != std::string_view(magic, 4))
    fail(ErrorKind::BadMagic, std::string("expected magic ") + magic);
}

void save_embeddings(const EmbeddingMatrix& m, const fs::path& path) {
  std::ostringstream out(std::ios::binary);
  write_magic(out, "EMB1");
  write_u32(out, static_cast<std::uint32_t>(m.size()));
  write_u32(out, static_cast<std::uint32_t>(m.dim()));
  for (const auto& id : m.ids()) out << id.str() << '\n';
  const auto& d = m.data();
  for (Eigen::Index i = 0; i < d.rows(); ++i)
    for (Eigen::Index j = 0; j < d.cols(); ++j) write_f32(out, d(i, j));
  write_file_atomic(path, out.str());
}

EmbeddingMatrix load_embeddings(const fs::path& path) {
  std::istringstream in(read_file(path), std::ios::binary);
  expect_magic(in, "EMB1");
  const auto n = read_u32(in);
  const auto dim = read_u32(in);
  if (dim == 0) fail(ErrorKind::DimMismatch, "embedding header declares dimension 0");
  // IDs are validated only once the payload size checks out, so a header that
  // over-counts rows surfaces as truncation rather than as a garbled ID.
  std::vector<std::string> raw_ids;
  raw_ids.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) raw_ids.push_back(read_id_line(in));
  const auto expected = static_cast<std::uint64_t>(n) * dim * 4;
  const auto remaining = remaining_bytes(in);
  if (remaining < expected) fail(ErrorKind::TruncatedData, "embedding payload shorter than header declares");
  if (remaining > expected) fail(ErrorKind::DimMismatch, "embedding payload longer than header declares");
  auto ids = make_ids(raw_ids);
  Matrix data(n, dim);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = 0; j < dim; ++j) data(i, j) = read_f32(in);
  return EmbeddingMatrix(std::move(ids), std::move(data));
}

void save_features(const FeatureSet& features, const fs::path& path) {
  features.validate();
  std::ostringstream out(std::ios::binary);
  write_magic(out, "FEA1");
  write_u32(out, static_cast<std::uint32_t>(features.size()));
  write_u32(out, static_cast<std::uint32_t>(features.dim()));
  for (const auto& id : features.ids) out << id.str() << '\n';
  for (const auto& m : features.frames) write_u32(out, static_cast<std::uint32_t>(m.rows()));
  for (const auto& m : features.frames)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) write_f32(out, m(i, j));
  write_file_atomic(path, out.str());
}

FeatureSet load_features(const fs::path& path) {
  std::istringstream in(read_file(path), std::ios::binary);
  expect_magic(in, "FEA1");
  const auto n = read_u32(in);
  const auto dim = read_u32(in);
  if (dim == 0 && n > 0) fail(ErrorKind::DimMismatch, "feature header declares dimension 0");
  std::vector<std::string> raw_ids;
  raw_ids.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) raw_ids.push_back(read_id_line(in));
  std::vector<std::uint32_t> counts(n);
  std::uint64_t total_frames = 0;
  for (auto& c : counts) {
    c = read_u32(in);
    total_frames += c;
  }
  const auto expected = total_frames * dim * 4;
  const auto remaining = remaining_bytes(in);
  if (remaining < expected) fail(ErrorKind::TruncatedData, "feature payload shorter than header declares");
  if (remaining > expected) fail(ErrorKind::DimMismatch, "feature payload longer than header declares");
  FeatureSet fs;
  fs.ids = make_ids(raw_ids);
  for (std::uint32_t i = 0; i < n; ++i) {
    Matrix m(counts[i], dim);
    for (std::uint32_t t = 0; t < counts[i]; ++t)
      for (std::uint32_t j = 0; j < dim; ++j) m(t, j) = read_f32(in);
    fs.frames.push_back(std::move(m));
  }
  fs.validate();
  return fs;
}

void save_labels(const PseudoLabelMap& labels, const fs::path& path) {
  std::ostringstream out;
  for (std::size_t i = 0; i < labels.size(); ++i) out << labels.ids()[i].str() << '\t' << labels.labels()[i] << '\n';
  write_file_atomic(path, out.str());
}

PseudoLabelMap load_labels(const fs::path& path, int iteration) {
  std::vector<UtteranceId> ids;
  std::vector<int> labels;
  for_each_line(path, [&](const std::string& line, std::size_t lineno) {
    auto f = split_fields(line);
    if (f.size() != 2) fail(ErrorKind::BadConfig, "label line " + std::to_string(lineno) + " must have 2 fields");
    ids.emplace_back(f[0]);
    labels.push_back(parse_int(f[1], "label"));
  });
  return PseudoLabelMap(std::move(ids), std::move(labels), iteration);
}

void save_trials(const TrialList& trials, const fs::path& path) {
  std::ostringstream out;
  for (const auto& t : trials.rows()) out << (t.is_target ? 1 : 0) << ' ' << t.enroll.str() << ' ' << t.test.str() << '\n';
  write_file_atomic(path, out.str());
}

TrialList load_trials(const fs::path& path) {
  std::vector<Trial> rows;
  for_each_line(path, [&](const std::string& line, std::size_t lineno) {
    auto f = split_fields(line);
    if (f.size() != 3) fail(ErrorKind::BadConfig, "trial line " + std::to_string(lineno) + " must have 3 fields");
    rows.push_back(Trial{parse_target_flag(f[0]), UtteranceId(f[1]), UtteranceId(f[2])});
  });
  return TrialList(std::move(rows));
}

void save_scores(const std::vector<ScoredRow>& rows, const fs::path& path) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& r : rows)
    out << r.enroll.str() << '\t' << r.test.str() << '\t' << r.score << '\t' << (r.is_target ? 1 : 0) << '\n';
  write_file_atomic(path, out.str());
}

std::vector<ScoredRow> load_scores(const fs::path& path) {
  std::vector<ScoredRow> rows;
  for_each_line(path, [&](const std::string& line, std::size_t lineno) {
    auto f = split_fields(line);
    if (f.size() != 4) fail(ErrorKind::BadConfig, "score line " + std::to_string(lineno) + " must have 4 fields");
    rows.push_back(ScoredRow{UtteranceId(f[0]), UtteranceId(f[1]), parse_double(f[2], "score"), parse_target_flag(f[3])});
  });
  return rows;
}

void save_losses(const std::vector<LossRow>& rows, const fs::path& path) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& r : rows) out << r.id.str() << '\t' << r.loss << '\n';
  write_file_atomic(path, out.str());
}

std::vector<LossRow> load_losses(const fs::path& path) {
  std::vector<LossRow> rows;
  for_each_line(path, [&](const std::string& line, std::size_t lineno) {
    auto f = split_fields(line);
    if (f.size() != 2) fail(ErrorKind::BadConfig, "loss line " + std::to_string(lineno) + " must have 2 fields");
    rows.push_back(LossRow{UtteranceId(f[0]), parse_double(f[1], "loss")});
  });
  return rows;
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    auto out = open_out(tmp, std::ios::out | std::ios::binary);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    check_written(out, tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

std::string read_file(const fs::path& path) {
  auto in = open_in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace forge::io
