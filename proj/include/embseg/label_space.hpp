#pragma once

// Labels as (name, description, embedding) records and the cosine geometry
// over them: similarity structure, nearest-label retrieval, and extension
// with labels that were never seen in training.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "embseg/errors.hpp"
#include "embseg/rng.hpp"
#include "embseg/tensor.hpp"

namespace embseg {

// Small dense row-major matrix for results that never enter a graph.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

struct LabelRecord {
  std::size_t id = 0;
  std::string name;
  std::string description;
  std::vector<double> embedding;
};

inline double l2_norm(std::span<const double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  return std::sqrt(ss);
}

namespace detail {

inline void validate_embedding(std::span<const double> v, const std::string& who) {
  for (double x : v) {
    if (!std::isfinite(x)) throw InvalidEmbedding(who + ": non-finite embedding entry");
  }
  if (v.empty() || !(l2_norm(v) > 0.0)) throw InvalidEmbedding(who + ": zero-norm embedding");
}

}  // namespace detail

// Immutable once built. Records keep their embeddings as given; the unit-norm
// rows used for all similarity computations live in a derived matrix.
class LabelSpace {
 public:
  LabelSpace() = default;

  // Ids are assigned from record order.
  explicit LabelSpace(std::vector<LabelRecord> records) : records_(std::move(records)) {
    if (records_.empty()) throw InvalidEmbedding("label space: no records");
    dim_ = records_.front().embedding.size();
    unit_rows_.reserve(records_.size() * dim_);
    for (std::size_t i = 0; i < records_.size(); ++i) {
      auto& r = records_[i];
      r.id = i;
      if (r.embedding.size() != dim_) {
        throw DimensionMismatch("label '" + r.name + "' has dimension " +
                                std::to_string(r.embedding.size()) + ", expected " +
                                std::to_string(dim_));
      }
      detail::validate_embedding(r.embedding, "label '" + r.name + "'");
      const double n = l2_norm(r.embedding);
      for (double x : r.embedding) unit_rows_.push_back(x / n);
    }
  }

  std::size_t size() const noexcept { return records_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  const std::vector<LabelRecord>& records() const noexcept { return records_; }
  const LabelRecord& record(std::size_t id) const { return records_.at(id); }

  // Row-normalized embedding matrix E, N x C.
  std::span<const double> unit_rows() const noexcept { return unit_rows_; }
  std::span<const double> unit_row(std::size_t id) const {
    return std::span<const double>(unit_rows_).subspan(id * dim_, dim_);
  }

  // E^T as a constant C x N tensor, ready for logits = V_hat * E^T.
  Tensor unit_rows_transposed() const {
    std::vector<double> t(dim_ * size());
    for (std::size_t j = 0; j < size(); ++j)
      for (std::size_t c = 0; c < dim_; ++c) t[c * size() + j] = unit_rows_[j * dim_ + c];
    return Tensor({dim_, size()}, std::move(t));
  }

 private:
  std::vector<LabelRecord> records_;
  std::size_t dim_ = 0;
  std::vector<double> unit_rows_;
};

inline LabelSpace parse_label_space(std::istream& in) {
  std::vector<LabelRecord> records;
  std::string line;
  std::size_t lineno = 0;
  std::size_t dim = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    LabelRecord rec;
    try {
      const auto j = nlohmann::json::parse(line);
      rec.name = j.at("name").get<std::string>();
      rec.description = j.at("description").get<std::string>();
      rec.embedding = j.at("embedding").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), lineno);
    }
    if (records.empty()) dim = rec.embedding.size();
    if (rec.embedding.size() != dim) {
      throw DimensionMismatch("line " + std::to_string(lineno) + ": embedding has dimension " +
                              std::to_string(rec.embedding.size()) + ", expected " +
                              std::to_string(dim));
    }
    detail::validate_embedding(rec.embedding, "line " + std::to_string(lineno));
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw ParseError("embedding file holds no labels");
  return LabelSpace(std::move(records));
}

inline LabelSpace load_label_space(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  return parse_label_space(in);
}

inline void write_label_space(std::ostream& os, const LabelSpace& space) {
  for (const auto& r : space.records()) {
    nlohmann::json j;
    j["name"] = r.name;
    j["description"] = r.description;
    j["embedding"] = r.embedding;
    os << j.dump() << '\n';
  }
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionMismatch("cosine_similarity: lengths " + std::to_string(a.size()) +
                            " and " + std::to_string(b.size()));
  }
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw InvalidEmbedding("cosine_similarity: zero-norm input");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

inline Matrix similarity_matrix(const LabelSpace& space) {
  const std::size_t n = space.size();
  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      s(i, j) = cosine_similarity(space.record(i).embedding, space.record(j).embedding);
      s(j, i) = s(i, j);
    }
  }
  return s;
}

struct BlockSummary {
  double mean_within = 0.0;  // off-diagonal pairs sharing a block
  double mean_cross = 0.0;
};

inline BlockSummary block_summary(const Matrix& sim, std::span<const int> blocks) {
  if (blocks.size() != sim.rows) {
    throw DimensionMismatch("block_summary: " + std::to_string(blocks.size()) +
                            " block ids for " + std::to_string(sim.rows) + " labels");
  }
  double within = 0.0, cross = 0.0;
  std::size_t nw = 0, nc = 0;
  for (std::size_t i = 0; i < sim.rows; ++i) {
    for (std::size_t j = 0; j < sim.cols; ++j) {
      if (i == j) continue;
      if (blocks[i] == blocks[j]) {
        within += sim(i, j);
        ++nw;
      } else {
        cross += sim(i, j);
        ++nc;
      }
    }
  }
  return {nw ? within / static_cast<double>(nw) : 0.0, nc ? cross / static_cast<double>(nc) : 0.0};
}

struct Extended {
  LabelSpace space;
  std::optional<std::string> warning;
};

// Appends `added` as id N. Names are not keys, so a duplicate name succeeds
// with a warning.
inline Extended extend(const LabelSpace& space, LabelRecord added) {
  if (added.embedding.size() != space.dim()) {
    throw DimensionMismatch("extend: label '" + added.name + "' has dimension " +
                            std::to_string(added.embedding.size()) + ", space has " +
                            std::to_string(space.dim()));
  }
  Extended out;
  for (const auto& r : space.records()) {
    if (r.name == added.name) {
      out.warning = "duplicate label name '" + added.name + "'";
      break;
    }
  }
  auto records = space.records();
  records.push_back(std::move(added));
  out.space = LabelSpace(std::move(records));
  return out;
}

struct Retrieval {
  std::size_t id = 0;
  double score = 0.0;
};

// Nearest label by cosine similarity; ties go to the lowest id.
inline Retrieval retrieve(const LabelSpace& space, std::span<const double> v) {
  if (v.size() != space.dim()) {
    throw DimensionMismatch("retrieve: query has dimension " + std::to_string(v.size()) +
                            ", space has " + std::to_string(space.dim()));
  }
  const double nv = l2_norm(v);
  if (!(nv > 0.0) || !std::isfinite(nv)) throw InvalidEmbedding("retrieve: zero-norm query");
  Retrieval best{0, -2.0};
  const auto e = space.unit_rows();
  const std::size_t c = space.dim();
  for (std::size_t j = 0; j < space.size(); ++j) {
    double dot = 0.0;
    for (std::size_t k = 0; k < c; ++k) dot += e[j * c + k] * v[k];
    const double score = dot / nv;
    if (score > best.score) best = {j, score};
  }
  best.score = std::clamp(best.score, -1.0, 1.0);
  return best;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) {
    if (ch == '"') q += '"';
    q += ch;
  }
  return q + '"';
}

inline std::string fmt_g9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace detail

// Header of label names, then N rows of N values at 9 significant digits.
inline void write_similarity_csv(std::ostream& os, const LabelSpace& space, const Matrix& sim) {
  for (std::size_t i = 0; i < space.size(); ++i) {
    os << (i ? "," : "") << detail::csv_field(space.record(i).name);
  }
  os << '\n';
  for (std::size_t i = 0; i < sim.rows; ++i) {
    for (std::size_t j = 0; j < sim.cols; ++j) os << (j ? "," : "") << detail::fmt_g9(sim(i, j));
    os << '\n';
  }
}

// Deterministic stand-in vector for a label whose text encoder output is
// not available. Seeded by the label name.
inline std::vector<double> placeholder_embedding(const std::string& name, std::size_t dim) {
  Rng rng(derive_seed(0x5eed, name));
  std::vector<double> v(dim);
  for (auto& x : v) x = gaussian(rng);
  return v;
}

}  // namespace embseg
