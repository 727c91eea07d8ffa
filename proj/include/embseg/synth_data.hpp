#pragma once

// Deterministic synthetic stand-in for a merged multi-dataset corpus.
//
// Label embeddings come in correlated blocks. Each pixel's feature is a fixed
// linear image of its label's unit embedding plus gaussian noise, so the
// per-pixel semantics follow the label geometry exactly. Scenes are tilings
// of the grid by axis-aligned rectangles; annotations come in three tiers:
// exact masks, boundary-corrupted masks, and per-region boxes with a noisy
// teacher embedding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "embseg/errors.hpp"
#include "embseg/hetero_loss.hpp"
#include "embseg/label_map.hpp"
#include "embseg/label_space.hpp"
#include "embseg/rng.hpp"
#include "embseg/seg_head.hpp"
#include "embseg/tensor.hpp"

namespace embseg {

enum class Tier { kHD, kLD, kWD };

inline const char* to_string(Tier t) {
  switch (t) {
    case Tier::kHD: return "HD";
    case Tier::kLD: return "LD";
    case Tier::kWD: return "WD";
  }
  return "?";
}

inline Tier parse_tier(const std::string& s) {
  if (s == "HD") return Tier::kHD;
  if (s == "LD") return Tier::kLD;
  if (s == "WD") return Tier::kWD;
  throw DomainError("unknown tier '" + s + "' (expected HD, LD or WD)");
}

// Label k belongs to block k / per_block. Each embedding mixes an orthonormal
// block center with an independent gaussian direction:
//   sqrt(within_corr) * center + sqrt(1 - within_corr) * g,  g ~ N(0, I/C)
// then is normalized. within_corr = 0 gives unstructured embeddings.
inline LabelSpace make_embeddings(std::size_t n_blocks, std::size_t per_block, std::size_t dim,
                                  double within_corr, std::uint64_t seed) {
  if (n_blocks < 1 || per_block < 1) throw DomainError("make_embeddings: empty layout");
  if (dim < n_blocks) {
    throw DomainError("make_embeddings: dimension " + std::to_string(dim) + " < " +
                      std::to_string(n_blocks) + " blocks");
  }
  if (!(within_corr >= 0.0 && within_corr < 1.0)) {
    throw DomainError("make_embeddings: within_corr must be in [0, 1)");
  }
  Rng rng(seed);
  // Orthonormal block centers by Gram-Schmidt on gaussian draws.
  std::vector<std::vector<double>> centers;
  while (centers.size() < n_blocks) {
    std::vector<double> v(dim);
    for (auto& x : v) x = gaussian(rng);
    for (const auto& c : centers) {
      double d = 0.0;
      for (std::size_t k = 0; k < dim; ++k) d += v[k] * c[k];
      for (std::size_t k = 0; k < dim; ++k) v[k] -= d * c[k];
    }
    const double n = l2_norm(v);
    if (n < 1e-8) continue;
    for (auto& x : v) x /= n;
    centers.push_back(std::move(v));
  }
  const double a = std::sqrt(within_corr);
  const double b = std::sqrt(1.0 - within_corr);
  const double g_sigma = 1.0 / std::sqrt(static_cast<double>(dim));
  std::vector<LabelRecord> records;
  for (std::size_t blk = 0; blk < n_blocks; ++blk) {
    for (std::size_t i = 0; i < per_block; ++i) {
      LabelRecord r;
      r.name = "b" + std::to_string(blk) + "_l" + std::to_string(i);
      r.description = "An image of " + r.name + ". Synthetic label " + std::to_string(i) +
                      " of group " + std::to_string(blk) + ".";
      r.embedding.resize(dim);
      for (std::size_t k = 0; k < dim; ++k) {
        r.embedding[k] = a * centers[blk][k] + b * gaussian(rng, g_sigma);
      }
      const double n = l2_norm(r.embedding);
      for (auto& x : r.embedding) x /= n;
      records.push_back(std::move(r));
    }
  }
  return LabelSpace(std::move(records));
}

inline double smallest_singular_value(const Matrix& m) {
  Eigen::MatrixXd e(m.rows, m.cols);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m(i, j);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(e);
  const auto& s = svd.singularValues();
  return s.size() ? s(s.size() - 1) : 0.0;
}

struct WorldSpec {
  std::size_t n_blocks = 2;
  std::size_t per_block = 3;
  std::size_t embed_dim = 16;
  std::size_t feature_dim = 8;
  double within_corr = 0.8;
  double noise_sigma = 0.0;
};

struct SynthWorld {
  LabelSpace space;
  Matrix mixing;  // F x C: feature prototype = mixing * unit embedding
  double noise_sigma = 0.0;
  std::vector<int> blocks;  // label id -> block id

  std::size_t feature_dim() const { return mixing.rows; }

  std::vector<double> prototype(std::size_t label) const {
    const auto e = space.unit_row(label);
    std::vector<double> f(mixing.rows, 0.0);
    for (std::size_t r = 0; r < mixing.rows; ++r)
      for (std::size_t c = 0; c < mixing.cols; ++c) f[r] += mixing(r, c) * e[c];
    return f;
  }
};

// The mixing matrix is resampled until it has full rank (smallest singular
// value > 1e-6); with F < C that is full row rank.
inline SynthWorld make_world(const WorldSpec& spec, std::uint64_t seed) {
  if (spec.feature_dim < 1) throw DomainError("make_world: feature_dim must be >= 1");
  if (spec.noise_sigma < 0.0) throw DomainError("make_world: noise_sigma must be >= 0");
  SynthWorld w;
  w.space = make_embeddings(spec.n_blocks, spec.per_block, spec.embed_dim, spec.within_corr,
                            derive_seed(seed, "embeddings"));
  w.noise_sigma = spec.noise_sigma;
  for (std::size_t i = 0; i < w.space.size(); ++i) {
    w.blocks.push_back(static_cast<int>(i / spec.per_block));
  }
  Rng rng(derive_seed(seed, "mixing"));
  do {
    w.mixing = Matrix(spec.feature_dim, spec.embed_dim);
    for (auto& x : w.mixing.values) x = gaussian(rng);
  } while (smallest_singular_value(w.mixing) <= 1e-6);
  return w;
}

struct Region {
  Box box;
  int label = 0;
};

struct Scene {
  Tensor features;  // H x W x F
  LabelMap truth;
  std::vector<Region> regions;
};

// Recursive split: the largest region (lowest index on ties) is cut along a
// random axis at a random interior position until n_regions exist.
inline std::vector<Box> split_grid(std::size_t height, std::size_t width, std::size_t n_regions,
                                   Rng& rng) {
  if (n_regions < 1) throw DomainError("gen_scene: n_regions must be >= 1");
  if (n_regions > height * width) {
    throw DomainError("gen_scene: " + std::to_string(n_regions) + " regions exceed " +
                      std::to_string(height * width) + " pixels");
  }
  std::vector<Box> boxes{{0, 0, height, width}};
  while (boxes.size() < n_regions) {
    std::size_t pick = 0;
    for (std::size_t i = 1; i < boxes.size(); ++i) {
      const auto area = boxes[i].height() * boxes[i].width();
      if (area > boxes[pick].height() * boxes[pick].width()) pick = i;
    }
    const Box b = boxes[pick];
    bool split_rows;
    if (b.height() > 1 && b.width() > 1) {
      split_rows = uniform(rng, 0.0, static_cast<double>(b.height() + b.width())) <
                   static_cast<double>(b.height());
    } else {
      split_rows = b.height() > 1;
    }
    const std::size_t len = split_rows ? b.height() : b.width();
    // Cut point in the middle half of the extent, at least one pixel each side.
    const std::size_t lo = std::max<std::size_t>(1, len / 4);
    const std::size_t hi = std::max(lo, std::min(len - 1, len - len / 4));
    const std::size_t cut = lo + uniform_index(rng, hi - lo + 1);
    Box first = b, second = b;
    if (split_rows) {
      first.row1 = b.row0 + cut;
      second.row0 = b.row0 + cut;
    } else {
      first.col1 = b.col0 + cut;
      second.col0 = b.col0 + cut;
    }
    boxes[pick] = first;
    boxes.push_back(second);
  }
  return boxes;
}

inline Scene gen_scene(const SynthWorld& world, std::size_t height, std::size_t width,
                       std::size_t n_regions, const std::vector<std::size_t>& active,
                       std::uint64_t seed) {
  if (active.empty()) throw DomainError("gen_scene: no active labels");
  for (auto id : active) {
    if (id >= world.space.size()) throw DomainError("gen_scene: active label out of range");
  }
  Rng rng(seed);
  Scene s;
  s.truth = LabelMap(height, width);
  for (const auto& b : split_grid(height, width, n_regions, rng)) {
    s.regions.push_back({b, static_cast<int>(active[uniform_index(rng, active.size())])});
  }
  const std::size_t f = world.feature_dim();
  std::vector<double> feats(height * width * f);
  for (const auto& reg : s.regions) {
    const auto proto = world.prototype(static_cast<std::size_t>(reg.label));
    for (std::size_t r = reg.box.row0; r < reg.box.row1; ++r) {
      for (std::size_t c = reg.box.col0; c < reg.box.col1; ++c) {
        s.truth.at(r, c) = reg.label;
        double* px = &feats[(r * width + c) * f];
        for (std::size_t k = 0; k < f; ++k) {
          px[k] = proto[k] + (world.noise_sigma > 0.0 ? gaussian(rng, world.noise_sigma) : 0.0);
        }
      }
    }
  }
  s.features = Tensor({height, width, f}, std::move(feats));
  return s;
}

struct AnnotatedSample {
  Tensor features;
  LabelMap truth;
  std::vector<Region> regions;
  Tier tier = Tier::kHD;
  PixelSupervision pixels;  // HD: truth; LD: corrupted copy
  BoxSupervision boxes;     // WD
  std::size_t dataset_id = 0;
};

struct AnnotateOptions {
  double corrupt_frac = 0.0;   // LD
  double teacher_sigma = 0.0;  // WD
};

// Flips round(corrupt_frac * H * W) pixels. Pixels on a region boundary go
// first (in random order) and take the label of a differing 4-neighbour, as
// if that neighbour had spilled one pixel over; any remaining flips go to
// interior pixels with a random other active label.
inline LabelMap corrupt_labels(const LabelMap& truth, const std::vector<std::size_t>& active,
                               double corrupt_frac, Rng& rng) {
  if (!(corrupt_frac >= 0.0 && corrupt_frac < 1.0)) {
    throw DomainError("annotate: corrupt_frac must be in [0, 1)");
  }
  LabelMap out = truth;
  const std::size_t h = truth.height, w = truth.width;
  const auto target = static_cast<std::size_t>(
      std::llround(corrupt_frac * static_cast<double>(h * w)));
  if (target == 0) return out;

  auto neighbours = [&](std::size_t r, std::size_t c) {
    std::vector<int> labels;
    const int here = truth.at(r, c);
    if (r > 0 && truth.at(r - 1, c) != here) labels.push_back(truth.at(r - 1, c));
    if (r + 1 < h && truth.at(r + 1, c) != here) labels.push_back(truth.at(r + 1, c));
    if (c > 0 && truth.at(r, c - 1) != here) labels.push_back(truth.at(r, c - 1));
    if (c + 1 < w && truth.at(r, c + 1) != here) labels.push_back(truth.at(r, c + 1));
    return labels;
  };
  std::vector<std::size_t> boundary, interior;
  for (std::size_t i = 0; i < h * w; ++i) {
    (neighbours(i / w, i % w).empty() ? interior : boundary).push_back(i);
  }
  std::shuffle(boundary.begin(), boundary.end(), rng);
  std::shuffle(interior.begin(), interior.end(), rng);

  std::size_t flipped = 0;
  for (std::size_t i : boundary) {
    if (flipped == target) break;
    const auto labels = neighbours(i / w, i % w);
    out.ids[i] = labels[uniform_index(rng, labels.size())];
    ++flipped;
  }
  if (active.size() < 2) return out;
  for (std::size_t i : interior) {
    if (flipped == target) break;
    int next;
    do {
      next = static_cast<int>(active[uniform_index(rng, active.size())]);
    } while (next == truth.ids[i]);
    out.ids[i] = next;
    ++flipped;
  }
  return out;
}

inline AnnotatedSample annotate(const SynthWorld& world, const Scene& scene, Tier tier,
                                const std::vector<std::size_t>& active,
                                const AnnotateOptions& opts, std::uint64_t seed) {
  Rng rng(seed);
  AnnotatedSample s;
  s.features = scene.features;
  s.truth = scene.truth;
  s.regions = scene.regions;
  s.tier = tier;
  switch (tier) {
    case Tier::kHD:
      s.pixels.labels = scene.truth;
      break;
    case Tier::kLD:
      s.pixels.labels = corrupt_labels(scene.truth, active, opts.corrupt_frac, rng);
      break;
    case Tier::kWD:
      if (opts.teacher_sigma < 0.0) throw DomainError("annotate: teacher_sigma must be >= 0");
      for (const auto& reg : scene.regions) {
        const auto e = world.space.unit_row(static_cast<std::size_t>(reg.label));
        std::vector<double> t(e.begin(), e.end());
        if (opts.teacher_sigma > 0.0) {
          for (auto& x : t) x += gaussian(rng, opts.teacher_sigma);
          const double n = l2_norm(t);
          for (auto& x : t) x /= n;
        }
        s.boxes.boxes.push_back(reg.box);
        s.boxes.teachers.push_back(std::move(t));
      }
      break;
  }
  return s;
}

struct BatchItem {
  std::size_t dataset = 0;
  std::size_t index = 0;
  bool operator==(const BatchItem&) const = default;
};

// Every batch draws floor(batch_size / D) samples from each of the D pools and
// hands the remainder out round-robin. Each pool is walked without
// replacement and reshuffled when exhausted.
class BalancedBatcher {
 public:
  BalancedBatcher(std::vector<std::size_t> pool_sizes, std::size_t batch_size, std::uint64_t seed)
      : sizes_(std::move(pool_sizes)), batch_size_(batch_size), rng_(seed) {
    if (sizes_.empty()) throw DomainError("balanced_batches: no datasets");
    for (std::size_t d = 0; d < sizes_.size(); ++d) {
      if (sizes_[d] == 0) {
        throw DomainError("balanced_batches: dataset " + std::to_string(d) + " is empty");
      }
    }
    if (batch_size_ < sizes_.size()) {
      throw DomainError("balanced_batches: batch_size " + std::to_string(batch_size_) +
                        " smaller than " + std::to_string(sizes_.size()) + " datasets");
    }
    orders_.resize(sizes_.size());
    cursors_.assign(sizes_.size(), 0);
    for (std::size_t d = 0; d < sizes_.size(); ++d) reshuffle(d);
  }

  // Per-dataset sample counts of the next batch.
  std::vector<std::size_t> next_counts() const {
    const std::size_t d = sizes_.size();
    std::vector<std::size_t> counts(d, batch_size_ / d);
    const std::size_t rem = batch_size_ % d;
    for (std::size_t k = 0; k < rem; ++k) ++counts[(batch_ * rem + k) % d];
    return counts;
  }

  std::vector<BatchItem> next() {
    const auto counts = next_counts();
    std::vector<BatchItem> batch;
    for (std::size_t d = 0; d < counts.size(); ++d) {
      for (std::size_t k = 0; k < counts[d]; ++k) {
        if (cursors_[d] == orders_[d].size()) reshuffle(d);
        batch.push_back({d, orders_[d][cursors_[d]++]});
      }
    }
    ++batch_;
    return batch;
  }

 private:
  void reshuffle(std::size_t d) {
    orders_[d].resize(sizes_[d]);
    std::iota(orders_[d].begin(), orders_[d].end(), std::size_t{0});
    std::shuffle(orders_[d].begin(), orders_[d].end(), rng_);
    cursors_[d] = 0;
  }

  std::vector<std::size_t> sizes_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::vector<std::size_t>> orders_;
  std::vector<std::size_t> cursors_;
  std::size_t batch_ = 0;
};

}  // namespace embseg
