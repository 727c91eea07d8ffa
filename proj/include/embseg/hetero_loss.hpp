#pragma once

// Supervision for the three annotation tiers and their sum.
//
//   clean masks   : mean cross-entropy of the cosine/temperature softmax
//   noisy masks   : same, with the highest-loss 30% of each image's pixels
//                   rejected (kept set frozen during backward)
//   boxes only    : L1 between the normalized pooled box embedding and a
//                   normalized teacher embedding

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "embseg/errors.hpp"
#include "embseg/label_map.hpp"
#include "embseg/label_space.hpp"
#include "embseg/seg_head.hpp"
#include "embseg/tensor.hpp"

namespace embseg {

inline constexpr double kDefaultKeepFraction = 0.7;

struct PixelSupervision {
  LabelMap labels;

  std::size_t valid_count() const {
    return static_cast<std::size_t>(
        std::count_if(labels.ids.begin(), labels.ids.end(), [](int id) { return id >= 0; }));
  }
};

struct BoxSupervision {
  std::vector<Box> boxes;
  std::vector<std::vector<double>> teachers;  // one per box

  std::size_t count() const { return boxes.size(); }
};

namespace detail {

struct ValidLogProbs {
  Tensor log_probs;                 // M x N
  std::vector<std::size_t> pixels;  // row-major index of each valid pixel
  std::vector<int> targets;         // label id of each valid pixel
};

inline void check_map_space(const EmbeddingMap& map, const LabelSpace& space, const char* op) {
  if (map.values.rank() != 3) {
    throw ShapeError(std::string(op) + ": embedding map must be H x W x C");
  }
  if (map.channels() != space.dim()) {
    throw ShapeError(std::string(op) + ": map has " + std::to_string(map.channels()) +
                     " channels, label space has dimension " + std::to_string(space.dim()));
  }
}

inline ValidLogProbs valid_log_probs(const EmbeddingMap& map, const PixelSupervision& sup,
                                     const LabelSpace& space, const Tensor& tau,
                                     const char* op) {
  check_map_space(map, space, op);
  const auto& lm = sup.labels;
  if (lm.height != map.height() || lm.width != map.width()) {
    throw ShapeError(std::string(op) + ": supervision is " + std::to_string(lm.height) + "x" +
                     std::to_string(lm.width) + ", map is " + std::to_string(map.height()) +
                     "x" + std::to_string(map.width()));
  }
  ValidLogProbs out;
  const int n = static_cast<int>(space.size());
  for (std::size_t i = 0; i < lm.ids.size(); ++i) {
    const int id = lm.ids[i];
    if (id == kIgnore) continue;
    if (id < 0 || id >= n) {
      throw DomainError(std::string(op) + ": label id " + std::to_string(id) +
                        " outside [0, " + std::to_string(n) + ")");
    }
    out.pixels.push_back(i);
    out.targets.push_back(id);
  }
  if (out.pixels.empty()) throw EmptySupervision(std::string(op) + ": no valid pixels");
  const std::size_t c = map.channels();
  Tensor flat = reshape(map.values, {map.height() * map.width(), c});
  Tensor unit = l2_normalize(gather_rows(flat, out.pixels));
  Tensor cosine = matmul(unit, space.unit_rows_transposed());
  out.log_probs = log_softmax_with_temperature(cosine, tau);
  return out;
}

inline std::vector<double> per_pixel_nll(const ValidLogProbs& v) {
  const std::size_t n = v.log_probs.dim(1);
  std::vector<double> out(v.targets.size());
  const auto lp = v.log_probs.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = -lp[i * n + static_cast<std::size_t>(v.targets[i])];
  }
  return out;
}

// -(1/M) * sum_i w_i * log p_i[target_i]
inline Tensor weighted_nll(const ValidLogProbs& v, std::span<const double> weights) {
  const std::size_t m = v.targets.size();
  const std::size_t n = v.log_probs.dim(1);
  std::vector<double> mask(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) mask[i * n + static_cast<std::size_t>(v.targets[i])] = weights[i];
  Tensor picked = sum(mul(v.log_probs, Tensor({m, n}, std::move(mask))));
  return scale(picked, -1.0 / static_cast<double>(m));
}

}  // namespace detail

// Per-pixel class probabilities softmax_j(cos(V_i, e_j) / tau), H x W x N.
inline Tensor pixel_probs(const EmbeddingMap& map, const LabelSpace& space, const Tensor& tau) {
  detail::check_map_space(map, space, "pixel_probs");
  const std::size_t h = map.height(), w = map.width(), c = map.channels();
  Tensor unit = l2_normalize(reshape(map.values, {h * w, c}));
  Tensor probs = softmax_with_temperature(matmul(unit, space.unit_rows_transposed()), tau);
  return reshape(probs, {h, w, space.size()});
}

inline Tensor loss_hd(const EmbeddingMap& map, const PixelSupervision& sup,
                      const LabelSpace& space, const Tensor& tau) {
  const auto v = detail::valid_log_probs(map, sup, space, tau, "loss_hd");
  const std::vector<double> ones(v.targets.size(), 1.0);
  return detail::weighted_nll(v, ones);
}

// Keeps the floor(keep_fraction * M) lowest losses; among equal losses the
// lower index is kept first. Returns a 0/1 mask over the inputs.
inline std::vector<char> select_kept(std::span<const double> losses, double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw DomainError("keep_fraction must be in (0, 1], got " + std::to_string(keep_fraction));
  }
  const std::size_t m = losses.size();
  const auto k = static_cast<std::size_t>(std::floor(keep_fraction * static_cast<double>(m)));
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return losses[a] < losses[b]; });
  std::vector<char> kept(m, 0);
  for (std::size_t i = 0; i < k; ++i) kept[order[i]] = 1;
  return kept;
}

struct LdResult {
  Tensor loss;
  std::size_t valid = 0;  // M
  std::size_t kept = 0;   // K
  double kept_fraction = 0.0;
  bool nothing_kept = false;        // K = 0: loss is a constant 0
  std::vector<char> kept_mask;      // over valid pixels, row-major order
  std::vector<double> pixel_losses; // -log p of the target, valid pixels
};

// Loss over a caller-fixed kept set (mask over valid pixels in row-major
// order). Divides by M, the number of valid pixels.
inline Tensor loss_ld_masked(const EmbeddingMap& map, const PixelSupervision& sup,
                             const LabelSpace& space, const Tensor& tau,
                             std::span<const char> kept) {
  const auto v = detail::valid_log_probs(map, sup, space, tau, "loss_ld");
  if (kept.size() != v.targets.size()) {
    throw ShapeError("loss_ld: kept mask has " + std::to_string(kept.size()) +
                     " entries for " + std::to_string(v.targets.size()) + " valid pixels");
  }
  std::vector<double> w(kept.begin(), kept.end());
  return detail::weighted_nll(v, w);
}

inline LdResult loss_ld(const EmbeddingMap& map, const PixelSupervision& sup,
                        const LabelSpace& space, const Tensor& tau,
                        double keep_fraction = kDefaultKeepFraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw DomainError("loss_ld: keep_fraction must be in (0, 1], got " +
                      std::to_string(keep_fraction));
  }
  const auto v = detail::valid_log_probs(map, sup, space, tau, "loss_ld");
  LdResult out;
  out.valid = v.targets.size();
  out.pixel_losses = detail::per_pixel_nll(v);
  out.kept_mask = select_kept(out.pixel_losses, keep_fraction);
  out.kept = static_cast<std::size_t>(std::count(out.kept_mask.begin(), out.kept_mask.end(), 1));
  out.kept_fraction = static_cast<double>(out.kept) / static_cast<double>(out.valid);
  if (out.kept == 0) {
    out.nothing_kept = true;
    out.loss = Tensor::scalar(0.0);
    return out;
  }
  std::vector<double> w(out.kept_mask.begin(), out.kept_mask.end());
  out.loss = detail::weighted_nll(v, w);
  return out;
}

// Per-box ||normalize(teacher) - normalize(roi_embed)||_1, without the mean.
inline std::vector<Tensor> box_distances(const SegModel& model, const EmbeddingMap& map,
                                         const BoxSupervision& sup) {
  if (sup.boxes.size() != sup.teachers.size()) {
    throw ShapeError("loss_wd: " + std::to_string(sup.boxes.size()) + " boxes but " +
                     std::to_string(sup.teachers.size()) + " teacher embeddings");
  }
  if (sup.boxes.empty()) throw EmptySupervision("loss_wd: no boxes");
  std::vector<Tensor> out;
  for (std::size_t r = 0; r < sup.boxes.size(); ++r) {
    const auto& t = sup.teachers[r];
    if (t.size() != map.channels()) {
      throw DimensionMismatch("loss_wd: teacher " + std::to_string(r) + " has dimension " +
                              std::to_string(t.size()) + ", map has " +
                              std::to_string(map.channels()));
    }
    const double tn = l2_norm(t);
    if (!(tn > 0.0)) throw InvalidEmbedding("loss_wd: zero-norm teacher embedding");
    std::vector<double> unit(t.size());
    for (std::size_t k = 0; k < t.size(); ++k) unit[k] = t[k] / tn;
    Tensor pooled = l2_normalize(roi_embed(model, map, sup.boxes[r]));
    out.push_back(sum(abs(sub(Tensor({t.size()}, std::move(unit)), pooled))));
  }
  return out;
}

inline Tensor loss_wd(const SegModel& model, const EmbeddingMap& map, const BoxSupervision& sup) {
  const auto d = box_distances(model, map, sup);
  Tensor acc = d.front();
  for (std::size_t r = 1; r < d.size(); ++r) acc = add(acc, d[r]);
  return scale(acc, 1.0 / static_cast<double>(d.size()));
}

struct LossTerms {
  std::optional<Tensor> hd;
  std::optional<Tensor> ld;
  std::optional<Tensor> wd;
  double kept_fraction = 0.0;  // of the noisy-mask term, when present
};

struct LossBreakdown {
  Tensor total;
  double l_hd = 0.0;
  double l_ld = 0.0;
  double l_wd = 0.0;
  double total_value = 0.0;
  double kept_fraction = 0.0;
  std::vector<double> pixel_losses;  // optional diagnostic
};

// L = L_hd + L_ld + L_wd over the terms that are present.
inline LossBreakdown total_loss(const LossTerms& terms) {
  LossBreakdown out;
  std::optional<Tensor> acc;
  auto take = [&](const std::optional<Tensor>& t, double& field) {
    if (!t) return;
    field = t->item();
    acc = acc ? add(*acc, *t) : *t;
  };
  take(terms.hd, out.l_hd);
  take(terms.ld, out.l_ld);
  take(terms.wd, out.l_wd);
  if (!acc) throw EmptyBatch("total_loss: no loss term present");
  out.total = *acc;
  out.total_value = out.total.item();
  out.kept_fraction = terms.ld ? terms.kept_fraction : 0.0;
  return out;
}

}  // namespace embseg
