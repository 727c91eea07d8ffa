#pragma once

// SGD with momentum under a polynomial learning-rate decay, nearest-label
// inference, mIoU, and the unseen-label evaluation protocol.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "embseg/errors.hpp"
#include "embseg/hetero_loss.hpp"
#include "embseg/label_map.hpp"
#include "embseg/label_space.hpp"
#include "embseg/rng.hpp"
#include "embseg/seg_head.hpp"
#include "embseg/synth_data.hpp"
#include "embseg/tensor.hpp"

namespace embseg {

struct TrainConfig {
  double lr0 = 0.01;
  double momentum = 0.9;
  double poly_power = 0.9;
  std::size_t total_steps = 0;
  std::size_t batch_size = 4;
  double keep_fraction = kDefaultKeepFraction;
  double tau_init = 0.07;
  bool use_hd = true;
  bool use_ld = true;
  bool use_wd = true;
  std::vector<std::size_t> hidden = {32};
  std::uint64_t seed = 0;

  void validate() const {
    std::vector<std::string> bad;
    if (!(lr0 > 0.0)) bad.push_back("train.lr0: must be > 0");
    if (!(poly_power > 0.0)) bad.push_back("train.poly_power: must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) bad.push_back("train.momentum: must be in [0, 1)");
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
      bad.push_back("train.keep_fraction: must be in (0, 1]");
    }
    if (!(tau_init > 0.0)) bad.push_back("train.tau_init: must be > 0");
    if (total_steps < 1) bad.push_back("train.total_steps: must be >= 1");
    if (batch_size < 1) bad.push_back("train.batch_size: must be >= 1");
    if (!bad.empty()) throw ConfigError(bad);
  }
};

// lr0 * (1 - step / total_steps)^power, clamped to 0 past the end.
inline double poly_lr(std::size_t step, const TrainConfig& cfg) {
  if (step >= cfg.total_steps) return 0.0;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return cfg.lr0 * std::pow(frac, cfg.poly_power);
}

// velocity = momentum * velocity + grad;  param -= lr * velocity
class SgdMomentum {
 public:
  SgdMomentum(const SegModel& model, double momentum) : momentum_(momentum) {
    for (const auto& p : model.parameters()) velocity_.emplace_back(p.tensor.size(), 0.0);
  }

  // Applies one update and clears the gradients.
  void step(const SegModel& model, double lr) {
    auto params = model.parameters();
    for (const auto& p : params) {
      for (double g : p.tensor.grad()) {
        if (!std::isfinite(g)) throw NonFiniteError("sgd_step: non-finite gradient in " + p.name);
      }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& v = velocity_[i];
      auto value = params[i].tensor.mutable_data();
      const auto g = params[i].tensor.grad();
      for (std::size_t k = 0; k < v.size(); ++k) {
        v[k] = momentum_ * v[k] + g[k];
        value[k] -= lr * v[k];
      }
      params[i].tensor.zero_grad();
    }
  }

 private:
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

struct StepRecord {
  std::size_t step = 0;
  double l_hd = 0.0;
  double l_ld = 0.0;
  double l_wd = 0.0;
  double total = 0.0;
  double kept_fraction = 0.0;
  double tau = 0.0;
};

struct MiouResult {
  double miou = 0.0;
  std::vector<std::optional<double>> per_class;  // nullopt: absent from pred and truth
};

struct ZeroShotReport {
  std::vector<std::size_t> heldout_ids;          // ids in the extended space
  std::vector<std::optional<double>> heldout_iou;
  std::optional<double> heldout_miou;            // mean over heldout labels with a defined IoU
  MiouResult overall;
};

struct MetricsReport {
  std::vector<StepRecord> steps;
  MiouResult eval;
  std::optional<ZeroShotReport> zero_shot;
};

using Pools = std::vector<std::vector<AnnotatedSample>>;

struct TrainResult {
  SegModel model;
  std::vector<StepRecord> steps;
};

// One optimisation step over a batch: per-tier terms are averaged within the
// batch, then summed.
inline StepRecord train_step(SegModel& model, SgdMomentum& opt, const TrainConfig& cfg,
                             const LabelSpace& space, const Pools& pools,
                             const std::vector<BatchItem>& batch, std::size_t step) {
  std::vector<Tensor> hd, ld, wd;
  double kept = 0.0;
  for (const auto& item : batch) {
    const auto& s = pools.at(item.dataset).at(item.index);
    const bool on = (s.tier == Tier::kHD && cfg.use_hd) || (s.tier == Tier::kLD && cfg.use_ld) ||
                    (s.tier == Tier::kWD && cfg.use_wd);
    if (!on) continue;
    const EmbeddingMap map = forward(model, s.features);
    switch (s.tier) {
      case Tier::kHD:
        hd.push_back(loss_hd(map, s.pixels, space, exp(model.log_tau)));
        break;
      case Tier::kLD: {
        auto r = loss_ld(map, s.pixels, space, exp(model.log_tau), cfg.keep_fraction);
        kept += r.kept_fraction;
        ld.push_back(r.loss);
        break;
      }
      case Tier::kWD:
        wd.push_back(loss_wd(model, map, s.boxes));
        break;
    }
  }
  auto average = [](const std::vector<Tensor>& v) -> std::optional<Tensor> {
    if (v.empty()) return std::nullopt;
    Tensor acc = v.front();
    for (std::size_t i = 1; i < v.size(); ++i) acc = add(acc, v[i]);
    return scale(acc, 1.0 / static_cast<double>(v.size()));
  };
  LossTerms terms{average(hd), average(ld), average(wd),
                  ld.empty() ? 0.0 : kept / static_cast<double>(ld.size())};
  const LossBreakdown b = total_loss(terms);
  if (!std::isfinite(b.total_value)) {
    throw NonFiniteError("train: non-finite total loss at step " + std::to_string(step));
  }
  StepRecord rec{step, b.l_hd, b.l_ld, b.l_wd, b.total_value, b.kept_fraction, model.tau()};
  backward(b.total);
  opt.step(model, poly_lr(step, cfg));
  return rec;
}

// Runs cfg.total_steps balanced batches. Starts from `init` when given
// (the caller's model is not modified), else from a fresh model seeded by
// the "init" stream of cfg.seed.
inline TrainResult train(const TrainConfig& cfg, const LabelSpace& space, const Pools& pools,
                         const std::optional<SegModel>& init = std::nullopt) {
  cfg.validate();
  if (pools.empty()) throw DomainError("train: no sample pools");
  if (pools.front().empty()) throw DomainError("train: empty sample pool");
  const std::size_t f = pools.front().front().features.dim(2);
  TrainResult out{init ? init->clone()
                       : init_model(f, cfg.hidden, space.dim(), derive_seed(cfg.seed, "init"),
                                    cfg.tau_init),
                  {}};
  std::vector<std::size_t> sizes;
  for (const auto& p : pools) sizes.push_back(p.size());
  BalancedBatcher batcher(sizes, cfg.batch_size, derive_seed(cfg.seed, "batching"));
  SgdMomentum opt(out.model, cfg.momentum);
  out.steps.reserve(cfg.total_steps);
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    out.steps.push_back(train_step(out.model, opt, cfg, space, pools, batcher.next(), step));
  }
  return out;
}

// Per-pixel nearest label of the predicted embedding.
inline LabelMap infer(const SegModel& model, const Tensor& features, const LabelSpace& space) {
  NoGradGuard guard;
  const EmbeddingMap map = forward(model, features);
  if (map.channels() != space.dim()) {
    throw DimensionMismatch("infer: model predicts " + std::to_string(map.channels()) +
                            "-dim embeddings, label space has " + std::to_string(space.dim()));
  }
  LabelMap out(map.height(), map.width());
  const auto v = map.values.data();
  const std::size_t c = map.channels();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.ids[i] = static_cast<int>(retrieve(space, v.subspan(i * c, c)).id);
  }
  return out;
}

// Intersection/union counts accumulated over any number of maps.
class IouAccumulator {
 public:
  explicit IouAccumulator(std::size_t num_classes)
      : inter_(num_classes, 0), pred_(num_classes, 0), truth_(num_classes, 0) {}

  void add(const LabelMap& pred, const LabelMap& truth) {
    if (pred.height != truth.height || pred.width != truth.width) {
      throw ShapeError("miou: prediction and truth differ in shape");
    }
    const int n = static_cast<int>(inter_.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const int t = truth.ids[i];
      if (t == kIgnore) continue;
      const int p = pred.ids[i];
      if (t < 0 || t >= n || p < 0 || p >= n) {
        throw DomainError("miou: label id outside [0, " + std::to_string(n) + ")");
      }
      ++truth_[static_cast<std::size_t>(t)];
      ++pred_[static_cast<std::size_t>(p)];
      if (p == t) ++inter_[static_cast<std::size_t>(t)];
      ++counted_;
    }
  }

  // Classes absent from both prediction and truth are left out of the mean;
  // a class predicted but never true scores 0.
  MiouResult result() const {
    if (counted_ == 0) throw UndefinedMetric("miou: ground truth is entirely ignored");
    MiouResult r;
    r.per_class.resize(inter_.size());
    double acc = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < inter_.size(); ++c) {
      const auto uni = pred_[c] + truth_[c] - inter_[c];
      if (uni == 0) continue;
      r.per_class[c] = static_cast<double>(inter_[c]) / static_cast<double>(uni);
      acc += *r.per_class[c];
      ++present;
    }
    r.miou = acc / static_cast<double>(present);
    return r;
  }

 private:
  std::vector<std::size_t> inter_, pred_, truth_;
  std::size_t counted_ = 0;
};

inline MiouResult miou(const LabelMap& pred, const LabelMap& truth, std::size_t num_classes) {
  IouAccumulator acc(num_classes);
  acc.add(pred, truth);
  return acc.result();
}

struct EvalScene {
  Tensor features;
  LabelMap truth;  // ids in the space used for inference
};

inline MiouResult evaluate(const SegModel& model, const LabelSpace& space,
                           const std::vector<EvalScene>& scenes) {
  IouAccumulator acc(space.size());
  for (const auto& s : scenes) acc.add(infer(model, s.features, space), s.truth);
  return acc.result();
}

// Extends `base` with the heldout records (ids base.size() onward), segments
// the test scenes, and reports per-heldout IoU plus the overall mIoU. Test
// scene truth must already use extended-space ids.
inline ZeroShotReport zero_shot_eval(const SegModel& model, const LabelSpace& base,
                                     const std::vector<LabelRecord>& heldout,
                                     const std::vector<EvalScene>& scenes) {
  LabelSpace space = base;
  ZeroShotReport rep;
  for (const auto& r : heldout) {
    if (r.embedding.size() != base.dim()) {
      throw DimensionMismatch("zero_shot_eval: heldout label '" + r.name + "' has dimension " +
                              std::to_string(r.embedding.size()) + ", space has " +
                              std::to_string(base.dim()));
    }
    rep.heldout_ids.push_back(space.size());
    space = extend(space, r).space;
  }
  rep.overall = evaluate(model, space, scenes);
  double acc = 0.0;
  std::size_t n = 0;
  for (auto id : rep.heldout_ids) {
    rep.heldout_iou.push_back(rep.overall.per_class[id]);
    if (rep.overall.per_class[id]) {
      acc += *rep.overall.per_class[id];
      ++n;
    }
  }
  if (n) rep.heldout_miou = acc / static_cast<double>(n);
  return rep;
}

namespace detail {
inline std::string g9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}
}  // namespace detail

inline constexpr const char* kMetricsCsvHeader = "step,l_hd,l_ld,l_wd,total,kept_fraction,tau";

inline void write_metrics_csv(std::ostream& os, const std::vector<StepRecord>& steps) {
  os << kMetricsCsvHeader << '\n';
  for (const auto& s : steps) {
    os << s.step << ',' << detail::g9(s.l_hd) << ',' << detail::g9(s.l_ld) << ','
       << detail::g9(s.l_wd) << ',' << detail::g9(s.total) << ',' << detail::g9(s.kept_fraction)
       << ',' << detail::g9(s.tau) << '\n';
  }
}

}  // namespace embseg
