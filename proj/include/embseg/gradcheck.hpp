#pragma once

// Randomized central-difference checks over every differentiable op, the
// segmentation head and the three losses.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "embseg/errors.hpp"
#include "embseg/hetero_loss.hpp"
#include "embseg/label_space.hpp"
#include "embseg/rng.hpp"
#include "embseg/seg_head.hpp"
#include "embseg/tensor.hpp"

namespace embseg {

inline constexpr double kGradTolerance = 1e-4;

struct GradTarget {
  std::string name;
  std::string group;  // "head" or "losses"
  // Builds one random instance: the input to perturb and a scalar function of it.
  std::function<std::pair<Tensor, std::function<Tensor(const Tensor&)>>(Rng&)> make;
};

struct GradResult {
  std::string name;
  std::string group;
  std::size_t trials = 0;
  double max_error = 0.0;
  std::string failure;  // set when an instance could not be evaluated
  bool ok(double tol = kGradTolerance) const { return max_error <= tol; }
};

namespace gc {

inline std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + uniform_index(rng, hi - lo + 1);
}

inline Tensor randn(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = gaussian(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Gaussian entries pushed at least `margin` away from zero (kinks of relu/abs).
inline Tensor randn_off_zero(Rng& rng, Shape shape, double margin = 1e-2) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    do x = gaussian(rng);
    while (std::abs(x) < margin);
  }
  return Tensor(std::move(shape), std::move(v));
}

// sum(op(x) * W) for a fixed random W, so every output coordinate matters.
inline std::function<Tensor(const Tensor&)> projected(std::function<Tensor(const Tensor&)> op,
                                                       const Shape& out_shape, Rng& rng) {
  Tensor w = randn(rng, out_shape);
  return [op = std::move(op), w](const Tensor& x) { return sum(mul(op(x), w)); };
}

inline Shape random_shape(Rng& rng, std::size_t max_rank = 3, std::size_t max_extent = 8) {
  Shape s(dim(rng, 1, max_rank));
  for (auto& e : s) e = dim(rng, 1, max_extent);
  return s;
}

inline Shape output_shape(const std::function<Tensor(const Tensor&)>& op, const Tensor& x) {
  NoGradGuard guard;
  return op(x).shape();
}

using Instance = std::pair<Tensor, std::function<Tensor(const Tensor&)>>;

inline Instance unary(Rng& rng, Tensor x, std::function<Tensor(const Tensor&)> op) {
  const Shape out = output_shape(op, x);
  return {std::move(x), projected(std::move(op), out, rng)};
}

struct LossInstance {
  std::size_t h = 4, w = 4;
  LabelSpace space;
  PixelSupervision sup;
  BoxSupervision boxes;
  Tensor map;  // H x W x C
  SegModel model;
  double tau = 0.5;
};

inline LossInstance loss_instance(Rng& rng) {
  LossInstance li;
  const std::size_t n = dim(rng, 2, 5), c = dim(rng, 2, 8);
  std::vector<LabelRecord> recs;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> e(c);
    for (auto& x : e) x = gaussian(rng);
    recs.push_back({j, "l" + std::to_string(j), "", std::move(e)});
  }
  li.space = LabelSpace(std::move(recs));
  li.sup.labels = LabelMap(li.h, li.w, 0);
  for (auto& id : li.sup.labels.ids) {
    id = uniform(rng, 0.0, 1.0) < 0.15 ? kIgnore : static_cast<int>(uniform_index(rng, n));
  }
  if (li.sup.valid_count() == 0) li.sup.labels.ids[0] = 0;
  li.map = randn(rng, {li.h, li.w, c});
  li.model = init_model(3, {}, c, derive_seed(rng(), "model"));
  // Perturb proj away from identity so its gradient is generic.
  for (auto& x : li.model.proj.mutable_data()) x += 0.3 * gaussian(rng);
  const std::size_t p = dim(rng, 1, 3);
  for (std::size_t r = 0; r < p; ++r) {
    const std::size_t r0 = uniform_index(rng, li.h), c0 = uniform_index(rng, li.w);
    const Box b{r0, c0, r0 + 1 + uniform_index(rng, li.h - r0), c0 + 1 + uniform_index(rng, li.w - c0)};
    std::vector<double> t(c);
    for (auto& x : t) x = gaussian(rng);
    li.boxes.boxes.push_back(b);
    li.boxes.teachers.push_back(std::move(t));
  }
  li.tau = uniform(rng, 0.05, 1.0);
  return li;
}

// Frozen kept set of the noisy-mask loss at the unperturbed map.
inline std::vector<char> kept_at(const LossInstance& li, const Tensor& map) {
  NoGradGuard guard;
  return loss_ld(EmbeddingMap{map}, li.sup, li.space, Tensor::scalar(li.tau)).kept_mask;
}

// A model with one hidden layer whose pre-activations stay clear of the relu kink.
inline std::pair<SegModel, Tensor> head_instance(Rng& rng) {
  for (;;) {
    const std::size_t f = dim(rng, 1, 5), hid = dim(rng, 1, 6), c = dim(rng, 1, 6);
    SegModel m = init_model(f, {hid}, c, rng());
    for (auto& x : m.biases[0].mutable_data()) x = 0.1 * gaussian(rng);
    Tensor feats = randn(rng, {dim(rng, 1, 3), dim(rng, 1, 3), f});
    NoGradGuard guard;
    const auto rows = reshape(feats, {feats.dim(0) * feats.dim(1), f});
    const auto pre = add(matmul(rows, m.weights[0]),
                         matmul(Tensor::full({rows.dim(0), 1}, 1.0), m.biases[0]));
    double closest = 1e300;
    for (double z : pre.data()) closest = std::min(closest, std::abs(z));
    if (closest > 1e-2) return {m, feats};
  }
}

}  // namespace gc

inline std::vector<GradTarget> gradient_targets() {
  using gc::Instance;
  std::vector<GradTarget> t;
  auto add_t = [&](std::string name, std::string group, auto make) {
    t.push_back({std::move(name), std::move(group), make});
  };

  add_t("matmul.lhs", "head", [](Rng& r) -> Instance {
    const std::size_t m = gc::dim(r, 1, 16), k = gc::dim(r, 1, 16), n = gc::dim(r, 1, 16);
    Tensor b = gc::randn(r, {k, n});
    return gc::unary(r, gc::randn(r, {m, k}), [b](const Tensor& x) { return matmul(x, b); });
  });
  add_t("matmul.rhs", "head", [](Rng& r) -> Instance {
    const std::size_t m = gc::dim(r, 1, 16), k = gc::dim(r, 1, 16), n = gc::dim(r, 1, 16);
    Tensor a = gc::randn(r, {m, k});
    return gc::unary(r, gc::randn(r, {k, n}), [a](const Tensor& x) { return matmul(a, x); });
  });
  add_t("add", "head", [](Rng& r) -> Instance {
    const Shape s = gc::random_shape(r);
    Tensor o = gc::randn(r, s);
    return gc::unary(r, gc::randn(r, s), [o](const Tensor& x) { return add(x, o); });
  });
  add_t("sub", "head", [](Rng& r) -> Instance {
    const Shape s = gc::random_shape(r);
    Tensor o = gc::randn(r, s);
    return gc::unary(r, gc::randn(r, s), [o](const Tensor& x) { return sub(o, x); });
  });
  add_t("mul", "head", [](Rng& r) -> Instance {
    const Shape s = gc::random_shape(r);
    Tensor o = gc::randn(r, s);
    return gc::unary(r, gc::randn(r, s), [o](const Tensor& x) { return mul(x, mul(x, o)); });
  });
  add_t("mul.scalar", "head", [](Rng& r) -> Instance {
    Tensor o = gc::randn(r, gc::random_shape(r));
    return gc::unary(r, Tensor::scalar(gaussian(r)), [o](const Tensor& x) { return mul(x, o); });
  });
  add_t("scale", "head", [](Rng& r) -> Instance {
    const double c = gaussian(r);
    return gc::unary(r, gc::randn(r, gc::random_shape(r)),
                     [c](const Tensor& x) { return scale(x, c); });
  });
  add_t("relu", "head", [](Rng& r) -> Instance {
    return gc::unary(r, gc::randn_off_zero(r, gc::random_shape(r)),
                     [](const Tensor& x) { return relu(x); });
  });
  add_t("exp", "head", [](Rng& r) -> Instance {
    return gc::unary(r, gc::randn(r, gc::random_shape(r)), [](const Tensor& x) { return exp(x); });
  });
  add_t("log", "head", [](Rng& r) -> Instance {
    return gc::unary(r, gc::rand_uniform(r, gc::random_shape(r), 0.5, 2.0),
                     [](const Tensor& x) { return log(x); });
  });
  add_t("abs", "head", [](Rng& r) -> Instance {
    return gc::unary(r, gc::randn_off_zero(r, gc::random_shape(r)),
                     [](const Tensor& x) { return abs(x); });
  });
  add_t("sum", "head", [](Rng& r) -> Instance {
    return gc::unary(r, gc::randn(r, gc::random_shape(r)), [](const Tensor& x) { return sum(x); });
  });
  add_t("sum.axis", "head", [](Rng& r) -> Instance {
    Tensor x = gc::randn(r, gc::random_shape(r));
    const std::size_t axis = uniform_index(r, x.rank());
    return gc::unary(r, std::move(x), [axis](const Tensor& v) { return sum(v, axis); });
  });
  add_t("mean", "head", [](Rng& r) -> Instance {
    return gc::unary(r, gc::randn(r, gc::random_shape(r)), [](const Tensor& x) { return mean(x); });
  });
  add_t("mean.axis", "head", [](Rng& r) -> Instance {
    Tensor x = gc::randn(r, gc::random_shape(r));
    const std::size_t axis = uniform_index(r, x.rank());
    return gc::unary(r, std::move(x), [axis](const Tensor& v) { return mean(v, axis); });
  });
  add_t("l2_normalize", "head", [](Rng& r) -> Instance {
    return gc::unary(r, gc::randn(r, gc::random_shape(r)),
                     [](const Tensor& x) { return l2_normalize(x); });
  });
  add_t("softmax.x", "head", [](Rng& r) -> Instance {
    const double tau = uniform(r, 0.1, 2.0);
    return gc::unary(r, gc::randn(r, gc::random_shape(r)),
                     [tau](const Tensor& x) { return softmax_with_temperature(x, tau); });
  });
  add_t("softmax.tau", "head", [](Rng& r) -> Instance {
    Tensor logits = gc::randn(r, gc::random_shape(r));
    return gc::unary(r, Tensor::scalar(uniform(r, 0.2, 2.0)), [logits](const Tensor& tau) {
      return softmax_with_temperature(logits, tau);
    });
  });
  add_t("log_softmax.x", "head", [](Rng& r) -> Instance {
    const Tensor tau = Tensor::scalar(uniform(r, 0.1, 2.0));
    return gc::unary(r, gc::randn(r, gc::random_shape(r)),
                     [tau](const Tensor& x) { return log_softmax_with_temperature(x, tau); });
  });
  add_t("log_softmax.tau", "head", [](Rng& r) -> Instance {
    Tensor logits = gc::randn(r, gc::random_shape(r));
    return gc::unary(r, Tensor::scalar(uniform(r, 0.2, 2.0)), [logits](const Tensor& tau) {
      return log_softmax_with_temperature(logits, tau);
    });
  });
  add_t("gather_rows", "head", [](Rng& r) -> Instance {
    const std::size_t rows = gc::dim(r, 1, 6), cols = gc::dim(r, 1, 6), k = gc::dim(r, 1, 8);
    std::vector<std::size_t> idx(k);
    for (auto& i : idx) i = uniform_index(r, rows);
    return gc::unary(r, gc::randn(r, {rows, cols}),
                     [idx](const Tensor& x) { return gather_rows(x, idx); });
  });
  add_t("slice", "head", [](Rng& r) -> Instance {
    Tensor x = gc::randn(r, gc::random_shape(r));
    std::vector<std::size_t> b(x.rank()), e(x.rank());
    for (std::size_t a = 0; a < x.rank(); ++a) {
      b[a] = uniform_index(r, x.dim(a));
      e[a] = b[a] + 1 + uniform_index(r, x.dim(a) - b[a]);
    }
    return gc::unary(r, std::move(x), [b, e](const Tensor& v) { return slice(v, b, e); });
  });
  add_t("concat", "head", [](Rng& r) -> Instance {
    Shape s = gc::random_shape(r);
    Shape s2 = s;
    s2[0] = gc::dim(r, 1, 4);
    Tensor other = gc::randn(r, s2);
    const bool first = uniform_index(r, 2) == 0;
    return gc::unary(r, gc::randn(r, s), [other, first](const Tensor& x) {
      return first ? concat({x, other, x}) : concat({other, x});
    });
  });
  add_t("reshape", "head", [](Rng& r) -> Instance {
    Tensor x = gc::randn(r, gc::random_shape(r));
    const Shape flat{x.size()};
    return gc::unary(r, std::move(x), [flat](const Tensor& v) { return reshape(v, flat); });
  });
  add_t("forward.features", "head", [](Rng& r) -> Instance {
    auto inst = gc::head_instance(r);
    SegModel m = inst.first;
    Tensor feats = inst.second;
    return gc::unary(r, feats, [m](const Tensor& x) { return forward(m, x).values; });
  });
  add_t("forward.weight", "head", [](Rng& r) -> Instance {
    auto inst = gc::head_instance(r);
    SegModel m = inst.first;
    Tensor feats = inst.second;
    return gc::unary(r, m.weights[0].detach(), [m, feats](const Tensor& w) {
      SegModel k = m;
      k.weights[0] = w;
      return forward(k, feats).values;
    });
  });
  add_t("forward.bias", "head", [](Rng& r) -> Instance {
    auto inst = gc::head_instance(r);
    SegModel m = inst.first;
    Tensor feats = inst.second;
    return gc::unary(r, m.biases.back().detach(), [m, feats](const Tensor& b) {
      SegModel k = m;
      k.biases.back() = b;
      return forward(k, feats).values;
    });
  });
  add_t("roi_embed.map", "head", [](Rng& r) -> Instance {
    auto li = gc::loss_instance(r);
    const Box b = li.boxes.boxes.front();
    return gc::unary(r, li.map, [m = li.model, b](const Tensor& x) {
      return roi_embed(m, EmbeddingMap{x}, b);
    });
  });
  add_t("roi_embed.proj", "head", [](Rng& r) -> Instance {
    auto li = gc::loss_instance(r);
    const Box b = li.boxes.boxes.front();
    return gc::unary(r, li.model.proj.detach(), [m = li.model, map = li.map, b](const Tensor& p) {
      SegModel k = m;
      k.proj = p;
      return roi_embed(k, EmbeddingMap{map}, b);
    });
  });

  add_t("pixel_probs.map", "losses", [](Rng& r) -> Instance {
    auto li = gc::loss_instance(r);
    return gc::unary(r, li.map, [li](const Tensor& x) {
      return pixel_probs(EmbeddingMap{x}, li.space, Tensor::scalar(li.tau));
    });
  });
  add_t("pixel_probs.tau", "losses", [](Rng& r) -> Instance {
    auto li = gc::loss_instance(r);
    return gc::unary(r, Tensor::scalar(li.tau), [li](const Tensor& tau) {
      return pixel_probs(EmbeddingMap{li.map}, li.space, tau);
    });
  });
  add_t("loss_hd.map", "losses", [](Rng& r) -> Instance {
    auto li = gc::loss_instance(r);
    return {li.map, [li](const Tensor& x) {
              return loss_hd(EmbeddingMap{x}, li.sup, li.space, Tensor::scalar(li.tau));
            }};
  });
  add_t("loss_hd.log_tau", "losses", [](Rng& r) -> Instance {
    auto li = gc::loss_instance(r);
    return {Tensor::scalar(std::log(li.tau)), [li](const Tensor& lt) {
              return loss_hd(EmbeddingMap{li.map}, li.sup, li.space, exp(lt));
            }};
  });
  add_t("loss_ld.map", "losses", [](Rng& r) -> Instance {
    auto li = gc::loss_instance(r);
    const auto kept = gc::kept_at(li, li.map);
    return {li.map, [li, kept](const Tensor& x) {
              return loss_ld_masked(EmbeddingMap{x}, li.sup, li.space, Tensor::scalar(li.tau), kept);
            }};
  });
  add_t("loss_ld.log_tau", "losses", [](Rng& r) -> Instance {
    auto li = gc::loss_instance(r);
    const auto kept = gc::kept_at(li, li.map);
    return {Tensor::scalar(std::log(li.tau)), [li, kept](const Tensor& lt) {
              return loss_ld_masked(EmbeddingMap{li.map}, li.sup, li.space, exp(lt), kept);
            }};
  });
  add_t("loss_wd.map", "losses", [](Rng& r) -> Instance {
    auto li = gc::loss_instance(r);
    return {li.map, [li](const Tensor& x) { return loss_wd(li.model, EmbeddingMap{x}, li.boxes); }};
  });
  add_t("loss_wd.proj", "losses", [](Rng& r) -> Instance {
    auto li = gc::loss_instance(r);
    return {li.model.proj.detach(), [li](const Tensor& p) {
              SegModel k = li.model;
              k.proj = p;
              return loss_wd(k, EmbeddingMap{li.map}, li.boxes);
            }};
  });
  add_t("total.map", "losses", [](Rng& r) -> Instance {
    auto li = gc::loss_instance(r);
    const auto kept = gc::kept_at(li, li.map);
    return {li.map, [li, kept](const Tensor& x) {
              const EmbeddingMap m{x};
              const Tensor tau = Tensor::scalar(li.tau);
              LossTerms terms{loss_hd(m, li.sup, li.space, tau),
                              loss_ld_masked(m, li.sup, li.space, tau, kept),
                              loss_wd(li.model, m, li.boxes), 0.0};
              return total_loss(terms).total;
            }};
  });
  return t;
}

// module: "all", "head" or "losses".
inline std::vector<GradResult> run_gradcheck(const std::string& module, std::size_t trials,
                                             double eps, std::uint64_t seed) {
  if (module != "all" && module != "head" && module != "losses") {
    throw DomainError("gradcheck: unknown module '" + module + "' (all, head, losses)");
  }
  if (trials < 1) throw DomainError("gradcheck: trials must be >= 1");
  if (!(eps > 0.0)) throw DomainError("gradcheck: eps must be > 0");
  std::vector<GradResult> out;
  for (const auto& target : gradient_targets()) {
    if (module != "all" && module != target.group) continue;
    GradResult res{target.name, target.group, trials, 0.0, {}};
    for (std::size_t k = 0; k < trials; ++k) {
      Rng rng(derive_seed(seed, target.name, k));
      auto [x, f] = target.make(rng);
      try {
        res.max_error = std::max(res.max_error, check_gradients(f, x, eps));
      } catch (const Error& e) {
        // A probe at x +/- eps left the op's domain (e.g. tau <= 0).
        res.max_error = std::numeric_limits<double>::infinity();
        res.failure = "trial " + std::to_string(k) + ": " + e.what();
        break;
      }
    }
    out.push_back(res);
  }
  return out;
}

}  // namespace embseg
