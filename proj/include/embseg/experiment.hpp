#pragma once

// End-to-end synthetic experiments: JSON config with full default
// materialization, world and pool construction, training, evaluation and the
// unseen-label protocol. All randomness flows from one seed through named
// sub-streams ("data", "init", "batching", "eval").

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "embseg/errors.hpp"
#include "embseg/label_space.hpp"
#include "embseg/rng.hpp"
#include "embseg/synth_data.hpp"
#include "embseg/train_eval.hpp"

namespace embseg {

struct DatasetSpec {
  std::string name = "clean";
  Tier tier = Tier::kHD;
  std::size_t size = 32;
  double corrupt_frac = 0.0;
  double teacher_sigma = 0.0;
};

struct SceneSpec {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t n_regions = 4;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  WorldSpec world;
  SceneSpec scene;
  std::vector<DatasetSpec> datasets{DatasetSpec{}};
  TrainConfig train;
  std::size_t eval_scenes = 8;
  std::size_t heldout_per_block = 0;
};

namespace detail {

class SchemaReader {
 public:
  explicit SchemaReader(std::vector<std::string>& problems) : problems_(problems) {}

  // Reports keys of `obj` that are not in `known`.
  void unknown_keys(const nlohmann::json& obj, const std::string& where,
                    std::initializer_list<const char*> known) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      bool ok = false;
      for (const char* k : known) ok = ok || it.key() == k;
      if (!ok) problems_.push_back(where + it.key() + ": unknown key");
    }
  }

  template <typename T>
  void read(const nlohmann::json& obj, const std::string& where, const char* key, T& out,
            bool required = false) {
    if (!obj.contains(key)) {
      if (required) problems_.push_back(where + key + ": required");
      return;
    }
    const auto& v = obj.at(key);
    bool ok;
    if constexpr (std::is_same_v<T, bool>) {
      ok = v.is_boolean();
    } else if constexpr (std::is_integral_v<T>) {
      ok = v.is_number_integer() && !(v.is_number_integer() && v.get<long long>() < 0);
    } else if constexpr (std::is_floating_point_v<T>) {
      ok = v.is_number();
    } else if constexpr (std::is_same_v<T, std::string>) {
      ok = v.is_string();
    } else {
      ok = v.is_array();
      if (ok) {
        for (const auto& e : v) ok = ok && e.is_number_integer() && e.get<long long>() >= 0;
      }
    }
    if (!ok) {
      problems_.push_back(where + key + ": wrong type");
      return;
    }
    out = v.get<T>();
  }

  const nlohmann::json* section(const nlohmann::json& root, const char* key) {
    if (!root.contains(key)) return nullptr;
    if (!root.at(key).is_object()) {
      problems_.push_back(std::string(key) + ": must be an object");
      return nullptr;
    }
    return &root.at(key);
  }

 private:
  std::vector<std::string>& problems_;
};

}  // namespace detail

// Parses and validates a config document; every offending key is reported
// in one ConfigError. train.total_steps is required, all else defaults.
inline ExperimentConfig parse_config(const nlohmann::json& root) {
  std::vector<std::string> bad;
  detail::SchemaReader rd(bad);
  ExperimentConfig cfg;
  if (!root.is_object()) throw ConfigError({"config: top level must be an object"});
  rd.unknown_keys(root, "", {"seed", "world", "scene", "datasets", "model", "train", "eval",
                             "zeroshot"});
  rd.read(root, "", "seed", cfg.seed);
  if (const auto* w = rd.section(root, "world")) {
    rd.unknown_keys(*w, "world.", {"n_blocks", "per_block", "embed_dim", "feature_dim",
                                   "within_corr", "noise_sigma"});
    rd.read(*w, "world.", "n_blocks", cfg.world.n_blocks);
    rd.read(*w, "world.", "per_block", cfg.world.per_block);
    rd.read(*w, "world.", "embed_dim", cfg.world.embed_dim);
    rd.read(*w, "world.", "feature_dim", cfg.world.feature_dim);
    rd.read(*w, "world.", "within_corr", cfg.world.within_corr);
    rd.read(*w, "world.", "noise_sigma", cfg.world.noise_sigma);
  }
  if (const auto* s = rd.section(root, "scene")) {
    rd.unknown_keys(*s, "scene.", {"height", "width", "n_regions"});
    rd.read(*s, "scene.", "height", cfg.scene.height);
    rd.read(*s, "scene.", "width", cfg.scene.width);
    rd.read(*s, "scene.", "n_regions", cfg.scene.n_regions);
  }
  if (root.contains("datasets")) {
    const auto& ds = root.at("datasets");
    if (!ds.is_array() || ds.empty()) {
      bad.push_back("datasets: must be a non-empty array");
    } else {
      cfg.datasets.clear();
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::string where = "datasets[" + std::to_string(i) + "].";
        DatasetSpec d;
        if (!ds[i].is_object()) {
          bad.push_back(where + ": must be an object");
          continue;
        }
        rd.unknown_keys(ds[i], where, {"name", "tier", "size", "corrupt_frac", "teacher_sigma"});
        rd.read(ds[i], where, "name", d.name);
        std::string tier = to_string(d.tier);
        rd.read(ds[i], where, "tier", tier);
        try {
          d.tier = parse_tier(tier);
        } catch (const DomainError&) {
          bad.push_back(where + "tier: must be HD, LD or WD");
        }
        rd.read(ds[i], where, "size", d.size);
        rd.read(ds[i], where, "corrupt_frac", d.corrupt_frac);
        rd.read(ds[i], where, "teacher_sigma", d.teacher_sigma);
        if (d.size < 1) bad.push_back(where + "size: must be >= 1");
        if (!(d.corrupt_frac >= 0.0 && d.corrupt_frac < 1.0)) {
          bad.push_back(where + "corrupt_frac: must be in [0, 1)");
        }
        if (d.teacher_sigma < 0.0) bad.push_back(where + "teacher_sigma: must be >= 0");
        cfg.datasets.push_back(d);
      }
    }
  }
  if (const auto* m = rd.section(root, "model")) {
    rd.unknown_keys(*m, "model.", {"hidden"});
    rd.read(*m, "model.", "hidden", cfg.train.hidden);
  }
  const auto* t = rd.section(root, "train");
  if (!t) {
    bad.push_back("train.total_steps: required");
  } else {
    rd.unknown_keys(*t, "train.", {"lr0", "momentum", "poly_power", "total_steps", "batch_size",
                                   "keep_fraction", "tau_init", "use_hd", "use_ld", "use_wd"});
    rd.read(*t, "train.", "lr0", cfg.train.lr0);
    rd.read(*t, "train.", "momentum", cfg.train.momentum);
    rd.read(*t, "train.", "poly_power", cfg.train.poly_power);
    rd.read(*t, "train.", "total_steps", cfg.train.total_steps, true);
    rd.read(*t, "train.", "batch_size", cfg.train.batch_size);
    rd.read(*t, "train.", "keep_fraction", cfg.train.keep_fraction);
    rd.read(*t, "train.", "tau_init", cfg.train.tau_init);
    rd.read(*t, "train.", "use_hd", cfg.train.use_hd);
    rd.read(*t, "train.", "use_ld", cfg.train.use_ld);
    rd.read(*t, "train.", "use_wd", cfg.train.use_wd);
  }
  if (const auto* e = rd.section(root, "eval")) {
    rd.unknown_keys(*e, "eval.", {"scenes"});
    rd.read(*e, "eval.", "scenes", cfg.eval_scenes);
  }
  if (const auto* z = rd.section(root, "zeroshot")) {
    rd.unknown_keys(*z, "zeroshot.", {"heldout_per_block"});
    rd.read(*z, "zeroshot.", "heldout_per_block", cfg.heldout_per_block);
  }
  if (!bad.empty()) throw ConfigError(bad);

  cfg.train.seed = cfg.seed;
  if (cfg.scene.height < 1 || cfg.scene.width < 1) bad.push_back("scene: extents must be >= 1");
  if (cfg.scene.n_regions < 1 || cfg.scene.n_regions > cfg.scene.height * cfg.scene.width) {
    bad.push_back("scene.n_regions: must be in [1, height*width]");
  }
  if (cfg.world.embed_dim < cfg.world.n_blocks) bad.push_back("world.embed_dim: must be >= n_blocks");
  if (!(cfg.world.within_corr >= 0.0 && cfg.world.within_corr < 1.0)) {
    bad.push_back("world.within_corr: must be in [0, 1)");
  }
  if (cfg.world.noise_sigma < 0.0) bad.push_back("world.noise_sigma: must be >= 0");
  if (cfg.heldout_per_block >= cfg.world.per_block) {
    if (cfg.heldout_per_block > 0) bad.push_back("zeroshot.heldout_per_block: must be < world.per_block");
  }
  if (cfg.train.batch_size < cfg.datasets.size()) {
    bad.push_back("train.batch_size: must be >= number of datasets");
  }
  try {
    cfg.train.validate();
  } catch (const ConfigError& e) {
    bad.insert(bad.end(), e.problems().begin(), e.problems().end());
  }
  if (!bad.empty()) throw ConfigError(bad);
  return cfg;
}

// The fully materialized document; parse_config(to_json(c)) == c.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["world"] = {{"n_blocks", c.world.n_blocks},       {"per_block", c.world.per_block},
                {"embed_dim", c.world.embed_dim},     {"feature_dim", c.world.feature_dim},
                {"within_corr", c.world.within_corr}, {"noise_sigma", c.world.noise_sigma}};
  j["scene"] = {{"height", c.scene.height}, {"width", c.scene.width},
                {"n_regions", c.scene.n_regions}};
  j["datasets"] = nlohmann::json::array();
  for (const auto& d : c.datasets) {
    j["datasets"].push_back({{"name", d.name},
                             {"tier", to_string(d.tier)},
                             {"size", d.size},
                             {"corrupt_frac", d.corrupt_frac},
                             {"teacher_sigma", d.teacher_sigma}});
  }
  j["model"] = {{"hidden", c.train.hidden}};
  j["train"] = {{"lr0", c.train.lr0},
                {"momentum", c.train.momentum},
                {"poly_power", c.train.poly_power},
                {"total_steps", c.train.total_steps},
                {"batch_size", c.train.batch_size},
                {"keep_fraction", c.train.keep_fraction},
                {"tau_init", c.train.tau_init},
                {"use_hd", c.train.use_hd},
                {"use_ld", c.train.use_ld},
                {"use_wd", c.train.use_wd}};
  j["eval"] = {{"scenes", c.eval_scenes}};
  j["zeroshot"] = {{"heldout_per_block", c.heldout_per_block}};
  return j;
}

// World plus the label bookkeeping for the seen/heldout split. Training
// and evaluation use `space`, whose ids put seen labels first (0..S-1) and
// heldout labels after them.
struct Experiment {
  ExperimentConfig config;
  SynthWorld world;
  std::vector<std::size_t> seen;     // world ids
  std::vector<std::size_t> heldout;  // world ids
  std::vector<int> to_space;         // world id -> space id
  LabelSpace base_space;             // seen labels only
  Pools pools;                       // label ids in base_space
};

inline void remap_labels(LabelMap& map, const std::vector<int>& to_space) {
  for (auto& id : map.ids) {
    if (id != kIgnore) id = to_space.at(static_cast<std::size_t>(id));
  }
}

// The last `heldout_per_block` labels of every block are held out.
inline Experiment prepare_experiment(const ExperimentConfig& cfg) {
  Experiment ex;
  ex.config = cfg;
  const std::uint64_t data_seed = derive_seed(cfg.seed, "data");
  ex.world = make_world(cfg.world, derive_seed(data_seed, "world"));
  const std::size_t per = cfg.world.per_block;
  for (std::size_t id = 0; id < ex.world.space.size(); ++id) {
    (id % per >= per - cfg.heldout_per_block ? ex.heldout : ex.seen).push_back(id);
  }
  ex.to_space.assign(ex.world.space.size(), -1);
  std::vector<LabelRecord> base;
  for (auto id : ex.seen) {
    ex.to_space[id] = static_cast<int>(base.size());
    base.push_back(ex.world.space.record(id));
  }
  for (std::size_t k = 0; k < ex.heldout.size(); ++k) {
    ex.to_space[ex.heldout[k]] = static_cast<int>(ex.seen.size() + k);
  }
  ex.base_space = LabelSpace(std::move(base));

  for (std::size_t d = 0; d < cfg.datasets.size(); ++d) {
    const auto& spec = cfg.datasets[d];
    const std::uint64_t ds_seed = derive_seed(data_seed, "dataset", d);
    std::vector<AnnotatedSample> pool;
    for (std::size_t i = 0; i < spec.size; ++i) {
      const Scene scene = gen_scene(ex.world, cfg.scene.height, cfg.scene.width,
                                    cfg.scene.n_regions, ex.seen,
                                    derive_seed(ds_seed, "scene", i));
      auto s = annotate(ex.world, scene, spec.tier, ex.seen,
                        {spec.corrupt_frac, spec.teacher_sigma},
                        derive_seed(ds_seed, "annotate", i));
      s.dataset_id = d;
      remap_labels(s.truth, ex.to_space);
      remap_labels(s.pixels.labels, ex.to_space);
      for (auto& r : s.regions) r.label = ex.to_space[static_cast<std::size_t>(r.label)];
      pool.push_back(std::move(s));
    }
    ex.pools.push_back(std::move(pool));
  }
  return ex;
}

// Fresh clean scenes from the "eval" stream. With `with_heldout` the scenes
// draw from every label and truth uses extended-space ids; otherwise seen
// labels only.
inline std::vector<EvalScene> make_eval_scenes(const Experiment& ex, std::size_t count,
                                               bool with_heldout, std::string_view stream = "eval") {
  const auto& cfg = ex.config;
  std::vector<std::size_t> active = ex.seen;
  if (with_heldout) active.insert(active.end(), ex.heldout.begin(), ex.heldout.end());
  const std::uint64_t seed = derive_seed(derive_seed(cfg.seed, stream), with_heldout ? "zs" : "seen");
  std::vector<EvalScene> out;
  for (std::size_t i = 0; i < count; ++i) {
    Scene s = gen_scene(ex.world, cfg.scene.height, cfg.scene.width, cfg.scene.n_regions, active,
                        derive_seed(seed, "scene", i));
    remap_labels(s.truth, ex.to_space);
    out.push_back({s.features, s.truth});
  }
  return out;
}

inline std::vector<LabelRecord> heldout_records(const Experiment& ex) {
  std::vector<LabelRecord> out;
  for (auto id : ex.heldout) out.push_back(ex.world.space.record(id));
  return out;
}

struct RunResult {
  SegModel model;
  MetricsReport report;
};

// Train on the pools, evaluate on fresh seen-label scenes, and, when labels
// are held out, run the unseen-label protocol.
inline RunResult run_experiment(const Experiment& ex,
                                const std::optional<SegModel>& init = std::nullopt) {
  auto trained = train(ex.config.train, ex.base_space, ex.pools, init);
  RunResult out{std::move(trained.model), {}};
  out.report.steps = std::move(trained.steps);
  out.report.eval = evaluate(out.model, ex.base_space, make_eval_scenes(ex, ex.config.eval_scenes, false));
  if (!ex.heldout.empty()) {
    out.report.zero_shot = zero_shot_eval(out.model, ex.base_space, heldout_records(ex),
                                          make_eval_scenes(ex, ex.config.eval_scenes, true));
  }
  return out;
}

namespace detail {
inline nlohmann::json iou_json(const std::vector<std::optional<double>>& v) {
  auto arr = nlohmann::json::array();
  for (const auto& x : v) arr.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
  return arr;
}
}  // namespace detail

inline nlohmann::json report_json(const MetricsReport& rep, const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["miou"] = rep.eval.miou;
  j["per_class_iou"] = detail::iou_json(rep.eval.per_class);
  if (!rep.steps.empty()) {
    const auto& last = rep.steps.back();
    j["final"] = {{"step", last.step}, {"l_hd", last.l_hd}, {"l_ld", last.l_ld},
                  {"l_wd", last.l_wd}, {"total", last.total}, {"tau", last.tau}};
  }
  if (rep.zero_shot) {
    const auto& z = *rep.zero_shot;
    j["zero_shot"] = {{"heldout_ids", z.heldout_ids},
                      {"heldout_iou", detail::iou_json(z.heldout_iou)},
                      {"heldout_miou", z.heldout_miou ? nlohmann::json(*z.heldout_miou)
                                                      : nlohmann::json(nullptr)},
                      {"miou", z.overall.miou},
                      {"per_class_iou", detail::iou_json(z.overall.per_class)}};
  } else {
    j["zero_shot"] = nullptr;
  }
  j["config"] = to_json(cfg);
  return j;
}

}  // namespace embseg
