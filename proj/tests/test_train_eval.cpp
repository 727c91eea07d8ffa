#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "embseg/experiment.hpp"
#include "embseg/train_eval.hpp"

using namespace embseg;

namespace {

TrainConfig cfg_with(std::size_t total, double lr0 = 0.01, double power = 0.9) {
  TrainConfig c;
  c.total_steps = total;
  c.lr0 = lr0;
  c.poly_power = power;
  return c;
}

LabelMap map_of(std::size_t h, std::size_t w, std::vector<int> ids) {
  LabelMap m(h, w);
  m.ids = std::move(ids);
  return m;
}

ExperimentConfig tiny_config(std::uint64_t seed = 5) {
  ExperimentConfig c;
  c.seed = seed;
  c.world = {2, 2, 8, 4, 0.5, 0.05};
  c.scene = {6, 6, 3};
  c.datasets = {{"clean", Tier::kHD, 4, 0.0, 0.0},
                {"noisy", Tier::kLD, 4, 0.2, 0.0},
                {"boxes", Tier::kWD, 4, 0.0, 0.05}};
  c.train.total_steps = 12;
  c.train.batch_size = 3;
  c.train.hidden = {8};
  c.eval_scenes = 2;
  return c;
}

}  // namespace

TEST(PolyLr, Schedule) {
  const auto c = cfg_with(100);
  EXPECT_DOUBLE_EQ(poly_lr(0, c), 0.01);
  EXPECT_DOUBLE_EQ(poly_lr(100, c), 0.0);
  EXPECT_DOUBLE_EQ(poly_lr(150, c), 0.0);
  EXPECT_NEAR(poly_lr(50, cfg_with(100, 0.01, 1.0)), 0.005, 1e-15);
  EXPECT_NEAR(poly_lr(50, c), 0.01 * std::pow(0.5, 0.9), 1e-15);
  for (std::size_t s = 1; s < 100; ++s) EXPECT_LT(poly_lr(s, c), poly_lr(s - 1, c));
}

TEST(SgdMomentum, FirstAndSecondUpdate) {
  SegModel m = init_model(1, {}, 1, 0);
  SgdMomentum opt(m, 0.9);
  m.log_tau.mutable_data()[0] = 1.0;
  backward(scale(m.log_tau, 0.5));
  opt.step(m, 0.1);
  EXPECT_NEAR(m.log_tau.item(), 0.95, 1e-15);
  EXPECT_EQ(m.log_tau.grad()[0], 0.0);
  backward(scale(m.log_tau, 0.5));
  opt.step(m, 0.1);
  EXPECT_NEAR(m.log_tau.item(), 0.95 - 0.1 * (0.5 + 0.9 * 0.5), 1e-15);
}

TEST(SgdMomentum, ZeroGradientsLeaveFreshParametersAlone) {
  SegModel m = init_model(3, {4}, 2, 1);
  const SegModel before = m.clone();
  SgdMomentum opt(m, 0.9);
  opt.step(m, 0.5);
  const auto a = m.parameters(), b = before.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(),
                           b[i].tensor.data().begin()));
  }
}

TEST(SgdMomentum, NonFiniteGradientNamesParameter) {
  SegModel m = init_model(2, {3}, 2, 1);
  SgdMomentum opt(m, 0.9);
  backward(scale(sum(m.biases[0]), std::numeric_limits<double>::quiet_NaN()));
  try {
    opt.step(m, 0.1);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.bias"), std::string::npos);
  }
}

TEST(Miou, WorkedExample) {
  const auto r = miou(map_of(1, 4, {0, 1, 1, 1}), map_of(1, 4, {0, 0, 1, 1}), 3);
  EXPECT_NEAR(r.miou, 7.0 / 12.0, 1e-15);
  EXPECT_NEAR(*r.per_class[0], 0.5, 1e-15);
  EXPECT_FALSE(r.per_class[2].has_value());
}

TEST(Miou, PredictedOnlyClassScoresZero) {
  const auto r = miou(map_of(1, 2, {0, 2}), map_of(1, 2, {0, 0}), 3);
  ASSERT_TRUE(r.per_class[2].has_value());
  EXPECT_EQ(*r.per_class[2], 0.0);
  EXPECT_NEAR(r.miou, 0.25, 1e-15);
}

TEST(Miou, IgnoredPixelsAndErrors) {
  const auto r = miou(map_of(1, 3, {1, 0, 0}), map_of(1, 3, {kIgnore, 0, 0}), 2);
  EXPECT_DOUBLE_EQ(r.miou, 1.0);
  EXPECT_THROW(miou(map_of(1, 2, {0, 0}), map_of(1, 2, {kIgnore, kIgnore}), 2), UndefinedMetric);
  EXPECT_THROW(miou(LabelMap(1, 2, 0), LabelMap(2, 1, 0), 2), ShapeError);
  EXPECT_THROW(miou(map_of(1, 1, {3}), map_of(1, 1, {0}), 2), DomainError);
}

TEST(Miou, MatchesBruteForce) {
  Rng rng(3);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + uniform_index(rng, 4);
    LabelMap p(8, 8), g(8, 8);
    for (std::size_t i = 0; i < 64; ++i) {
      p.ids[i] = static_cast<int>(uniform_index(rng, n));
      g.ids[i] = uniform(rng, 0, 1) < 0.1 ? kIgnore : static_cast<int>(uniform_index(rng, n));
    }
    if (g.ids[0] == kIgnore) g.ids[0] = 0;
    double acc = 0.0;
    int present = 0;
    for (int c = 0; c < static_cast<int>(n); ++c) {
      int inter = 0, uni = 0;
      for (std::size_t i = 0; i < 64; ++i) {
        if (g.ids[i] == kIgnore) continue;
        const bool a = p.ids[i] == c, b = g.ids[i] == c;
        inter += a && b;
        uni += a || b;
      }
      if (uni) {
        acc += double(inter) / uni;
        ++present;
      }
    }
    EXPECT_NEAR(miou(p, g, n).miou, acc / present, 1e-12);
  }
}

TEST(IouAccumulator, PoolsCountsAcrossMaps) {
  IouAccumulator acc(2);
  acc.add(map_of(1, 2, {0, 0}), map_of(1, 2, {0, 0}));
  acc.add(map_of(1, 2, {0, 1}), map_of(1, 2, {1, 1}));
  // class 0: inter 2, union 3; class 1: inter 1, union 2
  EXPECT_NEAR(acc.result().miou, (2.0 / 3.0 + 0.5) / 2.0, 1e-15);
}

TEST(Infer, PerfectEmbeddingsAndScaleInvariance) {
  std::vector<LabelRecord> recs{{0, "a", "", {1, 0}}, {0, "b", "", {0, 1}}};
  const LabelSpace sp(std::move(recs));
  SegModel m = init_model(2, {}, 2, 0);
  auto w = m.weights[0].mutable_data();
  w[0] = 1.0, w[1] = 0.0, w[2] = 0.0, w[3] = 1.0;
  const Tensor f({1, 3, 2}, {2.0, 1.0, 0.1, 3.0, 1.0, 1.0});
  EXPECT_EQ(infer(m, f, sp).ids, (std::vector<int>{0, 1, 0}));  // tie -> lowest id
  for (double c : {1e-3, 7.0, 1e4}) {
    for (auto& x : w) x *= c;
    EXPECT_EQ(infer(m, f, sp).ids, (std::vector<int>{0, 1, 0}));
    for (auto& x : w) x /= c;
  }
  EXPECT_THROW(infer(init_model(2, {}, 3, 0), f, sp), DimensionMismatch);
}

TEST(ZeroShot, DuplicateEmbeddingLosesTieAndEmptyHeldout) {
  std::vector<LabelRecord> recs{{0, "a", "", {1, 0}}, {0, "b", "", {0, 1}}};
  const LabelSpace sp(std::move(recs));
  SegModel m = init_model(2, {}, 2, 0);
  auto w = m.weights[0].mutable_data();
  w[0] = 1.0, w[1] = 0.0, w[2] = 0.0, w[3] = 1.0;
  const EvalScene scene{Tensor({1, 2, 2}, {1.0, 0.0, 0.0, 1.0}), map_of(1, 2, {0, 1})};
  const auto rep = zero_shot_eval(m, sp, {{0, "a2", "", {2, 0}}}, {scene});
  ASSERT_EQ(rep.heldout_ids, (std::vector<std::size_t>{2}));
  EXPECT_FALSE(rep.heldout_iou[0].has_value());
  EXPECT_FALSE(rep.heldout_miou.has_value());
  EXPECT_DOUBLE_EQ(rep.overall.miou, 1.0);
  const auto none = zero_shot_eval(m, sp, {}, {scene});
  EXPECT_TRUE(none.heldout_ids.empty());
  EXPECT_THROW(zero_shot_eval(m, sp, {{0, "x", "", {1, 0, 0}}}, {scene}), DimensionMismatch);
}

TEST(Train, AllTiersOffIsEmptyBatch) {
  auto cfg = tiny_config();
  cfg.train.use_hd = cfg.train.use_ld = cfg.train.use_wd = false;
  const Experiment ex = prepare_experiment(cfg);
  EXPECT_THROW(train(cfg.train, ex.base_space, ex.pools), EmptyBatch);
}

TEST(Train, DeterministicForSeed) {
  const Experiment ex = prepare_experiment(tiny_config());
  const auto a = run_experiment(ex), b = run_experiment(ex);
  ASSERT_EQ(a.report.steps.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(a.report.steps[i].total, b.report.steps[i].total);
    EXPECT_EQ(a.report.steps[i].tau, b.report.steps[i].tau);
  }
  EXPECT_EQ(a.report.eval.miou, b.report.eval.miou);
  std::ostringstream ca, cb;
  write_metrics_csv(ca, a.report.steps);
  write_metrics_csv(cb, b.report.steps);
  EXPECT_EQ(ca.str(), cb.str());
  EXPECT_EQ(ca.str().substr(0, ca.str().find('\n')), kMetricsCsvHeader);
}

TEST(Train, MixedBatchRecordsEveryTerm) {
  const Experiment ex = prepare_experiment(tiny_config());
  const auto r = train(ex.config.train, ex.base_space, ex.pools);
  for (const auto& s : r.steps) {
    EXPECT_GT(s.l_hd, 0.0);
    EXPECT_GT(s.l_ld, 0.0);
    EXPECT_GT(s.l_wd, 0.0);
    EXPECT_NEAR(s.total, s.l_hd + s.l_ld + s.l_wd, 1e-12);
    EXPECT_NEAR(s.kept_fraction, 0.7, 0.05);
  }
}

TEST(Train, InitModelIsNotModified) {
  const Experiment ex = prepare_experiment(tiny_config());
  const SegModel init = init_model(4, {8}, 8, 3);
  const double before = init.weights[0].data()[0];
  train(ex.config.train, ex.base_space, ex.pools, init);
  EXPECT_EQ(init.weights[0].data()[0], before);
}

TEST(Experiment, HeldoutSplitAndRemap) {
  auto cfg = tiny_config();
  cfg.world.per_block = 3;
  cfg.heldout_per_block = 1;
  const Experiment ex = prepare_experiment(cfg);
  EXPECT_EQ(ex.seen, (std::vector<std::size_t>{0, 1, 3, 4}));
  EXPECT_EQ(ex.heldout, (std::vector<std::size_t>{2, 5}));
  EXPECT_EQ(ex.base_space.size(), 4u);
  for (const auto& pool : ex.pools)
    for (const auto& s : pool)
      for (int id : s.truth.ids) EXPECT_LT(id, 4);
  bool heldout_seen = false;
  for (const auto& s : make_eval_scenes(ex, 8, true))
    for (int id : s.truth.ids) heldout_seen |= id >= 4;
  EXPECT_TRUE(heldout_seen);
}

TEST(Config, ParsesShippedConfigs) {
  for (const char* name : {"hd_clean", "ld_noisy", "ld_noisy_no_rejection", "wd_distill",
                           "mixed_tiers", "zeroshot_structured", "zeroshot_scrambled"}) {
    std::ifstream is(std::string(EMBSEG_SOURCE_DIR) + "/configs/" + name + ".json");
    ASSERT_TRUE(is) << name;
    const auto cfg = parse_config(nlohmann::json::parse(is));
    EXPECT_NO_THROW(cfg.train.validate()) << name;
    // to_json is lossless.
    EXPECT_EQ(to_json(parse_config(to_json(cfg))), to_json(cfg)) << name;
  }
}

TEST(Config, ReportsEveryProblem) {
  const auto j = nlohmann::json::parse(R"({
    "seed": 1, "bogus": 3,
    "world": {"n_blocks": "two"},
    "train": {"lr0": -1}
  })");
  try {
    parse_config(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    EXPECT_EQ(e.problems().size(), 3u);
    EXPECT_NE(what.find("bogus"), std::string::npos);
    EXPECT_NE(what.find("world.n_blocks"), std::string::npos);
    EXPECT_NE(what.find("train.total_steps"), std::string::npos);
  }
}

TEST(Config, RangeChecksAfterSchema) {
  const auto j = nlohmann::json::parse(R"({
    "world": {"within_corr": 1.5},
    "train": {"lr0": -1, "total_steps": 10}
  })");
  try {
    parse_config(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("train.lr0"), std::string::npos);
    EXPECT_NE(what.find("world.within_corr"), std::string::npos);
  }
}
