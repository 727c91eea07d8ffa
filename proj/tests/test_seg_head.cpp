#include <cmath>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "embseg/rng.hpp"
#include "embseg/seg_head.hpp"

using namespace embseg;

namespace {

Tensor random_features(Rng& rng, std::size_t h, std::size_t w, std::size_t f) {
  std::vector<double> v(h * w * f);
  for (auto& x : v) x = gaussian(rng);
  return Tensor({h, w, f}, std::move(v));
}

}  // namespace

TEST(SegModel, ParameterCount) {
  const SegModel m = init_model(8, {16}, 32, 0);
  EXPECT_EQ(m.parameter_count(), 8u * 16 + 16 + 16 * 32 + 32 + 32 * 32 + 1);
  EXPECT_EQ(init_model(3, {}, 2, 0).parameter_count(), 3u * 2 + 2 + 2 * 2 + 1);
}

TEST(SegModel, InitDefaults) {
  const SegModel m = init_model(4, {5}, 3, 11);
  EXPECT_NEAR(m.tau(), 0.07, 1e-12);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m.proj.data()[i * 3 + j], i == j ? 1.0 : 0.0);
  for (const auto& b : m.biases)
    for (double x : b.data()) EXPECT_EQ(x, 0.0);
  const double s = std::sqrt(6.0 / 9.0);
  for (double x : m.weights[0].data()) EXPECT_LE(std::abs(x), s);
}

TEST(SegModel, InitRejectsBadArguments) {
  EXPECT_THROW(init_model(0, {}, 3, 0), ShapeError);
  EXPECT_THROW(init_model(3, {0}, 3, 0), ShapeError);
  EXPECT_THROW(init_model(3, {}, 3, 0, 0.0), DomainError);
}

TEST(SegModel, SameSeedSameWeights) {
  const SegModel a = init_model(6, {7, 5}, 4, 99);
  const SegModel b = init_model(6, {7, 5}, 4, 99);
  const SegModel c = init_model(6, {7, 5}, 4, 100);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(),
                           pb[i].tensor.data().begin()));
    differs |= !std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(),
                           pc[i].tensor.data().begin());
  }
  EXPECT_TRUE(differs);
}

TEST(SegModel, CloneOwnsItsLeaves) {
  const SegModel a = init_model(2, {}, 2, 1);
  SegModel b = a.clone();
  b.weights[0].mutable_data()[0] += 1.0;
  EXPECT_NE(a.weights[0].data()[0], b.weights[0].data()[0]);
}

TEST(Forward, ShapeAndErrors) {
  Rng rng(1);
  const SegModel m = init_model(5, {6}, 3, 2);
  const EmbeddingMap e = forward(m, random_features(rng, 4, 7, 5));
  EXPECT_EQ(e.height(), 4u);
  EXPECT_EQ(e.width(), 7u);
  EXPECT_EQ(e.channels(), 3u);
  EXPECT_THROW(forward(m, random_features(rng, 4, 7, 6)), ShapeError);
  EXPECT_THROW(forward(m, Tensor::zeros({4, 5})), ShapeError);
}

TEST(Forward, ZeroWeightsGiveBias) {
  Rng rng(2);
  SegModel m = init_model(3, {4}, 2, 0);
  for (auto p : m.parameters()) {
    if (p.name.find("weight") != std::string::npos && p.name != "proj.weight")
      std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0);
  }
  m.biases[1].mutable_data()[0] = 0.25;
  m.biases[1].mutable_data()[1] = -1.5;
  const EmbeddingMap e = forward(m, random_features(rng, 3, 3, 3));
  for (std::size_t p = 0; p < 9; ++p) {
    EXPECT_EQ(e.values.data()[p * 2], 0.25);
    EXPECT_EQ(e.values.data()[p * 2 + 1], -1.5);
  }
}

TEST(Forward, PixelDependsOnlyOnItsFeatures) {
  Rng rng(3);
  const SegModel m = init_model(4, {8}, 3, 5);
  const Tensor f = random_features(rng, 5, 5, 4);
  const EmbeddingMap e = forward(m, f);
  for (std::size_t p = 0; p < 25; ++p) {
    const std::vector<double> row(f.data().begin() + p * 4, f.data().begin() + p * 4 + 4);
    const Tensor single = forward_rows(m, Tensor({1, 4}, row));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(single.data()[c], e.values.data()[p * 3 + c], 1e-12);
  }
}

TEST(Forward, Deterministic) {
  Rng rng(4);
  const SegModel m = init_model(4, {8}, 3, 5);
  const Tensor f = random_features(rng, 6, 6, 4);
  const EmbeddingMap ea = forward(m, f), eb = forward(m, f);
  const auto a = ea.values.data(), b = eb.values.data();
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(RoiEmbed, IdentityProjAveragesTheCrop) {
  const SegModel m = init_model(1, {}, 2, 0);
  // 1 x 2 map with V = a, b.
  const EmbeddingMap e{Tensor({1, 2, 2}, {1.0, 2.0, 3.0, -4.0})};
  const Tensor r = roi_embed(m, e, {0, 0, 1, 2});
  EXPECT_DOUBLE_EQ(r.data()[0], 2.0);
  EXPECT_DOUBLE_EQ(r.data()[1], -1.0);
  const Tensor one = roi_embed(m, e, {0, 1, 1, 2});
  EXPECT_DOUBLE_EQ(one.data()[0], 3.0);
}

TEST(RoiEmbed, FullBoxEqualsGlobalMean) {
  Rng rng(5);
  const SegModel m = init_model(2, {}, 3, 0);
  std::vector<double> v(4 * 5 * 3);
  for (auto& x : v) x = gaussian(rng);
  const EmbeddingMap e{Tensor({4, 5, 3}, v)};
  const Tensor r = roi_embed(m, e, {0, 0, 4, 5});
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < 20; ++p) s += v[p * 3 + c];
    EXPECT_NEAR(r.data()[c], s / 20.0, 1e-12);
  }
}

TEST(RoiEmbed, InvalidBoxes) {
  const SegModel m = init_model(1, {}, 2, 0);
  const EmbeddingMap e{Tensor::zeros({3, 3, 2})};
  EXPECT_THROW(roi_embed(m, e, {1, 1, 1, 2}), ShapeError);  // empty
  EXPECT_THROW(roi_embed(m, e, {0, 0, 4, 2}), ShapeError);  // out of bounds
  EXPECT_THROW(roi_embed(m, e, {2, 0, 1, 2}), ShapeError);  // inverted
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto dir = std::filesystem::temp_directory_path() / "embseg_test_ckpt";
  std::filesystem::remove_all(dir);
  SegModel m = init_model(4, {6, 5}, 3, 17, 0.2);
  m.biases[0].mutable_data()[2] = 0.123456789012345;
  save_checkpoint(dir, m);
  const SegModel back = load_checkpoint(dir);
  EXPECT_EQ(back.widths, m.widths);
  const auto pa = m.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].tensor.shape(), pb[i].tensor.shape());
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(),
                           pb[i].tensor.data().begin()))
        << pa[i].name;
  }
  EXPECT_THROW(load_checkpoint(dir / "missing"), IoError);
}
