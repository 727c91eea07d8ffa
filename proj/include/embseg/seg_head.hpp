#pragma once

// Per-pixel embedding predictor and the box-distillation branch.
//
// The predictor is an affine+relu stack applied independently at every
// pixel of an H x W x F feature grid, producing an H x W x C embedding map.
// The distillation branch applies a C x C linear projection (a 1x1
// convolution) to a cropped region of that map and average-pools it.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "embseg/errors.hpp"
#include "embseg/rng.hpp"
#include "embseg/tensor.hpp"
#include "embseg/tensor_io.hpp"

namespace embseg {

// Half-open pixel rectangle [row0, row1) x [col0, col1).
struct Box {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;

  std::size_t height() const { return row1 - row0; }
  std::size_t width() const { return col1 - col0; }
  bool operator==(const Box&) const = default;
};

inline void validate_box(const Box& b, std::size_t height, std::size_t width) {
  if (!(b.row0 < b.row1 && b.row1 <= height && b.col0 < b.col1 && b.col1 <= width)) {
    throw ShapeError("box [" + std::to_string(b.row0) + "," + std::to_string(b.row1) + ")x[" +
                     std::to_string(b.col0) + "," + std::to_string(b.col1) +
                     ") invalid for a " + std::to_string(height) + "x" +
                     std::to_string(width) + " map");
  }
}

// H x W x C predicted embeddings.
struct EmbeddingMap {
  Tensor values;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(2); }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class SegModel {
 public:
  std::vector<std::size_t> widths;  // [F, h1, ..., C]
  std::vector<Tensor> weights;      // fan_in x fan_out
  std::vector<Tensor> biases;       // 1 x fan_out
  Tensor proj;                      // C x C, row-vector convention x * proj
  Tensor log_tau;                   // rank-0

  std::size_t feature_dim() const { return widths.front(); }
  std::size_t embed_dim() const { return widths.back(); }
  double tau() const { return std::exp(log_tau.item()); }

  // Handles share storage with the model, so optimizers update in place.
  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back({"layer" + std::to_string(l) + ".weight", weights[l]});
      out.push_back({"layer" + std::to_string(l) + ".bias", biases[l]});
    }
    out.push_back({"proj.weight", proj});
    out.push_back({"log_tau", log_tau});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  void zero_grad() const {
    for (auto p : parameters()) p.tensor.zero_grad();
  }

  // Deep copy: the clone owns fresh leaves.
  SegModel clone() const {
    SegModel m;
    m.widths = widths;
    for (const auto& w : weights) m.weights.push_back(w.clone_leaf(true));
    for (const auto& b : biases) m.biases.push_back(b.clone_leaf(true));
    m.proj = proj.clone_leaf(true);
    m.log_tau = log_tau.clone_leaf(true);
    return m;
  }
};

// Glorot-uniform weights, zero biases, identity projection, tau = tau_init.
inline SegModel init_model(std::size_t feature_dim, const std::vector<std::size_t>& hidden,
                           std::size_t embed_dim, std::uint64_t seed, double tau_init = 0.07) {
  if (feature_dim < 1 || embed_dim < 1) throw ShapeError("init_model: F and C must be >= 1");
  if (!(tau_init > 0.0)) throw DomainError("init_model: tau_init must be > 0");
  for (auto h : hidden) {
    if (h < 1) throw ShapeError("init_model: hidden widths must be >= 1");
  }
  SegModel m;
  m.widths.push_back(feature_dim);
  m.widths.insert(m.widths.end(), hidden.begin(), hidden.end());
  m.widths.push_back(embed_dim);
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < m.widths.size(); ++l) {
    const std::size_t in = m.widths[l], out = m.widths[l + 1];
    const double s = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<double> w(in * out);
    for (auto& x : w) x = uniform(rng, -s, s);
    m.weights.emplace_back(Shape{in, out}, std::move(w), true);
    m.biases.push_back(Tensor::zeros({1, out}, true));
  }
  std::vector<double> eye(embed_dim * embed_dim, 0.0);
  for (std::size_t i = 0; i < embed_dim; ++i) eye[i * embed_dim + i] = 1.0;
  m.proj = Tensor({embed_dim, embed_dim}, std::move(eye), true);
  m.log_tau = Tensor::scalar(std::log(tau_init), true);
  return m;
}

// Applies the stack to every row of an (P x F) matrix.
inline Tensor forward_rows(const SegModel& model, const Tensor& rows) {
  if (rows.rank() != 2 || rows.dim(1) != model.feature_dim()) {
    throw ShapeError("forward: expected P x " + std::to_string(model.feature_dim()) +
                     " features, got " + shape_str(rows.shape()));
  }
  const Tensor ones = Tensor::full({rows.dim(0), 1}, 1.0);
  Tensor x = rows;
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    x = add(matmul(x, model.weights[l]), matmul(ones, model.biases[l]));
    if (l + 1 < model.weights.size()) x = relu(x);
  }
  return x;
}

// features: H x W x F  ->  H x W x C
inline EmbeddingMap forward(const SegModel& model, const Tensor& features) {
  if (features.rank() != 3 || features.dim(2) != model.feature_dim()) {
    throw ShapeError("forward: expected H x W x " + std::to_string(model.feature_dim()) +
                     " features, got " + shape_str(features.shape()));
  }
  const std::size_t h = features.dim(0), w = features.dim(1);
  Tensor out = forward_rows(model, reshape(features, {h * w, model.feature_dim()}));
  return {reshape(out, {h, w, model.embed_dim()})};
}

// proj applied per pixel over the crop, then averaged over the crop: a C-vector.
inline Tensor roi_embed(const SegModel& model, const EmbeddingMap& map, const Box& box) {
  validate_box(box, map.height(), map.width());
  const std::size_t c = map.channels();
  if (c != model.embed_dim()) {
    throw ShapeError("roi_embed: map has " + std::to_string(c) + " channels, model expects " +
                     std::to_string(model.embed_dim()));
  }
  Tensor crop = slice(map.values, {box.row0, box.col0, 0}, {box.row1, box.col1, c});
  Tensor flat = reshape(crop, {box.height() * box.width(), c});
  return mean(matmul(flat, model.proj), 0);
}

// Checkpoint: <dir>/manifest.json plus one tensor file per parameter.
inline void save_checkpoint(const std::filesystem::path& dir, const SegModel& model) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["widths"] = model.widths;
  manifest["parameters"] = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    const std::string file = p.name + ".tnsr";
    save_tensor(dir / file, p.tensor);
    manifest["parameters"].push_back(
        {{"name", p.name}, {"shape", p.tensor.shape()}, {"file", file}});
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

inline SegModel load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("cannot read " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint manifest: ") + e.what());
  }
  const auto widths = manifest.at("widths").get<std::vector<std::size_t>>();
  if (widths.size() < 2) throw ParseError("checkpoint manifest: need at least two widths");
  SegModel model = init_model(widths.front(), {widths.begin() + 1, widths.end() - 1},
                              widths.back(), 0);
  for (const auto& entry : manifest.at("parameters")) {
    const auto name = entry.at("name").get<std::string>();
    const Tensor loaded = load_tensor(dir / entry.at("file").get<std::string>());
    bool matched = false;
    for (auto p : model.parameters()) {
      if (p.name != name) continue;
      if (p.tensor.shape() != loaded.shape()) {
        throw ShapeError("checkpoint: parameter " + name + " has shape " +
                         shape_str(loaded.shape()) + ", expected " +
                         shape_str(p.tensor.shape()));
      }
      std::copy(loaded.data().begin(), loaded.data().end(), p.tensor.mutable_data().begin());
      matched = true;
    }
    if (!matched) throw ParseError("checkpoint: unknown parameter " + name);
  }
  return model;
}

}  // namespace embseg
