#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mtpd/error.hpp"
#include "mtpd/rng.hpp"
#include "mtpd/tensor.hpp"

namespace mtpd {

enum class Role { kStudent, kTeacher };

inline const char* to_string(Role role) { return role == Role::kStudent ? "student" : "teacher"; }

struct NeckLevel {
  std::size_t channels = 0;
  std::size_t positions = 0;

  std::size_t size() const noexcept { return channels * positions; }
  friend bool operator==(const NeckLevel&, const NeckLevel&) = default;
};

/// Architecture of a detector surrogate: an affine+ReLU backbone, one affine
/// projection per neck level (reshaped to channels x positions) and an affine
/// head over the concatenated levels.
struct ModelSpec {
  std::string id;
  Role role = Role::kStudent;
  std::size_t input_dim = 0;
  std::vector<std::size_t> backbone;
  std::vector<NeckLevel> neck;
  std::size_t num_classes = 0;

  void validate() const {
    if (id.empty()) throw ArgumentError("model spec: empty id");
    if (input_dim == 0) throw ArgumentError("model spec '" + id + "': input_dim must be >= 1");
    if (num_classes == 0) throw ArgumentError("model spec '" + id + "': num_classes must be >= 1");
    if (neck.empty()) throw ArgumentError("model spec '" + id + "': needs at least one neck level");
    for (std::size_t w : backbone) {
      if (w == 0) throw ArgumentError("model spec '" + id + "': zero backbone width");
    }
    for (const auto& level : neck) {
      if (level.channels == 0 || level.positions == 0) {
        throw ArgumentError("model spec '" + id + "': zero neck extent");
      }
    }
  }

  std::size_t hidden_dim() const { return backbone.empty() ? input_dim : backbone.back(); }

  std::size_t neck_width() const {
    std::size_t total = 0;
    for (const auto& level : neck) total += level.size();
    return total;
  }

  // (out, in) for every affine layer in declaration order: backbone, neck, head.
  std::vector<std::pair<std::size_t, std::size_t>> layer_dims() const {
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    std::size_t in = input_dim;
    for (std::size_t w : backbone) {
      dims.emplace_back(w, in);
      in = w;
    }
    for (const auto& level : neck) dims.emplace_back(level.size(), in);
    dims.emplace_back(num_classes, neck_width());
    return dims;
  }

  std::size_t parameter_count() const {
    std::size_t count = 0;
    for (auto [out, in] : layer_dims()) count += out * in + out;
    return count;
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct Layer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  friend bool operator==(const Layer&, const Layer&) = default;
};

// One entry per layer, same shapes as the model's parameters.
using Gradients = std::vector<Layer>;

struct Model {
  ModelSpec spec;
  std::vector<Layer> layers;
  std::uint64_t init_seed = 0;

  std::size_t backbone_depth() const { return spec.backbone.size(); }
  std::size_t neck_layer(std::size_t level) const { return spec.backbone.size() + level; }
  std::size_t head_layer() const { return spec.backbone.size() + spec.neck.size(); }

  friend bool operator==(const Model&, const Model&) = default;
};

/// Neck outputs for a batch: one [B x C_l x P_l] tensor per level.
struct FeatureSet {
  std::vector<Tensor> levels;

  std::size_t batch() const { return levels.empty() ? 0 : levels.front().dim(0); }

  std::vector<NeckLevel> level_shapes() const {
    std::vector<NeckLevel> shapes;
    for (const auto& t : levels) shapes.push_back({t.dim(1), t.dim(2)});
    return shapes;
  }

  // Rows `indices` of every level, in that order.
  FeatureSet gather(std::span<const std::size_t> indices) const {
    FeatureSet out;
    for (const auto& level : levels) {
      const std::size_t stride = level.dim(1) * level.dim(2);
      Tensor t({indices.size(), level.dim(1), level.dim(2)});
      for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= level.dim(0)) throw ArgumentError("FeatureSet::gather: index out of range");
        std::copy_n(level.data() + indices[r] * stride, stride, t.data() + r * stride);
      }
      out.levels.push_back(std::move(t));
    }
    return out;
  }

  friend bool operator==(const FeatureSet&, const FeatureSet&) = default;
};

// Activations retained by forward() for the backward pass.
struct Tape {
  Tensor input;                 // [B x D]
  std::vector<Tensor> hidden;   // post-ReLU backbone activations
  Tensor neck;                  // [B x sum(C_l P_l)], concatenated levels
  std::vector<Shape> parameter_shapes;
};

struct ForwardResult {
  FeatureSet features;
  Tensor logits;  // [B x K]
  Tape tape;
};

// Output-side gradients of a scalar loss. Empty tensors stand for zero.
struct OutputGrads {
  Tensor logits;
  std::vector<Tensor> features;
};

namespace detail {

inline std::vector<Shape> parameter_shapes(const Model& model) {
  std::vector<Shape> shapes;
  for (const auto& layer : model.layers) {
    shapes.push_back(layer.weight.shape());
    shapes.push_back(layer.bias.shape());
  }
  return shapes;
}

inline Tensor affine(const Tensor& x, const Layer& layer) {
  Tensor y = matmul_nt(x, layer.weight);
  const std::size_t out = y.dim(1);
  for (std::size_t i = 0; i < y.dim(0); ++i)
    for (std::size_t j = 0; j < out; ++j) y(i, j) += layer.bias[j];
  return y;
}

}  // namespace detail

/// Weights uniform(-s, s) with s = sqrt(1 / fan_in), biases zero.
inline Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model model{spec, {}, seed};
  RngStream rng(seed);
  for (auto [out, in] : spec.layer_dims()) {
    const double s = std::sqrt(1.0 / static_cast<double>(in));
    model.layers.push_back({random_uniform({out, in}, -s, s, rng), Tensor({out})});
  }
  return model;
}

inline ForwardResult forward(const Model& model, const Tensor& inputs) {
  if (inputs.rank() != 2 || inputs.dim(1) != model.spec.input_dim) {
    throw DimensionError("forward: model '" + model.spec.id + "' expects [B x " +
                         std::to_string(model.spec.input_dim) + "] inputs, got " +
                         shape_string(inputs.shape()));
  }
  ForwardResult result;
  result.tape.input = inputs;
  result.tape.parameter_shapes = detail::parameter_shapes(model);

  const Tensor* h = &inputs;
  for (std::size_t i = 0; i < model.backbone_depth(); ++i) {
    Tensor a = detail::affine(*h, model.layers[i]);
    for (double& v : a.values()) v = v > 0.0 ? v : 0.0;
    result.tape.hidden.push_back(std::move(a));
    h = &result.tape.hidden.back();
  }

  const std::size_t batch = inputs.dim(0);
  Tensor neck({batch, model.spec.neck_width()});
  std::size_t offset = 0;
  for (std::size_t l = 0; l < model.spec.neck.size(); ++l) {
    const NeckLevel level = model.spec.neck[l];
    Tensor z = detail::affine(*h, model.layers[model.neck_layer(l)]);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(z.data() + b * level.size(), level.size(), neck.data() + b * neck.dim(1) + offset);
    result.features.levels.push_back(z.reshaped({batch, level.channels, level.positions}));
    offset += level.size();
  }
  result.logits = detail::affine(neck, model.layers[model.head_layer()]);
  result.tape.neck = std::move(neck);
  return result;
}

/// Reverse-mode gradients of the scalar loss whose output gradients are given.
inline Gradients backward(const Model& model, const Tape& tape, const OutputGrads& grads) {
  if (tape.parameter_shapes != detail::parameter_shapes(model)) {
    throw StateError("backward: tape was recorded for different parameter shapes");
  }
  const std::size_t batch = tape.input.dim(0);
  const std::size_t depth = model.backbone_depth();
  Gradients out;
  for (const auto& layer : model.layers) out.push_back({Tensor(layer.weight.shape()), Tensor(layer.bias.shape())});

  auto accumulate_affine = [&](std::size_t index, const Tensor& dy, const Tensor& x) {
    out[index].weight = matmul_tn(dy, x);
    for (std::size_t i = 0; i < dy.dim(0); ++i)
      for (std::size_t j = 0; j < dy.dim(1); ++j) out[index].bias[j] += dy(i, j);
  };

  // d(neck concat)
  Tensor dneck({batch, model.spec.neck_width()});
  if (!grads.logits.empty()) {
    if (grads.logits.shape() != Shape{batch, model.spec.num_classes}) {
      throw DimensionError("backward: logits gradient has shape " + shape_string(grads.logits.shape()));
    }
    accumulate_affine(model.head_layer(), grads.logits, tape.neck);
    dneck = matmul(grads.logits, model.layers[model.head_layer()].weight);
  }
  if (!grads.features.empty()) {
    if (grads.features.size() != model.spec.neck.size()) {
      throw DimensionError("backward: expected " + std::to_string(model.spec.neck.size()) +
                           " feature gradients, got " + std::to_string(grads.features.size()));
    }
    std::size_t offset = 0;
    for (std::size_t l = 0; l < model.spec.neck.size(); ++l) {
      const NeckLevel level = model.spec.neck[l];
      const Tensor& g = grads.features[l];
      if (!g.empty()) {
        if (g.shape() != Shape{batch, level.channels, level.positions}) {
          throw DimensionError("backward: feature gradient " + std::to_string(l) + " has shape " +
                               shape_string(g.shape()));
        }
        for (std::size_t b = 0; b < batch; ++b) {
          double* dst = dneck.data() + b * dneck.dim(1) + offset;
          const double* src = g.data() + b * level.size();
          for (std::size_t i = 0; i < level.size(); ++i) dst[i] += src[i];
        }
      }
      offset += level.size();
    }
  }

  const Tensor& last_hidden = depth ? tape.hidden.back() : tape.input;
  Tensor dh({batch, model.spec.hidden_dim()});
  std::size_t offset = 0;
  for (std::size_t l = 0; l < model.spec.neck.size(); ++l) {
    const std::size_t width = model.spec.neck[l].size();
    Tensor dz({batch, width});
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(dneck.data() + b * dneck.dim(1) + offset, width, dz.data() + b * width);
    accumulate_affine(model.neck_layer(l), dz, last_hidden);
    axpy(1.0, matmul(dz, model.layers[model.neck_layer(l)].weight), dh);
    offset += width;
  }

  for (std::size_t i = depth; i-- > 0;) {
    const Tensor& activation = tape.hidden[i];
    for (std::size_t e = 0; e < dh.size(); ++e)
      if (activation[e] <= 0.0) dh[e] = 0.0;
    const Tensor& x = i ? tape.hidden[i - 1] : tape.input;
    accumulate_affine(i, dh, x);
    if (i) dh = matmul(dh, model.layers[i].weight);
  }
  return out;
}

// Concatenated view of every parameter, declaration order (weight then bias).
inline std::vector<double> flatten_parameters(const std::vector<Layer>& layers) {
  std::vector<double> flat;
  for (const auto& layer : layers) {
    flat.insert(flat.end(), layer.weight.values().begin(), layer.weight.values().end());
    flat.insert(flat.end(), layer.bias.values().begin(), layer.bias.values().end());
  }
  return flat;
}

}  // namespace mtpd
