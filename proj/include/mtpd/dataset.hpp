#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mtpd/error.hpp"
#include "mtpd/rng.hpp"
#include "mtpd/tensor.hpp"

namespace mtpd {

enum class Split { kTrain, kVal };

struct Dataset {
  Tensor inputs;                    // [N x D]
  std::vector<std::size_t> labels;  // N entries in [0, num_classes)
  std::size_t num_classes = 0;
  Split split = Split::kTrain;
  std::uint64_t gen_seed = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dims() const { return inputs.dim(1); }

  Dataset subset(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw ArgumentError("Dataset::subset: empty selection");
    Dataset out{Tensor({indices.size(), dims()}), {}, num_classes, split, gen_seed};
    out.labels.reserve(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
      if (indices[r] >= size()) throw ArgumentError("Dataset::subset: index out of range");
      std::copy_n(inputs.data() + indices[r] * dims(), dims(), out.inputs.data() + r * dims());
      out.labels.push_back(labels[indices[r]]);
    }
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct SynthConfig {
  std::size_t classes = 8;
  std::size_t dims = 32;
  std::size_t n_train = 512;
  std::size_t n_val = 2048;
  double noise_sigma = 0.6;
  std::uint64_t seed = 0;
};

/// Unit-norm class prototypes. They occupy the first `classes` coordinates;
/// the remaining dims - classes coordinates are pure nuisance.
inline Tensor synth_prototypes(const SynthConfig& cfg) {
  if (cfg.classes < 2) throw ArgumentError("synth_dataset: need at least 2 classes");
  if (cfg.dims < cfg.classes) throw ArgumentError("synth_dataset: dims must be >= classes");
  RngStream rng(derive_seed(cfg.seed, "prototypes"));
  Tensor protos({cfg.classes, cfg.dims});
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    double norm = 0.0;
    while (norm < 1e-6) {
      norm = 0.0;
      for (std::size_t d = 0; d < cfg.classes; ++d) {
        protos(k, d) = rng.normal();
        norm += protos(k, d) * protos(k, d);
      }
    }
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < cfg.classes; ++d) protos(k, d) /= norm;
  }
  return protos;
}

/// `count` samples from the task defined by cfg, drawn from an independent
/// sub-stream named `stream`. Labels cycle 0, 1, ..., K-1 so every class appears
/// once count >= K.
inline Dataset synth_samples(const SynthConfig& cfg, std::size_t count, std::string_view stream,
                             Split split) {
  if (count == 0) throw ArgumentError("synth_dataset: split sizes must be positive");
  if (!(cfg.noise_sigma >= 0.0)) throw ArgumentError("synth_dataset: noise_sigma must be >= 0");
  const Tensor protos = synth_prototypes(cfg);
  RngStream rng(derive_seed(cfg.seed, stream));
  Dataset out{Tensor({count, cfg.dims}), {}, cfg.classes, split, cfg.seed};
  out.labels.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = i % cfg.classes;
    out.labels.push_back(label);
    for (std::size_t d = 0; d < cfg.dims; ++d) {
      const double noise = cfg.noise_sigma > 0.0 ? cfg.noise_sigma * rng.normal() : 0.0;
      out.inputs(i, d) = protos(label, d) + noise;
    }
  }
  return out;
}

inline std::pair<Dataset, Dataset> synth_dataset(const SynthConfig& cfg) {
  if (cfg.n_train == 0 || cfg.n_val == 0) throw ArgumentError("synth_dataset: split sizes must be positive");
  return {synth_samples(cfg, cfg.n_train, "train", Split::kTrain),
          synth_samples(cfg, cfg.n_val, "val", Split::kVal)};
}

}  // namespace mtpd
