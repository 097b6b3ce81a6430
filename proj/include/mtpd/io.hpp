#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "mtpd/dataset.hpp"
#include "mtpd/error.hpp"
#include "mtpd/model.hpp"
#include "mtpd/rng.hpp"

namespace mtpd {

inline constexpr std::string_view kCheckpointMagic = "MTPDCKPT";
inline constexpr std::string_view kDatasetMagic = "MTPDDATA";
inline constexpr std::string_view kFeatureMagic = "MTPDFEAT";
inline constexpr std::uint32_t kFormatVersion = 1;

namespace detail {

// Little-endian byte sink.
class ByteWriter {
 public:
  void raw(std::string_view bytes) { buf_.append(bytes); }
  template <class T>
  void le(T value) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void str(std::string_view s) {
    le(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  const std::string& bytes() const noexcept { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::string_view raw(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw IoError(what_ + ": truncated payload");
    const auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  template <class T>
  T le() {
    const auto b = raw(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return static_cast<T>(v);
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  std::string str() {
    const auto n = le<std::uint32_t>();
    return std::string(raw(n));
  }
  void expect_magic(std::string_view magic) {
    if (raw(magic.size()) != magic) throw IoError(what_ + ": bad magic, expected " + std::string(magic));
    const auto version = le<std::uint32_t>();
    if (version != kFormatVersion) throw IoError(what_ + ": unsupported format version " + std::to_string(version));
  }
  void expect_end() const {
    if (pos_ != bytes_.size()) throw IoError(what_ + ": trailing bytes");
  }
  // Guards allocation sizes read from untrusted headers.
  std::size_t count(std::uint64_t n, std::size_t element_bytes) const {
    if (element_bytes && n > (bytes_.size() - pos_) / element_bytes) throw IoError(what_ + ": implausible element count");
    return static_cast<std::size_t>(n);
  }

 private:
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

/// "MTPDCKPT", u32 version, spec, init seed, then every parameter as a
/// little-endian f64 in declaration order (per layer: weight, bias).
inline std::string encode_checkpoint(const Model& model) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic);
  w.le(kFormatVersion);
  const ModelSpec& s = model.spec;
  w.str(s.id);
  w.le(static_cast<std::uint8_t>(s.role == Role::kStudent ? 0 : 1));
  w.le(static_cast<std::uint64_t>(s.input_dim));
  w.le(static_cast<std::uint64_t>(s.backbone.size()));
  for (auto width : s.backbone) w.le(static_cast<std::uint64_t>(width));
  w.le(static_cast<std::uint64_t>(s.neck.size()));
  for (const auto& level : s.neck) {
    w.le(static_cast<std::uint64_t>(level.channels));
    w.le(static_cast<std::uint64_t>(level.positions));
  }
  w.le(static_cast<std::uint64_t>(s.num_classes));
  w.le(model.init_seed);
  for (double v : flatten_parameters(model.layers)) w.f64(v);
  return w.bytes();
}

inline Model decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  r.expect_magic(kCheckpointMagic);
  ModelSpec s;
  s.id = r.str();
  s.role = r.le<std::uint8_t>() == 0 ? Role::kStudent : Role::kTeacher;
  s.input_dim = r.le<std::uint64_t>();
  s.backbone.resize(r.count(r.le<std::uint64_t>(), 8));
  for (auto& width : s.backbone) width = r.le<std::uint64_t>();
  s.neck.resize(r.count(r.le<std::uint64_t>(), 16));
  for (auto& level : s.neck) {
    level.channels = r.le<std::uint64_t>();
    level.positions = r.le<std::uint64_t>();
  }
  s.num_classes = r.le<std::uint64_t>();
  try {
    s.validate();
  } catch (const ArgumentError& e) {
    throw IoError(std::string("checkpoint: invalid spec: ") + e.what());
  }
  Model model{s, {}, r.le<std::uint64_t>()};
  for (auto [out, in] : s.layer_dims()) {
    r.count(out * in + out, 8);
    Layer layer{Tensor({out, in}), Tensor({out})};
    for (double& v : layer.weight.values()) v = r.f64();
    for (double& v : layer.bias.values()) v = r.f64();
    model.layers.push_back(std::move(layer));
  }
  r.expect_end();
  return model;
}

inline std::uint64_t checkpoint_hash(const Model& model) { return fnv1a64(encode_checkpoint(model)); }

/// "MTPDDATA", u32 version, u64 N, u64 D, u64 K, u8 split, u64 gen seed,
/// N*D f64 inputs, N u32 labels.
inline std::string encode_dataset(const Dataset& data) {
  detail::ByteWriter w;
  w.raw(kDatasetMagic);
  w.le(kFormatVersion);
  w.le(static_cast<std::uint64_t>(data.size()));
  w.le(static_cast<std::uint64_t>(data.dims()));
  w.le(static_cast<std::uint64_t>(data.num_classes));
  w.le(static_cast<std::uint8_t>(data.split == Split::kTrain ? 0 : 1));
  w.le(data.gen_seed);
  for (double v : data.inputs.values()) w.f64(v);
  for (auto label : data.labels) w.le(static_cast<std::uint32_t>(label));
  return w.bytes();
}

inline Dataset decode_dataset(std::string_view bytes) {
  detail::ByteReader r(bytes, "dataset");
  r.expect_magic(kDatasetMagic);
  const auto n = r.le<std::uint64_t>();
  const auto d = r.le<std::uint64_t>();
  const auto k = r.le<std::uint64_t>();
  const Split split = r.le<std::uint8_t>() == 0 ? Split::kTrain : Split::kVal;
  const auto seed = r.le<std::uint64_t>();
  if (n == 0 || d == 0 || k == 0) throw IoError("dataset: zero extent");
  r.count(n * d, 8);
  Dataset data{Tensor({static_cast<std::size_t>(n), static_cast<std::size_t>(d)}), {}, static_cast<std::size_t>(k), split, seed};
  for (double& v : data.inputs.values()) v = r.f64();
  data.labels.resize(r.count(n, 4));
  for (auto& label : data.labels) {
    label = r.le<std::uint32_t>();
    if (label >= k) throw IoError("dataset: label out of range");
  }
  r.expect_end();
  return data;
}

struct FeatureDump {
  std::string model_id;
  FeatureSet features;
};

/// "MTPDFEAT", u32 version, model id, u32 level count, (u32 C, u32 P) per
/// level, u64 sample count, then per sample every level's C*P values
/// (channel-major) as little-endian f32.
inline std::string encode_feature_dump(const FeatureDump& dump) {
  detail::ByteWriter w;
  w.raw(kFeatureMagic);
  w.le(kFormatVersion);
  w.str(dump.model_id);
  const auto& levels = dump.features.levels;
  w.le(static_cast<std::uint32_t>(levels.size()));
  for (const auto& t : levels) {
    w.le(static_cast<std::uint32_t>(t.dim(1)));
    w.le(static_cast<std::uint32_t>(t.dim(2)));
  }
  const std::size_t n = dump.features.batch();
  w.le(static_cast<std::uint64_t>(n));
  for (std::size_t b = 0; b < n; ++b) {
    for (const auto& t : levels) {
      const std::size_t stride = t.dim(1) * t.dim(2);
      for (std::size_t i = 0; i < stride; ++i) w.f32(static_cast<float>(t[b * stride + i]));
    }
  }
  return w.bytes();
}

inline FeatureDump decode_feature_dump(std::string_view bytes) {
  detail::ByteReader r(bytes, "feature dump");
  r.expect_magic(kFeatureMagic);
  FeatureDump dump;
  dump.model_id = r.str();
  if (dump.model_id.empty()) throw IoError("feature dump: empty model id");
  const auto level_count = r.count(r.le<std::uint32_t>(), 8);
  if (level_count == 0) throw IoError("feature dump: no levels");
  std::vector<NeckLevel> shapes(level_count);
  for (auto& s : shapes) {
    s.channels = r.le<std::uint32_t>();
    s.positions = r.le<std::uint32_t>();
    if (s.channels == 0 || s.positions == 0) throw IoError("feature dump: zero level extent");
  }
  const auto n = r.le<std::uint64_t>();
  if (n == 0) throw IoError("feature dump: no samples");
  std::size_t per_sample = 0;
  for (const auto& s : shapes) per_sample += s.size();
  r.count(n * per_sample, 4);
  for (const auto& s : shapes) dump.features.levels.emplace_back(Shape{static_cast<std::size_t>(n), s.channels, s.positions});
  for (std::size_t b = 0; b < n; ++b) {
    for (auto& t : dump.features.levels) {
      const std::size_t stride = t.dim(1) * t.dim(2);
      for (std::size_t i = 0; i < stride; ++i) t[b * stride + i] = static_cast<double>(r.f32());
    }
  }
  for (const auto& t : dump.features.levels)
    if (!t.all_finite()) throw IoError("feature dump: non-finite value");
  r.expect_end();
  return dump;
}

}  // namespace mtpd
