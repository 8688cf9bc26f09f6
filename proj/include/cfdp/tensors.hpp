// Copyright 2026 The cfdp Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

// Dense tensors and the "CFD1" binary container used for feature-map dumps
// and weight stores.
//
// Container layout (all integers little-endian):
//   0..3    magic "CFD1"
//   4..5    version (u16, 1)
//   6       dtype code (0 = f32 LE)
//   7       reserved (0)
//   8..11   layer index (u32)
//   12..27  dims d0..d3 (u32 each)
//   28..    d0*d1*d2*d3 f32 LE values, row-major

#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "cfdp/error.hpp"

namespace cfdp {

namespace detail {

template <class T>
std::size_t first_non_finite(std::span<const T> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) return i;
  }
  return values.size();
}

}  // namespace detail

/// Row-major 2D grid of finite scalars. Map2D (float) holds one channel of a
/// feature map; FrequencyMap (double) holds its blockwise DCT coefficients.
template <class T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;

  Grid(std::size_t height, std::size_t width)
      : height_(height), width_(width), values_(height * width, T{0}) {
    check_dims();
  }

  Grid(std::size_t height, std::size_t width, std::vector<T> values)
      : height_(height), width_(width), values_(std::move(values)) {
    check_dims();
    if (values_.size() != height_ * width_) {
      throw Error(ErrorKind::ShapeMismatch,
                  "grid expects " + std::to_string(height_ * width_) +
                      " values, got " + std::to_string(values_.size()));
    }
    auto bad = detail::first_non_finite(std::span<const T>(values_));
    if (bad != values_.size()) {
      throw Error(ErrorKind::NonFiniteData,
                  "grid value " + std::to_string(bad) + " is not finite");
    }
  }

  template <class U>
  static Grid convert(const Grid<U>& other) {
    Grid out(other.height(), other.width());
    for (std::size_t i = 0; i < other.size(); ++i) {
      out.values_[i] = static_cast<T>(other.values()[i]);
    }
    return out;
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return values_.size(); }

  T operator()(std::size_t y, std::size_t x) const {
    return values_[y * width_ + x];
  }
  T& operator()(std::size_t y, std::size_t x) { return values_[y * width_ + x]; }

  std::span<const T> values() const noexcept { return values_; }
  std::span<T> values() noexcept { return values_; }

  bool operator==(const Grid&) const = default;

 private:
  void check_dims() const {
    if (height_ == 0 || width_ == 0) {
      throw Error(ErrorKind::ShapeMismatch, "grid dimensions must be >= 1");
    }
  }

  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<T> values_;
};

using Map2D = Grid<float>;

/// Activations of one layer captured over a batch of images, indexed
/// [b][c][y][x].
class FeatureMapBatch {
 public:
  FeatureMapBatch() = default;

  FeatureMapBatch(std::uint32_t layer_index, std::size_t batch_size,
                  std::size_t channels, std::size_t height, std::size_t width,
                  std::vector<float> data)
      : layer_index_(layer_index),
        batch_size_(batch_size),
        channels_(channels),
        height_(height),
        width_(width),
        data_(std::move(data)) {
    if (batch_size_ == 0 || channels_ == 0 || height_ == 0 || width_ == 0) {
      throw Error(ErrorKind::ShapeMismatch,
                  "feature batch dimensions must be >= 1");
    }
    if (data_.size() != batch_size_ * channels_ * height_ * width_) {
      throw Error(ErrorKind::ShapeMismatch,
                  "feature batch expects " +
                      std::to_string(batch_size_ * channels_ * height_ * width_) +
                      " values, got " + std::to_string(data_.size()));
    }
    auto bad = detail::first_non_finite(std::span<const float>(data_));
    if (bad != data_.size()) {
      throw Error(ErrorKind::NonFiniteData,
                  "feature value " + std::to_string(bad) + " is not finite");
    }
  }

  std::uint32_t layer_index() const noexcept { return layer_index_; }
  std::size_t batch_size() const noexcept { return batch_size_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::span<const float> data() const noexcept { return data_; }

  std::size_t flat_index(std::size_t b, std::size_t c, std::size_t y,
                         std::size_t x) const noexcept {
    return ((b * channels_ + c) * height_ + y) * width_ + x;
  }

  /// Copy of the H x W map for image `b`, channel `c`.
  Map2D channel_slice(std::size_t b, std::size_t c) const {
    if (b >= batch_size_ || c >= channels_) {
      throw Error(ErrorKind::IndexOutOfRange,
                  "slice (b=" + std::to_string(b) + ", c=" + std::to_string(c) +
                      ") outside batch of " + std::to_string(batch_size_) +
                      " x " + std::to_string(channels_));
    }
    auto first = data_.begin() +
                 static_cast<std::ptrdiff_t>(flat_index(b, c, 0, 0));
    return Map2D(height_, width_,
                 std::vector<float>(first, first + static_cast<std::ptrdiff_t>(
                                                       height_ * width_)));
  }

  bool operator==(const FeatureMapBatch&) const = default;

 private:
  std::uint32_t layer_index_ = 0;
  std::size_t batch_size_ = 0;
  std::size_t channels_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<float> data_;
};

inline Map2D channel_slice(const FeatureMapBatch& batch, std::size_t b,
                           std::size_t c) {
  return batch.channel_slice(b, c);
}

// ---------------------------------------------------------------------------
// CFD1 container
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kDumpMagic = {'C', 'F', 'D', '1'};
inline constexpr std::uint16_t kDumpVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;
inline constexpr std::size_t kDumpHeaderSize = 28;

/// Header fields of a CFD1 file.
struct FeatureDumpHeader {
  std::uint16_t version = kDumpVersion;
  std::uint8_t dtype_code = kDtypeF32;
  std::uint32_t layer_index = 0;
  std::array<std::uint32_t, 4> dims{};

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

/// Raw CFD1 payload: a header plus its f32 values.
struct TensorRecord {
  FeatureDumpHeader header;
  std::vector<float> data;
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFFu));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 0; shift < 32; shift += 8) {
    out.push_back(static_cast<std::uint8_t>((v >> shift) & 0xFFu));
  }
}

inline std::uint16_t get_u16(std::span<const std::uint8_t> in, std::size_t at) {
  return static_cast<std::uint16_t>(in[at] | (in[at + 1] << 8));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  return static_cast<std::uint32_t>(in[at]) |
         (static_cast<std::uint32_t>(in[at + 1]) << 8) |
         (static_cast<std::uint32_t>(in[at + 2]) << 16) |
         (static_cast<std::uint32_t>(in[at + 3]) << 24);
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorKind::IoFailure, "cannot open '" + path.string() + "'");
  }
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) {
    throw Error(ErrorKind::IoFailure, "error reading '" + path.string() + "'");
  }
  return bytes;
}

inline void write_file(const std::filesystem::path& path,
                       std::span<const std::uint8_t> bytes) {
  if (path.empty()) throw Error(ErrorKind::IoFailure, "empty output path");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorKind::IoFailure,
                "cannot open '" + path.string() + "' for writing");
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) {
    throw Error(ErrorKind::IoFailure, "error writing '" + path.string() + "'");
  }
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_record(const TensorRecord& record) {
  const auto& h = record.header;
  if (record.data.size() != h.element_count()) {
    throw Error(ErrorKind::ShapeMismatch,
                "record dims disagree with payload length");
  }
  auto bad = detail::first_non_finite(std::span<const float>(record.data));
  if (bad != record.data.size()) {
    throw Error(ErrorKind::NonFiniteData,
                "value " + std::to_string(bad) + " is not finite");
  }
  std::vector<std::uint8_t> out;
  out.reserve(kDumpHeaderSize + 4 * record.data.size());
  for (char c : kDumpMagic) out.push_back(static_cast<std::uint8_t>(c));
  detail::put_u16(out, h.version);
  out.push_back(h.dtype_code);
  out.push_back(0);
  detail::put_u32(out, h.layer_index);
  for (auto d : h.dims) detail::put_u32(out, d);
  for (float v : record.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

/// Decodes a CFD1 byte image. `source` names the origin in error messages.
inline TensorRecord decode_record(std::span<const std::uint8_t> bytes,
                                  const std::string& source = "<memory>") {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kDumpMagic.data(), 4) != 0) {
    throw Error(ErrorKind::BadMagic, source + ": missing CFD1 magic at byte 0");
  }
  if (bytes.size() < kDumpHeaderSize) {
    throw Error(ErrorKind::TruncatedPayload,
                source + ": header ends at byte " + std::to_string(bytes.size()) +
                    ", expected " + std::to_string(kDumpHeaderSize));
  }
  TensorRecord record;
  auto& h = record.header;
  h.version = detail::get_u16(bytes, 4);
  if (h.version != kDumpVersion) {
    throw Error(ErrorKind::UnsupportedVersion,
                source + ": version " + std::to_string(h.version) +
                    " at byte 4");
  }
  h.dtype_code = bytes[6];
  if (h.dtype_code != kDtypeF32) {
    throw Error(ErrorKind::UnsupportedVersion,
                source + ": dtype code " + std::to_string(h.dtype_code) +
                    " at byte 6");
  }
  h.layer_index = detail::get_u32(bytes, 8);
  for (std::size_t i = 0; i < 4; ++i) {
    h.dims[i] = detail::get_u32(bytes, 12 + 4 * i);
    if (h.dims[i] == 0) {
      throw Error(ErrorKind::UnsupportedVersion,
                  source + ": zero dimension at byte " + std::to_string(12 + 4 * i));
    }
  }
  const std::uint64_t count = h.element_count();
  const std::uint64_t payload = bytes.size() - kDumpHeaderSize;
  if (count > payload / 4 || payload != count * 4) {
    throw Error(ErrorKind::TruncatedPayload,
                source + ": header declares " + std::to_string(count) +
                    " values but payload holds " + std::to_string(payload) +
                    " bytes");
  }
  record.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = kDumpHeaderSize + 4 * i;
    float v = std::bit_cast<float>(detail::get_u32(bytes, at));
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::NonFiniteData,
                  source + ": non-finite value at byte " + std::to_string(at));
    }
    record.data[i] = v;
  }
  return record;
}

inline TensorRecord read_record(const std::filesystem::path& path) {
  return decode_record(detail::read_file(path), path.string());
}

inline void write_record(const TensorRecord& record,
                         const std::filesystem::path& path) {
  auto bytes = encode_record(record);
  detail::write_file(path, bytes);
}

inline FeatureMapBatch load_feature_dump(const std::filesystem::path& path) {
  auto record = read_record(path);
  const auto& d = record.header.dims;
  return FeatureMapBatch(record.header.layer_index, d[0], d[1], d[2], d[3],
                         std::move(record.data));
}

inline void save_feature_dump(const FeatureMapBatch& batch,
                              const std::filesystem::path& path) {
  TensorRecord record;
  record.header.layer_index = batch.layer_index();
  record.header.dims = {static_cast<std::uint32_t>(batch.batch_size()),
                        static_cast<std::uint32_t>(batch.channels()),
                        static_cast<std::uint32_t>(batch.height()),
                        static_cast<std::uint32_t>(batch.width())};
  record.data.assign(batch.data().begin(), batch.data().end());
  write_record(record, path);
}

/// Conventional file name of a layer's dump inside a capture directory.
inline std::string feature_dump_name(std::uint32_t layer_index) {
  return "layer_" + std::to_string(layer_index) + ".cfd";
}

}  // namespace cfdp
