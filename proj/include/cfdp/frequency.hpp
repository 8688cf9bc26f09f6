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

// Gaussian prefiltering, block partitioning and blockwise orthonormal
// DCT-II of single-channel maps.

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "cfdp/error.hpp"
#include "cfdp/tensors.hpp"

namespace cfdp {

using FrequencyMap = Grid<double>;

struct GaussianKernel {
  double sigma = 1.0;
  std::size_t size = 1;
  std::vector<double> weights;  // size x size, row-major

  double at(std::size_t y, std::size_t x) const { return weights[y * size + x]; }
};

/// Normalized size x size Gaussian, w(x,y) ~ exp(-(x^2+y^2) / (2 sigma^2)).
inline GaussianKernel build_gaussian_kernel(double sigma, std::size_t size) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw Error(ErrorKind::InvalidSigma,
                "sigma must be positive, got " + std::to_string(sigma));
  }
  if (size < 1 || size % 2 == 0) {
    throw Error(ErrorKind::InvalidSize,
                "kernel size must be odd and >= 1, got " + std::to_string(size));
  }
  GaussianKernel k;
  k.sigma = sigma;
  k.size = size;
  k.weights.resize(size * size);
  const auto radius = static_cast<long>(size / 2);
  double total = 0.0;
  for (long y = -radius; y <= radius; ++y) {
    for (long x = -radius; x <= radius; ++x) {
      double w = std::exp(-static_cast<double>(x * x + y * y) / (2.0 * sigma * sigma));
      k.weights[static_cast<std::size_t>((y + radius) * static_cast<long>(size) +
                                         (x + radius))] = w;
      total += w;
    }
  }
  for (auto& w : k.weights) w /= total;
  return k;
}

namespace detail {

/// Reflect-101 index mapping (…2 1 | 0 1 2 … n-1 | n-2 …).
inline std::size_t reflect101(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<long>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

}  // namespace detail

/// 2D correlation with `kernel`, reflect-101 borders. Output has input dims.
template <class T>
Grid<T> smooth(const Grid<T>& map, const GaussianKernel& kernel) {
  const std::size_t h = map.height();
  const std::size_t w = map.width();
  const auto radius = static_cast<long>(kernel.size / 2);
  Grid<T> out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long dy = -radius; dy <= radius; ++dy) {
        const std::size_t sy = detail::reflect101(static_cast<long>(y) + dy, h);
        for (long dx = -radius; dx <= radius; ++dx) {
          const std::size_t sx = detail::reflect101(static_cast<long>(x) + dx, w);
          acc += kernel.at(static_cast<std::size_t>(dy + radius),
                           static_cast<std::size_t>(dx + radius)) *
                 static_cast<double>(map(sy, sx));
        }
      }
      out(y, x) = static_cast<T>(acc);
    }
  }
  return out;
}

struct Tile {
  std::size_t origin_y = 0;
  std::size_t origin_x = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  bool operator==(const Tile&) const = default;
};

struct BlockPartition {
  std::size_t block_size = 0;
  std::vector<Tile> tiles;  // row-major by origin
};

/// Row-major tiling with tiles of min(block_size, remaining extent). A map
/// smaller than the block in both directions becomes a single tile.
inline BlockPartition partition(std::size_t height, std::size_t width,
                                std::size_t block_size) {
  if (block_size < 1) {
    throw Error(ErrorKind::InvalidSize, "block size must be >= 1");
  }
  BlockPartition p;
  p.block_size = block_size;
  for (std::size_t oy = 0; oy < height; oy += block_size) {
    for (std::size_t ox = 0; ox < width; ox += block_size) {
      p.tiles.push_back({oy, ox, std::min(block_size, height - oy),
                         std::min(block_size, width - ox)});
    }
  }
  return p;
}

template <class T>
BlockPartition partition(const Grid<T>& map, std::size_t block_size) {
  return partition(map.height(), map.width(), block_size);
}

namespace detail {

/// Cached orthonormal DCT-II basis rows: basis[u * n + x] =
/// alpha(u) cos(pi u (2x + 1) / 2n).
class DctBasisCache {
 public:
  static DctBasisCache& instance() {
    static DctBasisCache cache;
    return cache;
  }

  std::shared_ptr<const std::vector<double>> get(std::size_t n) {
    {
      std::shared_lock lock(mutex_);
      auto it = bases_.find(n);
      if (it != bases_.end()) return it->second;
    }
    auto basis = std::make_shared<const std::vector<double>>(compute(n));
    std::unique_lock lock(mutex_);
    auto [it, inserted] = bases_.emplace(n, std::move(basis));
    return it->second;
  }

 private:
  static std::vector<double> compute(std::size_t n) {
    std::vector<double> b(n * n);
    const double nd = static_cast<double>(n);
    for (std::size_t u = 0; u < n; ++u) {
      const double alpha = u == 0 ? std::sqrt(1.0 / nd) : std::sqrt(2.0 / nd);
      for (std::size_t x = 0; x < n; ++x) {
        b[u * n + x] = alpha * std::cos(std::numbers::pi * static_cast<double>(u) *
                                        (2.0 * static_cast<double>(x) + 1.0) /
                                        (2.0 * nd));
      }
    }
    return b;
  }

  std::shared_mutex mutex_;
  std::map<std::size_t, std::shared_ptr<const std::vector<double>>> bases_;
};

/// Separable DCT of the tile of `src` at `tile`, written in place into `dst`.
template <class T>
void dct2_tile(const Grid<T>& src, const Tile& tile, FrequencyMap& dst) {
  const std::size_t h = tile.height;
  const std::size_t w = tile.width;
  auto row_basis = DctBasisCache::instance().get(h);
  auto col_basis = DctBasisCache::instance().get(w);
  const auto& bh = *row_basis;
  const auto& bw = *col_basis;

  // rows: tmp[y][v] = sum_x p[y][x] * bw[v][x]
  std::vector<double> tmp(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t v = 0; v < w; ++v) {
      double acc = 0.0;
      for (std::size_t x = 0; x < w; ++x) {
        acc += static_cast<double>(src(tile.origin_y + y, tile.origin_x + x)) *
               bw[v * w + x];
      }
      tmp[y * w + v] = acc;
    }
  }
  // columns: out[u][v] = sum_y bh[u][y] * tmp[y][v]
  for (std::size_t u = 0; u < h; ++u) {
    for (std::size_t v = 0; v < w; ++v) {
      double acc = 0.0;
      for (std::size_t y = 0; y < h; ++y) acc += bh[u * h + y] * tmp[y * w + v];
      dst(tile.origin_y + u, tile.origin_x + v) = acc;
    }
  }
}

}  // namespace detail

/// Orthonormal 2D DCT-II of a whole block.
template <class T>
FrequencyMap dct2_block(const Grid<T>& block) {
  FrequencyMap out(block.height(), block.width());
  detail::dct2_tile(block, Tile{0, 0, block.height(), block.width()}, out);
  return out;
}

struct GaussianSmoothing {
  double sigma = 1.0;
  std::size_t kernel_size = 3;

  bool operator==(const GaussianSmoothing&) const = default;
};

struct FrequencyConfig {
  std::size_t block_size = 4;
  std::optional<GaussianSmoothing> smoothing = GaussianSmoothing{};

  void validate() const {
    if (block_size < 1) {
      throw Error(ErrorKind::InvalidSize, "block size must be >= 1");
    }
    if (smoothing) {
      if (!(smoothing->sigma > 0.0) || !std::isfinite(smoothing->sigma)) {
        throw Error(ErrorKind::InvalidSigma, "sigma must be positive");
      }
      if (smoothing->kernel_size < 1 || smoothing->kernel_size % 2 == 0) {
        throw Error(ErrorKind::InvalidSize, "kernel size must be odd and >= 1");
      }
    }
  }

  bool operator==(const FrequencyConfig&) const = default;
};

/// smooth (optional) -> partition -> per-tile DCT, coefficients in place.
template <class T>
FrequencyMap to_frequency(const Grid<T>& map, const FrequencyConfig& cfg) {
  cfg.validate();
  auto source = FrequencyMap::convert(map);
  if (cfg.smoothing) {
    source = smooth(source, build_gaussian_kernel(cfg.smoothing->sigma,
                                                  cfg.smoothing->kernel_size));
  }
  FrequencyMap out(map.height(), map.width());
  for (const auto& tile : partition(source, cfg.block_size).tiles) {
    detail::dct2_tile(source, tile, out);
  }
  return out;
}

}  // namespace cfdp
