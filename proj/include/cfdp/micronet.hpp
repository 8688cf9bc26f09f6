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

// A small plain CNN (conv / relu / maxpool / flatten / linear) with SGD
// training, feature-map capture, channel surgery driven by a ModelPlan, and
// FGSM / PGD attacks. Convolutions are stride 1 with "same" padding k/2.
//
// Weight layout is out x in x k x k. Parameter layers are addressed by their
// ordinal among parameter layers; conv layers are also addressed by their
// ordinal among conv layers, which is the layer index used in feature dumps
// and pruning plans.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cfdp/error.hpp"
#include "cfdp/planner.hpp"
#include "cfdp/random.hpp"
#include "cfdp/tensors.hpp"
#include "json.hpp"

namespace cfdp {

enum class LayerKind { Conv, Relu, MaxPool, Flatten, Linear };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t out = 0;     // conv out channels / linear out features
  std::size_t kernel = 0;  // conv only

  static LayerSpec conv(std::size_t out_channels, std::size_t kernel) {
    return {LayerKind::Conv, out_channels, kernel};
  }
  static LayerSpec relu() { return {LayerKind::Relu, 0, 0}; }
  static LayerSpec maxpool() { return {LayerKind::MaxPool, 0, 0}; }
  static LayerSpec flatten() { return {LayerKind::Flatten, 0, 0}; }
  static LayerSpec linear(std::size_t out_features) {
    return {LayerKind::Linear, out_features, 0};
  }

  bool has_params() const {
    return kind == LayerKind::Conv || kind == LayerKind::Linear;
  }

  bool operator==(const LayerSpec&) const = default;
};

struct Shape3 {
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t size() const { return c * h * w; }
  bool operator==(const Shape3&) const = default;
};

/// conv16-relu-pool-conv32-relu-pool-flatten-linear4 on 1x16x16 input.
inline std::vector<LayerSpec> default_micro_specs(std::size_t classes = 4) {
  return {LayerSpec::conv(16, 3), LayerSpec::relu(),    LayerSpec::maxpool(),
          LayerSpec::conv(32, 3), LayerSpec::relu(),    LayerSpec::maxpool(),
          LayerSpec::flatten(),   LayerSpec::linear(classes)};
}

inline constexpr Shape3 kMicroInput{1, 16, 16};

template <class T>
struct Layer {
  LayerSpec spec;
  Shape3 in;
  Shape3 out;
  std::vector<T> weight;  // conv: out x in x k x k, linear: out x in
  std::vector<T> bias;

  std::size_t fan_in() const {
    return spec.kind == LayerKind::Conv ? in.c * spec.kernel * spec.kernel
                                        : in.size();
  }
};

/// Parameter gradients, aligned with the network's layer list.
template <class T>
struct Gradients {
  std::vector<std::vector<T>> weight;
  std::vector<std::vector<T>> bias;
};

template <class T>
class BasicMicroNet {
 public:
  using value_type = T;

  BasicMicroNet() = default;

  /// Builds the layer chain with zero-valued parameters.
  BasicMicroNet(Shape3 input, std::vector<LayerSpec> specs) : input_(input) {
    Shape3 shape = input;
    for (const auto& spec : specs) {
      Layer<T> layer;
      layer.spec = spec;
      layer.in = shape;
      switch (spec.kind) {
        case LayerKind::Conv:
          if (spec.kernel % 2 == 0 || spec.out == 0) {
            throw Error(ErrorKind::ShapeMismatch,
                        "conv kernel must be odd and out channels >= 1");
          }
          layer.out = {spec.out, shape.h, shape.w};
          layer.weight.assign(spec.out * shape.c * spec.kernel * spec.kernel, T{0});
          layer.bias.assign(spec.out, T{0});
          break;
        case LayerKind::Relu:
          layer.out = shape;
          break;
        case LayerKind::MaxPool:
          if (shape.h < 2 || shape.w < 2) {
            throw Error(ErrorKind::ShapeMismatch, "maxpool input smaller than 2x2");
          }
          layer.out = {shape.c, shape.h / 2, shape.w / 2};
          break;
        case LayerKind::Flatten:
          layer.out = {shape.size(), 1, 1};
          break;
        case LayerKind::Linear:
          if (shape.h != 1 || shape.w != 1) {
            throw Error(ErrorKind::ShapeMismatch, "linear layer needs flattened input");
          }
          layer.out = {spec.out, 1, 1};
          layer.weight.assign(spec.out * shape.c, T{0});
          layer.bias.assign(spec.out, T{0});
          break;
      }
      shape = layer.out;
      layers_.push_back(std::move(layer));
    }
  }

  /// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
  void init_kaiming(std::uint64_t seed) {
    Rng rng(seed);
    for (auto& layer : layers_) {
      if (!layer.spec.has_params()) continue;
      const double bound = std::sqrt(6.0 / static_cast<double>(layer.fan_in()));
      for (auto& w : layer.weight) w = static_cast<T>(rng.uniform(-bound, bound));
      std::fill(layer.bias.begin(), layer.bias.end(), T{0});
    }
  }

  Shape3 input_shape() const { return input_; }
  Shape3 output_shape() const { return layers_.empty() ? input_ : layers_.back().out; }
  std::size_t classes() const { return output_shape().size(); }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  std::vector<Layer<T>>& layers() { return layers_; }

  std::vector<LayerSpec> specs() const {
    std::vector<LayerSpec> s;
    for (const auto& l : layers_) s.push_back(l.spec);
    return s;
  }

  /// Positions (in the layer list) of conv layers, in order.
  std::vector<std::size_t> conv_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].spec.kind == LayerKind::Conv) out.push_back(i);
    }
    return out;
  }

  /// Positions of parameter layers, in order.
  std::vector<std::size_t> param_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].spec.has_params()) out.push_back(i);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  Gradients<T> zero_gradients() const {
    Gradients<T> g;
    for (const auto& l : layers_) {
      g.weight.emplace_back(l.weight.size(), T{0});
      g.bias.emplace_back(l.bias.size(), T{0});
    }
    return g;
  }

  template <class U>
  BasicMicroNet<U> cast() const {
    BasicMicroNet<U> out(input_, specs());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& dst = out.layers()[i];
      std::transform(layers_[i].weight.begin(), layers_[i].weight.end(),
                     dst.weight.begin(), [](T v) { return static_cast<U>(v); });
      std::transform(layers_[i].bias.begin(), layers_[i].bias.end(),
                     dst.bias.begin(), [](T v) { return static_cast<U>(v); });
    }
    return out;
  }

  bool operator==(const BasicMicroNet& o) const {
    if (!(input_ == o.input_) || layers_.size() != o.layers_.size()) return false;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& a = layers_[i];
      const auto& b = o.layers_[i];
      if (!(a.spec == b.spec) || a.weight != b.weight || a.bias != b.bias) return false;
    }
    return true;
  }

 private:
  Shape3 input_;
  std::vector<Layer<T>> layers_;
};

using MicroNet = BasicMicroNet<float>;

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void conv_forward(const Layer<T>& l, std::span<const T> in, std::span<T> out) {
  const std::size_t C = l.in.c, H = l.in.h, W = l.in.w, O = l.out.c;
  const std::size_t K = l.spec.kernel;
  const long pad = static_cast<long>(K / 2);
  for (std::size_t o = 0; o < O; ++o) {
    T* dst = out.data() + o * H * W;
    std::fill(dst, dst + H * W, l.bias[o]);
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = in.data() + c * H * W;
      for (std::size_t ky = 0; ky < K; ++ky) {
        const long dy = static_cast<long>(ky) - pad;
        const std::size_t y0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
        const std::size_t y1 = dy > 0 ? H - static_cast<std::size_t>(dy) : H;
        for (std::size_t kx = 0; kx < K; ++kx) {
          const long dx = static_cast<long>(kx) - pad;
          const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
          const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
          const T w = l.weight[((o * C + c) * K + ky) * K + kx];
          for (std::size_t y = y0; y < y1; ++y) {
            T* row = dst + y * W;
            const T* srow = src + static_cast<std::size_t>(static_cast<long>(y) + dy) * W;
            for (std::size_t x = x0; x < x1; ++x) {
              row[x] += w * srow[static_cast<std::size_t>(static_cast<long>(x) + dx)];
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv_backward(const Layer<T>& l, std::span<const T> in,
                   std::span<const T> grad_out, std::vector<T>& grad_w,
                   std::vector<T>& grad_b, std::span<T> grad_in) {
  const std::size_t C = l.in.c, H = l.in.h, W = l.in.w, O = l.out.c;
  const std::size_t K = l.spec.kernel;
  const long pad = static_cast<long>(K / 2);
  std::fill(grad_in.begin(), grad_in.end(), T{0});
  for (std::size_t o = 0; o < O; ++o) {
    const T* g = grad_out.data() + o * H * W;
    T bsum = 0;
    for (std::size_t i = 0; i < H * W; ++i) bsum += g[i];
    grad_b[o] += bsum;
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = in.data() + c * H * W;
      T* gsrc = grad_in.data() + c * H * W;
      for (std::size_t ky = 0; ky < K; ++ky) {
        const long dy = static_cast<long>(ky) - pad;
        const std::size_t y0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
        const std::size_t y1 = dy > 0 ? H - static_cast<std::size_t>(dy) : H;
        for (std::size_t kx = 0; kx < K; ++kx) {
          const long dx = static_cast<long>(kx) - pad;
          const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
          const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
          const std::size_t widx = ((o * C + c) * K + ky) * K + kx;
          const T w = l.weight[widx];
          T acc = 0;
          for (std::size_t y = y0; y < y1; ++y) {
            const T* grow = g + y * W;
            const std::size_t sy = static_cast<std::size_t>(static_cast<long>(y) + dy);
            const T* srow = src + sy * W;
            T* gsrow = gsrc + sy * W;
            for (std::size_t x = x0; x < x1; ++x) {
              const std::size_t sx = static_cast<std::size_t>(static_cast<long>(x) + dx);
              acc += grow[x] * srow[sx];
              gsrow[sx] += w * grow[x];
            }
          }
          grad_w[widx] += acc;
        }
      }
    }
  }
}

template <class T>
void linear_forward(const Layer<T>& l, std::span<const T> in, std::span<T> out) {
  const std::size_t N = l.in.size();
  for (std::size_t o = 0; o < l.out.c; ++o) {
    T acc = l.bias[o];
    const T* w = l.weight.data() + o * N;
    for (std::size_t j = 0; j < N; ++j) acc += w[j] * in[j];
    out[o] = acc;
  }
}

template <class T>
void linear_backward(const Layer<T>& l, std::span<const T> in,
                     std::span<const T> grad_out, std::vector<T>& grad_w,
                     std::vector<T>& grad_b, std::span<T> grad_in) {
  const std::size_t N = l.in.size();
  std::fill(grad_in.begin(), grad_in.end(), T{0});
  for (std::size_t o = 0; o < l.out.c; ++o) {
    const T g = grad_out[o];
    grad_b[o] += g;
    const T* w = l.weight.data() + o * N;
    T* gw = grad_w.data() + o * N;
    for (std::size_t j = 0; j < N; ++j) {
      gw[j] += g * in[j];
      grad_in[j] += g * w[j];
    }
  }
}

// Window max; the first maximum in row-major order wins ties.
template <class T>
void maxpool_forward(const Layer<T>& l, std::span<const T> in, std::span<T> out) {
  const std::size_t H = l.in.h, W = l.in.w, OH = l.out.h, OW = l.out.w;
  for (std::size_t c = 0; c < l.in.c; ++c) {
    const T* src = in.data() + c * H * W;
    for (std::size_t y = 0; y < OH; ++y) {
      for (std::size_t x = 0; x < OW; ++x) {
        T m = src[2 * y * W + 2 * x];
        m = std::max(m, src[2 * y * W + 2 * x + 1]);
        m = std::max(m, src[(2 * y + 1) * W + 2 * x]);
        m = std::max(m, src[(2 * y + 1) * W + 2 * x + 1]);
        out[(c * OH + y) * OW + x] = m;
      }
    }
  }
}

template <class T>
void maxpool_backward(const Layer<T>& l, std::span<const T> in,
                      std::span<const T> grad_out, std::span<T> grad_in) {
  const std::size_t H = l.in.h, W = l.in.w, OH = l.out.h, OW = l.out.w;
  std::fill(grad_in.begin(), grad_in.end(), T{0});
  for (std::size_t c = 0; c < l.in.c; ++c) {
    const T* src = in.data() + c * H * W;
    for (std::size_t y = 0; y < OH; ++y) {
      for (std::size_t x = 0; x < OW; ++x) {
        const std::size_t cand[4] = {2 * y * W + 2 * x, 2 * y * W + 2 * x + 1,
                                     (2 * y + 1) * W + 2 * x,
                                     (2 * y + 1) * W + 2 * x + 1};
        std::size_t best = cand[0];
        for (std::size_t k = 1; k < 4; ++k) {
          if (src[cand[k]] > src[best]) best = cand[k];
        }
        grad_in[c * H * W + best] += grad_out[(c * OH + y) * OW + x];
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Activations of one forward pass: acts[0] is the input, acts[i + 1] the
/// output of layer i.
template <class T>
struct Trace {
  std::vector<std::vector<T>> acts;

  std::span<const T> logits() const { return acts.back(); }
};

template <class T>
void forward_into(const BasicMicroNet<T>& net, std::span<const T> image,
                  Trace<T>& trace) {
  const auto& layers = net.layers();
  if (image.size() != net.input_shape().size()) {
    throw Error(ErrorKind::ShapeMismatch,
                "input has " + std::to_string(image.size()) + " values, net expects " +
                    std::to_string(net.input_shape().size()));
  }
  trace.acts.resize(layers.size() + 1);
  trace.acts[0].assign(image.begin(), image.end());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    std::span<const T> in = trace.acts[i];
    auto& out = trace.acts[i + 1];
    out.resize(l.out.size());
    switch (l.spec.kind) {
      case LayerKind::Conv: detail::conv_forward(l, in, std::span<T>(out)); break;
      case LayerKind::Linear: detail::linear_forward(l, in, std::span<T>(out)); break;
      case LayerKind::MaxPool: detail::maxpool_forward(l, in, std::span<T>(out)); break;
      case LayerKind::Relu:
        for (std::size_t j = 0; j < in.size(); ++j) out[j] = std::max(in[j], T{0});
        break;
      case LayerKind::Flatten:
        std::copy(in.begin(), in.end(), out.begin());
        break;
    }
  }
}

template <class T>
Trace<T> forward(const BasicMicroNet<T>& net, std::span<const T> image) {
  Trace<T> trace;
  forward_into(net, image, trace);
  return trace;
}

/// Backpropagates `grad_logits` through `trace`, accumulating parameter
/// gradients into `grads` (when non-null) and returning d/d(input).
template <class T>
std::vector<T> backward(const BasicMicroNet<T>& net, const Trace<T>& trace,
                        std::span<const T> grad_logits, Gradients<T>* grads) {
  const auto& layers = net.layers();
  std::vector<T> grad(grad_logits.begin(), grad_logits.end());
  std::vector<T> grad_in;
  std::vector<T> scratch_w, scratch_b;
  for (std::size_t i = layers.size(); i-- > 0;) {
    const auto& l = layers[i];
    std::span<const T> in = trace.acts[i];
    grad_in.assign(l.in.size(), T{0});
    std::vector<T>* gw = nullptr;
    std::vector<T>* gb = nullptr;
    if (l.spec.has_params()) {
      if (grads) {
        gw = &grads->weight[i];
        gb = &grads->bias[i];
      } else {
        scratch_w.assign(l.weight.size(), T{0});
        scratch_b.assign(l.bias.size(), T{0});
        gw = &scratch_w;
        gb = &scratch_b;
      }
    }
    switch (l.spec.kind) {
      case LayerKind::Conv:
        detail::conv_backward(l, in, std::span<const T>(grad), *gw, *gb,
                              std::span<T>(grad_in));
        break;
      case LayerKind::Linear:
        detail::linear_backward(l, in, std::span<const T>(grad), *gw, *gb,
                                std::span<T>(grad_in));
        break;
      case LayerKind::MaxPool:
        detail::maxpool_backward(l, in, std::span<const T>(grad), std::span<T>(grad_in));
        break;
      case LayerKind::Relu:
        for (std::size_t j = 0; j < in.size(); ++j) {
          grad_in[j] = in[j] > T{0} ? grad[j] : T{0};
        }
        break;
      case LayerKind::Flatten:
        std::copy(grad.begin(), grad.end(), grad_in.begin());
        break;
    }
    std::swap(grad, grad_in);
  }
  return grad;
}

/// Softmax cross-entropy of `logits` against `label`; writes dL/dlogits
/// scaled by `scale` into `grad` when non-empty.
template <class T>
double softmax_cross_entropy(std::span<const T> logits, std::size_t label,
                             std::span<T> grad = {}, double scale = 1.0) {
  double m = -std::numeric_limits<double>::infinity();
  for (T v : logits) m = std::max(m, static_cast<double>(v));
  double z = 0.0;
  for (T v : logits) z += std::exp(static_cast<double>(v) - m);
  const double log_z = m + std::log(z);
  if (!grad.empty()) {
    for (std::size_t k = 0; k < logits.size(); ++k) {
      const double p = std::exp(static_cast<double>(logits[k]) - log_z);
      grad[k] = static_cast<T>(scale * (p - (k == label ? 1.0 : 0.0)));
    }
  }
  return log_z - static_cast<double>(logits[label]);
}

/// Index of the largest logit; the lowest index wins ties.
template <class T>
std::size_t argmax(std::span<const T> logits) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < logits.size(); ++k) {
    if (logits[k] > logits[best]) best = k;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// N x 1 x 16 x 16 images in [0, 1] with labels in [0, classes).
struct Dataset {
  std::size_t classes = 4;
  Shape3 shape = kMicroInput;
  std::vector<float> images;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }

  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(images).subspan(i * shape.size(), shape.size());
  }

  bool operator==(const Dataset&) const = default;
};

inline constexpr float kTemplateLow = 0.2f;
inline constexpr float kTemplateHigh = 0.8f;

/// Noise-free template of class `label`: horizontal stripes, vertical
/// stripes, checkerboard, centered disk.
inline float class_template(std::size_t label, std::size_t y, std::size_t x) {
  bool on = false;
  switch (label) {
    case 0: on = (y / 2) % 2 == 0; break;
    case 1: on = (x / 2) % 2 == 0; break;
    case 2: on = ((y / 2) + (x / 2)) % 2 == 0; break;
    default: {
      const double dy = static_cast<double>(y) - 7.5;
      const double dx = static_cast<double>(x) - 7.5;
      on = dy * dy + dx * dx <= 5.5 * 5.5;
    }
  }
  return on ? kTemplateHigh : kTemplateLow;
}

/// Balanced procedural dataset; image i has label i mod classes and additive
/// uniform noise in [-noise, noise], clipped to [0, 1].
inline Dataset gen_dataset(std::uint64_t seed, std::size_t n,
                           std::size_t classes = 4, double noise = 0.2) {
  if (classes != 4) {
    throw Error(ErrorKind::InvalidArgument, "the procedural dataset has 4 classes");
  }
  if (n < classes) {
    throw Error(ErrorKind::InvalidArgument, "dataset needs at least one image per class");
  }
  Dataset d;
  d.classes = classes;
  d.images.resize(n * d.shape.size());
  d.labels.resize(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % classes;
    d.labels[i] = label;
    float* img = d.images.data() + i * d.shape.size();
    for (std::size_t y = 0; y < d.shape.h; ++y) {
      for (std::size_t x = 0; x < d.shape.w; ++x) {
        double v = class_template(label, y, x);
        if (noise > 0.0) v += rng.uniform(-noise, noise);
        img[y * d.shape.w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return d;
}

/// First `n` images of `data` (or all of them).
inline Dataset head(const Dataset& data, std::size_t n) {
  n = std::min(n, data.size());
  Dataset out;
  out.classes = data.classes;
  out.shape = data.shape;
  out.labels.assign(data.labels.begin(), data.labels.begin() + static_cast<std::ptrdiff_t>(n));
  out.images.assign(data.images.begin(),
                    data.images.begin() + static_cast<std::ptrdiff_t>(n * data.shape.size()));
  return out;
}

namespace detail {

template <class T>
std::vector<T> image_as(const Dataset& data, std::size_t i) {
  auto img = data.image(i);
  return std::vector<T>(img.begin(), img.end());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Evaluation, capture
// ---------------------------------------------------------------------------

template <class T>
std::size_t predict(const BasicMicroNet<T>& net, std::span<const T> image) {
  Trace<T> trace;
  forward_into(net, image, trace);
  return argmax(trace.logits());
}

/// Top-1 accuracy over `data`.
template <class T>
double evaluate(const BasicMicroNet<T>& net, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  Trace<T> trace;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto img = detail::image_as<T>(data, i);
    forward_into(net, std::span<const T>(img), trace);
    if (argmax(trace.logits()) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

enum class CapturePoint { PreActivation, PostActivation };

/// Feature maps of every conv layer over the images of `data`; dump i holds
/// conv layer i. Post-activation capture reads the ReLU directly following
/// the conv when there is one.
template <class T>
std::vector<FeatureMapBatch> capture_features(const BasicMicroNet<T>& net,
                                              const Dataset& data,
                                              CapturePoint point = CapturePoint::PreActivation) {
  const auto convs = net.conv_positions();
  const auto& layers = net.layers();
  std::vector<std::vector<float>> buffers(convs.size());
  Trace<T> trace;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto img = detail::image_as<T>(data, i);
    forward_into(net, std::span<const T>(img), trace);
    for (std::size_t k = 0; k < convs.size(); ++k) {
      std::size_t pos = convs[k];
      if (point == CapturePoint::PostActivation && pos + 1 < layers.size() &&
          layers[pos + 1].spec.kind == LayerKind::Relu) {
        ++pos;
      }
      const auto& act = trace.acts[pos + 1];
      for (T v : act) buffers[k].push_back(static_cast<float>(v));
    }
  }
  std::vector<FeatureMapBatch> out;
  for (std::size_t k = 0; k < convs.size(); ++k) {
    const auto& shape = layers[convs[k]].out;
    out.emplace_back(static_cast<std::uint32_t>(k), data.size(), shape.c, shape.h,
                     shape.w, std::move(buffers[k]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.005;
  double lr_decay_factor = 0.1;
  std::vector<std::size_t> decay_epochs;  // lr *= factor when these epochs start
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const {
    auto bad = [](const char* what) {
      throw Error(ErrorKind::InvalidArgument, std::string("invalid ") + what);
    };
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) bad("learning rate");
    if (!(momentum >= 0.0 && momentum < 1.0)) bad("momentum");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) bad("weight decay");
    if (!(lr_decay_factor > 0.0)) bad("lr decay factor");
    if (batch_size == 0) bad("batch size");
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;  // NaN when no test set was given
};

/// Mean loss over a minibatch and its parameter gradients.
template <class T>
double batch_gradients(const BasicMicroNet<T>& net, const Dataset& data,
                       std::span<const std::size_t> indices, Gradients<T>& grads,
                       std::size_t* correct = nullptr) {
  Trace<T> trace;
  std::vector<T> grad_logits(net.classes());
  const double scale = 1.0 / static_cast<double>(indices.size());
  double loss = 0.0;
  for (std::size_t idx : indices) {
    const auto img = detail::image_as<T>(data, idx);
    forward_into(net, std::span<const T>(img), trace);
    if (correct && argmax(trace.logits()) == data.labels[idx]) ++*correct;
    loss += softmax_cross_entropy(trace.logits(), data.labels[idx],
                                  std::span<T>(grad_logits), scale);
    backward(net, trace, std::span<const T>(grad_logits), &grads);
  }
  return loss * scale;
}

/// SGD with momentum (v = m v + g + wd w; w -= lr v) on softmax
/// cross-entropy. The sample order is reshuffled each epoch from cfg.seed.
template <class T, class EpochHook>
std::vector<EpochLog> train(BasicMicroNet<T>& net, const Dataset& data,
                            const TrainConfig& cfg, const Dataset* test,
                            EpochHook&& on_epoch_end) {
  cfg.validate();
  std::vector<EpochLog> log;
  auto velocity = net.zero_gradients();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(cfg.seed, 0x7261696e));
  double lr = cfg.learning_rate;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (std::find(cfg.decay_epochs.begin(), cfg.decay_epochs.end(), epoch) !=
        cfg.decay_epochs.end()) {
      lr *= cfg.lr_decay_factor;
    }
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> batch(order.data() + start, stop - start);
      auto grads = net.zero_gradients();
      const double loss = batch_gradients(net, data, batch, grads, &correct);
      if (!std::isfinite(loss)) {
        throw Error(ErrorKind::DivergedLoss,
                    "non-finite loss in epoch " + std::to_string(epoch));
      }
      loss_sum += loss * static_cast<double>(batch.size());
      auto& layers = net.layers();
      for (std::size_t i = 0; i < layers.size(); ++i) {
        auto update = [&](std::vector<T>& param, const std::vector<T>& g,
                          std::vector<T>& v) {
          for (std::size_t j = 0; j < param.size(); ++j) {
            v[j] = static_cast<T>(cfg.momentum * v[j] + g[j] + cfg.weight_decay * param[j]);
            param[j] = static_cast<T>(param[j] - lr * v[j]);
          }
        };
        update(layers[i].weight, grads.weight[i], velocity.weight[i]);
        update(layers[i].bias, grads.bias[i], velocity.bias[i]);
      }
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.loss = loss_sum / static_cast<double>(data.size());
    entry.train_acc = static_cast<double>(correct) / static_cast<double>(data.size());
    entry.test_acc = test ? evaluate(net, *test) : std::numeric_limits<double>::quiet_NaN();
    log.push_back(entry);
    on_epoch_end(entry, std::as_const(net));
  }
  return log;
}

template <class T>
std::vector<EpochLog> train(BasicMicroNet<T>& net, const Dataset& data,
                            const TrainConfig& cfg, const Dataset* test = nullptr) {
  return train(net, data, cfg, test, [](const EpochLog&, const BasicMicroNet<T>&) {});
}

/// `epoch,loss,train_acc,test_acc` CSV; train_acc is the running accuracy
/// over the epoch's minibatches, test_acc is empty without a test set.
inline std::string loss_curve_csv(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out.precision(9);
  out << "epoch,loss,train_acc,test_acc\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << e.loss << ',' << e.train_acc << ',';
    if (std::isfinite(e.test_acc)) out << e.test_acc;
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Channel surgery
// ---------------------------------------------------------------------------

/// Keeps only the saved output channels of every planned conv layer and
/// drops the matching input slices of the next parameter layer (input
/// channels of a conv, per-channel column blocks of a linear layer).
/// Surviving weights are copied bit-exactly.
template <class T>
BasicMicroNet<T> apply_plan(const BasicMicroNet<T>& net, const ModelPlan& plan) {
  const auto convs = net.conv_positions();
  const auto& layers = net.layers();
  // kept output channels per layer position; nullopt = all
  std::vector<std::optional<std::vector<std::size_t>>> kept(layers.size());
  for (const auto& lp : plan.layers) {
    if (lp.layer_index >= convs.size()) {
      throw Error(ErrorKind::PlanMismatch,
                  "plan layer " + std::to_string(lp.layer_index) + " but net has " +
                      std::to_string(convs.size()) + " conv layers");
    }
    const auto& conv = layers[convs[lp.layer_index]];
    if (lp.channels != conv.out.c) {
      throw Error(ErrorKind::PlanMismatch,
                  "plan layer " + std::to_string(lp.layer_index) + " has " +
                      std::to_string(lp.channels) + " channels, conv has " +
                      std::to_string(conv.out.c));
    }
    if (lp.saved.empty()) {
      throw Error(ErrorKind::EmptySavedSet,
                  "plan layer " + std::to_string(lp.layer_index) + " saves no channel");
    }
    validate_layer_plan(lp);
    kept[convs[lp.layer_index]] = lp.saved;
  }

  auto specs = net.specs();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (kept[i]) specs[i].out = kept[i]->size();
  }
  BasicMicroNet<T> out(net.input_shape(), specs);

  // Channel selection flowing into the current layer.
  std::optional<std::vector<std::size_t>> incoming;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& src = layers[i];
    auto& dst = out.layers()[i];
    if (src.spec.kind == LayerKind::Conv) {
      std::vector<std::size_t> outs(src.out.c);
      std::iota(outs.begin(), outs.end(), std::size_t{0});
      if (kept[i]) outs = *kept[i];
      std::vector<std::size_t> ins(src.in.c);
      std::iota(ins.begin(), ins.end(), std::size_t{0});
      if (incoming) ins = *incoming;
      const std::size_t kk = src.spec.kernel * src.spec.kernel;
      for (std::size_t o = 0; o < outs.size(); ++o) {
        dst.bias[o] = src.bias[outs[o]];
        for (std::size_t c = 0; c < ins.size(); ++c) {
          std::copy_n(src.weight.begin() +
                          static_cast<std::ptrdiff_t>((outs[o] * src.in.c + ins[c]) * kk),
                      kk,
                      dst.weight.begin() + static_cast<std::ptrdiff_t>((o * ins.size() + c) * kk));
        }
      }
      incoming = kept[i];
    } else if (src.spec.kind == LayerKind::Linear) {
      // Flattened input is [c][y][x]; each channel owns a block of
      // in.size() / channels columns.
      std::vector<std::size_t> cols(src.in.size());
      std::iota(cols.begin(), cols.end(), std::size_t{0});
      if (incoming) {
        const std::size_t channels_before = [&] {
          for (std::size_t k = i; k-- > 0;) {
            if (layers[k].spec.kind == LayerKind::Conv) return layers[k].out.c;
          }
          return net.input_shape().c;
        }();
        const std::size_t block = src.in.size() / channels_before;
        cols.clear();
        for (auto c : *incoming) {
          for (std::size_t j = 0; j < block; ++j) cols.push_back(c * block + j);
        }
      }
      for (std::size_t o = 0; o < src.out.c; ++o) {
        dst.bias[o] = src.bias[o];
        for (std::size_t j = 0; j < cols.size(); ++j) {
          dst.weight[o * cols.size() + j] = src.weight[o * src.in.size() + cols[j]];
        }
      }
      incoming.reset();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adversarial attacks
// ---------------------------------------------------------------------------

/// Gradient of the cross-entropy loss with respect to the input image.
template <class T>
std::vector<T> input_gradient(const BasicMicroNet<T>& net, std::span<const T> image,
                              std::size_t label) {
  Trace<T> trace;
  forward_into(net, image, trace);
  std::vector<T> grad_logits(net.classes());
  softmax_cross_entropy(trace.logits(), label, std::span<T>(grad_logits));
  return backward(net, trace, std::span<const T>(grad_logits),
                  static_cast<Gradients<T>*>(nullptr));
}

namespace detail {

template <class T>
T sign(T v) {
  return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
}

/// Clamps `candidate` into [x - eps, x + eps] and [0, 1], rounding toward
/// `x` so the bound holds exactly in T.
template <class T>
T project(double candidate, T x, double eps) {
  const double lo = std::max(0.0, static_cast<double>(x) - eps);
  const double hi = std::min(1.0, static_cast<double>(x) + eps);
  const double c = std::clamp(candidate, lo, hi);
  T v = static_cast<T>(c);
  if (static_cast<double>(v) > hi) v = std::nextafter(v, x);
  if (static_cast<double>(v) < lo) v = std::nextafter(v, x);
  return v;
}

}  // namespace detail

/// x' = clip(x + eps sign(grad_x loss)).
template <class T>
std::vector<T> fgsm(const BasicMicroNet<T>& net, std::span<const T> image,
                    std::size_t label, double epsilon) {
  std::vector<T> adv(image.begin(), image.end());
  if (epsilon <= 0.0) return adv;
  const auto g = input_gradient(net, image, label);
  for (std::size_t j = 0; j < adv.size(); ++j) {
    adv[j] = detail::project(static_cast<double>(image[j]) +
                                 epsilon * static_cast<double>(detail::sign(g[j])),
                             image[j], epsilon);
  }
  return adv;
}

/// Iterated FGSM with step `step_size`, projected onto the eps ball and
/// [0, 1] after every step. No random start.
template <class T>
std::vector<T> pgd(const BasicMicroNet<T>& net, std::span<const T> image,
                   std::size_t label, double epsilon, std::size_t steps = 10,
                   std::optional<double> step_size = std::nullopt) {
  std::vector<T> adv(image.begin(), image.end());
  if (epsilon <= 0.0) return adv;
  const double alpha = step_size.value_or(epsilon / 4.0);
  for (std::size_t s = 0; s < steps; ++s) {
    const auto g = input_gradient(net, std::span<const T>(adv), label);
    for (std::size_t j = 0; j < adv.size(); ++j) {
      adv[j] = detail::project(static_cast<double>(adv[j]) +
                                   alpha * static_cast<double>(detail::sign(g[j])),
                               image[j], epsilon);
    }
  }
  return adv;
}

enum class Attack { Fgsm, Pgd };

/// Copy of `data` with every image replaced by its adversarial counterpart.
template <class T>
Dataset attack_dataset(const BasicMicroNet<T>& net, const Dataset& data, Attack attack,
                       double epsilon) {
  Dataset out = data;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto img = detail::image_as<T>(data, i);
    const auto adv = attack == Attack::Fgsm
                         ? fgsm(net, std::span<const T>(img), data.labels[i], epsilon)
                         : pgd(net, std::span<const T>(img), data.labels[i], epsilon);
    std::transform(adv.begin(), adv.end(),
                   out.images.begin() + static_cast<std::ptrdiff_t>(i * data.shape.size()),
                   [](T v) { return static_cast<float>(v); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weight store
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json specs_to_json(Shape3 input, const std::vector<LayerSpec>& specs) {
  nlohmann::ordered_json j;
  j["input"] = {input.c, input.h, input.w};
  auto arr = nlohmann::ordered_json::array();
  for (const auto& s : specs) {
    nlohmann::ordered_json e;
    switch (s.kind) {
      case LayerKind::Conv:
        e["kind"] = "conv";
        e["out_channels"] = s.out;
        e["kernel"] = s.kernel;
        break;
      case LayerKind::Relu: e["kind"] = "relu"; break;
      case LayerKind::MaxPool: e["kind"] = "maxpool"; break;
      case LayerKind::Flatten: e["kind"] = "flatten"; break;
      case LayerKind::Linear:
        e["kind"] = "linear";
        e["out_features"] = s.out;
        break;
    }
    arr.push_back(std::move(e));
  }
  j["layers"] = std::move(arr);
  return j;
}

inline std::pair<Shape3, std::vector<LayerSpec>> specs_from_json(const nlohmann::ordered_json& j) {
  const auto in = j.at("input").get<std::vector<std::size_t>>();
  if (in.size() != 3) throw Error(ErrorKind::MalformedPlan, "model input must have 3 dims");
  std::vector<LayerSpec> specs;
  for (const auto& e : j.at("layers")) {
    const auto kind = e.at("kind").get<std::string>();
    if (kind == "conv") {
      specs.push_back(LayerSpec::conv(e.at("out_channels").get<std::size_t>(),
                                      e.at("kernel").get<std::size_t>()));
    } else if (kind == "relu") {
      specs.push_back(LayerSpec::relu());
    } else if (kind == "maxpool") {
      specs.push_back(LayerSpec::maxpool());
    } else if (kind == "flatten") {
      specs.push_back(LayerSpec::flatten());
    } else if (kind == "linear") {
      specs.push_back(LayerSpec::linear(e.at("out_features").get<std::size_t>()));
    } else {
      throw Error(ErrorKind::MalformedPlan, "unknown layer kind '" + kind + "'");
    }
  }
  return {Shape3{in[0], in[1], in[2]}, specs};
}

/// Writes model.json plus weight_<k>.cfd / bias_<k>.cfd for every parameter
/// layer k (dims out, in, kh, kw; linear as out, in, 1, 1).
inline void save_weights(const MicroNet& net, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoFailure, "cannot create '" + dir.string() + "'");
  {
    std::ofstream out(dir / "model.json", std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write model.json in " + dir.string());
    out << specs_to_json(net.input_shape(), net.specs()).dump(2) << "\n";
  }
  const auto params = net.param_positions();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& l = net.layers()[params[k]];
    const auto kdim = static_cast<std::uint32_t>(
        l.spec.kind == LayerKind::Conv ? l.spec.kernel : 1);
    const auto in = static_cast<std::uint32_t>(
        l.spec.kind == LayerKind::Conv ? l.in.c : l.in.size());
    TensorRecord w;
    w.header.layer_index = static_cast<std::uint32_t>(k);
    w.header.dims = {static_cast<std::uint32_t>(l.out.c), in, kdim, kdim};
    w.data = l.weight;
    write_record(w, dir / ("weight_" + std::to_string(k) + ".cfd"));
    TensorRecord b;
    b.header.layer_index = static_cast<std::uint32_t>(k);
    b.header.dims = {static_cast<std::uint32_t>(l.out.c), 1, 1, 1};
    b.data = l.bias;
    write_record(b, dir / ("bias_" + std::to_string(k) + ".cfd"));
  }
}

inline MicroNet load_weights(const std::filesystem::path& dir) {
  nlohmann::ordered_json j;
  try {
    std::ifstream in(dir / "model.json");
    if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + (dir / "model.json").string());
    j = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedPlan,
                (dir / "model.json").string() + ": " + e.what());
  }
  auto [input, specs] = [&] {
    try {
      return specs_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::MalformedPlan, (dir / "model.json").string() + ": " + e.what());
    }
  }();
  MicroNet net(input, specs);
  const auto params = net.param_positions();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& l = net.layers()[params[k]];
    const auto wpath = dir / ("weight_" + std::to_string(k) + ".cfd");
    const auto bpath = dir / ("bias_" + std::to_string(k) + ".cfd");
    auto w = read_record(wpath);
    auto b = read_record(bpath);
    if (w.data.size() != l.weight.size() || w.header.dims[0] != l.out.c) {
      throw Error(ErrorKind::ShapeMismatch, wpath.string() + ": shape disagrees with model.json");
    }
    if (b.data.size() != l.bias.size()) {
      throw Error(ErrorKind::ShapeMismatch, bpath.string() + ": shape disagrees with model.json");
    }
    l.weight = std::move(w.data);
    l.bias = std::move(b.data);
  }
  return net;
}

}  // namespace cfdp
