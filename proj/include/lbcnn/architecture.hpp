/*
Copyright 2026 The LB-CNN Authors. All rights reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
*/
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lbcnn/common.hpp"

namespace lbcnn {

inline constexpr int kKernelSize = 3;
inline constexpr int kKernelTaps = kKernelSize * kKernelSize;
inline constexpr int kConvPad = 1;
inline constexpr int kPoolSize = 4;
inline constexpr int kPoolStride = 2;
inline constexpr int kPoolPad = 1;
inline constexpr std::size_t kMaxLayers = 3;

/// Output length of a cover-all pooling axis: ceil((in + 2p - k) / s) + 1.
/// The last window may hang over the padded edge.
constexpr int pool_out_size(int in_size, int k = kPoolSize,
                            int s = kPoolStride, int p = kPoolPad) {
  if (s < 1 || k < 1 || p < 0)
    throw Error(ErrorKind::kArchitecture, "pooling needs k >= 1, s >= 1, p >= 0");
  if (in_size + 2 * p < 1)
    throw Error(ErrorKind::kArchitecture, "padded pooling input is empty");
  const int span = in_size + 2 * p - k;
  // floor division that also behaves for negative spans
  const int num = span + s - 1;
  const int q = num >= 0 ? num / s : -((-num + s - 1) / s);
  const int out = q + 1;
  if (out < 1)
    throw Error(ErrorKind::kArchitecture,
                "pooling of size " + std::to_string(in_size) +
                    " yields an empty output");
  return out;
}

struct Architecture {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<int> multipliers;
  int n_classes = 0;

  std::size_t layers() const { return multipliers.size(); }

  /// Input channel count of layer `l`; layer `layers()` is the output.
  std::size_t channels_at(std::size_t l) const {
    std::size_t c = channels;
    for (std::size_t i = 0; i < l; ++i)
      c *= static_cast<std::size_t>(multipliers[i]);
    return c;
  }

  /// Spatial size entering layer `l` (after l pooling stages).
  std::pair<std::size_t, std::size_t> spatial_at(std::size_t l) const {
    int h = static_cast<int>(height);
    int w = static_cast<int>(width);
    for (std::size_t i = 0; i < l; ++i) {
      h = pool_out_size(h);
      w = pool_out_size(w);
    }
    return {static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
  }

  std::size_t input_size() const { return height * width * channels; }

  std::size_t n_features() const {
    const auto [h, w] = spatial_at(layers());
    return h * w * channels_at(layers());
  }

  double expansion_factor() const {
    return static_cast<double>(n_features()) /
           static_cast<double>(input_size());
  }

  void validate() const {
    if (height == 0 || width == 0 || channels == 0)
      throw Error(ErrorKind::kArchitecture, "input shape must be positive");
    if (multipliers.empty() || multipliers.size() > kMaxLayers)
      throw Error(ErrorKind::kArchitecture,
                  "an architecture has 1 to 3 layers, got " +
                      std::to_string(multipliers.size()));
    for (int m : multipliers)
      if (m < 1)
        throw Error(ErrorKind::kArchitecture,
                    "channel multipliers must be positive");
    if (n_classes < 1)
      throw Error(ErrorKind::kArchitecture, "n_classes must be positive");
    (void)spatial_at(layers());  // throws if a grid collapses
  }

  bool operator==(const Architecture&) const = default;
};

struct ParamBits {
  std::uint64_t conv_bits = 0;
  std::uint64_t elm_bits = 0;
  bool operator==(const ParamBits&) const = default;
};

/// One bit per binary weight (biases are not counted) and 8 bits per output
/// weight.
inline ParamBits param_bits(const Architecture& arch) {
  arch.validate();
  ParamBits bits;
  for (std::size_t l = 0; l < arch.layers(); ++l)
    bits.conv_bits += static_cast<std::uint64_t>(kKernelTaps) *
                      static_cast<std::uint64_t>(arch.multipliers[l]) *
                      arch.channels_at(l);
  bits.elm_bits = static_cast<std::uint64_t>(arch.n_features()) *
                  static_cast<std::uint64_t>(arch.n_classes) * 8u;
  return bits;
}

// Binary depthwise kernels of one layer. Weight (m, c, ky, kx) lives at
// ((m * in_channels + c) * 3 + ky) * 3 + kx; output channel c * M + m.
struct KernelLayer {
  int multiplier = 0;
  std::size_t in_channels = 0;
  std::vector<std::int8_t> weights;  // each exactly -1 or +1
  std::vector<double> biases;        // length in_channels * multiplier

  std::size_t out_channels() const {
    return in_channels * static_cast<std::size_t>(multiplier);
  }
  std::size_t weight_count() const {
    return out_channels() * static_cast<std::size_t>(kKernelTaps);
  }
  std::int8_t weight(int m, std::size_t c, int ky, int kx) const {
    return weights[((static_cast<std::size_t>(m) * in_channels + c) *
                        kKernelSize +
                    static_cast<std::size_t>(ky)) *
                       kKernelSize +
                   static_cast<std::size_t>(kx)];
  }
  bool operator==(const KernelLayer&) const = default;
};

struct KernelSet {
  std::vector<KernelLayer> layers;

  std::size_t weight_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight_count();
    return n;
  }

  void validate_against(const Architecture& arch) const {
    if (layers.size() != arch.layers())
      throw Error(ErrorKind::kShape, "kernel set has " +
                                         std::to_string(layers.size()) +
                                         " layers, architecture has " +
                                         std::to_string(arch.layers()));
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& k = layers[l];
      if (k.multiplier != arch.multipliers[l] ||
          k.in_channels != arch.channels_at(l))
        throw Error(ErrorKind::kShape,
                    "kernel layer " + std::to_string(l) +
                        " does not match the architecture");
      if (k.weights.size() != k.weight_count() ||
          k.biases.size() != k.out_channels())
        throw Error(ErrorKind::kShape, "kernel layer " + std::to_string(l) +
                                           " has inconsistent sizes");
      for (auto w : k.weights)
        if (w != 1 && w != -1)
          throw Error(ErrorKind::kInput, "binary weights must be -1 or +1");
    }
  }

  bool operator==(const KernelSet&) const = default;
};

}  // namespace lbcnn
