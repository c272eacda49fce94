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

#include <algorithm>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "lbcnn/architecture.hpp"
#include "lbcnn/common.hpp"
#include "lbcnn/tensor.hpp"

namespace lbcnn {

/// Features are stored one sample per column (n_features x n_samples).
using FeatureMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

namespace detail {

// Multiply-free binary depthwise 3x3 convolution, pad 1, stride 1, on one
// HWC sample. Taps with weight +1 are added, taps with -1 subtracted, in
// (ky, kx) order; taps that fall outside the image are skipped.
template <typename T>
void conv3x3_sample(std::span<const T> in, std::size_t h, std::size_t w,
                    const KernelLayer& layer, std::span<T> out) {
  const std::size_t in_c = layer.in_channels;
  const std::size_t mult = static_cast<std::size_t>(layer.multiplier);
  const std::size_t out_c = in_c * mult;
  for (std::size_t y = 0; y < h; ++y) {
    const int ky0 = y == 0 ? 1 : 0;
    const int ky1 = y + 1 == h ? 2 : 3;
    for (std::size_t x = 0; x < w; ++x) {
      const int kx0 = x == 0 ? 1 : 0;
      const int kx1 = x + 1 == w ? 2 : 3;
      T* dst = out.data() + (y * w + x) * out_c;
      for (std::size_t c = 0; c < in_c; ++c) {
        for (std::size_t m = 0; m < mult; ++m) {
          const std::int8_t* k =
              layer.weights.data() + (m * in_c + c) * kKernelTaps;
          T acc = static_cast<T>(layer.biases[c * mult + m]);
          for (int ky = ky0; ky < ky1; ++ky) {
            const T* row = in.data() + ((y + ky - 1) * w) * in_c + c;
            for (int kx = kx0; kx < kx1; ++kx) {
              const T v = row[(x + kx - 1) * in_c];
              if (k[ky * kKernelSize + kx] > 0)
                acc += v;
              else
                acc -= v;
            }
          }
          dst[c * mult + m] = acc;
        }
      }
    }
  }
}

// Max pooling with -inf padding over one HWC sample.
template <typename T>
void maxpool_sample(std::span<const T> in, std::size_t h, std::size_t w,
                    std::size_t c, int k, int s, int p, std::size_t out_h,
                    std::size_t out_w, std::span<T> out) {
  const T lowest = std::numeric_limits<T>::has_infinity
                       ? -std::numeric_limits<T>::infinity()
                       : std::numeric_limits<T>::lowest();
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const long y0 = static_cast<long>(oy) * s - p;
    const long ya = std::max<long>(y0, 0);
    const long yb = std::min<long>(y0 + k, static_cast<long>(h));
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const long x0 = static_cast<long>(ox) * s - p;
      const long xa = std::max<long>(x0, 0);
      const long xb = std::min<long>(x0 + k, static_cast<long>(w));
      if (ya >= yb || xa >= xb)
        throw Error(ErrorKind::kArchitecture,
                    "pooling window covers no image cells");
      T* dst = out.data() + (oy * out_w + ox) * c;
      std::fill(dst, dst + c, lowest);
      for (long iy = ya; iy < yb; ++iy)
        for (long ix = xa; ix < xb; ++ix) {
          const T* src =
              in.data() + (static_cast<std::size_t>(iy) * w +
                           static_cast<std::size_t>(ix)) *
                              c;
          for (std::size_t ch = 0; ch < c; ++ch)
            dst[ch] = src[ch] > dst[ch] ? src[ch] : dst[ch];
        }
    }
  }
}

}  // namespace detail

template <typename T>
Tensor4<T> depthwise_conv3x3(const Tensor4<T>& x, const KernelLayer& layer) {
  const Shape4& s = x.shape();
  if (s.c != layer.in_channels)
    throw Error(ErrorKind::kShape,
                "convolution expects " + std::to_string(layer.in_channels) +
                    " channels, input has " + std::to_string(s.c));
  if (layer.weights.size() != layer.weight_count() ||
      layer.biases.size() != layer.out_channels())
    throw Error(ErrorKind::kShape, "kernel layer has inconsistent sizes");
  Tensor4<T> out(Shape4{s.n, s.h, s.w, layer.out_channels()});
  for (std::size_t n = 0; n < s.n; ++n)
    detail::conv3x3_sample<T>(x.sample(n), s.h, s.w, layer, out.sample(n));
  return out;
}

template <typename T>
Tensor4<T> maxpool_coverall(const Tensor4<T>& x, int k = kPoolSize,
                            int s = kPoolStride, int p = kPoolPad) {
  const Shape4& in = x.shape();
  const auto out_h =
      static_cast<std::size_t>(pool_out_size(static_cast<int>(in.h), k, s, p));
  const auto out_w =
      static_cast<std::size_t>(pool_out_size(static_cast<int>(in.w), k, s, p));
  Tensor4<T> out(Shape4{in.n, out_h, out_w, in.c});
  for (std::size_t n = 0; n < in.n; ++n)
    detail::maxpool_sample<T>(x.sample(n), in.h, in.w, in.c, k, s, p, out_h,
                              out_w, out.sample(n));
  return out;
}

/// Runs the conv -> pool chain for single samples with reusable scratch.
class FeatureExpander {
 public:
  FeatureExpander(const Architecture& arch, const KernelSet& kernels)
      : arch_(arch), kernels_(kernels) {
    arch_.validate();
    kernels_.validate_against(arch_);
    std::size_t largest = 0;
    for (std::size_t l = 0; l < arch_.layers(); ++l) {
      const auto [h, w] = arch_.spatial_at(l);
      largest = std::max(largest, h * w * arch_.channels_at(l + 1));
    }
    scratch_size_ = largest;
  }

  const Architecture& architecture() const { return arch_; }
  const KernelSet& kernels() const { return kernels_; }
  std::size_t n_features() const { return arch_.n_features(); }

  struct Scratch {
    std::vector<float> conv;
    std::vector<float> pool;
  };

  Scratch make_scratch() const {
    return Scratch{std::vector<float>(scratch_size_),
                   std::vector<float>(scratch_size_)};
  }

  /// Writes the flattened (H, W, C) feature vector of one sample to `out`.
  void expand(std::span<const float> sample, Scratch& scratch,
              std::span<float> out) const {
    std::span<const float> cur = sample;
    std::size_t h = arch_.height, w = arch_.width;
    for (std::size_t l = 0; l < arch_.layers(); ++l) {
      const KernelLayer& layer = kernels_.layers[l];
      const std::size_t c = layer.out_channels();
      std::span<float> conv(scratch.conv.data(), h * w * c);
      detail::conv3x3_sample<float>(cur, h, w, layer, conv);
      const auto oh = static_cast<std::size_t>(
          pool_out_size(static_cast<int>(h)));
      const auto ow = static_cast<std::size_t>(
          pool_out_size(static_cast<int>(w)));
      const bool last = l + 1 == arch_.layers();
      std::span<float> pooled =
          last ? out : std::span<float>(scratch.pool.data(), oh * ow * c);
      detail::maxpool_sample<float>(conv, h, w, c, kPoolSize, kPoolStride,
                                    kPoolPad, oh, ow, pooled);
      cur = pooled;
      h = oh;
      w = ow;
    }
  }

  /// Expands samples [first, first + count) of `images` into the columns of
  /// `dest` starting at `dest_col`.
  void expand_range(const Tensor4<float>& images, std::size_t first,
                    std::size_t count, FeatureMatrix& dest,
                    Eigen::Index dest_col, unsigned workers = 1) const {
    check_images(images);
    if (first + count > images.shape().n)
      throw Error(ErrorKind::kShape, "sample range out of bounds");
    if (static_cast<std::size_t>(dest.rows()) != n_features() ||
        dest_col + static_cast<Eigen::Index>(count) > dest.cols())
      throw Error(ErrorKind::kShape, "feature destination too small");
    const std::size_t threads =
        std::min<std::size_t>(std::max(1u, workers), std::max<std::size_t>(count, 1));
    std::vector<Scratch> scratch;
    for (std::size_t t = 0; t < threads; ++t) scratch.push_back(make_scratch());
    const std::size_t chunk = (count + threads - 1) / std::max<std::size_t>(threads, 1);
    parallel_for(threads, static_cast<unsigned>(threads), [&](std::size_t t) {
      const std::size_t begin = t * chunk;
      const std::size_t end = std::min(count, begin + chunk);
      for (std::size_t i = begin; i < end; ++i) {
        float* col = dest.col(dest_col + static_cast<Eigen::Index>(i)).data();
        expand(images.sample(first + i), scratch[t],
               std::span<float>(col, n_features()));
      }
    });
  }

  void check_images(const Tensor4<float>& images) const {
    const Shape4& s = images.shape();
    if (s.h != arch_.height || s.w != arch_.width || s.c != arch_.channels)
      throw Error(ErrorKind::kShape,
                  "images " + to_string(s) +
                      " do not match the architecture input shape");
  }

 private:
  Architecture arch_;
  KernelSet kernels_;
  std::size_t scratch_size_ = 0;
};

/// Expands every image into one feature column.
inline FeatureMatrix feature_expand(const Tensor4<float>& images,
                                    const Architecture& arch,
                                    const KernelSet& kernels,
                                    unsigned workers = 1) {
  FeatureExpander expander(arch, kernels);
  expander.check_images(images);
  FeatureMatrix features(static_cast<Eigen::Index>(expander.n_features()),
                         static_cast<Eigen::Index>(images.shape().n));
  expander.expand_range(images, 0, images.shape().n, features, 0, workers);
  return features;
}

}  // namespace lbcnn
