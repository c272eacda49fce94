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
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "lbcnn/common.hpp"
#include "lbcnn/elm.hpp"

namespace lbcnn {

using QuantMatrix =
    Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

// Symmetric per-tensor fixed point: w ~= q * scale, |q| <= 2^(bits-1) - 1.
struct QuantizedWeights {
  QuantMatrix q;
  double scale = 1.0;
  int bits = 8;

  int max_level() const { return (1 << (bits - 1)) - 1; }

  OutputWeights dequantize() const { return q.cast<double>() * scale; }

  bool operator==(const QuantizedWeights& o) const {
    return bits == o.bits && scale == o.scale && q.rows() == o.q.rows() &&
           q.cols() == o.q.cols() && q == o.q;
  }
};

inline QuantizedWeights quantize(const OutputWeights& w, int bits = 8) {
  if (bits < 2 || bits > 8)
    throw Error(ErrorKind::kInput, "quantization bits must be in [2, 8]");
  check_finite(w, "output weights");
  QuantizedWeights qw;
  qw.bits = bits;
  const double levels = qw.max_level();
  const double peak = w.size() ? w.cwiseAbs().maxCoeff() : 0.0;
  qw.scale = peak > 0.0 ? peak / levels : 1.0;
  qw.q.resize(w.rows(), w.cols());
  // nearbyint honours the current rounding mode; pin round-half-even.
  const int saved = std::fegetround();
  std::fesetround(FE_TONEAREST);
  for (Eigen::Index j = 0; j < w.cols(); ++j)
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      const double r = peak > 0.0 ? std::nearbyint(w(i, j) / qw.scale) : 0.0;
      qw.q(i, j) = static_cast<std::int8_t>(std::clamp(r, -levels, levels));
    }
  std::fesetround(saved);
  return qw;
}

/// Argmax over integer-weight scores sum_j q(j, k) * h_j. The shared scale is
/// never applied since it cannot change the argmax.
template <typename Derived>
std::vector<int> quantized_predict(const QuantizedWeights& qw,
                                   const Eigen::MatrixBase<Derived>& h,
                                   unsigned workers = 1) {
  if (h.rows() != qw.q.rows())
    throw Error(ErrorKind::kShape,
                "quantized weights expect " + std::to_string(qw.q.rows()) +
                    " features, got " + std::to_string(h.rows()));
  const Eigen::MatrixXd levels = qw.q.cast<double>();
  return predict(levels, h, workers);
}

}  // namespace lbcnn
