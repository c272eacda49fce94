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
#include <span>
#include <string>
#include <vector>

#include "lbcnn/common.hpp"

namespace lbcnn {

struct Shape4 {
  std::size_t n = 1, h = 1, w = 1, c = 1;

  std::size_t size() const { return n * h * w * c; }
  std::size_t sample_size() const { return h * w * c; }
  bool operator==(const Shape4&) const = default;
};

inline std::string to_string(const Shape4& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w) + "," + std::to_string(s.c) + ")";
}

// Dense NHWC tensor, row-major, channels last.
template <typename T>
class Tensor4 {
 public:
  Tensor4() = default;

  explicit Tensor4(Shape4 shape, T fill = T{}) : shape_(shape) {
    check_dims(shape);
    data_.assign(shape.size(), fill);
  }

  Tensor4(Shape4 shape, std::vector<T> data)
      : shape_(shape), data_(std::move(data)) {
    check_dims(shape);
    if (data_.size() != shape.size())
      throw Error(ErrorKind::kShape, "tensor data length " +
                                         std::to_string(data_.size()) +
                                         " does not match shape " +
                                         to_string(shape));
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  std::size_t offset(std::size_t n, std::size_t y, std::size_t x,
                     std::size_t c) const {
    return ((n * shape_.h + y) * shape_.w + x) * shape_.c + c;
  }
  T& at(std::size_t n, std::size_t y, std::size_t x, std::size_t c) {
    return data_[offset(n, y, x, c)];
  }
  const T& at(std::size_t n, std::size_t y, std::size_t x,
              std::size_t c) const {
    return data_[offset(n, y, x, c)];
  }

  std::span<T> sample(std::size_t n) {
    return {data_.data() + n * shape_.sample_size(), shape_.sample_size()};
  }
  std::span<const T> sample(std::size_t n) const {
    return {data_.data() + n * shape_.sample_size(), shape_.sample_size()};
  }

 private:
  static void check_dims(const Shape4& s) {
    if (s.n == 0 || s.h == 0 || s.w == 0 || s.c == 0)
      throw Error(ErrorKind::kShape,
                  "tensor dimensions must be >= 1, got " + to_string(s));
  }

  Shape4 shape_{};
  std::vector<T> data_;
};

}  // namespace lbcnn
