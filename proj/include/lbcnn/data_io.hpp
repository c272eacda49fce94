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

// Dataset ingestion: IDX (MNIST-style) and binary netpbm (P5/P6) image
// directories with one subdirectory per class.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include "lbcnn/common.hpp"
#include "lbcnn/tensor.hpp"

namespace lbcnn {

enum class PixelScale { kRaw8, kUnit };

inline const char* to_string(PixelScale s) {
  return s == PixelScale::kRaw8 ? "raw8" : "unit255";
}

struct Dataset {
  Tensor4<float> images;
  std::vector<int> labels;
  int n_classes = 0;
  std::vector<std::string> class_names;
  PixelScale scale = PixelScale::kRaw8;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (images.shape().n != labels.size())
      throw Error(ErrorKind::kFormat, "image count " +
                                          std::to_string(images.shape().n) +
                                          " != label count " +
                                          std::to_string(labels.size()));
    for (int l : labels)
      if (l < 0 || l >= n_classes)
        throw Error(ErrorKind::kFormat, "label outside [0, n_classes)");
  }
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path,
                       const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b,
                               std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint8_t to_byte(float v) {
  if (!(v >= 0.0f && v <= 255.0f) || v != std::floor(v))
    throw Error(ErrorKind::kFormat, "pixel value is not an 8-bit integer");
  return static_cast<std::uint8_t>(v);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (img.size() < 16)
    throw Error(ErrorKind::kFormat, images_path.string() + ": truncated header");
  if (lab.size() < 8)
    throw Error(ErrorKind::kFormat, labels_path.string() + ": truncated header");
  if (detail::read_be32(img, 0) != kIdxImagesMagic)
    throw Error(ErrorKind::kFormat, images_path.string() + ": bad image magic");
  if (detail::read_be32(lab, 0) != kIdxLabelsMagic)
    throw Error(ErrorKind::kFormat, labels_path.string() + ": bad label magic");
  const std::size_t n = detail::read_be32(img, 4);
  const std::size_t h = detail::read_be32(img, 8);
  const std::size_t w = detail::read_be32(img, 12);
  const std::size_t n_labels = detail::read_be32(lab, 4);
  if (n == 0 || h == 0 || w == 0)
    throw Error(ErrorKind::kFormat, images_path.string() + ": empty dimensions");
  if (n != n_labels)
    throw Error(ErrorKind::kFormat, "IDX files disagree on sample count (" +
                                        std::to_string(n) + " vs " +
                                        std::to_string(n_labels) + ")");
  if (img.size() < 16 + n * h * w)
    throw Error(ErrorKind::kFormat, images_path.string() + ": truncated pixels");
  if (lab.size() < 8 + n)
    throw Error(ErrorKind::kFormat, labels_path.string() + ": truncated labels");

  Dataset ds;
  std::vector<float> pixels(n * h * w);
  std::transform(img.begin() + 16, img.begin() + 16 + static_cast<long>(pixels.size()),
                 pixels.begin(), [](std::uint8_t v) { return static_cast<float>(v); });
  ds.images = Tensor4<float>(Shape4{n, h, w, 1}, std::move(pixels));
  ds.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.n_classes = max_label + 1;
  ds.scale = PixelScale::kRaw8;
  return ds;
}

/// Writes a single-channel raw 8-bit dataset as an IDX image/label pair.
inline void write_idx(const Dataset& ds,
                      const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  const Shape4& s = ds.images.shape();
  if (s.c != 1)
    throw Error(ErrorKind::kFormat, "IDX output needs single-channel images");
  if (ds.scale != PixelScale::kRaw8)
    throw Error(ErrorKind::kFormat, "IDX output needs raw 8-bit pixels");
  std::vector<std::uint8_t> img;
  img.reserve(16 + s.size());
  detail::put_be32(img, kIdxImagesMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(s.n));
  detail::put_be32(img, static_cast<std::uint32_t>(s.h));
  detail::put_be32(img, static_cast<std::uint32_t>(s.w));
  for (float v : ds.images.values()) img.push_back(detail::to_byte(v));
  std::vector<std::uint8_t> lab;
  detail::put_be32(lab, kIdxLabelsMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(ds.labels.size()));
  for (int l : ds.labels) {
    if (l < 0 || l > 255)
      throw Error(ErrorKind::kFormat, "IDX labels must fit in one byte");
    lab.push_back(static_cast<std::uint8_t>(l));
  }
  detail::write_file(images_path, img);
  detail::write_file(labels_path, lab);
}

struct PnmImage {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // HWC
};

namespace detail {

inline std::size_t pnm_header_int(const std::vector<std::uint8_t>& b,
                                  std::size_t& pos, const std::string& name) {
  for (;;) {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  if (pos >= b.size() || !std::isdigit(b[pos]))
    throw Error(ErrorKind::kFormat, name + ": malformed netpbm header");
  std::size_t v = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + static_cast<std::size_t>(b[pos] - '0');
    if (v > (1u << 24))
      throw Error(ErrorKind::kFormat, name + ": header value too large");
    ++pos;
  }
  return v;
}

}  // namespace detail

inline PnmImage parse_pnm(const std::vector<std::uint8_t>& b,
                          const std::string& name = "image") {
  if (b.size() < 2 || b[0] != 'P' || (b[1] != '5' && b[1] != '6'))
    throw Error(ErrorKind::kFormat, name + ": unsupported netpbm magic");
  PnmImage img;
  img.channels = b[1] == '5' ? 1 : 3;
  std::size_t pos = 2;
  img.width = detail::pnm_header_int(b, pos, name);
  img.height = detail::pnm_header_int(b, pos, name);
  const std::size_t maxval = detail::pnm_header_int(b, pos, name);
  if (img.width == 0 || img.height == 0)
    throw Error(ErrorKind::kFormat, name + ": empty image");
  if (maxval == 0 || maxval > 255)
    throw Error(ErrorKind::kFormat, name + ": maxval must be in [1, 255]");
  if (pos >= b.size() || !std::isspace(b[pos]))
    throw Error(ErrorKind::kFormat, name + ": malformed netpbm header");
  ++pos;  // exactly one whitespace byte before the raster
  const std::size_t bytes = img.width * img.height * img.channels;
  if (b.size() - pos < bytes)
    throw Error(ErrorKind::kFormat, name + ": truncated raster");
  img.pixels.assign(b.begin() + static_cast<long>(pos),
                    b.begin() + static_cast<long>(pos + bytes));
  return img;
}

inline PnmImage read_pnm(const std::filesystem::path& path) {
  return parse_pnm(detail::read_file(path), path.string());
}

inline void write_pnm(const std::filesystem::path& path, const PnmImage& img) {
  if (img.channels != 1 && img.channels != 3)
    throw Error(ErrorKind::kFormat, "netpbm output needs 1 or 3 channels");
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") +
                             "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
  detail::write_file(path, bytes);
}

/// One image as a (1, H, W, C) raw 8-bit tensor.
inline Tensor4<float> pnm_to_tensor(const PnmImage& img) {
  std::vector<float> v(img.pixels.begin(), img.pixels.end());
  return Tensor4<float>(Shape4{1, img.height, img.width, img.channels},
                        std::move(v));
}

/// Loads root/<class>/<image>. Classes and files are taken in lexicographic
/// order; the class index is the rank of the subdirectory name.
inline Dataset load_pnm_dir(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root))
    throw Error(ErrorKind::kIo, root.string() + " is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) {
              return a.filename().string() < b.filename().string();
            });
  if (class_dirs.empty())
    throw Error(ErrorKind::kFormat, root.string() + " has no class directories");

  Dataset ds;
  std::vector<float> pixels;
  std::size_t h = 0, w = 0, c = 0;
  for (std::size_t k = 0; k < class_dirs.size(); ++k) {
    ds.class_names.push_back(class_dirs[k].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[k]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) {
                return a.filename().string() < b.filename().string();
              });
    for (const auto& f : files) {
      const PnmImage img = read_pnm(f);
      if (ds.labels.empty()) {
        h = img.height;
        w = img.width;
        c = img.channels;
      } else if (img.height != h || img.width != w || img.channels != c) {
        throw Error(ErrorKind::kFormat,
                    f.string() + ": image shape differs from the first image");
      }
      pixels.insert(pixels.end(), img.pixels.begin(), img.pixels.end());
      ds.labels.push_back(static_cast<int>(k));
    }
  }
  if (ds.labels.empty())
    throw Error(ErrorKind::kFormat, root.string() + " contains no images");
  ds.images = Tensor4<float>(Shape4{ds.labels.size(), h, w, c}, std::move(pixels));
  ds.n_classes = static_cast<int>(class_dirs.size());
  ds.scale = PixelScale::kRaw8;
  return ds;
}

/// Divides raw 8-bit pixels by 255 into [0, 1].
inline Dataset normalize(Dataset ds) {
  if (ds.scale == PixelScale::kUnit) return ds;
  for (float& v : ds.images.values()) v = v / 255.0f;
  ds.scale = PixelScale::kUnit;
  return ds;
}

/// Samples at `indices`, in the given order.
inline Dataset select(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw Error(ErrorKind::kInput, "empty selection");
  const Shape4& s = ds.images.shape();
  const std::size_t stride = s.sample_size();
  std::vector<float> pixels;
  pixels.reserve(indices.size() * stride);
  Dataset out;
  for (std::size_t i : indices) {
    if (i >= ds.size()) throw Error(ErrorKind::kInput, "selection out of range");
    const auto src = ds.images.sample(i);
    pixels.insert(pixels.end(), src.begin(), src.end());
    out.labels.push_back(ds.labels[i]);
  }
  out.images = Tensor4<float>(Shape4{indices.size(), s.h, s.w, s.c}, std::move(pixels));
  out.n_classes = ds.n_classes;
  out.class_names = ds.class_names;
  out.scale = ds.scale;
  return out;
}

/// The first min(m, N) samples.
inline Dataset take_first(const Dataset& ds, std::size_t m) {
  if (m >= ds.size()) return ds;
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return select(ds, idx);
}

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Per class, max(1, floor(fraction * count)) samples go to train after a
/// seeded Fisher-Yates shuffle; the rest go to test. Both index lists are
/// returned in ascending order.
inline SplitIndices stratified_indices(const std::vector<int>& labels,
                                       int n_classes, double train_fraction,
                                       std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw Error(ErrorKind::kSplit, "train fraction must be in (0, 1)");
  std::vector<std::vector<std::size_t>> per_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < labels.size(); ++i)
    per_class.at(static_cast<std::size_t>(labels[i])).push_back(i);
  SplitIndices out;
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    auto& idx = per_class[k];
    if (idx.empty()) continue;
    if (idx.size() < 2)
      throw Error(ErrorKind::kSplit,
                  "class " + std::to_string(k) + " has fewer than 2 samples");
    std::uint64_t state = split_seed(seed, k);
    for (std::size_t i = idx.size() - 1; i > 0; --i) {
      state = mix64(state);
      const std::size_t j = static_cast<std::size_t>(state % (i + 1));
      std::swap(idx[i], idx[j]);
    }
    const auto n_train = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::floor(train_fraction * static_cast<double>(idx.size()))));
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<long>(n_train));
    out.test.insert(out.test.end(), idx.begin() + static_cast<long>(n_train), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

inline std::pair<Dataset, Dataset> split_stratified(const Dataset& ds,
                                                    double train_fraction,
                                                    std::uint64_t seed) {
  const SplitIndices idx =
      stratified_indices(ds.labels, ds.n_classes, train_fraction, seed);
  return {select(ds, idx.train), select(ds, idx.test)};
}

}  // namespace lbcnn
