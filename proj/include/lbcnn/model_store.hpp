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

// Model container. Every multi-byte field is little-endian.
//
//   offset 0   "LBCN"
//          4   u32 format version (1)
//          8   u32 header length L
//         12   L bytes of UTF-8 JSON header
//              payload:
//                per layer: packed kernel bits, ceil(9*M*C / 8) bytes,
//                           weight i at bit (i % 8) of byte i / 8,
//                           1 -> +1, 0 -> -1, order (m, c, ky, kx)
//                per layer with biases_present[l]: M*C f64
//                output, row-major (feature, class):
//                  float64:   n_features * n_classes f64
//                  quantized: ceil(n_features * n_classes * b / 8) bytes of
//                             b-bit two's complement fields packed LSB first,
//                             then one f64 scale
//              u32 CRC-32 of every preceding byte
//
// All payload sizes follow from the header.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "lbcnn/architecture.hpp"
#include "lbcnn/common.hpp"
#include "lbcnn/data_io.hpp"
#include "lbcnn/elm.hpp"
#include "lbcnn/ops.hpp"
#include "lbcnn/quantize.hpp"

namespace lbcnn {

inline constexpr char kModelMagic[4] = {'L', 'B', 'C', 'N'};
inline constexpr std::uint32_t kModelFormatVersion = 1;

struct Provenance {
  std::optional<std::uint64_t> master_seed;
  std::optional<std::uint64_t> best_trial_seed;
  std::optional<double> accuracy;
  bool operator==(const Provenance&) const = default;
};

using OutputLayer = std::variant<OutputWeights, QuantizedWeights>;

struct Model {
  Architecture arch;
  KernelSet kernels;
  OutputLayer output;
  std::vector<std::string> class_names;
  std::string normalization = "unit255";
  Provenance provenance;

  bool quantized() const { return std::holds_alternative<QuantizedWeights>(output); }

  /// Float weights, dequantized if needed.
  OutputWeights float_weights() const {
    if (const auto* q = std::get_if<QuantizedWeights>(&output)) return q->dequantize();
    return std::get<OutputWeights>(output);
  }

  void validate() const {
    arch.validate();
    kernels.validate_against(arch);
    const auto rows = static_cast<Eigen::Index>(arch.n_features());
    const bool ok = std::visit(
        [&](const auto& w) {
          if constexpr (std::is_same_v<std::decay_t<decltype(w)>, QuantizedWeights>)
            return w.q.rows() == rows && w.q.cols() == arch.n_classes;
          else
            return w.rows() == rows && w.cols() == arch.n_classes;
        },
        output);
    if (!ok) throw Error(ErrorKind::kShape, "output weights do not match the architecture");
    if (!class_names.empty() &&
        class_names.size() != static_cast<std::size_t>(arch.n_classes))
      throw Error(ErrorKind::kShape, "class_names length differs from n_classes");
  }

  /// Class predictions for already-expanded features.
  template <typename Derived>
  std::vector<int> predict_features(const Eigen::MatrixBase<Derived>& h,
                                    unsigned workers = 1) const {
    if (const auto* q = std::get_if<QuantizedWeights>(&output))
      return quantized_predict(*q, h, workers);
    return predict(std::get<OutputWeights>(output), h, workers);
  }

  bool operator==(const Model& o) const {
    if (!(arch == o.arch && kernels == o.kernels && class_names == o.class_names &&
          normalization == o.normalization && provenance == o.provenance &&
          output.index() == o.output.index()))
      return false;
    if (quantized()) return std::get<QuantizedWeights>(output) == std::get<QuantizedWeights>(o.output);
    const auto& a = std::get<OutputWeights>(output);
    const auto& b = std::get<OutputWeights>(o.output);
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
  }
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::size_t pos, std::size_t end)
      : b_(b), pos_(pos), end_(end) {}
  const std::uint8_t* take(std::size_t n) {
    if (end_ - pos_ < n) throw Error(ErrorKind::kTruncated, "model payload is truncated");
    const std::uint8_t* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const auto* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{p[i]} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{p[i]} << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_;
  std::size_t end_;
};

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto step = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, p, step);
    p += step;
    n -= step;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::size_t packed_bytes(std::size_t bits) { return (bits + 7) / 8; }

}  // namespace detail

/// Packs +-1 weights one bit each, LSB first; 1 means +1.
inline std::vector<std::uint8_t> pack_kernel_bits(std::span<const std::int8_t> w) {
  std::vector<std::uint8_t> out(detail::packed_bytes(w.size()), 0);
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w[i] > 0) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  return out;
}

inline std::vector<std::int8_t> unpack_kernel_bits(std::span<const std::uint8_t> bytes,
                                                   std::size_t count) {
  if (bytes.size() < detail::packed_bytes(count))
    throw Error(ErrorKind::kTruncated, "packed kernel section too short");
  std::vector<std::int8_t> w(count);
  for (std::size_t i = 0; i < count; ++i)
    w[i] = (bytes[i / 8] >> (i % 8)) & 1u ? 1 : -1;
  return w;
}

/// Bytes occupied by the packed kernels of every layer.
inline std::size_t kernel_section_bytes(const Architecture& arch) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < arch.layers(); ++l)
    n += detail::packed_bytes(static_cast<std::size_t>(kKernelTaps) *
                              static_cast<std::size_t>(arch.multipliers[l]) *
                              arch.channels_at(l));
  return n;
}

inline nlohmann::json architecture_to_json(const Architecture& a) {
  return {{"input_shape", {a.height, a.width, a.channels}},
          {"multipliers", a.multipliers},
          {"n_classes", a.n_classes},
          {"kernel_size", kKernelSize},
          {"conv_pad", kConvPad},
          {"conv_stride", 1},
          {"pool_size", kPoolSize},
          {"pool_stride", kPoolStride},
          {"pool_pad", kPoolPad}};
}

inline Architecture architecture_from_json(const nlohmann::json& j) {
  Architecture a;
  const auto shape = j.at("input_shape").get<std::vector<std::size_t>>();
  if (shape.size() != 3) throw Error(ErrorKind::kFormat, "input_shape must have 3 entries");
  a.height = shape[0];
  a.width = shape[1];
  a.channels = shape[2];
  a.multipliers = j.at("multipliers").get<std::vector<int>>();
  a.n_classes = j.at("n_classes").get<int>();
  if (j.value("kernel_size", kKernelSize) != kKernelSize ||
      j.value("conv_pad", kConvPad) != kConvPad || j.value("conv_stride", 1) != 1 ||
      j.value("pool_size", kPoolSize) != kPoolSize ||
      j.value("pool_stride", kPoolStride) != kPoolStride ||
      j.value("pool_pad", kPoolPad) != kPoolPad)
    throw Error(ErrorKind::kFormat, "unsupported fixed layer hyperparameters");
  a.validate();
  return a;
}

namespace detail {

inline nlohmann::json optional_json(const auto& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json model_header(const Model& m) {
  nlohmann::json biases = nlohmann::json::array();
  for (const auto& l : m.kernels.layers)
    biases.push_back(std::any_of(l.biases.begin(), l.biases.end(),
                                 [](double b) { return std::bit_cast<std::uint64_t>(b) != 0; }));
  nlohmann::json output;
  if (const auto* q = std::get_if<QuantizedWeights>(&m.output))
    output = {{"kind", "quantized"}, {"bits", q->bits}, {"scale", q->scale}};
  else
    output = {{"kind", "float64"}};
  return {{"architecture", architecture_to_json(m.arch)},
          {"n_classes", m.arch.n_classes},
          {"class_names", m.class_names},
          {"normalization", m.normalization},
          {"biases_present", biases},
          {"output", output},
          {"provenance",
           {{"master_seed", optional_json(m.provenance.master_seed)},
            {"best_trial_seed", optional_json(m.provenance.best_trial_seed)},
            {"accuracy", optional_json(m.provenance.accuracy)}}}};
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_model(const Model& m) {
  m.validate();
  detail::ByteWriter w;
  w.bytes(kModelMagic, 4);
  w.u32(kModelFormatVersion);
  const nlohmann::json header = detail::model_header(m);
  const std::string text = header.dump();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  for (const auto& l : m.kernels.layers) {
    const auto packed = pack_kernel_bits(l.weights);
    w.bytes(packed.data(), packed.size());
  }
  const auto& present = header["biases_present"];
  for (std::size_t l = 0; l < m.kernels.layers.size(); ++l)
    if (present[l].get<bool>())
      for (double b : m.kernels.layers[l].biases) w.f64(b);
  if (const auto* q = std::get_if<QuantizedWeights>(&m.output)) {
    const std::size_t total = static_cast<std::size_t>(q->q.size());
    std::vector<std::uint8_t> packed(detail::packed_bytes(total * static_cast<std::size_t>(q->bits)), 0);
    std::size_t bit = 0;
    const std::uint32_t mask = (1u << q->bits) - 1u;
    for (Eigen::Index i = 0; i < q->q.rows(); ++i)
      for (Eigen::Index k = 0; k < q->q.cols(); ++k) {
        const std::uint32_t field = static_cast<std::uint32_t>(q->q(i, k)) & mask;
        for (int b = 0; b < q->bits; ++b, ++bit)
          if ((field >> b) & 1u) packed[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
      }
    w.bytes(packed.data(), packed.size());
    w.f64(q->scale);
  } else {
    const auto& ow = std::get<OutputWeights>(m.output);
    for (Eigen::Index i = 0; i < ow.rows(); ++i)
      for (Eigen::Index k = 0; k < ow.cols(); ++k) w.f64(ow(i, k));
  }
  auto& buf = w.buffer();
  const std::uint32_t crc = detail::crc32_of(buf.data(), buf.size());
  w.u32(crc);
  return std::move(buf);
}

struct ParsedContainer {
  nlohmann::json header;
  std::size_t payload_begin = 0;
  std::size_t payload_end = 0;  // position of the CRC trailer
};

/// Checks magic, version, framing and checksum, and parses the header.
inline ParsedContainer parse_container(const std::vector<std::uint8_t>& b) {
  if (b.size() < 4) throw Error(ErrorKind::kTruncated, "model file is truncated");
  if (std::memcmp(b.data(), kModelMagic, 4) != 0)
    throw Error(ErrorKind::kBadMagic, "not an LB-CNN model file (bad magic)");
  if (b.size() < 12) throw Error(ErrorKind::kTruncated, "model file is truncated");
  detail::ByteReader r(b, 4, b.size());
  const std::uint32_t version = r.u32();
  if (version != kModelFormatVersion)
    throw Error(ErrorKind::kBadVersion,
                "unsupported model format version " + std::to_string(version));
  const std::uint32_t header_len = r.u32();
  if (b.size() < 12 + std::size_t{header_len} + 4)
    throw Error(ErrorKind::kTruncated, "model file is truncated");
  ParsedContainer pc;
  pc.payload_end = b.size() - 4;
  detail::ByteReader trailer(b, pc.payload_end, b.size());
  const std::uint32_t stored = trailer.u32();
  const std::uint32_t actual = detail::crc32_of(b.data(), pc.payload_end);
  pc.payload_begin = 12 + std::size_t{header_len};

  // Expected payload size from the header alone. Header damage that breaks
  // parsing is reported as a checksum failure when the CRC disagrees.
  std::size_t expected = 0;
  try {
    try {
      pc.header = nlohmann::json::parse(b.begin() + 12, b.begin() + 12 + header_len);
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorKind::kFormat, "model header is not valid JSON");
    }
    try {
      const Architecture arch = architecture_from_json(pc.header.at("architecture"));
      expected += kernel_section_bytes(arch);
      const auto present = pc.header.at("biases_present").get<std::vector<bool>>();
      if (present.size() != arch.layers())
        throw Error(ErrorKind::kFormat, "biases_present length mismatch");
      for (std::size_t l = 0; l < arch.layers(); ++l)
        if (present[l]) expected += 8 * arch.channels_at(l + 1);
      const auto& out = pc.header.at("output");
      const std::size_t cells = arch.n_features() * static_cast<std::size_t>(arch.n_classes);
      const std::string kind = out.at("kind").get<std::string>();
      if (kind == "float64") {
        expected += 8 * cells;
      } else if (kind == "quantized") {
        const int bits = out.at("bits").get<int>();
        if (bits < 2 || bits > 8) throw Error(ErrorKind::kFormat, "quantized bits outside [2, 8]");
        expected += detail::packed_bytes(cells * static_cast<std::size_t>(bits)) + 8;
      } else {
        throw Error(ErrorKind::kFormat, "unknown output kind '" + kind + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::kFormat, std::string("malformed model header: ") + e.what());
    }
  } catch (const Error&) {
    if (stored != actual) throw Error(ErrorKind::kChecksum, "model checksum mismatch");
    throw;
  }
  const std::size_t have = pc.payload_end - pc.payload_begin;
  if (have < expected) throw Error(ErrorKind::kTruncated, "model payload is truncated");
  if (stored != actual) throw Error(ErrorKind::kChecksum, "model checksum mismatch");
  if (have > expected) throw Error(ErrorKind::kFormat, "model payload has trailing bytes");
  return pc;
}

inline Model deserialize_model(const std::vector<std::uint8_t>& b) {
  const ParsedContainer pc = parse_container(b);
  const auto& h = pc.header;
  Model m;
  try {
    m.arch = architecture_from_json(h.at("architecture"));
    m.class_names = h.at("class_names").get<std::vector<std::string>>();
    m.normalization = h.at("normalization").get<std::string>();
    const auto& prov = h.at("provenance");
    if (!prov.at("master_seed").is_null())
      m.provenance.master_seed = prov.at("master_seed").get<std::uint64_t>();
    if (!prov.at("best_trial_seed").is_null())
      m.provenance.best_trial_seed = prov.at("best_trial_seed").get<std::uint64_t>();
    if (!prov.at("accuracy").is_null())
      m.provenance.accuracy = prov.at("accuracy").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("malformed model header: ") + e.what());
  }
  detail::ByteReader r(b, pc.payload_begin, pc.payload_end);
  for (std::size_t l = 0; l < m.arch.layers(); ++l) {
    KernelLayer layer;
    layer.multiplier = m.arch.multipliers[l];
    layer.in_channels = m.arch.channels_at(l);
    const std::size_t count = layer.weight_count();
    const std::size_t nbytes = detail::packed_bytes(count);
    layer.weights = unpack_kernel_bits({r.take(nbytes), nbytes}, count);
    layer.biases.assign(layer.out_channels(), 0.0);
    m.kernels.layers.push_back(std::move(layer));
  }
  const auto present = h.at("biases_present").get<std::vector<bool>>();
  for (std::size_t l = 0; l < m.arch.layers(); ++l)
    if (present[l])
      for (double& v : m.kernels.layers[l].biases) v = r.f64();
  const auto rows = static_cast<Eigen::Index>(m.arch.n_features());
  const Eigen::Index cols = m.arch.n_classes;
  const auto& out = h.at("output");
  if (out.at("kind").get<std::string>() == "quantized") {
    QuantizedWeights q;
    q.bits = out.at("bits").get<int>();
    q.q.resize(rows, cols);
    const std::size_t nbytes =
        detail::packed_bytes(static_cast<std::size_t>(rows * cols) * static_cast<std::size_t>(q.bits));
    const std::uint8_t* packed = r.take(nbytes);
    std::size_t bit = 0;
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index k = 0; k < cols; ++k) {
        std::uint32_t field = 0;
        for (int b = 0; b < q.bits; ++b, ++bit)
          field |= static_cast<std::uint32_t>((packed[bit / 8] >> (bit % 8)) & 1u) << b;
        const std::int32_t sign = std::int32_t{1} << (q.bits - 1);
        const std::int32_t v = (static_cast<std::int32_t>(field) ^ sign) - sign;
        if (v < -q.max_level() || v > q.max_level())
          throw Error(ErrorKind::kFormat, "quantized weight outside the symmetric range");
        q.q(i, k) = static_cast<std::int8_t>(v);
      }
    q.scale = r.f64();
    if (!(q.scale > 0.0) || !std::isfinite(q.scale))
      throw Error(ErrorKind::kFormat, "quantization scale must be positive");
    m.output = std::move(q);
  } else {
    OutputWeights w(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index k = 0; k < cols; ++k) w(i, k) = r.f64();
    m.output = std::move(w);
  }
  m.validate();
  return m;
}

inline void save_model(const Model& m, const std::filesystem::path& path) {
  detail::write_file(path, serialize_model(m));
}

inline Model load_model(const std::filesystem::path& path) {
  return deserialize_model(detail::read_file(path));
}

namespace detail {

inline std::string kbit(std::uint64_t bits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(bits) / 1000.0);
  std::string s(buf);
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

}  // namespace detail

/// Header plus derived sizes, without decoding the payload.
inline nlohmann::json inspect_model(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const ParsedContainer pc = parse_container(bytes);
  const Architecture arch = architecture_from_json(pc.header.at("architecture"));
  const ParamBits bits = param_bits(arch);
  const auto& out = pc.header.at("output");
  const bool quantized = out.at("kind").get<std::string>() == "quantized";
  const std::uint64_t stored_bits =
      static_cast<std::uint64_t>(arch.n_features()) * static_cast<std::uint64_t>(arch.n_classes) *
      (quantized ? static_cast<std::uint64_t>(out.at("bits").get<int>()) : 64u);
  nlohmann::json report;
  report["header"] = pc.header;
  report["format_version"] = kModelFormatVersion;
  report["file_bytes"] = bytes.size();
  report["n_features"] = arch.n_features();
  report["expansion_factor"] = arch.expansion_factor();
  report["param_bits"] = {{"conv_bits", bits.conv_bits}, {"elm_bits", bits.elm_bits}};
  report["stored_output_bits"] = stored_bits;
  report["quantization"] =
      quantized ? nlohmann::json{{"bits", out.at("bits")}, {"scale", out.at("scale")}}
                : nlohmann::json(nullptr);
  report["summary"] = "conv " + detail::kbit(bits.conv_bits) + " kbit, output " +
                      detail::kbit(bits.elm_bits) + " kbit";
  return report;
}

/// Runs the model on normalized images.
inline std::vector<int> model_predict(const Model& m, const Dataset& ds, unsigned workers = 1,
                                      std::size_t chunk = 4096) {
  if (ds.scale != PixelScale::kUnit)
    throw Error(ErrorKind::kInput, "dataset must be normalized before prediction");
  FeatureExpander ex(m.arch, m.kernels);
  ex.check_images(ds.images);
  std::vector<int> out;
  out.reserve(ds.size());
  FeatureMatrix f;
  for (std::size_t first = 0; first < ds.size(); first += chunk) {
    const std::size_t count = std::min(chunk, ds.size() - first);
    f.resize(static_cast<Eigen::Index>(ex.n_features()), static_cast<Eigen::Index>(count));
    ex.expand_range(ds.images, first, count, f, 0, workers);
    const auto p = m.predict_features(f, workers);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

}  // namespace lbcnn
