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
#include <gtest/gtest.h>

#include <random>

#include "lbcnn/model_store.hpp"
#include "lbcnn/search.hpp"
#include "test_support.hpp"

namespace lbcnn {
namespace {

using Bytes = std::vector<std::uint8_t>;

// Bitwise reflected CRC-32 (polynomial 0xEDB88320).
std::uint32_t crc32_reference(const std::uint8_t* p, std::size_t n) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    c ^= p[i];
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return ~c;
}

std::uint32_t le32(const Bytes& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
         static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

void set_le32(Bytes& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
}

double le_f64(const Bytes& b, std::size_t at) {
  std::uint64_t u = 0;
  for (int i = 7; i >= 0; --i) u = (u << 8) | b[at + static_cast<std::size_t>(i)];
  return std::bit_cast<double>(u);
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no exception";
  return ErrorKind::kIo;
}

Model random_model(std::mt19937_64& rng, bool quantized, bool with_bias) {
  std::uniform_int_distribution<int> side(1, 12), ch(1, 3), layers(1, 3), mul(1, 4), cls(2, 6);
  Architecture a;
  a.height = static_cast<std::size_t>(side(rng));
  a.width = static_cast<std::size_t>(side(rng));
  a.channels = static_cast<std::size_t>(ch(rng));
  a.multipliers.resize(static_cast<std::size_t>(layers(rng)));
  for (int& m : a.multipliers) m = mul(rng);
  a.n_classes = cls(rng);
  Model m;
  m.arch = a;
  m.kernels = generate_kernels(a, rng());
  if (with_bias) {
    std::uniform_real_distribution<double> b(-2.0, 2.0);
    for (double& v : m.kernels.layers.front().biases) v = b(rng);
  }
  std::normal_distribution<double> g(0.0, 0.3);
  OutputWeights w(static_cast<Eigen::Index>(a.n_features()), a.n_classes);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = g(rng);
  if (quantized) {
    std::uniform_int_distribution<int> bits(2, 8);
    m.output = quantize(w, bits(rng));
  } else {
    m.output = w;
  }
  for (int k = 0; k < a.n_classes; ++k) m.class_names.push_back("class_" + std::to_string(k));
  if (rng() & 1) {
    m.provenance.master_seed = rng();
    m.provenance.best_trial_seed = rng();
    m.provenance.accuracy = 0.5;
  }
  return m;
}

// 1x1 grayscale input with a single multiplier: one feature, two classes.
Model tiny_model() {
  Model m;
  m.arch.height = 1;
  m.arch.width = 1;
  m.arch.channels = 1;
  m.arch.multipliers = {1};
  m.arch.n_classes = 2;
  KernelLayer k;
  k.multiplier = 1;
  k.in_channels = 1;
  k.weights = {1, -1, 1, 1, -1, -1, -1, -1, 1};
  k.biases = {0.0};
  m.kernels.layers = {k};
  OutputWeights w(1, 2);
  w << 0.75, -2.5;
  m.output = w;
  return m;
}

TEST(KernelBits, PackUnpackRoundTrip) {
  std::mt19937_64 rng(1);
  for (std::size_t n : {1u, 7u, 8u, 9u, 63u, 64u, 65u, 1000u}) {
    std::vector<std::int8_t> w(n);
    for (auto& v : w) v = (rng() & 1) ? 1 : -1;
    const auto packed = pack_kernel_bits(w);
    EXPECT_EQ(packed.size(), (n + 7) / 8);
    EXPECT_EQ(unpack_kernel_bits(packed, n), w);
  }
}

TEST(KernelBits, SectionSizeForMnistModel) {
  Architecture a;
  a.height = a.width = 28;
  a.channels = 1;
  a.multipliers = {16, 20};
  a.n_classes = 10;
  EXPECT_EQ(kernel_section_bytes(a), 18u + 360u);
}

TEST(Layout, TinyFloatModelBytes) {
  const Bytes b = serialize_model(tiny_model());
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "LBCN");
  EXPECT_EQ(le32(b, 4), 1u);
  const std::size_t hl = le32(b, 8);
  const auto header = nlohmann::json::parse(b.begin() + 12, b.begin() + 12 + static_cast<long>(hl));
  EXPECT_EQ(header.at("n_classes"), 2);
  EXPECT_EQ(header.at("output").at("kind"), "float64");
  EXPECT_EQ(header.at("biases_present"), nlohmann::json::array({false}));
  const std::size_t p = 12 + hl;
  ASSERT_EQ(b.size(), p + 2 + 16 + 4);
  EXPECT_EQ(b[p], 0x0D);      // +1 -1 +1 +1 -1 -1 -1 -1 -> bits 1011 0000
  EXPECT_EQ(b[p + 1], 0x01);  // ninth weight +1, zero padding
  EXPECT_EQ(le_f64(b, p + 2), 0.75);
  EXPECT_EQ(le_f64(b, p + 10), -2.5);
  EXPECT_EQ(le32(b, b.size() - 4), crc32_reference(b.data(), b.size() - 4));
}

TEST(Layout, QuantizedFieldsArePackedLsbFirst) {
  Model m = tiny_model();
  OutputWeights w(1, 2);
  w << 3.0, -1.0;
  m.output = quantize(w, 3);  // scale 1, levels 3 and -1
  const Bytes b = serialize_model(m);
  const std::size_t p = 12 + le32(b, 8) + 2;
  // fields 011 and 111 -> bits 0..5 = 1,1,0,1,1,1
  EXPECT_EQ(b[p], 0x3B);
  EXPECT_EQ(le_f64(b, p + 1), 1.0);
  EXPECT_EQ(b.size(), p + 1 + 8 + 4);
}

TEST(Layout, BiasesOnlyStoredWhenPresent) {
  Model m = tiny_model();
  const std::size_t plain = serialize_model(m).size();
  m.kernels.layers[0].biases = {0.125};
  const Bytes b = serialize_model(m);
  // eight payload bytes; the header flag shrinks from "false" to "true"
  EXPECT_EQ(b.size(), plain + 8 - 1);
  EXPECT_EQ(deserialize_model(b), m);
}

TEST(RoundTrip, RandomizedCorpus) {
  std::mt19937_64 rng(2026);
  for (int i = 0; i < 60; ++i) {
    const Model m = random_model(rng, i % 2 == 0, i % 3 == 0);
    const Bytes b = serialize_model(m);
    const Model back = deserialize_model(b);
    EXPECT_EQ(back, m) << "model " << i;
    EXPECT_EQ(serialize_model(back), b) << "model " << i;
  }
}

TEST(RoundTrip, FilePredictionsMatch) {
  const auto dir = testing::temp_dir("store");
  std::mt19937_64 rng(3);
  Model m = random_model(rng, false, false);
  const Dataset ds = normalize(testing::synthetic_dataset(
      50, m.arch.height, m.arch.width, m.arch.channels, m.arch.n_classes, 4));
  save_model(m, dir / "m.lbcn");
  const Model back = load_model(dir / "m.lbcn");
  EXPECT_EQ(model_predict(back, ds), model_predict(m, ds, 2, 7));
  std::filesystem::remove_all(dir);
}

TEST(Corruption, DistinctErrors) {
  const Bytes good = serialize_model(tiny_model());
  Bytes magic = good;
  magic[0] = 'X';
  EXPECT_EQ(kind_of([&] { deserialize_model(magic); }), ErrorKind::kBadMagic);
  Bytes version = good;
  set_le32(version, 4, 2);
  EXPECT_EQ(kind_of([&] { deserialize_model(version); }), ErrorKind::kBadVersion);
  Bytes crc = good;
  crc.back() ^= 0x40;
  EXPECT_EQ(kind_of([&] { deserialize_model(crc); }), ErrorKind::kChecksum);
  Bytes payload = good;
  payload[12 + le32(good, 8)] ^= 0x02;
  EXPECT_EQ(kind_of([&] { deserialize_model(payload); }), ErrorKind::kChecksum);
  Bytes header = good;
  header[13] ^= 0x20;
  EXPECT_EQ(kind_of([&] { deserialize_model(header); }), ErrorKind::kChecksum);
}

TEST(Corruption, EveryPrefixIsTruncated) {
  const Bytes good = serialize_model(tiny_model());
  for (std::size_t n = 0; n < good.size(); ++n) {
    const Bytes cut(good.begin(), good.begin() + static_cast<long>(n));
    if (n >= 4) {
      EXPECT_EQ(kind_of([&] { deserialize_model(cut); }), ErrorKind::kTruncated) << n;
    } else {
      EXPECT_THROW(deserialize_model(cut), Error);
    }
  }
}

TEST(Corruption, NoSingleByteFlipIsAccepted) {
  std::mt19937_64 rng(5);
  const Bytes good = serialize_model(random_model(rng, true, true));
  const std::size_t payload = 12 + le32(good, 8);
  for (std::size_t i = 0; i < good.size(); ++i) {
    Bytes bad = good;
    bad[i] ^= static_cast<std::uint8_t>(1u << (i % 8));
    try {
      deserialize_model(bad);
      ADD_FAILURE() << "flip at " << i << " accepted";
    } catch (const Error& e) {
      if (i >= payload) EXPECT_EQ(e.kind(), ErrorKind::kChecksum) << i;
    }
  }
}

TEST(Inspect, ReportsBitsAndSummary) {
  const auto dir = testing::temp_dir("inspect");
  Model m;
  m.arch.height = m.arch.width = 28;
  m.arch.channels = 1;
  m.arch.multipliers = {40, 4};
  m.arch.n_classes = 10;
  m.kernels = generate_kernels(m.arch, 1);
  m.output = OutputWeights::Zero(static_cast<Eigen::Index>(m.arch.n_features()), 10);
  save_model(m, dir / "a.lbcn");
  const auto r = inspect_model(dir / "a.lbcn");
  EXPECT_EQ(r.at("summary"), "conv 1.8 kbit, output 627.2 kbit");
  EXPECT_EQ(r.at("param_bits").at("conv_bits"), 1800);
  EXPECT_EQ(r.at("param_bits").at("elm_bits"), 627200);
  EXPECT_TRUE(r.at("quantization").is_null());

  m.output = quantize(OutputWeights::Constant(static_cast<Eigen::Index>(m.arch.n_features()), 10, 0.5), 6);
  save_model(m, dir / "q.lbcn");
  const auto q = inspect_model(dir / "q.lbcn");
  EXPECT_EQ(q.at("quantization").at("bits"), 6);
  EXPECT_DOUBLE_EQ(q.at("quantization").at("scale").get<double>(), 0.5 / 31.0);
  std::filesystem::remove_all(dir);
}

TEST(Inspect, FaceModelExpansionFactor) {
  const auto dir = testing::temp_dir("inspect_face");
  Model m;
  m.arch.height = m.arch.width = 64;
  m.arch.channels = 1;
  m.arch.multipliers = {5, 4};
  m.arch.n_classes = 40;
  m.kernels = generate_kernels(m.arch, 2);
  m.output = OutputWeights::Zero(5120, 40);
  save_model(m, dir / "f.lbcn");
  EXPECT_DOUBLE_EQ(inspect_model(dir / "f.lbcn").at("expansion_factor").get<double>(), 1.25);
  std::filesystem::remove_all(dir);
}

TEST(Model, RejectsInconsistentShapes) {
  Model m = tiny_model();
  m.output = OutputWeights::Zero(2, 2);
  EXPECT_EQ(kind_of([&] { serialize_model(m); }), ErrorKind::kShape);
}

}  // namespace
}  // namespace lbcnn
