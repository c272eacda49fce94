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

#include "lbcnn/refine.hpp"
#include "lbcnn/search.hpp"
#include "test_support.hpp"

namespace lbcnn {
namespace {

Eigen::MatrixXd random_matrix(std::uint64_t seed, Eigen::Index r, Eigen::Index c) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Architecture small_arch() {
  Architecture a;
  a.height = 8;
  a.width = 8;
  a.channels = 1;
  a.multipliers = {4, 2};
  a.n_classes = 4;
  return a;
}

TEST(Loss, ZeroWeightsGiveLogK) {
  const Eigen::MatrixXd h = random_matrix(1, 5, 9);
  const std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 0, 1};
  const auto lg = softmax_xent_loss_grad(OutputWeights::Zero(5, 7), h, labels);
  EXPECT_NEAR(lg.loss, std::log(7.0), 1e-14);
}

TEST(Loss, GradientMatchesCentralDifferences) {
  const Eigen::MatrixXd h = random_matrix(2, 6, 11);
  OutputWeights w = random_matrix(3, 6, 4);
  std::vector<int> labels{0, 1, 2, 3, 0, 1, 2, 3, 3, 2, 1};
  const auto lg = softmax_xent_loss_grad(w, h, labels);
  const double step = 1e-6;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    OutputWeights wp = w, wm = w;
    wp.data()[i] += step;
    wm.data()[i] -= step;
    const double fd = (softmax_xent_loss_grad(wp, h, labels).loss -
                       softmax_xent_loss_grad(wm, h, labels).loss) /
                      (2.0 * step);
    EXPECT_NEAR(lg.grad.data()[i], fd, 1e-8) << i;
  }
}

TEST(Loss, StableForLargeScores) {
  Eigen::MatrixXd h(1, 1);
  h(0, 0) = 1.0;
  OutputWeights w(1, 2);
  w << 1000.0, 0.0;
  const std::vector<int> labels{1};
  const auto lg = softmax_xent_loss_grad(w, h, labels);
  EXPECT_NEAR(lg.loss, 1000.0, 1e-9);
  EXPECT_TRUE(lg.grad.allFinite());
}

// Full-batch steps against a textbook bias-corrected Adam.
TEST(Adam, FullBatchMatchesReferenceUpdates) {
  const Eigen::MatrixXf h = random_matrix(4, 5, 20).cast<float>();
  std::vector<int> labels(20);
  for (std::size_t i = 0; i < 20; ++i) labels[i] = static_cast<int>(i % 3);
  const OutputWeights w0 = random_matrix(5, 5, 3) * 0.1;
  RefineConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 20;
  cfg.learning_rate = 0.05;
  InMemoryFeatures src{FeatureMatrix(h)};
  const auto got = refine_weights(w0, src, labels, cfg);

  OutputWeights w = w0;
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(5, 3), v = m;
  const Eigen::MatrixXd hd = h.cast<double>();
  for (int t = 1; t <= 4; ++t) {
    const Eigen::MatrixXd g = softmax_xent_loss_grad(w, hd, labels).grad;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g.cwiseProduct(g);
    const Eigen::MatrixXd mh = m / (1.0 - std::pow(0.9, t));
    const Eigen::MatrixXd vh = v / (1.0 - std::pow(0.999, t));
    w = w.array() - 0.05 * mh.array() / (vh.array().sqrt() + 1e-8);
  }
  EXPECT_LE((got - w).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Adam, LossDecreasesOnSyntheticData) {
  const auto arch = small_arch();
  const auto ks = generate_kernels(arch, 2);
  const Dataset train = normalize(testing::synthetic_dataset(300, 8, 8, 1, 4, 9, 90));
  const FeatureMatrix h = expand_dataset(train, arch, ks, 1);
  SolverConfig sc;
  sc.C = 0.01;
  const auto w0 = solve_output_weights(h, one_hot(train.labels, 4), sc);
  RefineConfig cfg;
  cfg.batch_size = 32;
  RefineStats stats;
  const auto w = refine_output(arch, ks, w0, train, cfg, &stats);
  ASSERT_EQ(stats.epoch_loss.size(), 10u);
  EXPECT_LT(stats.epoch_loss.back(), stats.epoch_loss.front());
  EXPECT_LT(softmax_xent_loss_grad(w, h, train.labels).loss,
            softmax_xent_loss_grad(w0, h, train.labels).loss);
  EXPECT_FALSE(stats.spilled);
}

TEST(Refine, ZeroEpochsReturnsInput) {
  const auto arch = small_arch();
  const Dataset train = normalize(testing::synthetic_dataset(30, 8, 8, 1, 4, 9));
  const OutputWeights w0 = random_matrix(6, 32, 4);
  RefineConfig cfg;
  cfg.epochs = 0;
  EXPECT_EQ(refine_output(arch, generate_kernels(arch, 1), w0, train, cfg), w0);
}

TEST(Refine, SpilledFeaturesGiveIdenticalWeights) {
  const auto arch = small_arch();
  const auto ks = generate_kernels(arch, 4);
  const Dataset train = normalize(testing::synthetic_dataset(150, 8, 8, 1, 4, 3));
  const OutputWeights w0 = random_matrix(7, 32, 4) * 0.01;
  RefineConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.shuffle_seed = 77;
  RefineStats mem_stats, disk_stats;
  const auto a = refine_output(arch, ks, w0, train, cfg, &mem_stats);
  cfg.memory_budget_bytes = 32 * 4 * 10;  // ten samples per chunk
  const auto b = refine_output(arch, ks, w0, train, cfg, &disk_stats);
  EXPECT_FALSE(mem_stats.spilled);
  EXPECT_TRUE(disk_stats.spilled);
  EXPECT_EQ(a, b);
}

TEST(Refine, ShuffleSeedIsDeterministic) {
  const auto arch = small_arch();
  const auto ks = generate_kernels(arch, 4);
  const Dataset train = normalize(testing::synthetic_dataset(100, 8, 8, 1, 4, 3));
  const OutputWeights w0 = OutputWeights::Zero(32, 4);
  RefineConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  const auto a = refine_output(arch, ks, w0, train, cfg);
  EXPECT_EQ(a, refine_output(arch, ks, w0, train, cfg));
  cfg.shuffle_seed = 1;
  EXPECT_NE(a, refine_output(arch, ks, w0, train, cfg));
}

TEST(Refine, DivergenceKeepsLastFiniteWeights) {
  Eigen::MatrixXf h = Eigen::MatrixXf::Constant(2, 4, 1e30f);
  const std::vector<int> labels{0, 1, 0, 1};
  RefineConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 2;
  cfg.learning_rate = 1e300;
  InMemoryFeatures src{FeatureMatrix(h)};
  try {
    refine_weights(OutputWeights::Zero(2, 2), src, labels, cfg);
    FAIL() << "expected divergence";
  } catch (const RefineError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumerical);
    EXPECT_TRUE(e.last_good().allFinite());
  }
}

TEST(Refine, RejectsBadBatchSize) {
  InMemoryFeatures src{FeatureMatrix::Ones(2, 4)};
  const std::vector<int> labels{0, 1, 0, 1};
  RefineConfig cfg;
  cfg.batch_size = 5;
  EXPECT_THROW(refine_weights(OutputWeights::Zero(2, 2), src, labels, cfg), Error);
  cfg.batch_size = 0;
  EXPECT_THROW(refine_weights(OutputWeights::Zero(2, 2), src, labels, cfg), Error);
}

TEST(Loss, DuplicatedSampleWeightsTheMean) {
  const Eigen::MatrixXd h = random_matrix(8, 4, 2);
  const OutputWeights w = random_matrix(9, 4, 3);
  Eigen::MatrixXd dup(4, 3);
  dup << h.col(0), h.col(0), h.col(1);
  const std::vector<int> dup_labels{0, 0, 2};
  const std::vector<int> l0{0}, l1{2};
  const auto g0 = softmax_xent_loss_grad(w, h.col(0), l0).grad;
  const auto g1 = softmax_xent_loss_grad(w, h.col(1), l1).grad;
  const auto gd = softmax_xent_loss_grad(w, dup, dup_labels).grad;
  EXPECT_LE((gd - (2.0 * g0 + g1) / 3.0).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Adam, SeparableToySetIsFitExactly) {
  // two classes split by the sign of the first feature
  Eigen::MatrixXf h(2, 8);
  h << 1, 2, 1.5, 0.5, -1, -2, -0.5, -1.5,
       1, 1, 1, 1, 1, 1, 1, 1;
  const std::vector<int> labels{0, 0, 0, 0, 1, 1, 1, 1};
  RefineConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.05;
  InMemoryFeatures src{FeatureMatrix(h)};
  const auto w = refine_weights(OutputWeights::Zero(2, 2), src, labels, cfg);
  EXPECT_EQ(accuracy(predict(w, h), labels), 1.0);
}

TEST(Adam, EpochLossNonincreasingEarly) {
  const auto arch = small_arch();
  const auto ks = generate_kernels(arch, 6);
  const Dataset train = normalize(testing::synthetic_dataset(256, 8, 8, 1, 4, 12));
  RefineConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 32;
  RefineStats stats;
  const KernelSet before = ks;
  refine_output(arch, ks, OutputWeights::Zero(32, 4), train, cfg, &stats);
  ASSERT_EQ(stats.epoch_loss.size(), 3u);
  for (std::size_t e = 1; e < 3; ++e)
    EXPECT_LE(stats.epoch_loss[e], stats.epoch_loss[e - 1] + 1e-6);
  EXPECT_EQ(ks, before);
}

}  // namespace
}  // namespace lbcnn
