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

#include <cstring>
#include <limits>
#include <random>

#include "lbcnn/elm.hpp"
#include "test_support.hpp"

namespace lbcnn {
namespace {

using testing::dense_inverse_ridge;

Eigen::MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

std::vector<int> random_labels(std::mt19937_64& rng, std::size_t n, int k) {
  std::uniform_int_distribution<int> d(0, k - 1);
  std::vector<int> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

double rel_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
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

TEST(OneHot, BuildsColumnsPerSample) {
  const std::vector<int> labels{2, 0, 1, 2};
  const auto y = one_hot(labels, 3);
  const Eigen::MatrixXd m = y.matrix();
  ASSERT_EQ(m.rows(), 3);
  ASSERT_EQ(m.cols(), 4);
  for (int s = 0; s < 4; ++s)
    for (int k = 0; k < 3; ++k) EXPECT_EQ(m(k, s), labels[s] == k ? 1.0 : 0.0);
}

TEST(OneHot, RejectsOutOfRangeLabels) {
  const std::vector<int> bad{0, 3};
  EXPECT_EQ(kind_of([&] { one_hot(bad, 3); }), ErrorKind::kEncoding);
  const std::vector<int> neg{-1};
  EXPECT_EQ(kind_of([&] { one_hot(neg, 3); }), ErrorKind::kEncoding);
}

// One feature, one sample: w = h / (1/C + h^2) on the true class.
TEST(Solve, ScalarClosedForm) {
  Eigen::MatrixXd h(1, 1);
  h(0, 0) = 3.0;
  const std::vector<int> labels{1};
  SolverConfig cfg;
  cfg.C = 2.0;
  for (auto b : {SolveBranch::kPrimal, SolveBranch::kDual}) {
    cfg.branch = b;
    const auto w = solve_output_weights(h, one_hot(labels, 2), cfg);
    EXPECT_NEAR(w(0, 0), 0.0, 1e-15);
    EXPECT_NEAR(w(0, 1), 3.0 / (0.5 + 9.0), 1e-14);
  }
}

TEST(Solve, PrimalMatchesDenseInverse) {
  std::mt19937_64 rng(1);
  const Eigen::MatrixXd h = random_matrix(rng, 12, 40);
  const auto labels = random_labels(rng, 40, 4);
  const auto y = one_hot(labels, 4);
  SolverConfig cfg;
  cfg.C = 10.0;
  SolveInfo info;
  const auto w = solve_output_weights(h, y, cfg, &info);
  EXPECT_EQ(info.branch, SolveBranch::kPrimal);
  EXPECT_LE(rel_diff(w, dense_inverse_ridge(h, y.matrix(), 10.0)), 1e-9);
}

TEST(Solve, DualMatchesDenseInverse) {
  std::mt19937_64 rng(2);
  const Eigen::MatrixXd h = random_matrix(rng, 50, 9);
  const auto labels = random_labels(rng, 9, 3);
  const auto y = one_hot(labels, 3);
  SolveInfo info;
  const auto w = solve_output_weights(h, y, SolverConfig{}, &info);
  EXPECT_EQ(info.branch, SolveBranch::kDual);
  EXPECT_LE(rel_diff(w, dense_inverse_ridge(h, y.matrix(), 1.0)), 1e-9);
}

TEST(Solve, BranchesAgreeOnRandomProblems) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> dim(1, 30);
  std::uniform_real_distribution<double> logc(-3.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::MatrixXd h = random_matrix(rng, dim(rng), dim(rng));
    const auto y = one_hot(random_labels(rng, static_cast<std::size_t>(h.cols()), 3), 3);
    SolverConfig cfg;
    cfg.C = std::pow(10.0, logc(rng));
    cfg.branch = SolveBranch::kPrimal;
    const auto wp = solve_output_weights(h, y, cfg);
    cfg.branch = SolveBranch::kDual;
    const auto wd = solve_output_weights(h, y, cfg);
    EXPECT_LE(rel_diff(wp, wd), 1e-8) << "trial " << trial << " C=" << cfg.C;
    EXPECT_LE(residual_norm(h, y, wp, cfg.C), 1e-9);
    EXPECT_LE(residual_norm(h, y, wd, cfg.C), 1e-9);
  }
}

TEST(Solve, FloatFeaturesAccumulateInDouble) {
  std::mt19937_64 rng(4);
  const Eigen::MatrixXf hf = random_matrix(rng, 20, 64).cast<float>();
  const auto y = one_hot(random_labels(rng, 64, 5), 5);
  const auto w = solve_output_weights(hf, y);
  const Eigen::MatrixXd hd = hf.cast<double>();
  EXPECT_LE(rel_diff(w, dense_inverse_ridge(hd, y.matrix(), 1.0)), 1e-9);
}

TEST(Solve, GramIsIdenticalAcrossWorkerCounts) {
  std::mt19937_64 rng(5);
  // wide enough to span several tiles and chunks
  const Eigen::MatrixXf h = random_matrix(rng, 900, 1100).cast<float>();
  const Eigen::MatrixXd g1 = gram_features(h, 1);
  for (unsigned w : {2u, 4u}) {
    const Eigen::MatrixXd gw = gram_features(h, w);
    EXPECT_EQ(std::memcmp(g1.data(), gw.data(), sizeof(double) * g1.size()), 0) << w;
  }
  const Eigen::MatrixXd hd = h.cast<double>();
  EXPECT_LE(rel_diff(g1, hd * hd.transpose()), 1e-12);
  const Eigen::MatrixXd s1 = gram_samples(h, 1), s3 = gram_samples(h, 3);
  EXPECT_EQ(std::memcmp(s1.data(), s3.data(), sizeof(double) * s1.size()), 0);
  EXPECT_EQ(s1, s1.transpose());
}

TEST(Cholesky, SingularMatrixNeedsJitter) {
  Eigen::MatrixXd a(2, 2);
  a << 1.0, 1.0, 1.0, 1.0;
  Eigen::MatrixXd b(2, 1);
  b << 1.0, 1.0;
  const double jitter = cholesky_solve_in_place(a, b);
  EXPECT_GT(jitter, 0.0);
  EXPECT_LE(jitter, 1e-4);
  // (A + jI) x = b with x = (1 / (2 + j)) * (1, 1)
  EXPECT_NEAR(b(0, 0), 1.0 / (2.0 + jitter), 1e-6);
  EXPECT_NEAR(b(1, 0), b(0, 0), 1e-9);
}

TEST(Cholesky, WellConditionedMatrixTakesNoJitter) {
  Eigen::MatrixXd a(2, 2);
  a << 4.0, 1.0, 1.0, 3.0;
  Eigen::MatrixXd b(2, 1);
  b << 1.0, 2.0;
  EXPECT_EQ(cholesky_solve_in_place(a, b), 0.0);
  EXPECT_NEAR(b(0, 0), 1.0 / 11.0, 1e-14);
  EXPECT_NEAR(b(1, 0), 7.0 / 11.0, 1e-14);
}

TEST(Cholesky, IndefiniteMatrixIsNumericalError) {
  Eigen::MatrixXd a(2, 2);
  a << 1.0, 0.0, 0.0, -5.0;
  Eigen::MatrixXd b = Eigen::MatrixXd::Ones(2, 1);
  EXPECT_EQ(kind_of([&] { cholesky_solve_in_place(a, b); }), ErrorKind::kNumerical);
}

TEST(Solve, HugeCOnRankDeficientFeaturesStillSolves) {
  std::mt19937_64 rng(6);
  Eigen::MatrixXd h = random_matrix(rng, 6, 30);
  h.row(5) = h.row(4);  // duplicated feature
  const auto y = one_hot(random_labels(rng, 30, 2), 2);
  SolverConfig cfg;
  cfg.C = 1e14;
  SolveInfo info;
  const auto w = solve_output_weights(h, y, cfg, &info);
  EXPECT_TRUE(w.allFinite());
}

TEST(Solve, RejectsBadInputs) {
  Eigen::MatrixXd h = Eigen::MatrixXd::Ones(3, 4);
  const auto y = one_hot(std::vector<int>{0, 1, 0, 1}, 2);
  SolverConfig cfg;
  cfg.C = 0.0;
  EXPECT_EQ(kind_of([&] { solve_output_weights(h, y, cfg); }), ErrorKind::kInput);
  const auto y3 = one_hot(std::vector<int>{0, 1, 0}, 2);
  EXPECT_EQ(kind_of([&] { solve_output_weights(h, y3); }), ErrorKind::kShape);
  h(1, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(kind_of([&] { solve_output_weights(h, y); }), ErrorKind::kInput);
}

TEST(Predict, TiesGoToLowestClass) {
  OutputWeights w(2, 3);
  w << 1.0, 1.0, 0.0,
       0.0, 0.0, 0.0;
  Eigen::MatrixXd h(2, 2);
  h << 1.0, 0.0,
       5.0, 0.0;
  EXPECT_EQ(predict(w, h), (std::vector<int>{0, 0}));
  w(0, 2) = 2.0;
  EXPECT_EQ(predict(w, h), (std::vector<int>{2, 0}));
}

TEST(Predict, IndependentOfWorkersAndBatching) {
  std::mt19937_64 rng(7);
  const OutputWeights w = random_matrix(rng, 16, 7);
  const Eigen::MatrixXf h = random_matrix(rng, 16, 301).cast<float>();
  const auto all = predict(w, h, 1);
  EXPECT_EQ(all, predict(w, h, 4));
  const auto head = predict(w, h.leftCols(100));
  const auto tail = predict(w, h.rightCols(201));
  std::vector<int> joined(head);
  joined.insert(joined.end(), tail.begin(), tail.end());
  EXPECT_EQ(all, joined);
}

TEST(Accuracy, CountsMatches) {
  const std::vector<int> p{1, 2, 3, 4}, t{1, 0, 3, 0};
  EXPECT_EQ(accuracy(p, t), 0.5);
  const std::vector<int> none;
  EXPECT_THROW(accuracy(none, none), Error);
}

}  // namespace
}  // namespace lbcnn
