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

// Mini-batch retraining of the output layer with the binary kernels frozen:
// softmax cross-entropy, Adam updates, seeded per-epoch shuffling. Features
// are either kept in memory or spilled to an anonymous temporary file when
// they exceed a byte budget.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "lbcnn/common.hpp"
#include "lbcnn/data_io.hpp"
#include "lbcnn/elm.hpp"
#include "lbcnn/ops.hpp"

namespace lbcnn {

struct RefineConfig {
  int epochs = 10;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t shuffle_seed = 0;
  unsigned workers = 1;
  std::size_t memory_budget_bytes = std::size_t{2} << 30;
};

struct RefineStats {
  std::vector<double> epoch_loss;  // mean pre-update batch loss per epoch
  bool spilled = false;
  double expand_s = 0.0;
  double train_s = 0.0;
};

class RefineError : public Error {
 public:
  RefineError(const std::string& what, OutputWeights last_good)
      : Error(ErrorKind::kNumerical, what), last_good_(std::move(last_good)) {}
  const OutputWeights& last_good() const { return last_good_; }

 private:
  OutputWeights last_good_;
};

struct LossGrad {
  double loss = 0.0;
  Eigen::MatrixXd grad;
};

/// Mean softmax cross-entropy of scores W^T h and its gradient
/// H (P - Y)^T / batch.
template <typename Derived>
LossGrad softmax_xent_loss_grad(const OutputWeights& w,
                                const Eigen::MatrixBase<Derived>& h,
                                std::span<const int> labels) {
  if (h.rows() != w.rows() || static_cast<std::size_t>(h.cols()) != labels.size())
    throw Error(ErrorKind::kShape, "loss: dimension mismatch");
  if (labels.empty()) throw Error(ErrorKind::kInput, "loss: empty batch");
  const Eigen::MatrixXd hd = h.template cast<double>();
  Eigen::MatrixXd p = w.transpose() * hd;  // classes x batch
  double loss = 0.0;
  for (Eigen::Index s = 0; s < p.cols(); ++s) {
    const int y = labels[static_cast<std::size_t>(s)];
    if (y < 0 || y >= p.rows()) throw Error(ErrorKind::kEncoding, "loss: label out of range");
    const double top = p.col(s).maxCoeff();
    p.col(s).array() = p.col(s).array() - top;
    loss -= p(y, s);
    p.col(s).array() = p.col(s).array().exp();
    const double z = p.col(s).sum();
    loss += std::log(z);
    p.col(s) /= z;
    p(y, s) -= 1.0;
  }
  const double b = static_cast<double>(labels.size());
  LossGrad out;
  out.loss = loss / b;
  out.grad.noalias() = hd * p.transpose();
  out.grad /= b;
  return out;
}

/// Random-access source of feature columns for refinement.
class FeatureSource {
 public:
  virtual ~FeatureSource() = default;
  virtual std::size_t n_features() const = 0;
  virtual std::size_t n_samples() const = 0;
  virtual bool spilled() const = 0;
  /// Copies the columns `idx` into `out` (n_features x idx.size()).
  virtual void gather(std::span<const std::size_t> idx, Eigen::MatrixXf& out) = 0;
};

class InMemoryFeatures final : public FeatureSource {
 public:
  explicit InMemoryFeatures(FeatureMatrix features) : f_(std::move(features)) {}
  std::size_t n_features() const override { return static_cast<std::size_t>(f_.rows()); }
  std::size_t n_samples() const override { return static_cast<std::size_t>(f_.cols()); }
  bool spilled() const override { return false; }
  void gather(std::span<const std::size_t> idx, Eigen::MatrixXf& out) override {
    out.resize(f_.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j)
      out.col(static_cast<Eigen::Index>(j)) = f_.col(static_cast<Eigen::Index>(idx[j]));
  }

 private:
  FeatureMatrix f_;
};

/// Feature columns stored in an anonymous temporary file, written chunk by
/// chunk as they are expanded.
class SpilledFeatures final : public FeatureSource {
 public:
  SpilledFeatures(const Dataset& ds, const FeatureExpander& ex,
                  std::size_t chunk_samples, unsigned workers)
      : file_(std::tmpfile(), &std::fclose),
        n_features_(ex.n_features()),
        n_samples_(ds.size()) {
    if (!file_) throw Error(ErrorKind::kIo, "cannot create temporary feature file");
    chunk_samples = std::max<std::size_t>(1, chunk_samples);
    FeatureMatrix chunk;
    for (std::size_t first = 0; first < n_samples_; first += chunk_samples) {
      const std::size_t count = std::min(chunk_samples, n_samples_ - first);
      chunk.resize(static_cast<Eigen::Index>(n_features_), static_cast<Eigen::Index>(count));
      ex.expand_range(ds.images, first, count, chunk, 0, workers);
      if (std::fwrite(chunk.data(), sizeof(float), chunk.size(), file_.get()) !=
          static_cast<std::size_t>(chunk.size()))
        throw Error(ErrorKind::kIo, "failed to spill features");
    }
    std::fflush(file_.get());
  }
  std::size_t n_features() const override { return n_features_; }
  std::size_t n_samples() const override { return n_samples_; }
  bool spilled() const override { return true; }
  void gather(std::span<const std::size_t> idx, Eigen::MatrixXf& out) override {
    out.resize(static_cast<Eigen::Index>(n_features_), static_cast<Eigen::Index>(idx.size()));
    const long stride = static_cast<long>(n_features_ * sizeof(float));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      if (std::fseek(file_.get(), static_cast<long>(idx[j]) * stride, SEEK_SET) != 0 ||
          std::fread(out.col(static_cast<Eigen::Index>(j)).data(), sizeof(float),
                     n_features_, file_.get()) != n_features_)
        throw Error(ErrorKind::kIo, "failed to read spilled features");
    }
  }

 private:
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> file_;
  std::size_t n_features_;
  std::size_t n_samples_;
};

/// In memory when n_features * n_samples * 4 bytes fits the budget,
/// otherwise spilled to disk.
inline std::unique_ptr<FeatureSource> make_feature_source(
    const Dataset& ds, const Architecture& arch, const KernelSet& kernels,
    std::size_t budget_bytes, unsigned workers) {
  if (ds.scale != PixelScale::kUnit)
    throw Error(ErrorKind::kInput, "dataset must be normalized before expansion");
  FeatureExpander ex(arch, kernels);
  ex.check_images(ds.images);
  const std::size_t bytes = ex.n_features() * ds.size() * sizeof(float);
  if (bytes <= budget_bytes) {
    FeatureMatrix f(static_cast<Eigen::Index>(ex.n_features()),
                    static_cast<Eigen::Index>(ds.size()));
    ex.expand_range(ds.images, 0, ds.size(), f, 0, workers);
    return std::make_unique<InMemoryFeatures>(std::move(f));
  }
  const std::size_t per_sample = ex.n_features() * sizeof(float);
  const std::size_t chunk = std::max<std::size_t>(1, budget_bytes / per_sample);
  return std::make_unique<SpilledFeatures>(ds, ex, chunk, workers);
}

/// Adam on the output weights only.
inline OutputWeights refine_weights(const OutputWeights& initial,
                                    FeatureSource& features,
                                    std::span<const int> labels,
                                    const RefineConfig& cfg,
                                    RefineStats* stats = nullptr) {
  const std::size_t n = features.n_samples();
  if (labels.size() != n) throw Error(ErrorKind::kShape, "refine: label count mismatch");
  if (static_cast<std::size_t>(initial.rows()) != features.n_features())
    throw Error(ErrorKind::kShape, "refine: weights do not match the features");
  if (cfg.epochs < 0) throw Error(ErrorKind::kInput, "epochs must be >= 0");
  if (cfg.batch_size < 1 || cfg.batch_size > n)
    throw Error(ErrorKind::kInput, "batch size must be in [1, n_train]");
  if (!(cfg.learning_rate > 0.0))
    throw Error(ErrorKind::kInput, "learning rate must be positive");

  const auto t0 = std::chrono::steady_clock::now();
  OutputWeights w = initial;
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(w.rows(), w.cols());
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(w.rows(), w.cols());
  std::vector<std::size_t> order(n);
  std::vector<int> batch_labels;
  Eigen::MatrixXf batch;
  double b1t = 1.0, b2t = 1.0;
  RefineStats local;
  local.spilled = features.spilled();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::uint64_t state = split_seed(cfg.shuffle_seed, static_cast<std::uint64_t>(epoch));
    for (std::size_t i = n - 1; i > 0; --i) {
      state = mix64(state);
      std::swap(order[i], order[static_cast<std::size_t>(state % (i + 1))]);
    }
    double loss_sum = 0.0;
    for (std::size_t first = 0; first < n; first += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n - first);
      const std::span<const std::size_t> idx(order.data() + first, count);
      features.gather(idx, batch);
      batch_labels.resize(count);
      for (std::size_t j = 0; j < count; ++j) batch_labels[j] = labels[idx[j]];
      LossGrad lg = softmax_xent_loss_grad(w, batch, batch_labels);
      if (!std::isfinite(lg.loss) || !lg.grad.allFinite())
        throw RefineError("refinement diverged in epoch " + std::to_string(epoch), w);
      loss_sum += lg.loss * static_cast<double>(count);
      b1t *= cfg.beta1;
      b2t *= cfg.beta2;
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * lg.grad;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * lg.grad.cwiseProduct(lg.grad);
      const double lr_t = cfg.learning_rate * std::sqrt(1.0 - b2t) / (1.0 - b1t);
      const double eps_t = cfg.epsilon * std::sqrt(1.0 - b2t);
      OutputWeights next = w.array() - lr_t * m.array() / (v.array().sqrt() + eps_t);
      if (!next.allFinite())
        throw RefineError("refinement produced non-finite weights", w);
      w = std::move(next);
    }
    local.epoch_loss.push_back(loss_sum / static_cast<double>(n));
  }
  local.train_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (stats) *stats = local;
  return w;
}

/// Recomputes training features with the frozen kernels and refines `initial`.
inline OutputWeights refine_output(const Architecture& arch, const KernelSet& kernels,
                                   const OutputWeights& initial, const Dataset& train,
                                   const RefineConfig& cfg, RefineStats* stats = nullptr) {
  if (cfg.epochs == 0) {
    if (stats) *stats = RefineStats{};
    return initial;
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto source = make_feature_source(train, arch, kernels, cfg.memory_budget_bytes, cfg.workers);
  const double expand_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  RefineStats local;
  OutputWeights w = refine_weights(initial, *source, train.labels, cfg, &local);
  local.expand_s = expand_s;
  if (stats) *stats = local;
  return w;
}

}  // namespace lbcnn
