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

// Closed-form ridge fit of the linear output layer (ELM with no hidden
// neurons). With n_features < n_samples the normal equations are solved in
// feature space, (I/C + H H^T) W = H Y^T; otherwise in sample space,
// W = H (I/C + H^T H)^{-1} Y^T. Both systems are symmetric positive definite
// and are factored in place with Cholesky.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "lbcnn/common.hpp"

namespace lbcnn {

/// Output layer weights, n_features x n_classes.
using OutputWeights = Eigen::MatrixXd;

struct OneHotTargets {
  std::vector<int> labels;
  int n_classes = 0;

  std::size_t n_samples() const { return labels.size(); }

  /// Dense n_classes x n_samples matrix with one 1 per column.
  Eigen::MatrixXd matrix() const {
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n_classes,
                                              static_cast<Eigen::Index>(labels.size()));
    for (std::size_t i = 0; i < labels.size(); ++i)
      y(labels[i], static_cast<Eigen::Index>(i)) = 1.0;
    return y;
  }
};

inline OneHotTargets one_hot(std::span<const int> labels, int n_classes) {
  if (n_classes < 1)
    throw Error(ErrorKind::kEncoding, "n_classes must be positive");
  for (int l : labels)
    if (l < 0 || l >= n_classes)
      throw Error(ErrorKind::kEncoding,
                  "label " + std::to_string(l) + " outside [0, " +
                      std::to_string(n_classes) + ")");
  return OneHotTargets{std::vector<int>(labels.begin(), labels.end()),
                       n_classes};
}

enum class SolveBranch { kAuto, kPrimal, kDual };

inline const char* to_string(SolveBranch b) {
  switch (b) {
    case SolveBranch::kPrimal: return "primal";
    case SolveBranch::kDual: return "dual";
    default: return "auto";
  }
}

struct SolverConfig {
  double C = 1.0;
  SolveBranch branch = SolveBranch::kAuto;
  unsigned workers = 1;
  // Diagonal jitter ladder, relative to trace/n.
  double jitter_start = 1e-10;
  double jitter_max = 1e-4;
};

struct SolveInfo {
  SolveBranch branch = SolveBranch::kAuto;
  double jitter = 0.0;  // absolute jitter that made the factorization succeed
  double gram_seconds = 0.0;
  double factor_seconds = 0.0;
};

namespace detail {

inline constexpr Eigen::Index kGramTile = 384;
inline constexpr Eigen::Index kGramChunk = 512;

// Accumulates the lower triangle of G += X X^T tile by tile. Tiles are
// disjoint, so the result does not depend on how many workers run them.
inline void accumulate_gram_lower(const Eigen::MatrixXd& x, Eigen::MatrixXd& g,
                                  unsigned workers) {
  const Eigen::Index n = x.rows();
  const Eigen::Index tiles = (n + kGramTile - 1) / kGramTile;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> work;
  for (Eigen::Index i = 0; i < tiles; ++i)
    for (Eigen::Index j = 0; j <= i; ++j) work.emplace_back(i, j);
  parallel_for(work.size(), workers, [&](std::size_t t) {
    const auto [bi, bj] = work[t];
    const Eigen::Index r0 = bi * kGramTile, c0 = bj * kGramTile;
    const Eigen::Index rn = std::min(kGramTile, n - r0);
    const Eigen::Index cn = std::min(kGramTile, n - c0);
    g.block(r0, c0, rn, cn).noalias() +=
        x.middleRows(r0, rn) * x.middleRows(c0, cn).transpose();
  });
}

inline void mirror_lower(Eigen::MatrixXd& g) {
  for (Eigen::Index c = 1; c < g.cols(); ++c)
    for (Eigen::Index r = 0; r < c; ++r) g(r, c) = g(c, r);
}

inline void restore_lower_from_upper(Eigen::MatrixXd& g) {
  for (Eigen::Index c = 0; c < g.cols(); ++c)
    for (Eigen::Index r = c + 1; r < g.rows(); ++r) g(r, c) = g(c, r);
}

}  // namespace detail

/// H H^T (n_features x n_features), accumulated over fixed sample chunks in
/// 64-bit precision. Returns the full symmetric matrix.
template <typename Derived>
Eigen::MatrixXd gram_features(const Eigen::MatrixBase<Derived>& h,
                              unsigned workers = 1) {
  const Eigen::Index nf = h.rows(), ns = h.cols();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(nf, nf);
  Eigen::MatrixXd chunk;
  for (Eigen::Index s = 0; s < ns; s += detail::kGramChunk) {
    const Eigen::Index bs = std::min(detail::kGramChunk, ns - s);
    chunk = h.middleCols(s, bs).template cast<double>();
    detail::accumulate_gram_lower(chunk, g, workers);
  }
  detail::mirror_lower(g);
  return g;
}

/// H^T H (n_samples x n_samples), accumulated over fixed feature chunks.
template <typename Derived>
Eigen::MatrixXd gram_samples(const Eigen::MatrixBase<Derived>& h,
                             unsigned workers = 1) {
  const Eigen::Index nf = h.rows(), ns = h.cols();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(ns, ns);
  Eigen::MatrixXd chunk;
  for (Eigen::Index r = 0; r < nf; r += detail::kGramChunk) {
    const Eigen::Index br = std::min(detail::kGramChunk, nf - r);
    chunk = h.middleRows(r, br).transpose().template cast<double>();
    detail::accumulate_gram_lower(chunk, g, workers);
  }
  detail::mirror_lower(g);
  return g;
}

/// Cholesky-factors the symmetric positive definite `a` in place (lower
/// triangle receives L, the strict upper triangle is kept as the original
/// matrix) and solves a X = b in place. On failure, the diagonal gets a
/// jitter of start * trace/n, growing by 10x up to max * trace/n. Returns the
/// jitter used.
inline double cholesky_solve_in_place(Eigen::MatrixXd& a, Eigen::MatrixXd& b,
                                      double jitter_start = 1e-10,
                                      double jitter_max = 1e-4) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n || b.rows() != n)
    throw Error(ErrorKind::kShape, "cholesky_solve: dimension mismatch");
  const Eigen::VectorXd diag = a.diagonal();
  const double scale = diag.sum() / static_cast<double>(std::max<Eigen::Index>(n, 1));
  double jitter = 0.0;
  double rel = jitter_start;
  for (;;) {
    {
      Eigen::LLT<Eigen::Ref<Eigen::MatrixXd>, Eigen::Lower> llt(a);
      if (llt.info() == Eigen::Success) {
        llt.solveInPlace(b);
        return jitter;
      }
    }
    if (!(scale > 0.0) || rel > jitter_max * (1.0 + 1e-9))
      throw Error(ErrorKind::kNumerical,
                  "Cholesky factorization failed after jitter escalation");
    jitter = rel * scale;
    rel *= 10.0;
    detail::restore_lower_from_upper(a);
    a.diagonal() = diag.array() + jitter;
  }
}

template <typename Derived>
void check_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (!m.allFinite())
    throw Error(ErrorKind::kInput, std::string(what) + " has non-finite values");
}

/// Sum of feature columns per class: H Y^T for one-hot Y, in sample order.
template <typename Derived>
Eigen::MatrixXd features_times_targets(const Eigen::MatrixBase<Derived>& h,
                                       const OneHotTargets& y) {
  Eigen::MatrixXd hy = Eigen::MatrixXd::Zero(h.rows(), y.n_classes);
  for (Eigen::Index s = 0; s < h.cols(); ++s)
    hy.col(y.labels[static_cast<std::size_t>(s)]) +=
        h.col(s).template cast<double>();
  return hy;
}

template <typename Derived>
OutputWeights solve_output_weights(const Eigen::MatrixBase<Derived>& h,
                                   const OneHotTargets& y,
                                   const SolverConfig& cfg = {},
                                   SolveInfo* info = nullptr) {
  if (h.rows() < 1 || h.cols() < 1)
    throw Error(ErrorKind::kInput, "feature matrix is empty");
  if (static_cast<std::size_t>(h.cols()) != y.n_samples())
    throw Error(ErrorKind::kShape,
                "features have " + std::to_string(h.cols()) +
                    " samples, targets have " +
                    std::to_string(y.n_samples()));
  if (!(cfg.C > 0.0) || !std::isfinite(cfg.C))
    throw Error(ErrorKind::kInput, "regularization C must be positive");
  check_finite(h, "feature matrix");
  for (int l : y.labels)
    if (l < 0 || l >= y.n_classes)
      throw Error(ErrorKind::kInput, "target label out of range");

  SolveBranch branch = cfg.branch;
  if (branch == SolveBranch::kAuto)
    branch = h.rows() < h.cols() ? SolveBranch::kPrimal : SolveBranch::kDual;

  SolveInfo local;
  local.branch = branch;
  const auto t0 = std::chrono::steady_clock::now();
  OutputWeights w;
  if (branch == SolveBranch::kPrimal) {
    Eigen::MatrixXd a = gram_features(h, cfg.workers);
    a.diagonal().array() += 1.0 / cfg.C;
    const auto t1 = std::chrono::steady_clock::now();
    local.gram_seconds = std::chrono::duration<double>(t1 - t0).count();
    w = features_times_targets(h, y);
    local.jitter =
        cholesky_solve_in_place(a, w, cfg.jitter_start, cfg.jitter_max);
    local.factor_seconds = std::chrono::duration<double>(
                               std::chrono::steady_clock::now() - t1)
                               .count();
  } else {
    Eigen::MatrixXd a = gram_samples(h, cfg.workers);
    a.diagonal().array() += 1.0 / cfg.C;
    const auto t1 = std::chrono::steady_clock::now();
    local.gram_seconds = std::chrono::duration<double>(t1 - t0).count();
    Eigen::MatrixXd z = y.matrix().transpose();
    local.jitter =
        cholesky_solve_in_place(a, z, cfg.jitter_start, cfg.jitter_max);
    w.resize(h.rows(), y.n_classes);
    for (Eigen::Index r = 0; r < h.rows(); r += detail::kGramChunk) {
      const Eigen::Index br = std::min(detail::kGramChunk, h.rows() - r);
      w.middleRows(r, br).noalias() =
          h.middleRows(r, br).template cast<double>() * z;
    }
    local.factor_seconds = std::chrono::duration<double>(
                               std::chrono::steady_clock::now() - t1)
                               .count();
  }
  if (!w.allFinite())
    throw Error(ErrorKind::kNumerical, "solver produced non-finite weights");
  if (info) *info = local;
  return w;
}

/// max|H H^T W + W/C - H Y^T| / max(1, max|H Y^T|)
template <typename Derived>
double residual_norm(const Eigen::MatrixBase<Derived>& h,
                     const OneHotTargets& y, const OutputWeights& w,
                     double C) {
  const Eigen::MatrixXd hd = h.template cast<double>();
  const Eigen::MatrixXd hy = features_times_targets(hd, y);
  const Eigen::MatrixXd r = hd * (hd.transpose() * w) + w / C - hy;
  return r.cwiseAbs().maxCoeff() / std::max(1.0, hy.cwiseAbs().maxCoeff());
}

namespace detail {

inline int argmax_lowest(const double* scores, int n) {
  int best = 0;
  for (int k = 1; k < n; ++k)
    if (scores[k] > scores[best]) best = k;
  return best;
}

}  // namespace detail

/// Per sample argmax of W^T h; ties go to the lowest class index. Each score
/// is one fixed-order dot product, so results do not depend on batching.
template <typename Derived>
std::vector<int> predict(const OutputWeights& w,
                         const Eigen::MatrixBase<Derived>& h,
                         unsigned workers = 1) {
  if (h.rows() != w.rows())
    throw Error(ErrorKind::kShape,
                "weights expect " + std::to_string(w.rows()) +
                    " features, got " + std::to_string(h.rows()));
  const int k = static_cast<int>(w.cols());
  std::vector<int> out(static_cast<std::size_t>(h.cols()));
  parallel_for(out.size(), workers, [&](std::size_t s) {
    const Eigen::VectorXd col =
        h.col(static_cast<Eigen::Index>(s)).template cast<double>();
    std::vector<double> scores(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) scores[static_cast<std::size_t>(c)] = w.col(c).dot(col);
    out[s] = detail::argmax_lowest(scores.data(), k);
  });
  return out;
}

inline double accuracy(std::span<const int> predicted,
                       std::span<const int> truth) {
  if (predicted.size() != truth.size())
    throw Error(ErrorKind::kInput, "accuracy: length mismatch");
  if (predicted.empty())
    throw Error(ErrorKind::kInput, "accuracy of an empty set is undefined");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

}  // namespace lbcnn
