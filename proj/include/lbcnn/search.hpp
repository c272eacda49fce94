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

// Random search over binary kernels: every trial draws a fresh kernel set,
// fits the output layer in closed form and scores it on the test set. The
// best (kernels, weights) pair is retained.

#include <chrono>
#include <cstdint>
#include <limits>
#include <new>
#include <optional>
#include <string>
#include <vector>

#include "lbcnn/architecture.hpp"
#include "lbcnn/common.hpp"
#include "lbcnn/data_io.hpp"
#include "lbcnn/elm.hpp"
#include "lbcnn/ops.hpp"

namespace lbcnn {

/// Seed of trial `index` under `master_seed`.
constexpr std::uint64_t trial_seed(std::uint64_t master_seed,
                                   std::uint64_t index) noexcept {
  return split_seed(master_seed, index);
}

/// Draws every weight uniformly from {-1, +1}. Weight i of layer l takes bit
/// (i % 64) of the 64-bit word split_seed(layer_seed, i / 64), so the draw
/// is a pure function of (seed, layer, position). Biases are zero.
inline KernelSet generate_kernels(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  KernelSet ks;
  for (std::size_t l = 0; l < arch.layers(); ++l) {
    KernelLayer layer;
    layer.multiplier = arch.multipliers[l];
    layer.in_channels = arch.channels_at(l);
    layer.weights.resize(layer.weight_count());
    layer.biases.assign(layer.out_channels(), 0.0);
    const std::uint64_t layer_seed = split_seed(seed, l);
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < layer.weights.size(); ++i) {
      if (i % 64 == 0) word = split_seed(layer_seed, i / 64);
      layer.weights[i] = ((word >> (i % 64)) & 1u) ? 1 : -1;
    }
    ks.layers.push_back(std::move(layer));
  }
  return ks;
}

struct TrialTimings {
  double expand_s = 0.0;
  double solve_s = 0.0;
  double total_s = 0.0;
};

struct TrialOutcome {
  KernelSet kernels;
  OutputWeights weights;
  double accuracy = 0.0;
  TrialTimings timings;
  ParamBits bits;
  std::size_t n_features = 0;
  SolveInfo solve;
};

/// Expands a normalized dataset, at most `max_samples` from the front.
inline FeatureMatrix expand_dataset(const Dataset& ds, const Architecture& arch,
                                    const KernelSet& kernels, unsigned workers,
                                    std::optional<std::size_t> max_samples = {}) {
  if (ds.scale != PixelScale::kUnit)
    throw Error(ErrorKind::kInput, "dataset must be normalized before expansion");
  const std::size_t n = max_samples ? std::min(*max_samples, ds.size()) : ds.size();
  if (n == 0) throw Error(ErrorKind::kInput, "no samples to expand");
  FeatureExpander ex(arch, kernels);
  ex.check_images(ds.images);
  FeatureMatrix f(static_cast<Eigen::Index>(ex.n_features()),
                  static_cast<Eigen::Index>(n));
  ex.expand_range(ds.images, 0, n, f, 0, workers);
  return f;
}

/// Fits the output layer for fixed kernels and scores it on `test`. This is
/// also the replay path for stored kernels.
inline TrialOutcome evaluate_kernels(const Dataset& train, const Dataset& test,
                                     const Architecture& arch,
                                     const KernelSet& kernels,
                                     const SolverConfig& solver,
                                     std::optional<std::size_t> max_train = {}) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  TrialOutcome out;
  out.kernels = kernels;
  out.bits = param_bits(arch);
  out.n_features = arch.n_features();
  {
    const FeatureMatrix h =
        expand_dataset(train, arch, kernels, solver.workers, max_train);
    const auto t1 = clock::now();
    out.timings.expand_s = std::chrono::duration<double>(t1 - t0).count();
    std::vector<int> labels(train.labels.begin(),
                            train.labels.begin() + h.cols());
    out.weights = solve_output_weights(h, one_hot(labels, arch.n_classes),
                                       solver, &out.solve);
    out.timings.solve_s =
        std::chrono::duration<double>(clock::now() - t1).count();
  }
  const auto t2 = clock::now();
  const FeatureMatrix ht = expand_dataset(test, arch, kernels, solver.workers);
  out.timings.expand_s += std::chrono::duration<double>(clock::now() - t2).count();
  out.accuracy = accuracy(predict(out.weights, ht, solver.workers), test.labels);
  out.timings.total_s = std::chrono::duration<double>(clock::now() - t0).count();
  return out;
}

struct SearchConfig {
  int trials = 1;
  std::uint64_t master_seed = 0;
  Architecture arch;
  SolverConfig solver;
  const Dataset* train = nullptr;
  const Dataset* test = nullptr;
  std::optional<std::size_t> max_train_samples;
  unsigned parallel_trials = 1;  // trials evaluated concurrently
};

inline TrialOutcome run_trial(const SearchConfig& cfg, std::uint64_t seed) {
  if (!cfg.train || !cfg.test)
    throw Error(ErrorKind::kInput, "search needs train and test datasets");
  return evaluate_kernels(*cfg.train, *cfg.test, cfg.arch,
                          generate_kernels(cfg.arch, seed), cfg.solver,
                          cfg.max_train_samples);
}

struct TrialRecord {
  int index = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  double accuracy = 0.0;
  TrialTimings timings;
  std::string error;
};

struct SearchReport {
  std::vector<TrialRecord> trials;
  int best_trial = -1;
  double best_accuracy = 0.0;
  double worst_accuracy = 0.0;
  double mean_accuracy = 0.0;
  int failed_trials = 0;
};

struct SearchResult {
  KernelSet kernels;
  OutputWeights weights;
  SolveInfo solve;
  SearchReport report;
};

inline SearchResult random_search(const SearchConfig& cfg) {
  if (cfg.trials < 1) throw Error(ErrorKind::kInput, "trials must be >= 1");
  cfg.arch.validate();
  SearchResult result;
  auto& rep = result.report;
  rep.trials.resize(static_cast<std::size_t>(cfg.trials));
  bool have_best = false;
  double sum = 0.0;
  int done = 0;

  const std::size_t batch = std::max(1u, cfg.parallel_trials);
  for (std::size_t first = 0; first < rep.trials.size(); first += batch) {
    const std::size_t count = std::min(batch, rep.trials.size() - first);
    std::vector<std::optional<TrialOutcome>> outcomes(count);
    parallel_for(count, static_cast<unsigned>(count), [&](std::size_t j) {
      const std::size_t i = first + j;
      TrialRecord& rec = rep.trials[i];
      rec.index = static_cast<int>(i);
      rec.seed = trial_seed(cfg.master_seed, i);
      try {
        outcomes[j] = run_trial(cfg, rec.seed);
        rec.ok = true;
        rec.accuracy = outcomes[j]->accuracy;
        rec.timings = outcomes[j]->timings;
      } catch (const Error& e) {
        rec.error = std::string(to_string(e.kind())) + ": " + e.what();
      } catch (const std::bad_alloc&) {
        rec.error = "out of memory";
      }
    });
    // fold in trial-index order; ties keep the earlier trial
    for (std::size_t j = 0; j < count; ++j) {
      const TrialRecord& rec = rep.trials[first + j];
      if (!rec.ok) {
        ++rep.failed_trials;
        continue;
      }
      sum += rec.accuracy;
      ++done;
      if (!have_best || rec.accuracy < rep.worst_accuracy)
        rep.worst_accuracy = rec.accuracy;
      if (!have_best || rec.accuracy > rep.best_accuracy) {
        rep.best_accuracy = rec.accuracy;
        rep.best_trial = rec.index;
        result.kernels = std::move(outcomes[j]->kernels);
        result.weights = std::move(outcomes[j]->weights);
        result.solve = outcomes[j]->solve;
      }
      have_best = true;
    }
  }
  if (!have_best)
    throw Error(ErrorKind::kSearch,
                "all " + std::to_string(cfg.trials) + " trials failed; first: " +
                    rep.trials.front().error);
  rep.mean_accuracy = sum / done;
  return result;
}

}  // namespace lbcnn
