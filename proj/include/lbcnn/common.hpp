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
#include <cstddef>
#include <cstdint>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lbcnn {

// Broad failure classes. The CLI maps them onto exit codes.
enum class ErrorKind {
  kShape,          // tensor / matrix dimension mismatch
  kArchitecture,   // architecture collapses to an empty grid
  kInput,          // non-finite values, empty inputs, bad arguments
  kFormat,         // malformed dataset files
  kEncoding,       // labels out of range
  kSplit,          // class too small to split
  kNumerical,      // factorization failed, divergence
  kSearch,         // every trial failed
  kBadMagic,
  kBadVersion,
  kChecksum,
  kTruncated,
  kIo,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kArchitecture: return "invalid_architecture";
    case ErrorKind::kInput: return "input";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kEncoding: return "encoding";
    case ErrorKind::kSplit: return "split";
    case ErrorKind::kNumerical: return "numerical";
    case ErrorKind::kSearch: return "search";
    case ErrorKind::kBadMagic: return "bad_magic";
    case ErrorKind::kBadVersion: return "bad_version";
    case ErrorKind::kChecksum: return "checksum";
    case ErrorKind::kTruncated: return "truncated";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Runs body(i) for i in [0, n) on up to `workers` threads. Indices are handed
// out in contiguous static chunks, so each index is processed exactly once
// and callers that write disjoint outputs get results independent of the
// worker count. The first exception thrown by any worker is rethrown.
template <typename Body>
void parallel_for(std::size_t n, unsigned workers, Body&& body) {
  if (n == 0) return;
  const std::size_t threads =
      std::min<std::size_t>(std::max(1u, workers), n);
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      try {
        for (std::size_t i = begin; i < end; ++i) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

// SplitMix64 finalizer: a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from (seed, index).
constexpr std::uint64_t split_seed(std::uint64_t seed,
                                   std::uint64_t index) noexcept {
  return mix64(mix64(seed) ^ (index * 0xD1B54A32D192ED03ULL + 1));
}

}  // namespace lbcnn
