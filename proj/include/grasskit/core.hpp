// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace grasskit {

using Index = Eigen::Index;

template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

// Error taxonomy. The CLI maps these onto exit codes (config 2, data 3,
// numerics 4); library code throws them directly.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Resource guard tripped (e.g. asked to materialize something huge).
struct GuardError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Counter-based randomness.
//
// Everything random in this library is a pure function of (seed, stream,
// counter) so that projections never need stored state, draws can be
// replayed for any single column/entry, and parallel callers cannot race.
namespace rng {

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stream tags keep unrelated uses of the same seed decorrelated.
enum Stream : std::uint64_t {
  kSjltColumn = 0x11,
  kGaussianEntry = 0x22,
  kRademacherEntry = 0x33,
  kFjltDiagonal = 0x44,
  kFjltSample = 0x55,
  kMaskSample = 0x66,
  kDatasetNoise = 0x77,
  kShuffle = 0x88,
  kSubsetSample = 0x99,
  kWeightInit = 0xaa,
  kLayerExpand = 0xbb,
  kBenchInput = 0xcc,
  kSelectiveInit = 0xdd,
  kRetrainSeed = 0xee,
  kValSplit = 0xff,
  kNullShuffle = 0x111,
};

inline constexpr std::uint64_t draw(std::uint64_t seed, std::uint64_t stream,
                                    std::uint64_t counter,
                                    std::uint64_t extra = 0) {
  std::uint64_t x = mix64(seed ^ 0xa0761d6478bd642fULL);
  x = mix64(x ^ stream);
  x = mix64(x ^ counter);
  x = mix64(x ^ extra);
  return x;
}

// Unbiased-enough integer in [0, n): 128-bit multiply keeps the bias below
// 2^-64 which is far under anything the chi-square checks can see.
inline constexpr std::uint64_t bounded(std::uint64_t r, std::uint64_t n) {
  return static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(r) * n) >> 64);
}

inline constexpr double unit_open(std::uint64_t r) {
  // (0, 1): never returns 0 so it is safe under log().
  return (static_cast<double>(r >> 11) + 0.5) * 0x1.0p-53;
}

inline double gaussian_from(std::uint64_t r1, std::uint64_t r2) {
  const double u1 = unit_open(r1);
  const double u2 = unit_open(r2);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace rng

// ---------------------------------------------------------------------------
// Instrumentation.

// Multiply-add counter for the projection cost model. Only the per-entry
// multiply/accumulate work of a transform is counted; final normalization
// scaling and index gathers are not, so counts line up with the usual
// complexity accounting (dense k*p, SJLT s*nnz, mask k').
struct OpStats {
  std::uint64_t multiply_adds = 0;
};

// Byte counter for auxiliary workspace. Paths with a memory contract route
// their temporaries through TrackedBuffer so peak usage is observable.
struct AllocStats {
  std::uint64_t current_bytes = 0;
  std::uint64_t peak_bytes = 0;
  std::uint64_t largest_single_bytes = 0;

  void on_alloc(std::uint64_t bytes) {
    current_bytes += bytes;
    if (current_bytes > peak_bytes) peak_bytes = current_bytes;
    if (bytes > largest_single_bytes) largest_single_bytes = bytes;
  }
  void on_free(std::uint64_t bytes) {
    current_bytes -= bytes < current_bytes ? bytes : current_bytes;
  }
};

template <typename T>
class TrackedBuffer {
 public:
  TrackedBuffer(Index n, AllocStats* stats) : data_(static_cast<size_t>(n)), stats_(stats) {
    if (stats_) stats_->on_alloc(bytes());
  }
  ~TrackedBuffer() {
    if (stats_) stats_->on_free(bytes());
  }
  TrackedBuffer(const TrackedBuffer&) = delete;
  TrackedBuffer& operator=(const TrackedBuffer&) = delete;

  Index size() const { return static_cast<Index>(data_.size()); }
  std::uint64_t bytes() const { return data_.size() * sizeof(T); }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](Index i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](Index i) const { return data_[static_cast<size_t>(i)]; }
  Eigen::Map<VecX<T>> view() { return {data_.data(), size()}; }
  Eigen::Map<const VecX<T>> view() const { return {data_.data(), size()}; }
  void set_zero() { std::fill(data_.begin(), data_.end(), T(0)); }

 private:
  std::vector<T> data_;
  AllocStats* stats_;
};

// ---------------------------------------------------------------------------
// Gradient vectors.
//
// A gradient is either dense (plain Eigen vector) or sparse (sorted index /
// value pairs). Both expose the same ascending-index nonzero iteration so a
// consumer performs bit-identical reductions regardless of representation.
template <typename Scalar>
class GradientVector {
 public:
  GradientVector() = default;

  static GradientVector dense(VecX<Scalar> v) {
    GradientVector g;
    g.dim_ = v.size();
    g.dense_ = std::move(v);
    g.nnz_ = 0;
    for (Index i = 0; i < g.dim_; ++i) {
      if (g.dense_[i] != Scalar(0)) ++g.nnz_;
    }
    return g;
  }

  static GradientVector sparse(Index dim, std::vector<Index> indices,
                               std::vector<Scalar> values) {
    if (indices.size() != values.size()) {
      throw std::invalid_argument("sparse gradient: index/value size mismatch");
    }
    for (size_t t = 0; t < indices.size(); ++t) {
      if (indices[t] < 0 || indices[t] >= dim) {
        throw std::invalid_argument("sparse gradient: index out of range");
      }
      if (t > 0 && indices[t] <= indices[t - 1]) {
        throw std::invalid_argument(
            "sparse gradient: indices must be strictly increasing");
      }
    }
    GradientVector g;
    g.dim_ = dim;
    g.is_sparse_ = true;
    g.indices_ = std::move(indices);
    g.values_ = std::move(values);
    g.nnz_ = static_cast<Index>(g.values_.size());
    return g;
  }

  Index dim() const { return dim_; }
  bool is_sparse() const { return is_sparse_; }
  // Sparse nnz counts stored entries; dense nnz counts entries with |v| > 0.
  Index nnz() const { return nnz_; }

  const std::vector<Index>& indices() const { return indices_; }
  const std::vector<Scalar>& values() const { return values_; }

  VecX<Scalar> to_dense() const {
    if (!is_sparse_) return dense_;
    VecX<Scalar> out = VecX<Scalar>::Zero(dim_);
    for (size_t t = 0; t < indices_.size(); ++t) {
      out[indices_[t]] = values_[t];
    }
    return out;
  }

  const VecX<Scalar>& dense_data() const {
    if (is_sparse_) throw std::logic_error("gradient is sparse");
    return dense_;
  }

  // Visits stored nonzeros in ascending index order. Dense vectors skip
  // exact zeros so both representations walk the same entries.
  template <typename F>
  void for_each_nonzero(F&& f) const {
    if (is_sparse_) {
      for (size_t t = 0; t < indices_.size(); ++t) f(indices_[t], values_[t]);
    } else {
      for (Index i = 0; i < dim_; ++i) {
        if (dense_[i] != Scalar(0)) f(i, dense_[i]);
      }
    }
  }

 private:
  Index dim_ = 0;
  Index nnz_ = 0;
  bool is_sparse_ = false;
  VecX<Scalar> dense_;
  std::vector<Index> indices_;
  std::vector<Scalar> values_;
};

// ---------------------------------------------------------------------------
// Deterministic parallel loop: [0, n) is split into fixed chunks processed in
// any thread order, so results written by index never depend on the thread
// count.
inline void parallel_for(Index n, int threads,
                         const std::function<void(Index, Index)>& body) {
  if (threads <= 1 || n < 2) {
    if (n > 0) body(0, n);
    return;
  }
  const int workers =
      static_cast<int>(std::min<Index>(threads, n));
  const Index chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    const Index lo = static_cast<Index>(w) * chunk;
    const Index hi = std::min<Index>(lo + chunk, n);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace grasskit
