// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
//
// Random projections for gradient compression. All transforms are linear
// maps R^p -> R^k whose randomness is a pure function of a seed, so the same
// spec always denotes the same matrix. The sparse transforms never build
// that matrix; the materializers exist as oracles and for small cached uses.
#pragma once

#include <Eigen/SparseCore>

#include <bit>
#include <chrono>
#include <cstdio>
#include <vector>

#include "grasskit/core.hpp"
#include "grasskit/stats.hpp"

namespace grasskit {

enum class SketchKind { Gaussian, Rademacher, FJLT, SJLT };

inline const char* sketch_kind_name(SketchKind k) {
  switch (k) {
    case SketchKind::Gaussian: return "gaussian";
    case SketchKind::Rademacher: return "rademacher";
    case SketchKind::FJLT: return "fjlt";
    case SketchKind::SJLT: return "sjlt";
  }
  return "?";
}

struct SketchSpec {
  SketchKind kind = SketchKind::SJLT;
  Index input_dim = 0;   // p
  Index target_dim = 0;  // k
  int sparsity = 1;      // s: nonzeros per SJLT column
  std::uint64_t seed = 0;
  bool normalize = false;  // scale so E||Pg||^2 = ||g||^2

  void validate() const {
    if (input_dim <= 0 || target_dim <= 0) {
      throw std::invalid_argument("sketch: dims must be positive");
    }
    if (kind == SketchKind::SJLT &&
        (sparsity < 1 || static_cast<Index>(sparsity) > target_dim)) {
      throw std::invalid_argument("sketch: need 1 <= s <= k");
    }
    if (target_dim > input_dim) {
      std::fprintf(stderr, "warning: sketch target dim %lld exceeds input dim %lld\n",
                    static_cast<long long>(target_dim),
                    static_cast<long long>(input_dim));
    }
  }
};

// Materialization guard: explicit matrices are for oracles and small cached
// projections only.
inline void check_materialize_guard(Index k, Index p) {
  if (k * p > Index(100000000)) {
    throw GuardError("refusing to materialize projection with k*p > 1e8 entries");
  }
}

// ---------------------------------------------------------------------------
// SJLT. Column j of the implicit k x p matrix holds `sparsity` nonzero
// entries of value +-1 at distinct rows. Rows and signs come from the
// counter PRF keyed on (seed, column, attempt); attempts that repeat an
// already-chosen row are rejected, so the draw is exchangeable over row
// subsets. Visits per input nonzero cost O(s) independent of k.

// Calls f(row, sign) for each of the s slots of column j, in slot order.
template <typename F>
inline void sjlt_visit_column(const SketchSpec& spec, Index j, F&& f) {
  const Index k = spec.target_dim;
  const int s = spec.sparsity;
  if (s == 1) {
    const std::uint64_t r = rng::draw(spec.seed, rng::kSjltColumn,
                                      static_cast<std::uint64_t>(j), 0);
    f(static_cast<Index>(rng::bounded(r, static_cast<std::uint64_t>(k))),
      (r & 1u) ? 1 : -1);
    return;
  }
  Index chosen[64];
  std::vector<Index> chosen_big;
  Index* rows = chosen;
  if (s > 64) {
    chosen_big.resize(static_cast<size_t>(s));
    rows = chosen_big.data();
  }
  int found = 0;
  std::uint64_t attempt = 0;
  while (found < s) {
    const std::uint64_t r = rng::draw(spec.seed, rng::kSjltColumn,
                                      static_cast<std::uint64_t>(j), attempt++);
    const Index row =
        static_cast<Index>(rng::bounded(r, static_cast<std::uint64_t>(k)));
    bool dup = false;
    for (int t = 0; t < found; ++t) {
      if (rows[t] == row) {
        dup = true;
        break;
      }
    }
    if (dup) continue;
    rows[found++] = row;
    f(row, (r & 1u) ? 1 : -1);
  }
}

struct ColumnHash {
  std::vector<Index> rows;
  std::vector<int> signs;  // +-1
};

inline ColumnHash derive_column_hash(const SketchSpec& spec, Index j) {
  if (spec.kind != SketchKind::SJLT) {
    throw std::invalid_argument("derive_column_hash: spec is not SJLT");
  }
  spec.validate();
  if (j < 0 || j >= spec.input_dim) {
    throw std::out_of_range("derive_column_hash: column out of range");
  }
  ColumnHash h;
  h.rows.reserve(static_cast<size_t>(spec.sparsity));
  h.signs.reserve(static_cast<size_t>(spec.sparsity));
  sjlt_visit_column(spec, j, [&](Index row, int sign) {
    h.rows.push_back(row);
    h.signs.push_back(sign);
  });
  return h;
}

// Projects g through the SJLT. Accumulates in f64 and visits stored nonzeros
// in ascending index order, so dense and sparse representations of the same
// vector produce bit-identical output.
template <typename Scalar>
VecX<Scalar> sjlt_project(const SketchSpec& spec, const GradientVector<Scalar>& g,
                          OpStats* ops = nullptr, AllocStats* alloc = nullptr) {
  if (spec.kind != SketchKind::SJLT) {
    throw std::invalid_argument("sjlt_project: spec is not SJLT");
  }
  spec.validate();
  if (g.dim() != spec.input_dim) {
    throw std::invalid_argument("sjlt_project: gradient dim mismatch");
  }
  const Index k = spec.target_dim;
  TrackedBuffer<double> acc(k, alloc);
  acc.set_zero();
  std::uint64_t macs = 0;
  g.for_each_nonzero([&](Index j, Scalar v) {
    const double x = static_cast<double>(v);
    sjlt_visit_column(spec, j, [&](Index row, int sign) {
      acc[row] += sign > 0 ? x : -x;
    });
    macs += static_cast<std::uint64_t>(spec.sparsity);
  });
  if (ops) ops->multiply_adds += macs;
  const double scale =
      spec.normalize ? 1.0 / std::sqrt(static_cast<double>(spec.sparsity)) : 1.0;
  VecX<Scalar> out(k);
  for (Index i = 0; i < k; ++i) out[i] = static_cast<Scalar>(acc[i] * scale);
  return out;
}

template <typename Scalar>
Eigen::SparseMatrix<Scalar> sjlt_materialize(const SketchSpec& spec) {
  if (spec.kind != SketchKind::SJLT) {
    throw std::invalid_argument("sjlt_materialize: spec is not SJLT");
  }
  spec.validate();
  check_materialize_guard(spec.target_dim, spec.input_dim);
  const Scalar scale = static_cast<Scalar>(
      spec.normalize ? 1.0 / std::sqrt(static_cast<double>(spec.sparsity)) : 1.0);
  std::vector<Eigen::Triplet<Scalar>> trips;
  trips.reserve(static_cast<size_t>(spec.input_dim * spec.sparsity));
  for (Index j = 0; j < spec.input_dim; ++j) {
    sjlt_visit_column(spec, j, [&](Index row, int sign) {
      trips.emplace_back(static_cast<int>(row), static_cast<int>(j),
                         sign > 0 ? scale : -scale);
    });
  }
  Eigen::SparseMatrix<Scalar> m(spec.target_dim, spec.input_dim);
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

// ---------------------------------------------------------------------------
// Dense Gaussian / Rademacher projections. Entries are generated row-major
// from the counter PRF during a streaming pass, so the matrix needs no
// storage; materialize() is the cached form and the test oracle.

inline double gaussian_entry(std::uint64_t seed, Index i, Index j, Index p) {
  const std::uint64_t idx =
      static_cast<std::uint64_t>(i) * static_cast<std::uint64_t>(p) +
      static_cast<std::uint64_t>(j);
  return rng::gaussian_from(rng::draw(seed, rng::kGaussianEntry, idx, 0),
                            rng::draw(seed, rng::kGaussianEntry, idx, 1));
}

inline double rademacher_entry(std::uint64_t seed, Index i, Index j, Index p) {
  const std::uint64_t idx =
      static_cast<std::uint64_t>(i) * static_cast<std::uint64_t>(p) +
      static_cast<std::uint64_t>(j);
  return (rng::draw(seed, rng::kRademacherEntry, idx) & 1u) ? 1.0 : -1.0;
}

namespace detail {

template <typename Scalar, typename EntryFn>
VecX<Scalar> dense_project(const SketchSpec& spec, const GradientVector<Scalar>& g,
                           EntryFn entry, OpStats* ops) {
  spec.validate();
  if (g.dim() != spec.input_dim) {
    throw std::invalid_argument("dense projection: gradient dim mismatch");
  }
  const Index k = spec.target_dim;
  const Index p = spec.input_dim;
  const VecX<Scalar> x = g.to_dense();
  VecX<Scalar> out(k);
  const double scale =
      spec.normalize ? 1.0 / std::sqrt(static_cast<double>(k)) : 1.0;
  for (Index i = 0; i < k; ++i) {
    double acc = 0.0;
    for (Index j = 0; j < p; ++j) {
      acc += entry(spec.seed, i, j, p) * static_cast<double>(x[j]);
    }
    out[i] = static_cast<Scalar>(acc * scale);
  }
  // Dense matmul cost model: every entry participates regardless of input
  // sparsity.
  if (ops) {
    ops->multiply_adds +=
        static_cast<std::uint64_t>(k) * static_cast<std::uint64_t>(p);
  }
  return out;
}

template <typename Scalar, typename EntryFn>
MatX<Scalar> dense_materialize(const SketchSpec& spec, EntryFn entry) {
  spec.validate();
  check_materialize_guard(spec.target_dim, spec.input_dim);
  const double scale =
      spec.normalize ? 1.0 / std::sqrt(static_cast<double>(spec.target_dim)) : 1.0;
  MatX<Scalar> m(spec.target_dim, spec.input_dim);
  for (Index i = 0; i < spec.target_dim; ++i) {
    for (Index j = 0; j < spec.input_dim; ++j) {
      m(i, j) = static_cast<Scalar>(entry(spec.seed, i, j, spec.input_dim) * scale);
    }
  }
  return m;
}

}  // namespace detail

template <typename Scalar>
VecX<Scalar> gaussian_project(const SketchSpec& spec, const GradientVector<Scalar>& g,
                              OpStats* ops = nullptr) {
  if (spec.kind != SketchKind::Gaussian) {
    throw std::invalid_argument("gaussian_project: wrong kind");
  }
  return detail::dense_project(spec, g, gaussian_entry, ops);
}

template <typename Scalar>
VecX<Scalar> rademacher_project(const SketchSpec& spec, const GradientVector<Scalar>& g,
                                OpStats* ops = nullptr) {
  if (spec.kind != SketchKind::Rademacher) {
    throw std::invalid_argument("rademacher_project: wrong kind");
  }
  return detail::dense_project(spec, g, rademacher_entry, ops);
}

template <typename Scalar>
MatX<Scalar> gaussian_materialize(const SketchSpec& spec) {
  return detail::dense_materialize<Scalar>(spec, gaussian_entry);
}

template <typename Scalar>
MatX<Scalar> rademacher_materialize(const SketchSpec& spec) {
  return detail::dense_materialize<Scalar>(spec, rademacher_entry);
}

// ---------------------------------------------------------------------------
// FJLT, realized as a subsampled randomized Hadamard transform: pad to the
// next power of two P2, flip signs with a random +-1 diagonal, run the
// in-place Walsh-Hadamard butterfly, then keep k coordinates sampled without
// replacement. Unnormalized output is scaled by 1/sqrt(P2) (orthonormal H);
// normalize adds the sqrt(P2/k) subsampling correction.

inline Index fjlt_padded_dim(Index p) {
  return static_cast<Index>(std::bit_ceil(static_cast<std::uint64_t>(p)));
}

// Unnormalized Walsh-Hadamard butterfly, Sylvester ordering: H[r][c] =
// (-1)^popcount(r & c). [1, 1] -> [2, 0].
inline void fwht_inplace(double* a, Index n) {
  for (Index h = 1; h < n; h <<= 1) {
    for (Index i = 0; i < n; i += h << 1) {
      for (Index j = i; j < i + h; ++j) {
        const double x = a[j];
        const double y = a[j + h];
        a[j] = x + y;
        a[j + h] = x - y;
      }
    }
  }
}

// The k sampled coordinates in [0, P2), sorted. Floyd's algorithm keeps the
// draw uniform over subsets with O(k) state.
inline std::vector<Index> fjlt_sample_rows(const SketchSpec& spec) {
  const std::uint64_t n = static_cast<std::uint64_t>(fjlt_padded_dim(spec.input_dim));
  const std::uint64_t k = static_cast<std::uint64_t>(spec.target_dim);
  if (k > n) throw std::invalid_argument("fjlt: k exceeds padded dim");
  std::vector<Index> rows;
  rows.reserve(k);
  std::uint64_t counter = 0;
  for (std::uint64_t j = n - k; j < n; ++j) {
    const std::uint64_t t =
        rng::bounded(rng::draw(spec.seed, rng::kFjltSample, counter++), j + 1);
    const Index cand = static_cast<Index>(t);
    bool present = false;
    for (Index r : rows) {
      if (r == cand) {
        present = true;
        break;
      }
    }
    rows.push_back(present ? static_cast<Index>(j) : cand);
  }
  std::sort(rows.begin(), rows.end());
  return rows;
}

inline int fjlt_diag_sign(std::uint64_t seed, Index j) {
  return (rng::draw(seed, rng::kFjltDiagonal, static_cast<std::uint64_t>(j)) & 1u)
             ? 1
             : -1;
}

template <typename Scalar>
VecX<Scalar> fjlt_project(const SketchSpec& spec, const GradientVector<Scalar>& g,
                          OpStats* ops = nullptr, AllocStats* alloc = nullptr) {
  if (spec.kind != SketchKind::FJLT) {
    throw std::invalid_argument("fjlt_project: wrong kind");
  }
  spec.validate();
  if (g.dim() != spec.input_dim) {
    throw std::invalid_argument("fjlt_project: gradient dim mismatch");
  }
  const Index p = spec.input_dim;
  const Index n = fjlt_padded_dim(p);
  TrackedBuffer<double> buf(n, alloc);
  buf.set_zero();
  const VecX<Scalar> x = g.to_dense();
  for (Index j = 0; j < p; ++j) {
    buf[j] = fjlt_diag_sign(spec.seed, j) * static_cast<double>(x[j]);
  }
  fwht_inplace(buf.data(), n);
  const std::vector<Index> rows = fjlt_sample_rows(spec);
  const double scale =
      spec.normalize ? 1.0 / std::sqrt(static_cast<double>(spec.target_dim))
                     : 1.0 / std::sqrt(static_cast<double>(n));
  VecX<Scalar> out(spec.target_dim);
  for (Index t = 0; t < spec.target_dim; ++t) {
    out[t] = static_cast<Scalar>(buf[rows[t]] * scale);
  }
  if (ops) {
    const auto un = static_cast<std::uint64_t>(n);
    ops->multiply_adds += static_cast<std::uint64_t>(p) +
                          un * static_cast<std::uint64_t>(std::countr_zero(
                                   static_cast<std::uint64_t>(n)));
  }
  return out;
}

// Oracle materialization via the closed form H[r][c] = (-1)^popcount(r & c);
// shares no code with the butterfly path.
template <typename Scalar>
MatX<Scalar> fjlt_materialize(const SketchSpec& spec) {
  if (spec.kind != SketchKind::FJLT) {
    throw std::invalid_argument("fjlt_materialize: wrong kind");
  }
  spec.validate();
  check_materialize_guard(spec.target_dim, spec.input_dim);
  const Index n = fjlt_padded_dim(spec.input_dim);
  const std::vector<Index> rows = fjlt_sample_rows(spec);
  const double scale =
      spec.normalize ? 1.0 / std::sqrt(static_cast<double>(spec.target_dim))
                     : 1.0 / std::sqrt(static_cast<double>(n));
  MatX<Scalar> m(spec.target_dim, spec.input_dim);
  for (Index t = 0; t < spec.target_dim; ++t) {
    const std::uint64_t r = static_cast<std::uint64_t>(rows[t]);
    for (Index c = 0; c < spec.input_dim; ++c) {
      const int h =
          (std::popcount(r & static_cast<std::uint64_t>(c)) & 1) ? -1 : 1;
      m(t, c) = static_cast<Scalar>(scale * h * fjlt_diag_sign(spec.seed, c));
    }
  }
  return m;
}

// Dispatch on kind; the entry point pipelines use.
template <typename Scalar>
VecX<Scalar> sketch_project(const SketchSpec& spec, const GradientVector<Scalar>& g,
                            OpStats* ops = nullptr, AllocStats* alloc = nullptr) {
  switch (spec.kind) {
    case SketchKind::SJLT: return sjlt_project(spec, g, ops, alloc);
    case SketchKind::Gaussian: return gaussian_project(spec, g, ops);
    case SketchKind::Rademacher: return rademacher_project(spec, g, ops);
    case SketchKind::FJLT: return fjlt_project(spec, g, ops, alloc);
  }
  throw std::logic_error("unreachable");
}

// ---------------------------------------------------------------------------
// Microbenchmark: projects `trials` random vectors of the requested sparsity
// and reports wall time, the op counter, and the median pairwise-distance
// relative error. Distances are always measured with normalization on so
// different methods are comparable at the same k.

struct ProjectionBenchmark {
  double wall_time_sec = 0;
  std::uint64_t op_count = 0;
  double median_relative_error = 0;
};

template <typename Scalar = float>
ProjectionBenchmark benchmark_projection(const SketchSpec& spec,
                                         double sparsity_level, Index trials) {
  if (sparsity_level <= 0.0 || sparsity_level > 1.0) {
    throw std::invalid_argument("benchmark: sparsity level must be in (0, 1]");
  }
  if (trials < 2) throw std::invalid_argument("benchmark: need >= 2 trials");
  spec.validate();
  const Index p = spec.input_dim;
  const Index nnz = std::max<Index>(1, static_cast<Index>(
      std::llround(sparsity_level * static_cast<double>(p))));

  // Random inputs: uniform support of the requested size, Gaussian values.
  std::vector<GradientVector<Scalar>> inputs;
  inputs.reserve(static_cast<size_t>(trials));
  for (Index t = 0; t < trials; ++t) {
    const std::uint64_t tseed = rng::draw(spec.seed, rng::kBenchInput,
                                          static_cast<std::uint64_t>(t));
    std::vector<Index> support;
    if (nnz == p) {
      support.resize(static_cast<size_t>(p));
      std::iota(support.begin(), support.end(), Index(0));
    } else {
      support.reserve(static_cast<size_t>(nnz));
      std::uint64_t c = 0;
      for (std::uint64_t j = static_cast<std::uint64_t>(p - nnz);
           j < static_cast<std::uint64_t>(p); ++j) {
        const std::uint64_t d = rng::bounded(rng::draw(tseed, rng::kMaskSample, c++), j + 1);
        const Index cand = static_cast<Index>(d);
        bool present = false;
        for (Index r : support) {
          if (r == cand) { present = true; break; }
        }
        support.push_back(present ? static_cast<Index>(j) : cand);
      }
      std::sort(support.begin(), support.end());
    }
    std::vector<Scalar> values(support.size());
    for (size_t i = 0; i < support.size(); ++i) {
      values[i] = static_cast<Scalar>(rng::gaussian_from(
          rng::draw(tseed, rng::kDatasetNoise, i, 0),
          rng::draw(tseed, rng::kDatasetNoise, i, 1)));
    }
    inputs.push_back(GradientVector<Scalar>::sparse(p, std::move(support),
                                                    std::move(values)));
  }

  SketchSpec run = spec;
  run.normalize = true;
  ProjectionBenchmark result;
  OpStats ops;
  std::vector<VecX<Scalar>> projected;
  projected.reserve(static_cast<size_t>(trials));
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& g : inputs) projected.push_back(sketch_project(run, g, &ops));
  const auto t1 = std::chrono::steady_clock::now();
  result.wall_time_sec = std::chrono::duration<double>(t1 - t0).count();
  result.op_count = ops.multiply_adds;

  std::vector<double> errs;
  for (Index a = 0; a < trials; ++a) {
    const VecX<double> xa = inputs[static_cast<size_t>(a)].to_dense().template cast<double>();
    for (Index b = a + 1; b < trials; ++b) {
      const VecX<double> xb = inputs[static_cast<size_t>(b)].to_dense().template cast<double>();
      const double d = (xa - xb).norm();
      if (d == 0.0) continue;
      const double dh = (projected[static_cast<size_t>(a)] -
                         projected[static_cast<size_t>(b)])
                            .template cast<double>()
                            .norm();
      errs.push_back(std::abs(dh - d) / d);
    }
  }
  result.median_relative_error = median(std::move(errs));
  return result;
}

}  // namespace grasskit
