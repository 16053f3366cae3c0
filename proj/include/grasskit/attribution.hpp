// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
//
// Influence attribution over compressed gradients. The pipeline has two
// halves: a cache half that accumulates the FIM of the stored gradients and
// preconditions them through a damped inverse, and an attribute half that
// scores train samples against a test gradient by inner product. All solves
// run in f64 regardless of the stored precision; stores persist as f32.
#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include "grasskit/core.hpp"
#include "grasskit/io.hpp"
#include "grasskit/sha256.hpp"

namespace grasskit {

namespace detail {

inline std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Persistent cache of compressed per-sample gradients, one f32 row each.
// The fingerprint ties the rows to the exact compressor that produced them;
// every pairwise operation checks it before comparing rows.

struct GradientStore {
  using RecordMatrix =
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Digest256 fingerprint{};
  RecordMatrix records;  // n x k

  Index n() const { return records.rows(); }
  Index k() const { return records.cols(); }
};

// ---------------------------------------------------------------------------
// FIM of the stored gradients, F = (1/n) sum g g^T, accumulated in f64 with
// the normalization deferred to finalize(). The damped factorization is
// cached per lambda; touching the accumulator invalidates it.

class FimState {
 public:
  explicit FimState(Index k) : k_(k) {
    if (k <= 0) throw ConfigError("fim: dim must be positive");
    sum_ = Eigen::MatrixXd::Zero(k, k);
  }

  // Rebuilds the accumulator state read back from disk.
  static FimState from_sum(Eigen::MatrixXd sum, Index n) {
    if (sum.rows() != sum.cols() || sum.rows() <= 0) {
      throw DataError("fim: accumulator must be square");
    }
    if (n < 0) throw DataError("fim: negative sample count");
    FimState s(sum.rows());
    s.sum_ = std::move(sum);
    s.n_ = n;
    return s;
  }

  Index dim() const { return k_; }
  Index count() const { return n_; }
  const Eigen::MatrixXd& raw_sum() const { return sum_; }

  // Rank-1 updates from a batch of rows. With threads > 1 the rows are split
  // into the same fixed chunks as parallel_for, each chunk sums into its own
  // slot, and the slots combine in ascending order, so a given thread count
  // always produces the same matrix.
  void accumulate(const Eigen::Ref<const GradientStore::RecordMatrix>& rows,
                  int threads = 1) {
    if (rows.cols() != k_) {
      throw DataError("fim: gradient dim " + std::to_string(rows.cols()) +
                      " does not match fim dim " + std::to_string(k_));
    }
    const Index nr = rows.rows();
    if (nr == 0) return;
    finalized_ = false;
    factored_ = false;
    if (threads <= 1 || nr < 2) {
      for (Index i = 0; i < nr; ++i) {
        const Eigen::VectorXd g = rows.row(i).transpose().cast<double>();
        sum_.noalias() += g * g.transpose();
      }
    } else {
      const int workers = static_cast<int>(std::min<Index>(threads, nr));
      const Index chunk = (nr + workers - 1) / workers;
      std::vector<Eigen::MatrixXd> partials(
          static_cast<size_t>((nr + chunk - 1) / chunk),
          Eigen::MatrixXd::Zero(k_, k_));
      parallel_for(nr, threads, [&](Index lo, Index hi) {
        Eigen::MatrixXd& part = partials[static_cast<size_t>(lo / chunk)];
        for (Index i = lo; i < hi; ++i) {
          const Eigen::VectorXd g = rows.row(i).transpose().cast<double>();
          part.noalias() += g * g.transpose();
        }
      });
      for (const auto& part : partials) sum_ += part;
    }
    n_ += nr;
  }

  void finalize() {
    if (n_ == 0) throw DataError("fim: no samples accumulated");
    fhat_ = sum_ / static_cast<double>(n_);
    finalized_ = true;
    factored_ = false;
  }

  bool finalized() const { return finalized_; }

  const Eigen::MatrixXd& fhat() const {
    if (!finalized_) throw GuardError("fim: finalize before reading the matrix");
    return fhat_;
  }

  // Cholesky of F + lambda I. Failure means the damping cannot lift the
  // smallest eigenvalue above roundoff, which a larger lambda fixes.
  void factorize(double lambda) {
    if (!finalized_) throw GuardError("fim: finalize before factorizing");
    if (lambda < 0) throw ConfigError("fim: damping must be nonnegative");
    Eigen::MatrixXd damped = fhat_;
    damped.diagonal().array() += lambda;
    llt_.compute(damped);
    const bool ok = llt_.info() == Eigen::Success &&
                    llt_.matrixLLT().allFinite() &&
                    llt_.matrixLLT().diagonal().minCoeff() > 0.0;
    if (!ok) {
      factored_ = false;
      throw NumericalError("fim factorization failed at damping lambda=" +
                           detail::fmt_g(lambda) + "; increase damping");
    }
    lambda_ = lambda;
    factored_ = true;
  }

  bool factorized() const { return factored_; }

  double damping() const {
    if (!factored_) throw GuardError("fim: no factorization cached");
    return lambda_;
  }

  // Solves (F + lambda I) x = g and verifies the residual, so a silently
  // bad solve can never leak into scores.
  Eigen::VectorXd ifvp(const Eigen::Ref<const Eigen::VectorXd>& g) const {
    if (!factored_) {
      throw GuardError("fim: factorization is stale or missing; call factorize");
    }
    if (g.size() != k_) {
      throw DataError("fim: ifvp dim " + std::to_string(g.size()) +
                      " does not match fim dim " + std::to_string(k_));
    }
    Eigen::VectorXd x = llt_.solve(g);
    const double denom = g.norm();
    if (denom > 0.0) {
      const double rel = (fhat_ * x + lambda_ * x - g).norm() / denom;
      if (!(rel <= 1e-5)) {
        throw NumericalError("ifvp residual " + detail::fmt_g(rel) +
                             " exceeds 1e-5; increase damping");
      }
    }
    return x;
  }

 private:
  Index k_;
  Eigen::MatrixXd sum_;
  Index n_ = 0;
  bool finalized_ = false;
  Eigen::MatrixXd fhat_;
  bool factored_ = false;
  double lambda_ = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

inline FimState fim_from_store(const GradientStore& store, int threads = 1) {
  FimState fim(store.k());
  fim.accumulate(store.records, threads);
  fim.finalize();
  return fim;
}

// ---------------------------------------------------------------------------
// Scoring. GradDot is the raw inner product; influence preconditions the
// train rows through the damped inverse first.

inline Eigen::VectorXd graddot_scores(const GradientStore& store,
                                      const Eigen::Ref<const Eigen::VectorXd>& g_test) {
  if (g_test.size() != store.k()) {
    throw DataError("graddot: test gradient dim " + std::to_string(g_test.size()) +
                    " does not match store k=" + std::to_string(store.k()));
  }
  return store.records.cast<double>() * g_test;
}

// Maps ifvp over every stored row, giving the cacheable second pass. Rows
// are independent, so threads only shard them.
inline GradientStore precondition_store(const GradientStore& store,
                                        const FimState& fim, int threads = 1) {
  if (store.k() != fim.dim()) {
    throw DataError("precondition: store k=" + std::to_string(store.k()) +
                    " does not match fim dim " + std::to_string(fim.dim()));
  }
  GradientStore out;
  out.fingerprint = store.fingerprint;
  out.records.resize(store.n(), store.k());
  std::exception_ptr err;
  std::mutex err_mutex;
  parallel_for(store.n(), threads, [&](Index lo, Index hi) {
    try {
      for (Index i = lo; i < hi; ++i) {
        out.records.row(i) =
            fim.ifvp(store.records.row(i).transpose().cast<double>())
                .transpose()
                .cast<float>();
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mutex);
      if (!err) err = std::current_exception();
    }
  });
  if (err) std::rethrow_exception(err);
  return out;
}

inline Eigen::VectorXd influence_scores(const GradientStore& raw,
                                        const GradientStore& preconditioned,
                                        const Eigen::Ref<const Eigen::VectorXd>& g_test) {
  if (raw.fingerprint != preconditioned.fingerprint) {
    throw DataError("influence: gradient stores carry different compressor fingerprints");
  }
  if (raw.n() != preconditioned.n() || raw.k() != preconditioned.k()) {
    throw DataError("influence: raw and preconditioned stores disagree in shape");
  }
  return graddot_scores(preconditioned, g_test);
}

// ---------------------------------------------------------------------------
// Layer-wise block-diagonal mode: one FIM per layer block, scores summed
// over blocks. The solve runs on the test side, which equals preconditioning
// every train row because the damped inverse is symmetric.

struct AttributionMode {
  std::vector<Index> blocks;

  static AttributionMode whole_model(Index k) { return {{k}}; }
  static AttributionMode layerwise(std::vector<Index> ks) { return {std::move(ks)}; }

  Index total() const {
    Index t = 0;
    for (Index b : blocks) t += b;
    return t;
  }

  void validate() const {
    if (blocks.empty()) throw ConfigError("attribution mode: no blocks");
    for (Index b : blocks) {
      if (b <= 0) throw ConfigError("attribution mode: block dims must be positive");
    }
  }
};

inline Eigen::VectorXd layerwise_scores(const AttributionMode& mode,
                                        const std::vector<GradientStore>& stores,
                                        const std::vector<FimState>& fims,
                                        const std::vector<Eigen::VectorXd>& test_blocks) {
  mode.validate();
  const size_t L = mode.blocks.size();
  if (stores.size() != L || fims.size() != L || test_blocks.size() != L) {
    throw DataError("layerwise: expected " + std::to_string(L) + " blocks, got " +
                    std::to_string(stores.size()) + " stores, " +
                    std::to_string(fims.size()) + " fims, " +
                    std::to_string(test_blocks.size()) + " test gradients");
  }
  for (size_t l = 0; l < L; ++l) {
    if (stores[l].k() != mode.blocks[l]) {
      throw DataError("layerwise: layer " + std::to_string(l) + " store has k=" +
                      std::to_string(stores[l].k()) + " but the mode expects " +
                      std::to_string(mode.blocks[l]));
    }
    if (fims[l].dim() != mode.blocks[l]) {
      throw DataError("layerwise: layer " + std::to_string(l) + " fim has dim " +
                      std::to_string(fims[l].dim()) + " but the mode expects " +
                      std::to_string(mode.blocks[l]));
    }
    if (test_blocks[l].size() != mode.blocks[l]) {
      throw DataError("layerwise: layer " + std::to_string(l) +
                      " test gradient has dim " + std::to_string(test_blocks[l].size()) +
                      " but the mode expects " + std::to_string(mode.blocks[l]));
    }
    if (stores[l].n() != stores[0].n()) {
      throw DataError("layerwise: layer stores hold different sample counts");
    }
  }
  Eigen::VectorXd scores = Eigen::VectorXd::Zero(stores[0].n());
  for (size_t l = 0; l < L; ++l) {
    scores += stores[l].records.cast<double>() * fims[l].ifvp(test_blocks[l]);
  }
  return scores;
}

// ---------------------------------------------------------------------------
// On-disk formats. Gradient store: "GGRD", version, dtype, n, k,
// fingerprint, then n*k f32 little-endian records in row order. FIM file:
// "GFIM", version, k, n, then the raw f64 accumulator column-major.

inline void store_write(const std::string& path, const GradientStore& store) {
  if (store.k() <= 0) throw DataError("gradient store: k must be positive");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  io::write_magic(out, "GGRD");
  io::write_u32(out, 1);  // version
  io::write_u32(out, 1);  // dtype: f32
  io::write_u64(out, static_cast<std::uint64_t>(store.n()));
  io::write_u64(out, static_cast<std::uint64_t>(store.k()));
  io::write_bytes(out, store.fingerprint.data(), store.fingerprint.size());
  io::write_f32_array(out, store.records.data(),
                      static_cast<std::size_t>(store.n()) *
                          static_cast<std::size_t>(store.k()));
  if (!out) throw DataError("write failed for " + path);
}

inline GradientStore store_read(const std::string& path) {
  const std::string what = "gradient store " + path;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  io::expect_magic(in, "GGRD", "gradient store");
  const std::uint32_t version = io::read_u32(in, what);
  if (version != 1) {
    throw DataError("unsupported gradient store version " + std::to_string(version));
  }
  const std::uint32_t dtype = io::read_u32(in, what);
  if (dtype != 1) {
    throw DataError("unsupported gradient store dtype " + std::to_string(dtype));
  }
  const std::uint64_t n = io::read_u64(in, what);
  const std::uint64_t k = io::read_u64(in, what);
  if (k == 0 || k > (1u << 24) || n > (1u << 30)) {
    throw DataError(what + " has an implausible shape");
  }
  GradientStore store;
  io::read_bytes(in, store.fingerprint.data(), store.fingerprint.size(), what);
  store.records.resize(static_cast<Index>(n), static_cast<Index>(k));
  io::read_f32_array(in, store.records.data(), static_cast<std::size_t>(n * k), what);
  io::expect_eof(in, what);
  return store;
}

inline void fim_write(const std::string& path, const FimState& fim) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  io::write_magic(out, "GFIM");
  io::write_u32(out, 1);
  io::write_u64(out, static_cast<std::uint64_t>(fim.dim()));
  io::write_u64(out, static_cast<std::uint64_t>(fim.count()));
  io::write_f64_array(out, fim.raw_sum().data(),
                      static_cast<std::size_t>(fim.dim()) *
                          static_cast<std::size_t>(fim.dim()));
  if (!out) throw DataError("write failed for " + path);
}

inline FimState fim_read(const std::string& path) {
  const std::string what = "fim file " + path;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  io::expect_magic(in, "GFIM", "fim file");
  const std::uint32_t version = io::read_u32(in, what);
  if (version != 1) {
    throw DataError("unsupported fim file version " + std::to_string(version));
  }
  const std::uint64_t k = io::read_u64(in, what);
  const std::uint64_t n = io::read_u64(in, what);
  if (k == 0 || k > (1u << 16)) throw DataError(what + " has an implausible dim");
  Eigen::MatrixXd sum(static_cast<Index>(k), static_cast<Index>(k));
  io::read_f64_array(in, sum.data(), static_cast<std::size_t>(k * k), what);
  io::expect_eof(in, what);
  return FimState::from_sum(std::move(sum), static_cast<Index>(n));
}

}  // namespace grasskit
