// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
//
// Coordinate masks: the cheapest compression of all, keep k' of p entries.
// Masks are either drawn uniformly at random or trained ("selective") to
// preserve gradient-dot-product rankings on held-out test gradients.
#pragma once

#include <Eigen/SparseCore>

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "grasskit/core.hpp"
#include "grasskit/io.hpp"
#include "grasskit/sha256.hpp"
#include "grasskit/stats.hpp"

namespace grasskit {

enum class MaskProvenance { Random, Selective };

struct MaskSpec {
  Index input_dim = 0;          // p
  std::vector<Index> indices;   // kept coordinates, sorted, distinct
  MaskProvenance provenance = MaskProvenance::Random;
  std::uint64_t seed = 0;       // Random provenance
  std::string note;             // Selective provenance: training fingerprint

  Index output_dim() const { return static_cast<Index>(indices.size()); }

  void validate() const {
    if (input_dim <= 0) throw std::invalid_argument("mask: input dim must be positive");
    if (indices.empty() || static_cast<Index>(indices.size()) > input_dim) {
      throw std::invalid_argument("mask: need 1 <= k' <= p indices");
    }
    for (size_t t = 0; t < indices.size(); ++t) {
      if (indices[t] < 0 || indices[t] >= input_dim) {
        throw std::invalid_argument("mask: index out of range");
      }
      if (t > 0 && indices[t] <= indices[t - 1]) {
        throw std::invalid_argument("mask: indices must be sorted and distinct");
      }
    }
  }
};

// Uniform without replacement via Floyd's algorithm; exact uniformity over
// k'-subsets with O(k') state, deterministic in the seed.
inline MaskSpec random_mask(Index p, Index k, std::uint64_t seed) {
  if (p <= 0 || k <= 0 || k > p) {
    throw std::invalid_argument("random_mask: need 1 <= k' <= p");
  }
  std::vector<Index> picked;
  picked.reserve(static_cast<size_t>(k));
  std::uint64_t counter = 0;
  for (std::uint64_t j = static_cast<std::uint64_t>(p - k);
       j < static_cast<std::uint64_t>(p); ++j) {
    const std::uint64_t t =
        rng::bounded(rng::draw(seed, rng::kMaskSample, counter++), j + 1);
    const Index cand = static_cast<Index>(t);
    bool present = false;
    for (Index r : picked) {
      if (r == cand) {
        present = true;
        break;
      }
    }
    picked.push_back(present ? static_cast<Index>(j) : cand);
  }
  std::sort(picked.begin(), picked.end());
  MaskSpec m;
  m.input_dim = p;
  m.indices = std::move(picked);
  m.provenance = MaskProvenance::Random;
  m.seed = seed;
  return m;
}

// Gathers the kept coordinates. Sparse inputs are walked with a two-pointer
// merge so the cost is O(k' + nnz) and absent coordinates read as zero.
template <typename Scalar>
VecX<Scalar> apply_mask(const MaskSpec& mask, const GradientVector<Scalar>& g,
                        OpStats* ops = nullptr) {
  mask.validate();
  if (g.dim() != mask.input_dim) {
    throw std::invalid_argument("apply_mask: gradient dim mismatch");
  }
  const Index k = mask.output_dim();
  VecX<Scalar> out(k);
  if (g.is_sparse()) {
    const auto& gi = g.indices();
    const auto& gv = g.values();
    size_t gpos = 0;
    for (Index t = 0; t < k; ++t) {
      const Index want = mask.indices[static_cast<size_t>(t)];
      while (gpos < gi.size() && gi[gpos] < want) ++gpos;
      out[t] = (gpos < gi.size() && gi[gpos] == want) ? gv[gpos] : Scalar(0);
    }
  } else {
    const auto& x = g.dense_data();
    for (Index t = 0; t < k; ++t) out[t] = x[mask.indices[static_cast<size_t>(t)]];
  }
  if (ops) ops->multiply_adds += static_cast<std::uint64_t>(k);
  return out;
}

// Embeds a compressed vector back into R^p (zeros elsewhere).
template <typename Scalar>
VecX<Scalar> scatter_mask(const MaskSpec& mask, const VecX<Scalar>& compressed) {
  mask.validate();
  if (compressed.size() != mask.output_dim()) {
    throw std::invalid_argument("scatter_mask: size mismatch");
  }
  VecX<Scalar> out = VecX<Scalar>::Zero(mask.input_dim);
  for (Index t = 0; t < mask.output_dim(); ++t) {
    out[mask.indices[static_cast<size_t>(t)]] = compressed[t];
  }
  return out;
}

// Selection-matrix oracle.
template <typename Scalar>
Eigen::SparseMatrix<Scalar> mask_materialize(const MaskSpec& mask) {
  mask.validate();
  std::vector<Eigen::Triplet<Scalar>> trips;
  trips.reserve(mask.indices.size());
  for (Index t = 0; t < mask.output_dim(); ++t) {
    trips.emplace_back(static_cast<int>(t),
                       static_cast<int>(mask.indices[static_cast<size_t>(t)]),
                       Scalar(1));
  }
  Eigen::SparseMatrix<Scalar> m(mask.output_dim(), mask.input_dim);
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

// ---------------------------------------------------------------------------
// Selective masks. Coordinates get a relaxed score S in R^p; the soft mask
// sigma(S/T) modulates gradients on both sides of a dot product, so the
// surrogate score for train gradient g_i against test gradient q is
//   y_i = sum_j sigma(S_j/T)^2 g_i[j] q[j].
// The training objective is the mean Pearson correlation between exact and
// soft-masked scores over the test gradients, minus l1_weight * ||sigma(S/T)||_1.
// The temperature anneals geometrically so sigma saturates; the final mask
// keeps the top-k' coordinates of sigma(S*/T_final).

struct SelectiveMaskProblem {
  Eigen::MatrixXd train;  // n x p, one per-sample gradient per row
  Eigen::MatrixXd test;   // m x p
  Index target_k = 0;     // k'
  double l1_weight = 1e-3;
  int steps = 500;
  double step_size = 0.1;
  double temp_start = 1.0;
  double temp_end = 0.1;
  std::uint64_t seed = 0;     // drives the symmetry-breaking init jitter
  double init_jitter = 0.05;  // stddev of the init; 0 would never escape ties

  Index dim() const { return train.cols(); }

  void validate() const {
    if (train.rows() < 2) throw std::invalid_argument("selective mask: need >= 2 train gradients");
    if (test.rows() < 1) throw std::invalid_argument("selective mask: need >= 1 test gradient");
    if (test.cols() != train.cols()) throw std::invalid_argument("selective mask: dim mismatch");
    if (target_k <= 0 || target_k > dim()) throw std::invalid_argument("selective mask: need 1 <= k' <= p");
    if (temp_start <= 0 || temp_end <= 0) throw std::invalid_argument("selective mask: temperatures must be positive");
    if (step_size <= 0) throw std::invalid_argument("selective mask: step size must be positive");
    if (steps < 0) throw std::invalid_argument("selective mask: steps must be >= 0");
  }
};

inline double selective_temperature(const SelectiveMaskProblem& prob, int step) {
  if (prob.steps <= 1) return prob.temp_end;
  const double f = static_cast<double>(step) / static_cast<double>(prob.steps - 1);
  return prob.temp_start * std::pow(prob.temp_end / prob.temp_start, f);
}

struct SelectiveEval {
  double objective = 0;   // corr_term - l1_weight * l1_term
  double corr_term = 0;   // mean Pearson correlation over included test points
  double l1_term = 0;     // sum_j sigma(S_j/T)
  int excluded_test_points = 0;
};

namespace detail {

inline Eigen::ArrayXd sigmoid(const Eigen::ArrayXd& x) {
  return 1.0 / (1.0 + (-x).exp());
}

// An exactly uniform S is a stationary point of the correlation term (the
// soft-masked scores stay proportional to the exact ones), so training has
// to start from a small symmetric jitter rather than exact zeros.
inline Eigen::VectorXd jitter_init(Index p, std::uint64_t seed,
                                   std::uint64_t side, double scale) {
  Eigen::VectorXd s(p);
  for (Index j = 0; j < p; ++j) {
    const std::uint64_t c = static_cast<std::uint64_t>(j);
    s[j] = scale * rng::gaussian_from(
                       rng::draw(seed, rng::kSelectiveInit, 2 * c, side),
                       rng::draw(seed, rng::kSelectiveInit, 2 * c + 1, side));
  }
  return s;
}

// Shared objective/gradient evaluation. Test points whose exact or masked
// scores have zero variance are excluded from the mean (warned once per
// call); if every test point is excluded the instance is unusable.
inline SelectiveEval selective_eval(const SelectiveMaskProblem& prob,
                                    const Eigen::VectorXd& S, double T,
                                    Eigen::VectorXd* grad) {
  prob.validate();
  if (S.size() != prob.dim()) throw std::invalid_argument("selective mask: S dim mismatch");
  if (T <= 0) throw std::invalid_argument("selective mask: temperature must be positive");

  const Index n = prob.train.rows();
  const Index m = prob.test.rows();
  const Index p = prob.dim();
  const Eigen::ArrayXd u = sigmoid(S.array() / T);
  const Eigen::ArrayXd w = u.square();

  SelectiveEval ev;
  ev.l1_term = u.sum();

  Eigen::VectorXd corr_grad_w = Eigen::VectorXd::Zero(p);
  double corr_sum = 0;
  int included = 0;
  for (Index t = 0; t < m; ++t) {
    const Eigen::VectorXd q = prob.test.row(t).transpose();
    const Eigen::VectorXd x = prob.train * q;                        // exact scores
    const Eigen::VectorXd y = prob.train * (w * q.array()).matrix(); // soft-masked
    const Eigen::VectorXd cx = x.array() - x.mean();
    const Eigen::VectorXd cy = y.array() - y.mean();
    const double sxx = cx.squaredNorm();
    const double syy = cy.squaredNorm();
    if (sxx == 0.0 || syy == 0.0) {
      ++ev.excluded_test_points;
      continue;
    }
    const double denom = std::sqrt(sxx * syy);
    const double sxy = cx.dot(cy);
    corr_sum += sxy / denom;
    ++included;
    if (grad) {
      // d corr / d y_i = (cx_i - (sxy/syy) cy_i) / denom, and
      // d y_i / d w_j = g_i[j] q[j].
      const Eigen::VectorXd dcorr_dy = (cx - (sxy / syy) * cy) / denom;
      corr_grad_w.array() +=
          (prob.train.transpose() * dcorr_dy).array() * q.array();
    }
  }
  if (ev.excluded_test_points > 0) {
    std::fprintf(stderr,
                 "warning: selective mask objective excluded %d degenerate test point(s)\n",
                 ev.excluded_test_points);
  }
  if (included == 0) {
    throw DataError("selective mask: all test points excluded (zero-variance scores)");
  }
  ev.corr_term = corr_sum / included;
  ev.objective = ev.corr_term - prob.l1_weight * ev.l1_term;
  if (grad) {
    const Eigen::ArrayXd du_dS = u * (1.0 - u) / T;   // d sigma(S/T) / dS
    const Eigen::ArrayXd dw_dS = 2.0 * u * du_dS;     // d sigma^2 / dS
    grad->resize(p);
    grad->array() = corr_grad_w.array() / included * dw_dS -
                    prob.l1_weight * du_dS;
  }
  (void)n;
  return ev;
}

// Top-k by value, ties broken toward the lower index; returns sorted indices.
inline std::vector<Index> top_k_indices(const Eigen::ArrayXd& value, Index k) {
  std::vector<Index> order(static_cast<size_t>(value.size()));
  std::iota(order.begin(), order.end(), Index(0));
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    if (value[a] != value[b]) return value[a] > value[b];
    return a < b;
  });
  order.resize(static_cast<size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace detail

inline SelectiveEval selective_objective(const SelectiveMaskProblem& prob,
                                         const Eigen::VectorXd& S, double T) {
  return detail::selective_eval(prob, S, T, nullptr);
}

inline Eigen::VectorXd selective_objective_grad(const SelectiveMaskProblem& prob,
                                                const Eigen::VectorXd& S, double T) {
  Eigen::VectorXd g;
  detail::selective_eval(prob, S, T, &g);
  return g;
}

struct SelectiveTrainResult {
  Eigen::VectorXd S;
  MaskSpec mask;
  double final_objective = 0;
  // Fraction of sigma(S/T_final) in (0.25, 0.75): how un-binary the relaxed
  // mask still is.
  double ambiguous_fraction = 0;
  // Per-step (objective, l1_term) for the sidecar trace.
  std::vector<std::array<double, 3>> trace;
};

inline SelectiveTrainResult selective_train(const SelectiveMaskProblem& prob) {
  prob.validate();
  const Index p = prob.dim();
  SelectiveTrainResult result;
  result.S = detail::jitter_init(p, prob.seed, 0, prob.init_jitter);

  double T = prob.temp_end;
  Eigen::VectorXd grad;
  for (int step = 0; step < prob.steps; ++step) {
    T = selective_temperature(prob, step);
    SelectiveEval ev = detail::selective_eval(prob, result.S, T, &grad);
    if (!std::isfinite(ev.objective) || !grad.allFinite()) {
      throw NumericalError("selective mask training diverged at step " +
                           std::to_string(step));
    }
    result.trace.push_back({static_cast<double>(step), ev.objective, ev.l1_term});
    result.S += prob.step_size * grad;  // ascent
  }
  const double t_final = prob.steps > 0 ? T : prob.temp_end;
  const Eigen::ArrayXd sig = detail::sigmoid(result.S.array() / t_final);
  result.final_objective =
      detail::selective_eval(prob, result.S, t_final, nullptr).objective;
  result.ambiguous_fraction =
      static_cast<double>(((sig > 0.25) && (sig < 0.75)).count()) /
      static_cast<double>(p);

  result.mask.input_dim = p;
  result.mask.indices = detail::top_k_indices(sig, prob.target_k);
  result.mask.provenance = MaskProvenance::Selective;
  {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "n=%lld m=%lld p=%lld k=%lld l1=%g steps=%d",
                  static_cast<long long>(prob.train.rows()),
                  static_cast<long long>(prob.test.rows()),
                  static_cast<long long>(p),
                  static_cast<long long>(prob.target_k), prob.l1_weight,
                  prob.steps);
    result.mask.note = to_hex(sha256(std::string(buf))).substr(0, 16);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Factorized selective masks. For a linear layer the per-sample gradient is
// sum_t zin_t (x) dzout_t, so a dot product of two such gradients never needs
// the d_in*d_out materialization:
//   <a (x) b, c (x) d> = <a, c> * <b, d>.
// Masking the two factors with soft weights u_in, u_out multiplies the inner
// products by sigma^2 coordinate-wise on each side. Everything below runs in
// O(d_in + d_out) per token pair.

inline double kron_inner(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                         const Eigen::VectorXd& c, const Eigen::VectorXd& d) {
  if (a.size() != c.size() || b.size() != d.size()) {
    throw std::invalid_argument("kron_inner: factor dims mismatch");
  }
  return a.dot(c) * b.dot(d);
}

struct FactorizedSelectiveProblem {
  // One layer's factor traces: in[i] is d_in x T_i, out[i] is d_out x T_i.
  std::vector<Eigen::MatrixXd> train_in, train_out;
  std::vector<Eigen::MatrixXd> test_in, test_out;
  Index target_k_in = 0, target_k_out = 0;
  double l1_weight = 1e-3;
  int steps = 500;
  double step_size = 0.1;
  double temp_start = 1.0;
  double temp_end = 0.1;
  std::uint64_t seed = 0;     // drives the symmetry-breaking init jitter
  double init_jitter = 0.05;  // stddev of the init; 0 would never escape ties

  Index d_in() const { return train_in.empty() ? 0 : train_in[0].rows(); }
  Index d_out() const { return train_out.empty() ? 0 : train_out[0].rows(); }

  void validate() const {
    if (train_in.size() != train_out.size() || train_in.size() < 2) {
      throw std::invalid_argument("factorized selective mask: need >= 2 train samples");
    }
    if (test_in.size() != test_out.size() || test_in.empty()) {
      throw std::invalid_argument("factorized selective mask: need >= 1 test sample");
    }
    for (size_t i = 0; i < train_in.size(); ++i) {
      if (train_in[i].rows() != d_in() || train_out[i].rows() != d_out() ||
          train_in[i].cols() != train_out[i].cols()) {
        throw std::invalid_argument("factorized selective mask: inconsistent trace dims");
      }
    }
    for (size_t i = 0; i < test_in.size(); ++i) {
      if (test_in[i].rows() != d_in() || test_out[i].rows() != d_out() ||
          test_in[i].cols() != test_out[i].cols()) {
        throw std::invalid_argument("factorized selective mask: inconsistent trace dims");
      }
    }
    if (target_k_in <= 0 || target_k_in > d_in() || target_k_out <= 0 ||
        target_k_out > d_out()) {
      throw std::invalid_argument("factorized selective mask: bad target dims");
    }
  }
};

namespace detail {

struct FactorizedEvalResult {
  SelectiveEval eval;
  Eigen::VectorXd grad_in, grad_out;  // filled when want_grad
};

inline FactorizedEvalResult factorized_selective_eval(
    const FactorizedSelectiveProblem& prob, const Eigen::VectorXd& S_in,
    const Eigen::VectorXd& S_out, double T, bool want_grad) {
  prob.validate();
  if (S_in.size() != prob.d_in() || S_out.size() != prob.d_out()) {
    throw std::invalid_argument("factorized selective mask: S dim mismatch");
  }
  if (T <= 0) throw std::invalid_argument("factorized selective mask: T must be positive");

  const Index n = static_cast<Index>(prob.train_in.size());
  const Index m = static_cast<Index>(prob.test_in.size());
  const Eigen::ArrayXd u_in = sigmoid(S_in.array() / T);
  const Eigen::ArrayXd u_out = sigmoid(S_out.array() / T);
  const Eigen::VectorXd w_in = u_in.square().matrix();
  const Eigen::VectorXd w_out = u_out.square().matrix();

  FactorizedEvalResult res;
  res.eval.l1_term = u_in.sum() + u_out.sum();

  Eigen::VectorXd corr_grad_win = Eigen::VectorXd::Zero(prob.d_in());
  Eigen::VectorXd corr_grad_wout = Eigen::VectorXd::Zero(prob.d_out());
  double corr_sum = 0;
  int included = 0;

  Eigen::VectorXd x(n), y(n);
  std::vector<Eigen::MatrixXd> A(static_cast<size_t>(n)), B(static_cast<size_t>(n));
  for (Index q = 0; q < m; ++q) {
    const auto& c = prob.test_in[static_cast<size_t>(q)];
    const auto& d = prob.test_out[static_cast<size_t>(q)];
    for (Index i = 0; i < n; ++i) {
      const auto& a = prob.train_in[static_cast<size_t>(i)];
      const auto& b = prob.train_out[static_cast<size_t>(i)];
      // Token-pair Gram matrices through the masked metric.
      A[static_cast<size_t>(i)] = a.transpose() * w_in.asDiagonal() * c;
      B[static_cast<size_t>(i)] = b.transpose() * w_out.asDiagonal() * d;
      x[i] = (a.transpose() * c).cwiseProduct(b.transpose() * d).sum();
      y[i] = A[static_cast<size_t>(i)].cwiseProduct(B[static_cast<size_t>(i)]).sum();
    }
    const Eigen::VectorXd cx = x.array() - x.mean();
    const Eigen::VectorXd cy = y.array() - y.mean();
    const double sxx = cx.squaredNorm();
    const double syy = cy.squaredNorm();
    if (sxx == 0.0 || syy == 0.0) {
      ++res.eval.excluded_test_points;
      continue;
    }
    const double denom = std::sqrt(sxx * syy);
    const double sxy = cx.dot(cy);
    corr_sum += sxy / denom;
    ++included;
    if (want_grad) {
      const Eigen::VectorXd dcorr_dy = (cx - (sxy / syy) * cy) / denom;
      for (Index i = 0; i < n; ++i) {
        const auto& a = prob.train_in[static_cast<size_t>(i)];
        const auto& b = prob.train_out[static_cast<size_t>(i)];
        // dy_i/dw_in = rowsum((a * B) .* c); dy_i/dw_out = rowsum((b * A') ... )
        corr_grad_win.array() +=
            dcorr_dy[i] *
            ((a * B[static_cast<size_t>(i)]).array() * c.array()).rowwise().sum();
        corr_grad_wout.array() +=
            dcorr_dy[i] *
            ((b * A[static_cast<size_t>(i)]).array() * d.array()).rowwise().sum();
      }
    }
  }
  if (res.eval.excluded_test_points > 0) {
    std::fprintf(stderr,
                 "warning: factorized selective mask excluded %d degenerate test point(s)\n",
                 res.eval.excluded_test_points);
  }
  if (included == 0) {
    throw DataError("factorized selective mask: all test points excluded");
  }
  res.eval.corr_term = corr_sum / included;
  res.eval.objective = res.eval.corr_term - prob.l1_weight * res.eval.l1_term;
  if (want_grad) {
    const Eigen::ArrayXd duin = u_in * (1.0 - u_in) / T;
    const Eigen::ArrayXd duout = u_out * (1.0 - u_out) / T;
    res.grad_in = (corr_grad_win.array() / included * 2.0 * u_in * duin -
                   prob.l1_weight * duin)
                      .matrix();
    res.grad_out = (corr_grad_wout.array() / included * 2.0 * u_out * duout -
                    prob.l1_weight * duout)
                       .matrix();
  }
  return res;
}

}  // namespace detail

inline SelectiveEval factorized_selective_objective(
    const FactorizedSelectiveProblem& prob, const Eigen::VectorXd& S_in,
    const Eigen::VectorXd& S_out, double T) {
  return detail::factorized_selective_eval(prob, S_in, S_out, T, false).eval;
}

inline void factorized_selective_objective_grad(
    const FactorizedSelectiveProblem& prob, const Eigen::VectorXd& S_in,
    const Eigen::VectorXd& S_out, double T, Eigen::VectorXd* grad_in,
    Eigen::VectorXd* grad_out) {
  auto res = detail::factorized_selective_eval(prob, S_in, S_out, T, true);
  *grad_in = std::move(res.grad_in);
  *grad_out = std::move(res.grad_out);
}

struct FactorizedSelectiveResult {
  Eigen::VectorXd S_in, S_out;
  MaskSpec mask_in, mask_out;
  double final_objective = 0;
  double ambiguous_fraction = 0;
  std::vector<std::array<double, 3>> trace;
};

inline FactorizedSelectiveResult selective_train_factorized(
    const FactorizedSelectiveProblem& prob) {
  prob.validate();
  FactorizedSelectiveResult result;
  result.S_in = detail::jitter_init(prob.d_in(), prob.seed, 1, prob.init_jitter);
  result.S_out = detail::jitter_init(prob.d_out(), prob.seed, 2, prob.init_jitter);

  double T = prob.temp_end;
  for (int step = 0; step < prob.steps; ++step) {
    T = prob.steps <= 1
            ? prob.temp_end
            : prob.temp_start *
                  std::pow(prob.temp_end / prob.temp_start,
                           static_cast<double>(step) /
                               static_cast<double>(prob.steps - 1));
    auto res = detail::factorized_selective_eval(prob, result.S_in, result.S_out, T, true);
    if (!std::isfinite(res.eval.objective) || !res.grad_in.allFinite() ||
        !res.grad_out.allFinite()) {
      throw NumericalError("factorized selective mask diverged at step " +
                           std::to_string(step));
    }
    result.trace.push_back(
        {static_cast<double>(step), res.eval.objective, res.eval.l1_term});
    result.S_in += prob.step_size * res.grad_in;
    result.S_out += prob.step_size * res.grad_out;
  }
  const double t_final = prob.steps > 0 ? T : prob.temp_end;
  const Eigen::ArrayXd sig_in = detail::sigmoid(result.S_in.array() / t_final);
  const Eigen::ArrayXd sig_out = detail::sigmoid(result.S_out.array() / t_final);
  result.final_objective =
      detail::factorized_selective_eval(prob, result.S_in, result.S_out, t_final, false)
          .eval.objective;
  result.ambiguous_fraction =
      (static_cast<double>(((sig_in > 0.25) && (sig_in < 0.75)).count()) +
       static_cast<double>(((sig_out > 0.25) && (sig_out < 0.75)).count())) /
      static_cast<double>(prob.d_in() + prob.d_out());

  result.mask_in.input_dim = prob.d_in();
  result.mask_in.indices = detail::top_k_indices(sig_in, prob.target_k_in);
  result.mask_in.provenance = MaskProvenance::Selective;
  result.mask_out.input_dim = prob.d_out();
  result.mask_out.indices = detail::top_k_indices(sig_out, prob.target_k_out);
  result.mask_out.provenance = MaskProvenance::Selective;
  return result;
}

// ---------------------------------------------------------------------------
// Mask files: magic "GMSK", u32 version, u64 p, u64 k', then k' sorted u64
// indices. Provenance lives in the human-readable sidecar, not here; a
// loaded mask is treated as selective and noted with a digest of its
// indices so reseeding cannot alias it.

inline void write_mask_file(const std::string& path, const MaskSpec& mask) {
  mask.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write mask file " + path);
  io::write_magic(out, "GMSK");
  io::write_u32(out, 1);
  io::write_u64(out, static_cast<std::uint64_t>(mask.input_dim));
  io::write_u64(out, static_cast<std::uint64_t>(mask.indices.size()));
  for (Index idx : mask.indices) {
    io::write_u64(out, static_cast<std::uint64_t>(idx));
  }
  out.flush();
  if (!out) throw DataError("cannot write mask file " + path);
}

inline MaskSpec read_mask_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open mask file " + path);
  io::expect_magic(in, "GMSK", "mask file");
  const std::uint32_t version = io::read_u32(in, "mask file");
  if (version != 1) {
    throw DataError("unsupported mask file version " + std::to_string(version));
  }
  const std::uint64_t p = io::read_u64(in, "mask file");
  const std::uint64_t k = io::read_u64(in, "mask file");
  if (p == 0 || p > (1ull << 40) || k == 0 || k > p) {
    throw DataError("mask file has an implausible shape");
  }
  MaskSpec mask;
  mask.input_dim = static_cast<Index>(p);
  mask.indices.resize(static_cast<size_t>(k));
  for (std::uint64_t t = 0; t < k; ++t) {
    mask.indices[static_cast<size_t>(t)] =
        static_cast<Index>(io::read_u64(in, "mask file"));
  }
  io::expect_eof(in, "mask file");
  mask.provenance = MaskProvenance::Selective;
  mask.note = to_hex(sha256(mask.indices.data(),
                            mask.indices.size() * sizeof(Index)))
                  .substr(0, 16);
  mask.validate();
  return mask;
}

}  // namespace grasskit
