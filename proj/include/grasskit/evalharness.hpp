// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
//
// Counterfactual evaluation of attribution scores. The LDS protocol retrains
// one model per sampled subset, predicts each subset's test loss as the
// (sign-fixed) sum of member attributions, and reports the per-test-point
// Spearman rank correlation between predictions and retrained losses. Also
// hosts the damping grid search and the op-count/wall-time comparison of the
// factorized compressors.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "grasskit/attribution.hpp"
#include "grasskit/core.hpp"
#include "grasskit/factgrass.hpp"
#include "grasskit/grass.hpp"
#include "grasskit/model.hpp"

namespace grasskit {

// ---------------------------------------------------------------------------
// Rank correlation.

// Fractional ranks (1-based); tied values share the average of their ranks.
inline Eigen::VectorXd fractional_ranks(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const Index n = v.size();
  std::vector<Index> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), Index(0));
  std::stable_sort(idx.begin(), idx.end(),
                   [&v](Index a, Index b) { return v[a] < v[b]; });
  Eigen::VectorXd ranks(n);
  Index i = 0;
  while (i < n) {
    Index j = i;
    while (j + 1 < n && v[idx[static_cast<size_t>(j + 1)]] == v[idx[static_cast<size_t>(i)]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Index t = i; t <= j; ++t) ranks[idx[static_cast<size_t>(t)]] = avg;
    i = j + 1;
  }
  return ranks;
}

// Spearman rho: Pearson correlation of fractional ranks. A constant input
// carries no ranking signal, so the correlation is reported as 0.
inline double spearman_rho(const Eigen::Ref<const Eigen::VectorXd>& a,
                           const Eigen::Ref<const Eigen::VectorXd>& b) {
  if (a.size() != b.size()) {
    throw DataError("spearman: length mismatch (" + std::to_string(a.size()) +
                    " vs " + std::to_string(b.size()) + ")");
  }
  if (a.size() < 2) throw DataError("spearman: need at least two points");
  Eigen::VectorXd ra = fractional_ranks(a);
  Eigen::VectorXd rb = fractional_ranks(b);
  ra.array() -= ra.mean();
  rb.array() -= rb.mean();
  const double va = ra.squaredNorm(), vb = rb.squaredNorm();
  if (va == 0.0 || vb == 0.0) return 0.0;
  return std::clamp(ra.dot(rb) / std::sqrt(va * vb), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Subset sampling.

// m subsets of exactly floor(fraction*n) distinct sorted indices, each drawn
// by a counter-keyed Fisher-Yates pass so the b-th subset is reproducible in
// isolation.
inline std::vector<std::vector<Index>> sample_subsets(Index n, int m,
                                                      double fraction,
                                                      std::uint64_t seed) {
  if (n < 1) throw ConfigError("subsets: need n >= 1");
  if (m < 1) throw ConfigError("subsets: need m >= 1");
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ConfigError("subsets: fraction must be in (0, 1)");
  }
  const Index size = static_cast<Index>(
      std::floor(fraction * static_cast<double>(n)));
  if (size < 1) {
    throw ConfigError("subsets: fraction " + detail::fmt_g(fraction) +
                      " keeps no samples at n=" + std::to_string(n));
  }
  std::vector<std::vector<Index>> out;
  out.reserve(static_cast<size_t>(m));
  for (int b = 0; b < m; ++b) {
    std::vector<Index> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), Index(0));
    for (Index i = n - 1; i > 0; --i) {
      const std::uint64_t c =
          static_cast<std::uint64_t>(b) * 0x100000000ull +
          static_cast<std::uint64_t>(i);
      const Index j = static_cast<Index>(
          rng::bounded(rng::draw(seed, rng::kSubsetSample, c, 0),
                       static_cast<std::uint64_t>(i) + 1));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    order.resize(static_cast<size_t>(size));
    std::sort(order.begin(), order.end());
    out.push_back(std::move(order));
  }
  return out;
}

// Predicted group score per subset: the sum of member attributions. The
// scores approximate the loss increase caused by removing a sample, so a
// subset holding high-score members trains to a lower loss; with `negate`
// set (the default convention) good attribution correlates positively with
// the retrained losses.
inline Eigen::VectorXd lds_predictions(const std::vector<std::vector<Index>>& subsets,
                                       const Eigen::Ref<const Eigen::VectorXd>& scores,
                                       bool negate = true) {
  Eigen::VectorXd out(static_cast<Index>(subsets.size()));
  for (size_t b = 0; b < subsets.size(); ++b) {
    double s = 0;
    for (Index i : subsets[b]) {
      if (i < 0 || i >= scores.size()) {
        throw DataError("lds predictions: subset index " + std::to_string(i) +
                        " outside the score range");
      }
      s += scores[i];
    }
    out[static_cast<Index>(b)] = negate ? -s : s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subset retraining.

// One independently seeded model per subset, trained on its rows only;
// losses(b, t) is the cross-entropy of the subset-b model at test point t.
inline Eigen::MatrixXd retrained_losses(const Dataset<float>& train,
                                        const Dataset<float>& test,
                                        const std::vector<Index>& dims,
                                        const TrainConfig& retrain,
                                        const std::vector<std::vector<Index>>& subsets,
                                        std::uint64_t seed, int threads = 1,
                                        std::vector<std::uint64_t>* subset_seeds = nullptr) {
  train.validate();
  test.validate();
  if (subsets.empty()) throw ConfigError("retrain: no subsets");
  const Index m = static_cast<Index>(subsets.size());
  const Index n_test = test.size();
  Eigen::MatrixXd losses(m, n_test);
  if (subset_seeds) subset_seeds->assign(static_cast<size_t>(m), 0);

  const Eigen::MatrixXf xt = test.features.transpose();
  std::exception_ptr err;
  std::mutex err_mutex;
  parallel_for(m, threads, [&](Index lo, Index hi) {
    try {
      for (Index b = lo; b < hi; ++b) {
        const std::uint64_t init_seed =
            rng::draw(seed, rng::kRetrainSeed, static_cast<std::uint64_t>(b), 0);
        MlpModel<float> model = make_mlp<float>(dims, init_seed);
        TrainConfig tc = retrain;
        tc.seed = rng::draw(seed, rng::kRetrainSeed, static_cast<std::uint64_t>(b), 1);
        if (subset_seeds) (*subset_seeds)[static_cast<size_t>(b)] = init_seed;
        try {
          train_sgd(model, train, tc, &subsets[static_cast<size_t>(b)]);
        } catch (const NumericalError& e) {
          throw NumericalError("subset " + std::to_string(b) +
                               " retraining failed: " + e.what());
        }
        ForwardCache<float> cache = forward(model, xt);
        const MatX<float> probs = detail::softmax(cache.output());
        for (Index t = 0; t < n_test; ++t) {
          const int y = test.labels[static_cast<size_t>(t)];
          if (y < 0 || y >= probs.rows()) {
            throw DataError("retrain: test label out of range");
          }
          losses(b, t) = -std::log(
              std::max(static_cast<double>(probs(y, t)), 1e-300));
        }
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mutex);
      if (!err) err = std::current_exception();
    }
  });
  if (err) std::rethrow_exception(err);
  return losses;
}

// ---------------------------------------------------------------------------
// Mode-aware scoring.

// Per-block FIMs over one concatenated gradient store. A whole-model mode is
// a single block; a layerwise mode solves each block against its own damped
// FIM (block-diagonal approximation). Scores use the test-side solve, which
// equals the preconditioned-store inner product by symmetry.
class ModeSolver {
 public:
  ModeSolver(AttributionMode mode, const GradientStore& store, int threads = 1)
      : mode_(std::move(mode)), store_(&store) {
    mode_.validate();
    if (mode_.total() != store.k()) {
      throw ConfigError("mode solver: blocks cover dim " +
                        std::to_string(mode_.total()) + " but the store has k=" +
                        std::to_string(store.k()));
    }
    if (store.n() < 1) throw DataError("mode solver: empty gradient store");
    fims_.reserve(mode_.blocks.size());
    Index off = 0;
    for (Index kb : mode_.blocks) {
      FimState fim(kb);
      fim.accumulate(store.records.middleCols(off, kb), threads);
      fim.finalize();
      fims_.push_back(std::move(fim));
      off += kb;
    }
  }

  void factorize(double lambda) {
    for (auto& f : fims_) f.factorize(lambda);
  }

  double damping() const { return fims_.front().damping(); }
  const AttributionMode& mode() const { return mode_; }
  const std::vector<FimState>& fims() const { return fims_; }

  // Influence of every stored gradient on one test gradient.
  Eigen::VectorXd scores(const Eigen::Ref<const Eigen::VectorXd>& g_test) const {
    if (g_test.size() != store_->k()) {
      throw DataError("mode solver: test gradient dim " +
                      std::to_string(g_test.size()) + " does not match store k=" +
                      std::to_string(store_->k()));
    }
    Eigen::VectorXd out = Eigen::VectorXd::Zero(store_->n());
    Index off = 0;
    for (size_t b = 0; b < fims_.size(); ++b) {
      const Index kb = mode_.blocks[b];
      const Eigen::VectorXd x = fims_[b].ifvp(g_test.segment(off, kb));
      out.noalias() +=
          store_->records.middleCols(off, kb).cast<double>() * x;
      off += kb;
    }
    return out;
  }

 private:
  AttributionMode mode_;
  const GradientStore* store_;
  std::vector<FimState> fims_;
};

// ---------------------------------------------------------------------------
// Damping grid search.

inline std::vector<double> default_damping_grid() {
  std::vector<double> grid;
  for (int e = -7; e <= 2; ++e) grid.push_back(std::pow(10.0, e));
  return grid;
}

struct DampingChoice {
  double lambda = 0;
  double val_rho = 0;
  // (lambda, mean val rho) for every grid point that factorized.
  std::vector<std::pair<double, double>> evaluated;
};

// Picks the grid lambda maximizing mean validation LDS; ties go to the
// smaller lambda. Grid points whose factorization fails are skipped; if all
// fail the search throws.
inline DampingChoice damping_grid_search(const std::vector<double>& grid,
                                         ModeSolver& solver,
                                         const std::vector<Eigen::VectorXd>& val_grads,
                                         const Eigen::MatrixXd& val_losses,
                                         const std::vector<std::vector<Index>>& subsets,
                                         bool negate = true) {
  if (grid.empty()) throw ConfigError("damping search: empty grid");
  if (val_grads.empty()) throw ConfigError("damping search: no validation test points");
  if (val_losses.cols() != static_cast<Index>(val_grads.size()) ||
      val_losses.rows() != static_cast<Index>(subsets.size())) {
    throw DataError("damping search: loss table is " +
                    std::to_string(val_losses.rows()) + "x" +
                    std::to_string(val_losses.cols()) + " but expected " +
                    std::to_string(subsets.size()) + "x" +
                    std::to_string(val_grads.size()));
  }
  DampingChoice choice;
  bool have = false;
  for (double lambda : grid) {
    try {
      solver.factorize(lambda);
    } catch (const NumericalError&) {
      continue;
    }
    double mean = 0;
    for (size_t t = 0; t < val_grads.size(); ++t) {
      const Eigen::VectorXd preds =
          lds_predictions(subsets, solver.scores(val_grads[t]), negate);
      mean += spearman_rho(preds, val_losses.col(static_cast<Index>(t)));
    }
    mean /= static_cast<double>(val_grads.size());
    choice.evaluated.emplace_back(lambda, mean);
    if (!have || mean > choice.val_rho ||
        (mean == choice.val_rho && lambda < choice.lambda)) {
      have = true;
      choice.lambda = lambda;
      choice.val_rho = mean;
    }
  }
  if (!have) {
    throw NumericalError(
        "damping search: factorization failed for every lambda in the grid");
  }
  return choice;
}

// ---------------------------------------------------------------------------
// LDS evaluation.

struct LdsConfig {
  int subsets = 50;          // m
  double fraction = 0.5;     // samples kept per subset
  double val_fraction = 0.1; // share of test points spent on the damping search
  std::uint64_t seed = 0;
  TrainConfig retrain;       // base and per-subset training hyperparameters
  std::vector<Index> model_dims;
  std::vector<double> damping_grid = default_damping_grid();
  bool negate_scores = true; // sign convention, see lds_predictions
  int null_reps = 100;       // shuffled-score null draws; 0 disables

  void validate() const {
    if (subsets < 2) throw ConfigError("lds: need at least 2 subsets");
    if (!(fraction > 0.0 && fraction < 1.0)) {
      throw ConfigError("lds: subset fraction must be in (0, 1)");
    }
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
      throw ConfigError("lds: val fraction must be in [0, 1)");
    }
    if (model_dims.size() < 2) throw ConfigError("lds: model dims missing");
    if (damping_grid.empty()) throw ConfigError("lds: empty damping grid");
    if (null_reps < 0) throw ConfigError("lds: null reps must be >= 0");
  }
};

struct LdsReport {
  Eigen::VectorXd per_test_rho;        // one entry per eval test point
  double mean_rho = 0;
  double chosen_lambda = 0;
  double val_rho = 0;                  // mean val rho at the chosen lambda
  double null_mean = 0;                // shuffled-score null of mean_rho
  double null_sd = 0;
  double base_final_loss = 0;
  std::vector<std::uint64_t> subset_seeds;
  std::vector<std::vector<Index>> subsets;
  std::vector<Index> val_indices;      // test rows spent on the damping search
  std::vector<Index> eval_indices;     // test rows behind per_test_rho
};

namespace detail {

// Disjoint val/eval split of the test rows, shuffled by the harness seed.
inline void split_test_rows(Index n_test, double val_fraction,
                            std::uint64_t seed, size_t grid_size,
                            std::vector<Index>* val, std::vector<Index>* eval) {
  std::vector<Index> order(static_cast<size_t>(n_test));
  std::iota(order.begin(), order.end(), Index(0));
  for (Index i = n_test - 1; i > 0; --i) {
    const Index j = static_cast<Index>(
        rng::bounded(rng::draw(seed, rng::kValSplit, static_cast<std::uint64_t>(i), 0),
                     static_cast<std::uint64_t>(i) + 1));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  const Index v = static_cast<Index>(
      std::floor(val_fraction * static_cast<double>(n_test)));
  if (v == 0 && grid_size > 1) {
    throw ConfigError("lds: damping search needs a validation split; raise "
                      "val_fraction or use a single-element grid");
  }
  if (v >= n_test) {
    throw ConfigError("lds: no evaluation test points left after the "
                      "validation split");
  }
  val->assign(order.begin(), order.begin() + v);
  eval->assign(order.begin() + v, order.end());
  std::sort(val->begin(), val->end());
  std::sort(eval->begin(), eval->end());
}

// PRF Fisher-Yates permutation of a score vector for the null distribution.
inline Eigen::VectorXd shuffled_scores(const Eigen::VectorXd& scores,
                                       std::uint64_t seed, std::uint64_t tag) {
  const Index n = scores.size();
  Eigen::VectorXd out = scores;
  for (Index i = n - 1; i > 0; --i) {
    const Index j = static_cast<Index>(
        rng::bounded(rng::draw(seed, rng::kNullShuffle,
                               tag * 0x100000000ull + static_cast<std::uint64_t>(i), 0),
                     static_cast<std::uint64_t>(i) + 1));
    std::swap(out[i], out[j]);
  }
  return out;
}

}  // namespace detail

// Full LDS protocol: train the base model, cache compressed per-sample
// gradients, retrain per subset, pick the damping on the validation test
// points, and report per-test-point Spearman rho on the held-out rest. The
// attribution mode defaults to whole-model; a layerwise mode solves each
// block against its own FIM.
inline LdsReport lds_evaluate(const LdsConfig& cfg, const Dataset<float>& train,
                              const Dataset<float>& test,
                              const Compressor& compressor,
                              const AttributionMode* mode = nullptr,
                              int threads = 1) {
  cfg.validate();
  train.validate();
  test.validate();
  if (test.size() < 2) throw ConfigError("lds: need at least 2 test points");

  // Base model on the full training set.
  const std::uint64_t base_seed =
      rng::draw(cfg.seed, rng::kRetrainSeed, 0xffffffffull, 0);
  MlpModel<float> model = make_mlp<float>(cfg.model_dims, base_seed);
  if (compressor.input_dim() != model.param_count()) {
    throw ConfigError("lds: compressor expects dim " +
                      std::to_string(compressor.input_dim()) +
                      " but the model has " +
                      std::to_string(model.param_count()) + " parameters");
  }
  TrainConfig base_cfg = cfg.retrain;
  base_cfg.seed = rng::draw(cfg.seed, rng::kRetrainSeed, 0xffffffffull, 1);
  const TrainReport base_report = train_sgd(model, train, base_cfg);

  // Compressed per-sample gradients at the trained parameters.
  const Index k = compressor.output_dim();
  GradientStore store;
  store.fingerprint = compressor.fingerprint();
  store.records.resize(train.size(), k);
  std::exception_ptr err;
  std::mutex err_mutex;
  parallel_for(train.size(), threads, [&](Index lo, Index hi) {
    try {
      for (Index i = lo; i < hi; ++i) {
        const VecX<float> x = train.features.row(i).transpose();
        PerSampleGrad<float> g =
            per_sample_grad(model, x, train.labels[static_cast<size_t>(i)]);
        store.records.row(i) =
            compressor.compress(GradientVector<float>::dense(g.flat)).transpose();
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mutex);
      if (!err) err = std::current_exception();
    }
  });
  if (err) std::rethrow_exception(err);

  std::vector<Eigen::VectorXd> test_grads(static_cast<size_t>(test.size()));
  for (Index t = 0; t < test.size(); ++t) {
    const VecX<float> x = test.features.row(t).transpose();
    PerSampleGrad<float> g =
        per_sample_grad(model, x, test.labels[static_cast<size_t>(t)]);
    test_grads[static_cast<size_t>(t)] =
        compressor.compress(GradientVector<float>::dense(g.flat)).cast<double>();
  }

  // Subset retraining.
  LdsReport report;
  report.base_final_loss = base_report.final_loss;
  report.subsets = sample_subsets(train.size(), cfg.subsets, cfg.fraction, cfg.seed);
  const Eigen::MatrixXd losses =
      retrained_losses(train, test, cfg.model_dims, cfg.retrain, report.subsets,
                       cfg.seed, threads, &report.subset_seeds);

  // Damping on the validation split, report on the rest.
  detail::split_test_rows(test.size(), cfg.val_fraction, cfg.seed,
                          cfg.damping_grid.size(), &report.val_indices,
                          &report.eval_indices);
  const AttributionMode whole = AttributionMode::whole_model(k);
  ModeSolver solver(mode ? *mode : whole, store, threads);
  if (report.val_indices.empty()) {
    solver.factorize(cfg.damping_grid.front());
    report.chosen_lambda = cfg.damping_grid.front();
    report.val_rho = 0;
  } else {
    std::vector<Eigen::VectorXd> val_grads;
    Eigen::MatrixXd val_losses(losses.rows(),
                               static_cast<Index>(report.val_indices.size()));
    for (size_t t = 0; t < report.val_indices.size(); ++t) {
      val_grads.push_back(test_grads[static_cast<size_t>(report.val_indices[t])]);
      val_losses.col(static_cast<Index>(t)) = losses.col(report.val_indices[t]);
    }
    const DampingChoice choice =
        damping_grid_search(cfg.damping_grid, solver, val_grads, val_losses,
                            report.subsets, cfg.negate_scores);
    report.chosen_lambda = choice.lambda;
    report.val_rho = choice.val_rho;
    solver.factorize(choice.lambda);
  }

  // Per-test-point rank correlation on the eval split.
  const Index n_eval = static_cast<Index>(report.eval_indices.size());
  report.per_test_rho.resize(n_eval);
  std::vector<Eigen::VectorXd> eval_scores(static_cast<size_t>(n_eval));
  for (Index t = 0; t < n_eval; ++t) {
    const Index row = report.eval_indices[static_cast<size_t>(t)];
    eval_scores[static_cast<size_t>(t)] =
        solver.scores(test_grads[static_cast<size_t>(row)]);
    const Eigen::VectorXd preds = lds_predictions(
        report.subsets, eval_scores[static_cast<size_t>(t)], cfg.negate_scores);
    report.per_test_rho[t] = spearman_rho(preds, losses.col(row));
  }
  report.mean_rho = n_eval > 0 ? report.per_test_rho.mean() : 0.0;

  // Shuffled-score null: permute each eval point's scores and re-correlate.
  if (cfg.null_reps > 0 && n_eval > 0) {
    Eigen::VectorXd null_rhos(cfg.null_reps);
    for (int r = 0; r < cfg.null_reps; ++r) {
      double mean = 0;
      for (Index t = 0; t < n_eval; ++t) {
        const std::uint64_t tag =
            static_cast<std::uint64_t>(r) * 0x10000ull +
            static_cast<std::uint64_t>(t);
        const Eigen::VectorXd perm = detail::shuffled_scores(
            eval_scores[static_cast<size_t>(t)], cfg.seed, tag);
        const Eigen::VectorXd preds =
            lds_predictions(report.subsets, perm, cfg.negate_scores);
        mean += spearman_rho(preds,
                             losses.col(report.eval_indices[static_cast<size_t>(t)]));
      }
      null_rhos[r] = mean / static_cast<double>(n_eval);
    }
    report.null_mean = null_rhos.mean();
    report.null_sd = std::sqrt(
        (null_rhos.array() - report.null_mean).square().sum() /
        static_cast<double>(std::max(cfg.null_reps - 1, 1)));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Throughput comparison.

struct ThroughputRow {
  std::string method;       // the factorized spec, verbatim
  Index k_total = 0;
  double wall_seconds = 0;
  std::uint64_t op_count = 0;        // MACs over the whole sample set
  std::uint64_t peak_aux_bytes = 0;
  double predicted_cost = 0;         // closed-form MACs, for the ordering check
};

namespace detail {

// Complexity-table cost of one factor application per token.
inline double factor_cost(const FactorMap& f, double tokens) {
  switch (f.kind) {
    case FactorMap::Kind::Identity: return 0;
    case FactorMap::Kind::Mask:
      return tokens * static_cast<double>(f.output_dim());
    case FactorMap::Kind::Dense:
      return tokens * static_cast<double>(f.output_dim()) *
             static_cast<double>(f.input_dim());
    case FactorMap::Kind::Sjlt:
    default:
      return tokens * static_cast<double>(f.sketch.sparsity) *
             static_cast<double>(f.input_dim());
  }
}

inline double plan_cost(const LayerPlan& plan, double tokens, double samples) {
  const double a = static_cast<double>(plan.in.output_dim());
  const double b = static_cast<double>(plan.out.output_dim());
  double cost = factor_cost(plan.in, tokens) + factor_cost(plan.out, tokens) +
                tokens * a * b;
  if (plan.has_final) {
    // One sketch of the Kronecker buffer per sample, whatever the length.
    cost += samples * static_cast<double>(plan.final_sjlt.sparsity) * a * b;
  }
  return cost;
}

}  // namespace detail

// Compresses the same per-sample traces under every spec, recording MACs,
// wall time, and peak auxiliary allocation. The measured MAC ordering must
// match the closed-form complexity model wherever the model separates two
// specs by more than 1%; wall-clock disagreement is only logged.
inline std::vector<ThroughputRow> compare_throughput(
    const MlpModel<float>& model, const Dataset<float>& sample,
    const std::vector<std::string>& specs,
    const SelectiveMaskTable* selective = nullptr) {
  if (specs.empty()) throw ConfigError("throughput: no specs");
  sample.validate();
  const std::vector<LayerShape> shapes = layer_shapes(model);

  std::vector<std::vector<LinearLayerTrace<float>>> traces;
  traces.reserve(static_cast<size_t>(sample.size()));
  for (Index i = 0; i < sample.size(); ++i) {
    const VecX<float> x = sample.features.row(i).transpose();
    traces.push_back(
        per_sample_grad(model, x, sample.labels[static_cast<size_t>(i)]).traces);
  }

  std::vector<FactorizedCompressor> bound;
  std::vector<int> covered;
  for (const std::string& text : specs) {
    FactorizedCompressor fc =
        bind_factorized(parse_factorized(text), shapes, selective);
    std::vector<int> layers;
    for (const auto& plan : fc.plans) layers.push_back(plan.layer);
    if (bound.empty()) {
      covered = layers;
    } else if (layers != covered) {
      throw ConfigError("throughput: spec \"" + text +
                        "\" covers different layers than the first spec");
    }
    bound.push_back(std::move(fc));
  }

  std::vector<ThroughputRow> rows;
  for (size_t s = 0; s < specs.size(); ++s) {
    const FactorizedCompressor& fc = bound[s];
    ThroughputRow row;
    row.method = specs[s];
    row.k_total = fc.output_dim();
    OpStats ops;
    AllocStats alloc;
    const auto start = std::chrono::steady_clock::now();
    for (const auto& tr : traces) {
      compress_model_grads(fc, tr, &ops, &alloc);
    }
    const auto stop = std::chrono::steady_clock::now();
    row.wall_seconds = std::chrono::duration<double>(stop - start).count();
    row.op_count = ops.multiply_adds;
    row.peak_aux_bytes = alloc.peak_bytes;
    for (const auto& plan : fc.plans) {
      double tokens = 0;
      for (const auto& tr : traces) {
        for (const auto& lt : tr) {
          if (lt.layer == plan.layer) tokens += static_cast<double>(lt.z_in.cols());
        }
      }
      row.predicted_cost += detail::plan_cost(
          plan, tokens, static_cast<double>(traces.size()));
    }
    rows.push_back(std::move(row));
  }

  for (size_t a = 0; a < rows.size(); ++a) {
    for (size_t b = a + 1; b < rows.size(); ++b) {
      const double pa = rows[a].predicted_cost, pb = rows[b].predicted_cost;
      if (std::abs(pa - pb) <= 0.01 * std::max(pa, pb)) continue;
      const bool predicted_less = pa < pb;
      if ((rows[a].op_count < rows[b].op_count) != predicted_less) {
        throw NumericalError("throughput: measured op ordering contradicts the "
                             "complexity model (\"" + rows[a].method +
                             "\" vs \"" + rows[b].method + "\")");
      }
      if ((rows[a].wall_seconds < rows[b].wall_seconds) != predicted_less) {
        std::fprintf(stderr,
                     "note: wall-clock ordering of \"%s\" vs \"%s\" differs "
                     "from the op-count model\n",
                     rows[a].method.c_str(), rows[b].method.c_str());
      }
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report rendering.

inline std::string lds_report_csv(const LdsReport& r) {
  std::string out = "test_index,spearman_rho\n";
  for (Index t = 0; t < r.per_test_rho.size(); ++t) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%lld,%.10g\n",
                  static_cast<long long>(r.eval_indices[static_cast<size_t>(t)]),
                  r.per_test_rho[t]);
    out += buf;
  }
  return out;
}

inline std::string lds_report_summary(const LdsReport& r) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof(buf), "mean spearman rho %.6g over %lld test points\n",
                r.mean_rho, static_cast<long long>(r.per_test_rho.size()));
  out += buf;
  std::snprintf(buf, sizeof(buf), "chosen damping lambda %.6g (val rho %.6g)\n",
                r.chosen_lambda, r.val_rho);
  out += buf;
  std::snprintf(buf, sizeof(buf), "shuffled-score null mean %.6g sd %.6g\n",
                r.null_mean, r.null_sd);
  out += buf;
  const size_t size = r.subsets.empty() ? 0 : r.subsets[0].size();
  std::snprintf(buf, sizeof(buf), "subsets m=%zu of %zu samples each\n",
                r.subsets.size(), size);
  out += buf;
  std::snprintf(buf, sizeof(buf), "base model final loss %.6g\n",
                r.base_final_loss);
  out += buf;
  return out;
}

inline std::string throughput_csv(const std::vector<ThroughputRow>& rows) {
  std::string out = "method,k_total,wall_seconds,op_count,peak_aux_bytes\n";
  for (const auto& r : rows) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "\"%s\",%lld,%.6g,%llu,%llu\n",
                  r.method.c_str(), static_cast<long long>(r.k_total),
                  r.wall_seconds,
                  static_cast<unsigned long long>(r.op_count),
                  static_cast<unsigned long long>(r.peak_aux_bytes));
    out += buf;
  }
  return out;
}

}  // namespace grasskit
