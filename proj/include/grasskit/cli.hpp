// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every subcommand is a plain function over a parsed
// RunConfig plus a CliContext so tests can drive it in-process; main() is a
// thin argv wrapper that maps the exception taxonomy to exit codes (2 config,
// 3 data, 4 numerical). A run writes into a directory named by the config
// digest, and the first thing written there is the resolved config itself, so
// every output directory is self-describing and reruns of the same config
// land in the same place.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "grasskit/attribution.hpp"
#include "grasskit/config.hpp"
#include "grasskit/evalharness.hpp"
#include "grasskit/grass.hpp"
#include "grasskit/mask.hpp"
#include "grasskit/model.hpp"
#include "grasskit/sha256.hpp"

namespace grasskit {

struct CliContext {
  std::filesystem::path run_dir;
  int threads = 1;
  bool force = false;
  std::string tests_override;  // --tests, wins over attribution.tests
};

// Run directories live under $GRASSKIT_RUN_ROOT (default "runs") and are
// named by the config digest, so the identity of a run is the resolved
// config and nothing else.
inline std::filesystem::path run_root() {
  const char* env = std::getenv("GRASSKIT_RUN_ROOT");
  return (env && *env) ? std::filesystem::path(env)
                       : std::filesystem::path("runs");
}

inline std::filesystem::path run_dir_for(const RunConfig& cfg) {
  return run_root() / to_hex(cfg.digest()).substr(0, 16);
}

namespace detail {

inline std::string fmt_f64(double v) {
  // %.17g round-trips a double exactly through text.
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_short(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  out.flush();
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace detail

// The resolved config goes in before any command output so a run directory
// stays interpretable even if the command dies halfway.
inline void begin_run(const RunConfig& cfg, const CliContext& ctx) {
  std::error_code ec;
  std::filesystem::create_directories(ctx.run_dir, ec);
  if (ec) {
    throw DataError("cannot create run directory " + ctx.run_dir.string() +
                    ": " + ec.message());
  }
  detail::write_text_file(ctx.run_dir / "config.resolved", cfg.resolved_text());
}

// ---------------------------------------------------------------------------
// Config-driven builders shared by the subcommands.

namespace detail {

// Keys that only make sense for one dataset kind are rejected rather than
// ignored; a silently dead key in a config is a debugging trap.
inline void check_dataset_keys(const RunConfig& cfg, const std::string& kind,
                               const std::set<std::string>& allowed) {
  for (const auto& [section, keys] : config_schema()) {
    if (section != "dataset") continue;
    for (const std::string& key : keys) {
      if (cfg.has("dataset", key) && !allowed.count(key)) {
        throw ConfigError("config: key \"dataset." + key +
                          "\" does not apply to dataset kind \"" + kind + "\"");
      }
    }
  }
}

inline Dataset<float> cli_dataset(const RunConfig& cfg, bool test_split) {
  const std::string kind = cfg.get("dataset", "kind");
  if (kind == "blobs") {
    check_dataset_keys(cfg, kind, {"kind", "n", "dim", "separation", "sigma",
                                   "seed", "test_n", "test_seed"});
    return make_blobs<float>(
        cfg.get_int("dataset", test_split ? "test_n" : "n"),
        cfg.get_int_or("dataset", "dim", 2),
        cfg.get_double_or("dataset", "separation", 1.0),
        cfg.get_double_or("dataset", "sigma", 1.0),
        cfg.get_seed("dataset", test_split ? "test_seed" : "seed"));
  }
  if (kind == "moons") {
    check_dataset_keys(cfg, kind,
                       {"kind", "n", "noise", "seed", "test_n", "test_seed"});
    return make_moons<float>(
        cfg.get_int("dataset", test_split ? "test_n" : "n"),
        cfg.get_double_or("dataset", "noise", 0.1),
        cfg.get_seed("dataset", test_split ? "test_seed" : "seed"));
  }
  if (kind == "idx") {
    check_dataset_keys(cfg, kind, {"kind", "features", "labels",
                                   "test_features", "test_labels"});
    return make_idx_dataset(
        cfg.get_path("dataset", test_split ? "test_features" : "features"),
        cfg.get_path("dataset", test_split ? "test_labels" : "labels"));
  }
  throw ConfigError("config: unknown dataset kind \"" + kind + "\"");
}

inline MlpModel<float> cli_model(const RunConfig& cfg) {
  return make_mlp<float>(cfg.get_dims("model", "dims"),
                         cfg.get_seed("model", "init_seed"),
                         cfg.get_bool_or("model", "bias", true));
}

inline TrainConfig cli_train_config(const RunConfig& cfg) {
  TrainConfig tc;
  tc.epochs = static_cast<int>(cfg.get_int_or("model", "epochs", 20));
  tc.lr = cfg.get_double_or("model", "lr", 0.1);
  tc.batch_size = static_cast<int>(cfg.get_int_or("model", "batch_size", 32));
  tc.seed = cfg.get_seed("model", "shuffle_seed");
  const std::string loss = cfg.get_or("model", "loss", "cross_entropy");
  if (loss != "cross_entropy") {
    throw ConfigError("config: model.loss must be cross_entropy (got \"" +
                      loss + "\")");
  }
  tc.loss = Loss::CrossEntropy;
  return tc;
}

// selmask file= paths in compressor specs are kept verbatim in the config
// and resolved here, relative to the config file's directory.
inline MaskLoader cli_mask_loader(const RunConfig& cfg) {
  const std::string base = cfg.base_dir();
  return [base](const std::string& file) {
    std::filesystem::path p(file);
    if (!p.is_absolute()) p = std::filesystem::path(base) / p;
    return read_mask_file(p.lexically_normal().string());
  };
}

inline MlpModel<float> cli_checkpoint(const CliContext& ctx) {
  const std::filesystem::path path = ctx.run_dir / "model.gmlp";
  if (!std::filesystem::exists(path)) {
    throw DataError("no checkpoint at " + path.string() + "; run train first");
  }
  return model_read(path.string());
}

// One cached-artifact layout per attribution mode. Whole-model runs keep a
// single store plus its FIM and the preconditioned store (the expensive
// solve-per-row pass); layerwise runs keep one store and FIM per layer and
// solve on the test side at attribute time, so no preconditioned files.
// fim = identity skips the FIM artifacts entirely: scores are gradient dot
// products scaled by 1/damping.
struct CachePlan {
  bool layerwise = false;
  bool identity_fim = false;
  double damping = 1.0;
  std::vector<Compressor> comps;
  std::vector<std::pair<Index, Index>> slices;  // flat (offset, count)
  std::vector<std::filesystem::path> store_paths;
  std::vector<std::filesystem::path> fim_paths;
  std::filesystem::path pre_path;
};

inline CachePlan make_cache_plan(const RunConfig& cfg,
                                 const MlpModel<float>& model,
                                 const CliContext& ctx) {
  CachePlan plan;
  const std::string mode = cfg.get_or("attribution", "mode", "whole");
  if (mode != "whole" && mode != "layerwise") {
    throw ConfigError("config: attribution.mode must be whole or layerwise (got \"" +
                      mode + "\")");
  }
  plan.layerwise = mode == "layerwise";
  const std::string fim = cfg.get_or("attribution", "fim", "empirical");
  if (fim != "empirical" && fim != "identity") {
    throw ConfigError("config: attribution.fim must be empirical or identity (got \"" +
                      fim + "\")");
  }
  plan.identity_fim = fim == "identity";
  plan.damping = cfg.get_double_or("attribution", "damping", 1e-3);
  if (!(plan.damping > 0)) {
    throw ConfigError("config: attribution.damping must be positive");
  }
  const CompressorSpec spec = parse_compressor(cfg.get("compressor", "spec"));
  const MaskLoader loader = cli_mask_loader(cfg);
  if (!plan.layerwise) {
    plan.comps.emplace_back(spec, model.param_count(), loader);
    plan.slices.emplace_back(0, model.param_count());
    plan.store_paths.push_back(ctx.run_dir / "store.ggrd");
    plan.fim_paths.push_back(ctx.run_dir / "fim.gfim");
    plan.pre_path = ctx.run_dir / "pre.ggrd";
  } else {
    const auto offsets = model.layer_offsets();
    for (size_t l = 0; l < offsets.size(); ++l) {
      plan.comps.emplace_back(spec, offsets[l].second, loader);
      plan.slices.push_back(offsets[l]);
      const std::string tag = "-layer" + std::to_string(l);
      plan.store_paths.push_back(ctx.run_dir / ("store" + tag + ".ggrd"));
      plan.fim_paths.push_back(ctx.run_dir / ("fim" + tag + ".gfim"));
    }
  }
  return plan;
}

// Compress one sample's flat gradient into its per-block sketch rows.
inline std::vector<VecX<float>> compress_blocks(const CachePlan& plan,
                                                const VecX<float>& flat,
                                                OpStats* ops) {
  std::vector<VecX<float>> out(plan.comps.size());
  for (size_t l = 0; l < plan.comps.size(); ++l) {
    const auto [off, count] = plan.slices[l];
    out[l] = plan.comps[l].compress(
        GradientVector<float>::dense(flat.segment(off, count)), ops);
  }
  return out;
}

inline std::vector<Index> parse_test_indices(const std::string& text,
                                             Index test_n) {
  std::vector<Index> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t comma = text.find(',', start);
    if (comma == std::string::npos) comma = text.size();
    const std::string item = config_trim(text.substr(start, comma - start));
    start = comma + 1;
    if (item.empty()) {
      throw ConfigError("test index list has an empty item");
    }
    long long v = 0;
    try {
      std::size_t pos = 0;
      v = std::stoll(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("test index \"" + item + "\" is not an integer");
    }
    if (v < 0 || v >= test_n) {
      throw ConfigError("test index " + item + " is out of range (have " +
                        std::to_string(test_n) + " test points)");
    }
    out.push_back(static_cast<Index>(v));
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// train: fit the configured model on the train split and checkpoint it.
// Deterministic end to end, so the same config always produces byte-identical
// model.gmlp and loss_curve.csv.

inline int cmd_train(const RunConfig& cfg, const CliContext& ctx) {
  begin_run(cfg, ctx);
  const Dataset<float> train = detail::cli_dataset(cfg, false);
  MlpModel<float> model = detail::cli_model(cfg);
  const TrainConfig tc = detail::cli_train_config(cfg);
  const TrainReport report = train_sgd(model, train, tc);

  const std::filesystem::path ckpt = ctx.run_dir / "model.gmlp";
  model_write(ckpt.string(), model);
  std::string csv = "epoch,loss\n";
  for (size_t e = 0; e < report.epoch_loss.size(); ++e) {
    csv += std::to_string(e) + "," + detail::fmt_short(report.epoch_loss[e]) + "\n";
  }
  detail::write_text_file(ctx.run_dir / "loss_curve.csv", csv);

  const auto [loss, acc] = evaluate(model, train);
  std::printf("trained %lld params on %lld samples for %d epochs\n",
              static_cast<long long>(model.param_count()),
              static_cast<long long>(train.size()), tc.epochs);
  std::printf("final train loss %s, accuracy %.3f\n",
              detail::fmt_short(loss).c_str(), acc);
  std::printf("checkpoint %s\n", ckpt.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// cache: compress every training gradient once and persist the stores plus
// whatever the attribution mode needs later. Idempotent by fingerprint: if
// the artifacts already exist and were built by the same compressor, nothing
// is recomputed; a fingerprint mismatch refuses to overwrite without --force.

inline int cmd_cache(const RunConfig& cfg, const CliContext& ctx) {
  begin_run(cfg, ctx);
  const MlpModel<float> model = detail::cli_checkpoint(ctx);
  const Dataset<float> train = detail::cli_dataset(cfg, false);
  const detail::CachePlan plan = detail::make_cache_plan(cfg, model, ctx);
  const size_t blocks = plan.comps.size();

  bool stores_exist = true;
  for (const auto& p : plan.store_paths) {
    stores_exist = stores_exist && std::filesystem::exists(p);
  }
  if (stores_exist) {
    bool match = true;
    for (size_t l = 0; l < blocks; ++l) {
      match = match && store_read(plan.store_paths[l].string()).fingerprint ==
                           plan.comps[l].fingerprint();
    }
    if (!match && !ctx.force) {
      throw DataError(
          "existing gradient store was built by a different compressor "
          "(fingerprint mismatch); pass --force to rebuild");
    }
    if (match) {
      bool rest = true;
      if (!plan.identity_fim) {
        for (const auto& p : plan.fim_paths) {
          rest = rest && std::filesystem::exists(p);
        }
        if (!plan.layerwise) {
          rest = rest && std::filesystem::exists(plan.pre_path);
        }
      }
      if (rest) {
        std::printf("cache is current (fingerprints match); nothing to do\n");
        return 0;
      }
    }
  }

  const Index n = train.size();
  std::vector<GradientStore> stores(blocks);
  for (size_t l = 0; l < blocks; ++l) {
    stores[l].fingerprint = plan.comps[l].fingerprint();
    stores[l].records.resize(n, plan.comps[l].output_dim());
  }
  OpStats total_ops;
  std::mutex merge_mutex;
  std::exception_ptr err;
  const auto t0 = std::chrono::steady_clock::now();
  parallel_for(n, ctx.threads, [&](Index lo, Index hi) {
    OpStats ops;
    try {
      for (Index i = lo; i < hi; ++i) {
        const VecX<float> x = train.features.row(i).transpose();
        const auto grad = per_sample_grad(model, x, train.labels[static_cast<size_t>(i)]);
        const auto rows = detail::compress_blocks(plan, grad.flat, &ops);
        for (size_t l = 0; l < blocks; ++l) {
          stores[l].records.row(i) = rows[l].transpose();
        }
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(merge_mutex);
      if (!err) err = std::current_exception();
      return;
    }
    std::lock_guard<std::mutex> lock(merge_mutex);
    total_ops.multiply_adds += ops.multiply_adds;
  });
  if (err) std::rethrow_exception(err);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  for (size_t l = 0; l < blocks; ++l) {
    store_write(plan.store_paths[l].string(), stores[l]);
  }
  if (!plan.identity_fim) {
    for (size_t l = 0; l < blocks; ++l) {
      FimState fim = fim_from_store(stores[l], ctx.threads);
      fim_write(plan.fim_paths[l].string(), fim);
      if (!plan.layerwise) {
        fim.factorize(plan.damping);
        const GradientStore pre = precondition_store(stores[l], fim, ctx.threads);
        store_write(plan.pre_path.string(), pre);
      }
    }
  }

  Index k_total = 0;
  for (const auto& c : plan.comps) k_total += c.output_dim();
  std::printf("cached %lld gradients at k=%lld in %.2fs (%.0f samples/s, %llu multiply-adds)\n",
              static_cast<long long>(n), static_cast<long long>(k_total), wall,
              static_cast<double>(n) / std::max(wall, 1e-9),
              static_cast<unsigned long long>(total_ops.multiply_adds));
  return 0;
}

// ---------------------------------------------------------------------------
// attribute: score every training sample against the chosen test points.
// Scores come straight from the cached artifacts; stores whose fingerprints
// disagree with the configured compressor are refused. CSV scores are printed
// with enough digits to round-trip the doubles exactly.

inline int cmd_attribute(const RunConfig& cfg, const CliContext& ctx) {
  begin_run(cfg, ctx);
  const MlpModel<float> model = detail::cli_checkpoint(ctx);
  const Dataset<float> test = detail::cli_dataset(cfg, true);
  const detail::CachePlan plan = detail::make_cache_plan(cfg, model, ctx);
  const size_t blocks = plan.comps.size();

  std::vector<GradientStore> stores(blocks);
  for (size_t l = 0; l < blocks; ++l) {
    if (!std::filesystem::exists(plan.store_paths[l])) {
      throw DataError("missing gradient store " + plan.store_paths[l].string() +
                      "; run cache first");
    }
    stores[l] = store_read(plan.store_paths[l].string());
    if (stores[l].fingerprint != plan.comps[l].fingerprint()) {
      throw DataError("gradient store " + plan.store_paths[l].string() +
                      " was built by a different compressor (fingerprint "
                      "mismatch); re-run cache");
    }
  }
  const Index n = stores[0].n();

  GradientStore pre;
  std::vector<FimState> fims;
  if (!plan.identity_fim) {
    if (!plan.layerwise) {
      if (!std::filesystem::exists(plan.pre_path)) {
        throw DataError("missing preconditioned store " + plan.pre_path.string() +
                        "; run cache first");
      }
      pre = store_read(plan.pre_path.string());
    } else {
      for (size_t l = 0; l < blocks; ++l) {
        fims.push_back(fim_read(plan.fim_paths[l].string()));
        fims.back().finalize();
        fims.back().factorize(plan.damping);
      }
    }
  }

  const std::string selector = !ctx.tests_override.empty()
                                   ? ctx.tests_override
                                   : cfg.get_or("attribution", "tests", "");
  std::vector<Index> which;
  if (selector.empty()) {
    which.resize(static_cast<size_t>(test.size()));
    std::iota(which.begin(), which.end(), Index(0));
  } else {
    which = detail::parse_test_indices(selector, test.size());
  }
  Index top_k = 0;
  if (cfg.has("attribution", "top_k")) {
    top_k = std::min<Index>(cfg.get_int("attribution", "top_k"), n);
    if (top_k < 1) throw ConfigError("config: attribution.top_k must be >= 1");
  }

  std::vector<Index> mode_blocks;
  for (const auto& s : stores) mode_blocks.push_back(s.k());
  const AttributionMode mode = AttributionMode::layerwise(mode_blocks);

  std::string topk_csv = "test_index,rank,train_index,score\n";
  for (Index t : which) {
    const VecX<float> x = test.features.row(t).transpose();
    const auto grad = per_sample_grad(model, x, test.labels[static_cast<size_t>(t)]);
    const auto g_blocks = detail::compress_blocks(plan, grad.flat, nullptr);

    Eigen::VectorXd scores;
    if (plan.identity_fim) {
      scores = Eigen::VectorXd::Zero(n);
      for (size_t l = 0; l < blocks; ++l) {
        scores += graddot_scores(stores[l], g_blocks[l].cast<double>());
      }
      scores /= plan.damping;
    } else if (!plan.layerwise) {
      scores = influence_scores(stores[0], pre, g_blocks[0].cast<double>());
    } else {
      std::vector<Eigen::VectorXd> test_blocks;
      for (const auto& g : g_blocks) test_blocks.push_back(g.cast<double>());
      scores = layerwise_scores(mode, stores, fims, test_blocks);
    }

    std::string csv = "train_index,score\n";
    for (Index i = 0; i < n; ++i) {
      csv += std::to_string(i) + "," + detail::fmt_f64(scores[i]) + "\n";
    }
    detail::write_text_file(
        ctx.run_dir / ("scores-" + std::to_string(t) + ".csv"), csv);

    std::vector<Index> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), Index(0));
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
      return scores[a] > scores[b];
    });
    for (Index r = 0; r < top_k; ++r) {
      topk_csv += std::to_string(t) + "," + std::to_string(r) + "," +
                  std::to_string(order[static_cast<size_t>(r)]) + "," +
                  detail::fmt_f64(scores[order[static_cast<size_t>(r)]]) + "\n";
    }
    std::printf("test %lld: top train index %lld (score %s)\n",
                static_cast<long long>(t), static_cast<long long>(order[0]),
                detail::fmt_short(scores[order[0]]).c_str());
  }
  if (top_k > 0) {
    detail::write_text_file(ctx.run_dir / "topk.csv", topk_csv);
  }
  std::printf("scored %zu test point(s) against %lld train samples\n",
              which.size(), static_cast<long long>(n));
  return 0;
}

// ---------------------------------------------------------------------------
// lds: retrain on random subsets and rank-correlate measured loss deltas
// against the attribution predictions. Whole-model attribution only; the
// subset models are the harness's own, so no checkpoint is needed.

inline int cmd_lds(const RunConfig& cfg, const CliContext& ctx) {
  begin_run(cfg, ctx);
  if (cfg.get_or("attribution", "mode", "whole") != "whole") {
    throw ConfigError("config: lds runs whole-model attribution only; set "
                      "attribution.mode = whole");
  }
  const Dataset<float> train = detail::cli_dataset(cfg, false);
  const Dataset<float> test = detail::cli_dataset(cfg, true);

  LdsConfig lc;
  lc.subsets = static_cast<int>(cfg.get_int_or("lds", "subsets", 50));
  lc.fraction = cfg.get_double_or("lds", "fraction", 0.5);
  lc.val_fraction = cfg.get_double_or("lds", "val_fraction", 0.1);
  lc.seed = cfg.get_seed("lds", "seed");
  lc.retrain = detail::cli_train_config(cfg);
  lc.model_dims = cfg.get_dims("model", "dims");
  if (cfg.has("lds", "damping_grid")) {
    lc.damping_grid = cfg.get_double_list("lds", "damping_grid");
  }
  lc.negate_scores = cfg.get_bool_or("lds", "negate", true);
  lc.null_reps = static_cast<int>(cfg.get_int_or("lds", "null_reps", 100));

  // The harness retrains its own models from lds.model_dims, so the
  // compressor binds to that parameter count, not to any checkpoint.
  const Index p = make_mlp<float>(lc.model_dims, 0).param_count();
  const Compressor comp(parse_compressor(cfg.get("compressor", "spec")), p,
                        detail::cli_mask_loader(cfg));

  const LdsReport report =
      lds_evaluate(lc, train, test, comp, nullptr, ctx.threads);
  detail::write_text_file(ctx.run_dir / "lds_scores.csv", lds_report_csv(report));
  const std::string summary = lds_report_summary(report);
  detail::write_text_file(ctx.run_dir / "lds_summary.txt", summary);
  std::fputs(summary.c_str(), stdout);
  return 0;
}

// ---------------------------------------------------------------------------
// bench: projection-kernel microbenchmarks over a method/k/sparsity grid,
// and factorized-pipeline throughput over whole layer specs. Either half can
// run alone; asking for neither is a config error.

inline int cmd_bench(const RunConfig& cfg, const CliContext& ctx) {
  begin_run(cfg, ctx);
  bool ran = false;

  if (cfg.has("bench", "methods")) {
    const Index input_dim = cfg.get_int_or("bench", "input_dim", 8192);
    const Index trials = cfg.get_int_or("bench", "trials", 8);
    const std::uint64_t seed = cfg.get_seed("bench", "seed");
    const std::vector<std::string> methods = cfg.get_list("bench", "methods");
    const std::vector<Index> ks = cfg.get_dims("bench", "ks");
    std::vector<double> sparsities = {1.0};
    if (cfg.has("bench", "sparsities")) {
      sparsities = cfg.get_double_list("bench", "sparsities");
    }
    const int s = static_cast<int>(cfg.get_int_or("bench", "s", 1));

    std::string csv = "method,k,sparsity,wall_seconds,op_count,median_rel_err\n";
    std::uint64_t combo = 0;
    for (const std::string& method : methods) {
      SketchKind kind;
      if (method == "sjlt") kind = SketchKind::SJLT;
      else if (method == "gaussian") kind = SketchKind::Gaussian;
      else if (method == "rademacher") kind = SketchKind::Rademacher;
      else if (method == "fjlt") kind = SketchKind::FJLT;
      else {
        throw ConfigError("config: unknown bench method \"" + method +
                          "\" (sjlt, gaussian, rademacher, fjlt)");
      }
      for (Index k : ks) {
        for (double sparsity : sparsities) {
          SketchSpec spec;
          spec.kind = kind;
          spec.input_dim = input_dim;
          spec.target_dim = k;
          spec.sparsity = kind == SketchKind::SJLT ? s : 1;
          spec.seed = seed + combo++;
          spec.normalize = true;
          const ProjectionBenchmark b =
              benchmark_projection<float>(spec, sparsity, trials);
          csv += method + "," + std::to_string(k) + "," +
                 detail::fmt_short(sparsity) + "," +
                 detail::fmt_short(b.wall_time_sec) + "," +
                 std::to_string(b.op_count) + "," +
                 detail::fmt_short(b.median_relative_error) + "\n";
          std::printf("%-10s k=%-6lld sparsity %-5g %10.4fs %12llu ops, rel err %.4f\n",
                      method.c_str(), static_cast<long long>(k), sparsity,
                      b.wall_time_sec,
                      static_cast<unsigned long long>(b.op_count),
                      b.median_relative_error);
        }
      }
    }
    detail::write_text_file(ctx.run_dir / "projection.csv", csv);
    ran = true;
  }

  if (cfg.has("bench", "layer_specs")) {
    // Specs contain commas, so the list separator is ";".
    const std::string raw = cfg.get("bench", "layer_specs");
    std::vector<std::string> specs;
    std::size_t start = 0;
    while (start <= raw.size()) {
      std::size_t semi = raw.find(';', start);
      if (semi == std::string::npos) semi = raw.size();
      const std::string item = detail::config_trim(raw.substr(start, semi - start));
      if (item.empty()) {
        throw ConfigError("config: bench.layer_specs has an empty entry");
      }
      specs.push_back(item);
      start = semi + 1;
    }
    const MlpModel<float> model = detail::cli_model(cfg);
    const Dataset<float> sample = detail::cli_dataset(cfg, true);
    const auto rows = compare_throughput(model, sample, specs);
    detail::write_text_file(ctx.run_dir / "throughput.csv", throughput_csv(rows));
    for (const auto& r : rows) {
      std::printf("%-44s k=%-6lld %10.4fs %12llu ops\n", r.method.c_str(),
                  static_cast<long long>(r.k_total), r.wall_seconds,
                  static_cast<unsigned long long>(r.op_count));
    }
    ran = true;
  }

  if (!ran) {
    throw ConfigError("config: bench needs bench.methods or bench.layer_specs");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// select-mask: learn a data-driven coordinate mask from the checkpointed
// model's gradients and persist it where a selmask compressor stage can load
// it. The sidecar and the step trace make the run auditable.

inline int cmd_select_mask(const RunConfig& cfg, const CliContext& ctx) {
  begin_run(cfg, ctx);
  const MlpModel<float> model = detail::cli_checkpoint(ctx);
  const Dataset<float> train = detail::cli_dataset(cfg, false);
  const Dataset<float> test = detail::cli_dataset(cfg, true);
  const Index test_n =
      std::min<Index>(cfg.get_int_or("compressor", "select_test_n", test.size()),
                      test.size());
  const Index p = model.param_count();

  SelectiveMaskProblem prob;
  prob.train.resize(train.size(), p);
  prob.test.resize(test_n, p);
  std::exception_ptr err;
  std::mutex err_mutex;
  parallel_for(train.size() + test_n, ctx.threads, [&](Index lo, Index hi) {
    try {
      for (Index i = lo; i < hi; ++i) {
        const bool is_test = i >= train.size();
        const Dataset<float>& ds = is_test ? test : train;
        const Index row = is_test ? i - train.size() : i;
        const VecX<float> x = ds.features.row(row).transpose();
        const auto grad =
            per_sample_grad(model, x, ds.labels[static_cast<size_t>(row)]);
        if (is_test) {
          prob.test.row(row) = grad.flat.transpose().cast<double>();
        } else {
          prob.train.row(row) = grad.flat.transpose().cast<double>();
        }
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mutex);
      if (!err) err = std::current_exception();
    }
  });
  if (err) std::rethrow_exception(err);

  prob.target_k = cfg.get_int("compressor", "select_k");
  prob.l1_weight = cfg.get_double_or("compressor", "select_l1", 1e-3);
  prob.steps = static_cast<int>(cfg.get_int_or("compressor", "select_steps", 500));
  prob.step_size = cfg.get_double_or("compressor", "select_step_size", 0.1);
  prob.temp_start = cfg.get_double_or("compressor", "select_temp_start", 1.0);
  prob.temp_end = cfg.get_double_or("compressor", "select_temp_end", 0.1);
  prob.seed = cfg.get_seed("compressor", "select_seed");
  prob.init_jitter = cfg.get_double_or("compressor", "select_jitter", 0.05);

  const SelectiveTrainResult res = selective_train(prob);
  const std::filesystem::path mask_path = ctx.run_dir / "mask.gmsk";
  write_mask_file(mask_path.string(), res.mask);

  std::string sidecar;
  sidecar += "input_dim = " + std::to_string(res.mask.input_dim) + "\n";
  sidecar += "kept = " + std::to_string(res.mask.output_dim()) + "\n";
  sidecar += "provenance = selective\n";
  sidecar += "steps = " + std::to_string(prob.steps) + "\n";
  sidecar += "l1_weight = " + detail::fmt_short(prob.l1_weight) + "\n";
  sidecar += "final_objective = " + detail::fmt_short(res.final_objective) + "\n";
  sidecar += "ambiguous_fraction = " + detail::fmt_short(res.ambiguous_fraction) + "\n";
  sidecar += "note = " + res.mask.note + "\n";
  detail::write_text_file(ctx.run_dir / "mask.txt", sidecar);

  std::string trace = "step,objective,l1\n";
  for (const auto& row : res.trace) {
    trace += std::to_string(static_cast<long long>(row[0])) + "," +
             detail::fmt_short(row[1]) + "," + detail::fmt_short(row[2]) + "\n";
  }
  detail::write_text_file(ctx.run_dir / "mask_trace.csv", trace);

  std::printf("selected %lld of %lld coordinates (objective %s, ambiguous %.3f)\n",
              static_cast<long long>(res.mask.output_dim()),
              static_cast<long long>(p),
              detail::fmt_short(res.final_objective).c_str(),
              res.ambiguous_fraction);
  std::printf("mask %s\n", mask_path.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// argv plumbing.

struct CliArgs {
  std::string command;
  std::string config_path;
  int threads = 1;
  bool force = false;
  std::string tests;
};

inline const char* cli_usage() {
  return "usage: grasskit <train|cache|attribute|lds|bench|select-mask> "
         "--config FILE [--threads N] [--force] [--tests I,J,...]";
}

inline CliArgs parse_cli_args(int argc, const char* const* argv) {
  if (argc < 2) {
    throw ConfigError(std::string("missing command\n") + cli_usage());
  }
  CliArgs args;
  args.command = argv[1];
  static const std::set<std::string> kCommands = {
      "train", "cache", "attribute", "lds", "bench", "select-mask"};
  if (!kCommands.count(args.command)) {
    throw ConfigError("unknown command \"" + args.command + "\"\n" + cli_usage());
  }
  for (int i = 2; i < argc; ++i) {
    const std::string flag = argv[i];
    const auto value = [&](const char* name) {
      if (i + 1 >= argc) {
        throw ConfigError(std::string(name) + " needs a value");
      }
      return std::string(argv[++i]);
    };
    if (flag == "--config") {
      args.config_path = value("--config");
    } else if (flag == "--threads") {
      const std::string v = value("--threads");
      try {
        std::size_t pos = 0;
        args.threads = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
      } catch (const std::exception&) {
        throw ConfigError("--threads wants an integer (got \"" + v + "\")");
      }
      if (args.threads < 1) throw ConfigError("--threads must be >= 1");
    } else if (flag == "--force") {
      args.force = true;
    } else if (flag == "--tests") {
      args.tests = value("--tests");
    } else {
      throw ConfigError("unknown flag \"" + flag + "\"\n" + cli_usage());
    }
  }
  if (args.config_path.empty()) {
    throw ConfigError(std::string("missing --config FILE\n") + cli_usage());
  }
  return args;
}

inline int run_command(const CliArgs& args) {
  const RunConfig cfg = RunConfig::parse_file(args.config_path);
  CliContext ctx;
  ctx.run_dir = run_dir_for(cfg);
  ctx.threads = args.threads;
  ctx.force = args.force;
  ctx.tests_override = args.tests;
  if (args.command == "train") return cmd_train(cfg, ctx);
  if (args.command == "cache") return cmd_cache(cfg, ctx);
  if (args.command == "attribute") return cmd_attribute(cfg, ctx);
  if (args.command == "lds") return cmd_lds(cfg, ctx);
  if (args.command == "bench") return cmd_bench(cfg, ctx);
  if (args.command == "select-mask") return cmd_select_mask(cfg, ctx);
  throw std::logic_error("unreachable");
}

// Exit codes: 0 success, 2 bad usage or config, 3 bad or missing data,
// 4 numerical failure. Everything else is 1.
inline int run_cli(int argc, const char* const* argv) {
  try {
    return run_command(parse_cli_args(argc, argv));
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "grasskit: %s\n", e.what());
    return 2;
  } catch (const GuardError& e) {
    std::fprintf(stderr, "grasskit: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "grasskit: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "grasskit: %s\n", e.what());
    return 3;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "grasskit: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "grasskit: %s\n", e.what());
    return 1;
  }
}

}  // namespace grasskit
