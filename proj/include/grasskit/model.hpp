// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
//
// Small MLPs with explicit per-sample gradients and linear-layer trace
// capture. The parameter flattening convention is load-bearing: per layer,
// the weight (with the bias folded in as one extra input column of ones) is
// vectorized column-major, so the flat slice for a layer equals
// sum_t z_in[:,t] kron dz_out[:,t] with the same floating ops in the same
// order as the trace materialization.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "grasskit/core.hpp"
#include "grasskit/io.hpp"

namespace grasskit {

enum class Activation { ReLU, Identity };
enum class Loss { CrossEntropy, SquaredError };

template <typename Scalar>
struct LinearLayer {
  MatX<Scalar> W;       // d_out x d_in
  VecX<Scalar> bias;    // d_out, empty when the layer has none
  Activation act = Activation::Identity;

  Index in_dim() const { return W.cols(); }
  Index out_dim() const { return W.rows(); }
  bool has_bias() const { return bias.size() > 0; }
  // columns of the effective [W | bias] matrix
  Index aug_in_dim() const { return W.cols() + (has_bias() ? 1 : 0); }
  Index param_count() const { return out_dim() * aug_in_dim(); }
};

// Per-sample trace of one linear layer: z_in carries the ones row for the
// bias column as its last row, so vec identities hold for the full
// parameter slice.
template <typename Scalar>
struct LinearLayerTrace {
  int layer = 0;
  MatX<Scalar> z_in;    // aug_in x T
  MatX<Scalar> dz_out;  // d_out x T
};

template <typename Scalar>
class MlpModel {
 public:
  std::vector<LinearLayer<Scalar>> layers;

  void validate() const {
    if (layers.empty()) throw ConfigError("mlp: no layers");
    for (size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].W.rows() <= 0 || layers[l].W.cols() <= 0) {
        throw ConfigError("mlp: layer " + std::to_string(l) + " has empty weights");
      }
      if (layers[l].has_bias() && layers[l].bias.size() != layers[l].out_dim()) {
        throw ConfigError("mlp: layer " + std::to_string(l) + " bias dim mismatch");
      }
      if (l > 0 && layers[l].in_dim() != layers[l - 1].out_dim()) {
        throw ConfigError("mlp: layer dims do not chain at layer " + std::to_string(l));
      }
    }
  }

  Index input_dim() const { return layers.front().in_dim(); }
  Index output_dim() const { return layers.back().out_dim(); }

  Index param_count() const {
    Index p = 0;
    for (const auto& l : layers) p += l.param_count();
    return p;
  }

  // (offset, count) of each layer's slice in the flat parameter vector
  std::vector<std::pair<Index, Index>> layer_offsets() const {
    std::vector<std::pair<Index, Index>> out;
    Index off = 0;
    for (const auto& l : layers) {
      out.push_back({off, l.param_count()});
      off += l.param_count();
    }
    return out;
  }

  // Column-major per layer; the bias is the last column of [W | bias].
  VecX<Scalar> flatten() const {
    VecX<Scalar> flat(param_count());
    Index off = 0;
    for (const auto& l : layers) {
      const Index dout = l.out_dim();
      for (Index j = 0; j < l.in_dim(); ++j) {
        for (Index r = 0; r < dout; ++r) flat[off + j * dout + r] = l.W(r, j);
      }
      if (l.has_bias()) {
        const Index j = l.in_dim();
        for (Index r = 0; r < dout; ++r) flat[off + j * dout + r] = l.bias[r];
      }
      off += l.param_count();
    }
    return flat;
  }

  void unflatten(const VecX<Scalar>& flat) {
    if (flat.size() != param_count()) throw DataError("mlp: flat parameter size mismatch");
    Index off = 0;
    for (auto& l : layers) {
      const Index dout = l.out_dim();
      for (Index j = 0; j < l.in_dim(); ++j) {
        for (Index r = 0; r < dout; ++r) l.W(r, j) = flat[off + j * dout + r];
      }
      if (l.has_bias()) {
        const Index j = l.in_dim();
        for (Index r = 0; r < dout; ++r) l.bias[r] = flat[off + j * dout + r];
      }
      off += l.param_count();
    }
  }
};

// Hidden layers ReLU, last layer identity (logits); He-style init driven by
// the counter PRF, biases zero.
template <typename Scalar>
MlpModel<Scalar> make_mlp(const std::vector<Index>& dims, std::uint64_t seed,
                          bool bias = true) {
  if (dims.size() < 2) throw ConfigError("mlp: need at least input and output dims");
  MlpModel<Scalar> model;
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    LinearLayer<Scalar> layer;
    const Index din = dims[l], dout = dims[l + 1];
    if (din <= 0 || dout <= 0) throw ConfigError("mlp: dims must be positive");
    layer.W.resize(dout, din);
    const double scale = std::sqrt(2.0 / static_cast<double>(din));
    for (Index j = 0; j < din; ++j) {
      for (Index r = 0; r < dout; ++r) {
        const std::uint64_t c = static_cast<std::uint64_t>(j * dout + r);
        layer.W(r, j) = static_cast<Scalar>(
            scale * rng::gaussian_from(
                        rng::draw(seed, rng::kWeightInit, 2 * c, l),
                        rng::draw(seed, rng::kWeightInit, 2 * c + 1, l)));
      }
    }
    if (bias) layer.bias = VecX<Scalar>::Zero(dout);
    layer.act = (l + 2 < dims.size()) ? Activation::ReLU : Activation::Identity;
    model.layers.push_back(std::move(layer));
  }
  model.validate();
  return model;
}

template <typename Scalar>
struct ForwardCache {
  // inputs[l] is the (unaugmented) input to layer l; inputs[L] is the output
  std::vector<MatX<Scalar>> inputs;
  std::vector<MatX<Scalar>> preacts;  // pre-activation of each layer
  const MatX<Scalar>& output() const { return inputs.back(); }
};

template <typename Scalar>
ForwardCache<Scalar> forward(const MlpModel<Scalar>& model, const MatX<Scalar>& x) {
  model.validate();
  if (x.rows() != model.input_dim()) throw DataError("forward: input dim mismatch");
  if (x.cols() < 1) throw DataError("forward: need at least one column");
  ForwardCache<Scalar> cache;
  cache.inputs.push_back(x);
  for (const auto& layer : model.layers) {
    MatX<Scalar> z = layer.W * cache.inputs.back();
    if (layer.has_bias()) z.colwise() += layer.bias;
    cache.preacts.push_back(z);
    if (layer.act == Activation::ReLU) z = z.cwiseMax(Scalar(0));
    cache.inputs.push_back(std::move(z));
  }
  return cache;
}

namespace detail {

// Column-wise softmax in double precision with the usual max shift.
template <typename Scalar>
MatX<Scalar> softmax(const MatX<Scalar>& logits) {
  MatX<Scalar> out(logits.rows(), logits.cols());
  for (Index t = 0; t < logits.cols(); ++t) {
    VecX<double> col = logits.col(t).template cast<double>();
    const double m = col.maxCoeff();
    VecX<double> e = (col.array() - m).exp();
    out.col(t) = (e / e.sum()).template cast<Scalar>();
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
struct PerSampleGrad {
  VecX<Scalar> flat;  // over all p params, flattening convention above
  std::vector<LinearLayerTrace<Scalar>> traces;
  double loss = 0;
};

namespace detail {

// Shared backward pass: dout is dloss/dlogits (d_out x T).
template <typename Scalar>
PerSampleGrad<Scalar> backward(const MlpModel<Scalar>& model,
                               const ForwardCache<Scalar>& cache,
                               MatX<Scalar> dout, double loss) {
  const size_t L = model.layers.size();
  PerSampleGrad<Scalar> out;
  out.loss = loss;
  if (!std::isfinite(loss)) throw NumericalError("per-sample loss is not finite");
  out.traces.resize(L);
  const Index T = dout.cols();

  std::vector<MatX<Scalar>> dz(L);
  for (size_t l = L; l-- > 0;) {
    dz[l] = dout;
    if (l > 0) {
      dout = model.layers[l].W.transpose() * dout;
      // ReLU of the previous layer gates the downstream gradient
      if (model.layers[l - 1].act == Activation::ReLU) {
        dout = (cache.preacts[l - 1].array() > Scalar(0))
                   .select(dout.array(), Scalar(0))
                   .matrix();
      }
    }
  }

  out.flat.resize(model.param_count());
  Index off = 0;
  for (size_t l = 0; l < L; ++l) {
    const auto& layer = model.layers[l];
    const Index din = layer.in_dim(), dout_dim = layer.out_dim();
    const Index aug = layer.aug_in_dim();
    LinearLayerTrace<Scalar>& tr = out.traces[l];
    tr.layer = static_cast<int>(l);
    tr.z_in.resize(aug, T);
    tr.z_in.topRows(din) = cache.inputs[l];
    if (layer.has_bias()) tr.z_in.row(din).setConstant(Scalar(1));
    tr.dz_out = dz[l];
    // Same nested loops as the trace materialization: j outer, r middle,
    // t inner ascending, plain Scalar accumulation.
    for (Index j = 0; j < aug; ++j) {
      for (Index r = 0; r < dout_dim; ++r) {
        Scalar acc(0);
        for (Index t = 0; t < T; ++t) acc += tr.z_in(j, t) * tr.dz_out(r, t);
        out.flat[off + j * dout_dim + r] = acc;
      }
    }
    off += layer.param_count();
  }
  return out;
}

}  // namespace detail

// Cross-entropy on a single-token sample.
template <typename Scalar>
PerSampleGrad<Scalar> per_sample_grad(const MlpModel<Scalar>& model,
                                      const VecX<Scalar>& x, int label) {
  if (label < 0 || label >= model.output_dim()) {
    throw DataError("per_sample_grad: label out of range");
  }
  ForwardCache<Scalar> cache = forward(model, MatX<Scalar>(x));
  const MatX<Scalar> probs = detail::softmax(cache.output());
  const double loss = -std::log(std::max(
      static_cast<double>(probs(label, 0)), 1e-300));
  MatX<Scalar> dout = probs;
  dout(label, 0) -= Scalar(1);
  return detail::backward(model, cache, std::move(dout), loss);
}

// Halved squared error over all tokens: loss = 0.5 * ||out - y||_F^2, so a
// single linear layer gives exactly vec((Wx - y) x^T).
template <typename Scalar>
PerSampleGrad<Scalar> per_sample_grad(const MlpModel<Scalar>& model,
                                      const MatX<Scalar>& x, const MatX<Scalar>& y) {
  if (y.rows() != model.output_dim() || y.cols() != x.cols()) {
    throw DataError("per_sample_grad: target shape mismatch");
  }
  ForwardCache<Scalar> cache = forward(model, x);
  MatX<Scalar> diff = cache.output() - y;
  const double loss = 0.5 * diff.template cast<double>().squaredNorm();
  return detail::backward(model, cache, std::move(diff), loss);
}

// ---------------------------------------------------------------------------
// Datasets.

template <typename Scalar>
struct Dataset {
  MatX<Scalar> features;   // n x d, row per sample
  std::vector<int> labels; // classification labels

  Index size() const { return features.rows(); }
  Index feature_dim() const { return features.cols(); }

  void validate() const {
    if (features.rows() < 1) throw DataError("dataset: empty");
    if (static_cast<Index>(labels.size()) != features.rows()) {
      throw DataError("dataset: label count mismatch");
    }
  }
};

// Two Gaussian blobs at +-separation along the first axis; labels alternate
// so any prefix or stride subset stays balanced. Label 1 sits on the
// positive side.
template <typename Scalar>
Dataset<Scalar> make_blobs(Index n, Index d, double separation, double sigma,
                           std::uint64_t seed) {
  if (n < 1 || d < 1) throw ConfigError("blobs: need n >= 1, d >= 1");
  Dataset<Scalar> ds;
  ds.features.resize(n, d);
  ds.labels.resize(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    ds.labels[static_cast<size_t>(i)] = y;
    for (Index j = 0; j < d; ++j) {
      const std::uint64_t c = static_cast<std::uint64_t>(i * d + j);
      const double noise =
          sigma * rng::gaussian_from(rng::draw(seed, rng::kDatasetNoise, 2 * c, 0),
                                     rng::draw(seed, rng::kDatasetNoise, 2 * c + 1, 0));
      const double center = (j == 0) ? (y == 1 ? separation : -separation) : 0.0;
      ds.features(i, j) = static_cast<Scalar>(center + noise);
    }
  }
  return ds;
}

// Two interleaved half circles in the plane plus isotropic noise.
template <typename Scalar>
Dataset<Scalar> make_moons(Index n, double noise, std::uint64_t seed) {
  if (n < 2) throw ConfigError("moons: need n >= 2");
  Dataset<Scalar> ds;
  ds.features.resize(n, 2);
  ds.labels.resize(static_cast<size_t>(n));
  const double pi = 3.14159265358979323846;
  for (Index i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    ds.labels[static_cast<size_t>(i)] = y;
    const Index rank = i / 2;
    const Index per_class = (n + 1 - y) / 2;
    const double t = pi * static_cast<double>(rank) /
                     static_cast<double>(std::max<Index>(per_class - 1, 1));
    double cx = std::cos(t), cy = std::sin(t);
    if (y == 1) {
      cx = 1.0 - cx;
      cy = 0.5 - cy;
    }
    const std::uint64_t c = static_cast<std::uint64_t>(i);
    const double nx = noise * rng::gaussian_from(rng::draw(seed, rng::kDatasetNoise, 4 * c, 1),
                                                 rng::draw(seed, rng::kDatasetNoise, 4 * c + 1, 1));
    const double ny = noise * rng::gaussian_from(rng::draw(seed, rng::kDatasetNoise, 4 * c + 2, 1),
                                                 rng::draw(seed, rng::kDatasetNoise, 4 * c + 3, 1));
    ds.features(i, 0) = static_cast<Scalar>(cx + nx);
    ds.features(i, 1) = static_cast<Scalar>(cy + ny);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  int epochs = 20;
  double lr = 0.1;
  int batch_size = 32;
  std::uint64_t seed = 0;
  Loss loss = Loss::CrossEntropy;
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean per-sample loss per epoch
  double final_loss = 0;
};

namespace detail {

// Mean batch loss and gradient via batched GEMMs. Targets: one-hot of
// labels under cross-entropy, rows of `targets` under squared error.
template <typename Scalar>
double batch_loss_grad(const MlpModel<Scalar>& model, const MatX<Scalar>& xb,
                       const std::vector<int>& yb, Loss loss,
                       VecX<Scalar>* grad) {
  const Index B = xb.cols();
  ForwardCache<Scalar> cache = forward(model, xb);
  MatX<Scalar> dout;
  double total_loss = 0;
  if (loss == Loss::CrossEntropy) {
    dout = detail::softmax(cache.output());
    for (Index t = 0; t < B; ++t) {
      const int y = yb[static_cast<size_t>(t)];
      total_loss += -std::log(std::max(static_cast<double>(dout(y, t)), 1e-300));
      dout(y, t) -= Scalar(1);
    }
  } else {
    throw ConfigError("batch_loss_grad: squared-error training expects targets");
  }
  dout /= static_cast<Scalar>(B);

  if (grad) {
    grad->resize(model.param_count());
    const size_t L = model.layers.size();
    std::vector<MatX<Scalar>> dz(L);
    MatX<Scalar> cur = std::move(dout);
    for (size_t l = L; l-- > 0;) {
      dz[l] = cur;
      if (l > 0) {
        cur = model.layers[l].W.transpose() * cur;
        if (model.layers[l - 1].act == Activation::ReLU) {
          cur = (cache.preacts[l - 1].array() > Scalar(0))
                    .select(cur.array(), Scalar(0))
                    .matrix();
        }
      }
    }
    Index off = 0;
    for (size_t l = 0; l < L; ++l) {
      const auto& layer = model.layers[l];
      const Index din = layer.in_dim(), dd = layer.out_dim();
      MatX<Scalar> gw = dz[l] * cache.inputs[l].transpose();  // d_out x d_in
      for (Index j = 0; j < din; ++j) {
        for (Index r = 0; r < dd; ++r) (*grad)[off + j * dd + r] = gw(r, j);
      }
      if (layer.has_bias()) {
        VecX<Scalar> gb = dz[l].rowwise().sum();
        for (Index r = 0; r < dd; ++r) (*grad)[off + din * dd + r] = gb[r];
      }
      off += layer.param_count();
    }
  }
  return total_loss / static_cast<double>(B);
}

}  // namespace detail

// Plain SGD over shuffled mini-batches; single-threaded, bit-deterministic
// in the seed. An optional subset restricts training to those rows (the
// counterfactual-retraining path).
template <typename Scalar>
TrainReport train_sgd(MlpModel<Scalar>& model, const Dataset<Scalar>& data,
                      const TrainConfig& cfg,
                      const std::vector<Index>* subset = nullptr) {
  model.validate();
  data.validate();
  if (cfg.lr < 0) throw ConfigError("sgd: lr must be >= 0");
  if (cfg.epochs < 0) throw ConfigError("sgd: epochs must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("sgd: batch size must be >= 1");
  if (cfg.loss != Loss::CrossEntropy) {
    throw ConfigError("sgd: only cross-entropy training is wired");
  }

  std::vector<Index> order;
  if (subset) {
    for (Index i : *subset) {
      if (i < 0 || i >= data.size()) throw DataError("sgd: subset index out of range");
      order.push_back(i);
    }
    if (order.empty()) throw DataError("sgd: empty training subset");
  } else {
    for (Index i = 0; i < data.size(); ++i) order.push_back(i);
  }

  const Index n = static_cast<Index>(order.size());
  const Index d = data.feature_dim();
  TrainReport report;
  VecX<Scalar> grad;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates on the counter PRF: same seed, same visit order.
    for (Index i = n - 1; i > 0; --i) {
      const std::uint64_t c =
          static_cast<std::uint64_t>(epoch) * 0x100000000ull +
          static_cast<std::uint64_t>(i);
      const Index j = static_cast<Index>(
          rng::bounded(rng::draw(cfg.seed, rng::kShuffle, c, 0),
                       static_cast<std::uint64_t>(i) + 1));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    double epoch_loss = 0;
    Index seen = 0;
    for (Index start = 0; start < n; start += cfg.batch_size) {
      const Index B = std::min<Index>(cfg.batch_size, n - start);
      MatX<Scalar> xb(d, B);
      std::vector<int> yb(static_cast<size_t>(B));
      for (Index t = 0; t < B; ++t) {
        const Index row = order[static_cast<size_t>(start + t)];
        xb.col(t) = data.features.row(row).transpose();
        yb[static_cast<size_t>(t)] = data.labels[static_cast<size_t>(row)];
      }
      const double loss = detail::batch_loss_grad(model, xb, yb, cfg.loss, &grad);
      if (!std::isfinite(loss)) {
        throw NumericalError("sgd diverged at epoch " + std::to_string(epoch));
      }
      epoch_loss += loss * static_cast<double>(B);
      seen += B;
      if (cfg.lr != 0) {
        VecX<Scalar> flat = model.flatten();
        flat -= static_cast<Scalar>(cfg.lr) * grad;
        model.unflatten(flat);
      }
    }
    report.epoch_loss.push_back(epoch_loss / static_cast<double>(seen));
  }
  report.final_loss = report.epoch_loss.empty() ? 0.0 : report.epoch_loss.back();
  return report;
}

// Mean cross-entropy loss and accuracy over a dataset (no gradients).
template <typename Scalar>
std::pair<double, double> evaluate(const MlpModel<Scalar>& model,
                                   const Dataset<Scalar>& data) {
  data.validate();
  double loss = 0;
  Index correct = 0;
  for (Index i = 0; i < data.size(); ++i) {
    const VecX<Scalar> x = data.features.row(i).transpose();
    ForwardCache<Scalar> cache = forward(model, MatX<Scalar>(x));
    const MatX<Scalar> probs = detail::softmax(cache.output());
    const int y = data.labels[static_cast<size_t>(i)];
    loss += -std::log(std::max(static_cast<double>(probs(y, 0)), 1e-300));
    Index argmax = 0;
    probs.col(0).maxCoeff(&argmax);
    correct += (static_cast<int>(argmax) == y) ? 1 : 0;
  }
  return {loss / static_cast<double>(data.size()),
          static_cast<double>(correct) / static_cast<double>(data.size())};
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "GMLP", version, layer count, then per layer the dims,
// an activation tag, a bias flag, and the row-major f32 weights (bias last).
// f32 on disk regardless of the in-memory scalar, matching the training
// default.

inline void model_write(const std::string& path, const MlpModel<float>& model) {
  model.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path);
  io::write_magic(out, "GMLP");
  io::write_u32(out, 1);  // version
  io::write_u64(out, static_cast<std::uint64_t>(model.layers.size()));
  for (const auto& l : model.layers) {
    io::write_u64(out, static_cast<std::uint64_t>(l.in_dim()));
    io::write_u64(out, static_cast<std::uint64_t>(l.out_dim()));
    io::write_u32(out, l.act == Activation::ReLU ? 1u : 0u);
    io::write_u32(out, l.has_bias() ? 1u : 0u);
    for (Index r = 0; r < l.out_dim(); ++r) {
      for (Index j = 0; j < l.in_dim(); ++j) io::write_f32(out, l.W(r, j));
    }
    for (Index r = 0; r < l.bias.size(); ++r) io::write_f32(out, l.bias[r]);
  }
  out.flush();
  if (!out) throw DataError("cannot write checkpoint " + path);
}

inline MlpModel<float> model_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  io::expect_magic(in, "GMLP", "checkpoint");
  const std::uint32_t version = io::read_u32(in, "checkpoint");
  if (version != 1) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t L = io::read_u64(in, "checkpoint");
  if (L == 0 || L > 4096) {
    throw DataError("checkpoint has an implausible layer count");
  }
  MlpModel<float> model;
  model.layers.resize(static_cast<size_t>(L));
  for (auto& l : model.layers) {
    const std::uint64_t din = io::read_u64(in, "checkpoint");
    const std::uint64_t dout = io::read_u64(in, "checkpoint");
    if (din == 0 || dout == 0 || din > (1ull << 24) || dout > (1ull << 24)) {
      throw DataError("checkpoint has an implausible layer shape");
    }
    const std::uint32_t act = io::read_u32(in, "checkpoint");
    if (act > 1) throw DataError("unknown checkpoint activation tag " + std::to_string(act));
    l.act = act == 1 ? Activation::ReLU : Activation::Identity;
    const std::uint32_t has_bias = io::read_u32(in, "checkpoint");
    if (has_bias > 1) throw DataError("bad checkpoint bias flag");
    l.W.resize(static_cast<Index>(dout), static_cast<Index>(din));
    for (Index r = 0; r < l.W.rows(); ++r) {
      for (Index j = 0; j < l.W.cols(); ++j) {
        l.W(r, j) = io::read_f32(in, "checkpoint");
      }
    }
    if (has_bias == 1) {
      l.bias.resize(static_cast<Index>(dout));
      for (Index r = 0; r < l.bias.size(); ++r) {
        l.bias[r] = io::read_f32(in, "checkpoint");
      }
    }
  }
  io::expect_eof(in, "checkpoint");
  model.validate();
  return model;
}

// ---------------------------------------------------------------------------
// IDX ingestion: the classic big-endian image/label container. Magic is
// two zero bytes, a dtype byte, and a dim-count byte; only the u8 dtype
// (0x08) is supported here. Values land in [0, 1] as feature matrices.

struct IdxTensor {
  std::vector<Index> dims;
  std::vector<std::uint8_t> bytes;
};

inline IdxTensor read_idx_u8(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open idx file " + path);
  const std::uint32_t magic = io::read_u32_be(in, "idx file");
  if ((magic >> 16) != 0) throw DataError("not an idx file (bad magic)");
  const std::uint32_t dtype = (magic >> 8) & 0xff;
  if (dtype != 0x08) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "0x%02x", dtype);
    throw DataError("unsupported idx dtype " + std::string(buf));
  }
  const std::uint32_t ndims = magic & 0xff;
  if (ndims == 0) throw DataError("idx file declares zero dimensions");
  IdxTensor t;
  std::uint64_t total = 1;
  for (std::uint32_t d = 0; d < ndims; ++d) {
    const std::uint32_t dim = io::read_u32_be(in, "idx file");
    total *= dim;
    if (dim == 0 || total > (1ull << 32)) {
      throw DataError("idx tensor shape overflows");
    }
    t.dims.push_back(static_cast<Index>(dim));
  }
  t.bytes.resize(static_cast<size_t>(total));
  io::read_bytes(in, t.bytes.data(), t.bytes.size(), "idx file");
  io::expect_eof(in, "idx file");
  return t;
}

// Feature tensor (n x rest, trailing dims flattened, scaled by 1/255) plus
// a 1-d label tensor of matching length.
inline Dataset<float> make_idx_dataset(const std::string& features_path,
                                       const std::string& labels_path) {
  const IdxTensor feat = read_idx_u8(features_path);
  const IdxTensor lab = read_idx_u8(labels_path);
  if (feat.dims.size() < 2) {
    throw DataError("idx features need at least 2 dims, got " +
                    std::to_string(feat.dims.size()));
  }
  if (lab.dims.size() != 1) {
    throw DataError("idx labels must be 1-d, got " + std::to_string(lab.dims.size()) +
                    " dims");
  }
  const Index n = feat.dims[0];
  if (lab.dims[0] != n) {
    throw DataError("idx label count " + std::to_string(lab.dims[0]) +
                    " does not match " + std::to_string(n) + " samples");
  }
  Index d = 1;
  for (size_t i = 1; i < feat.dims.size(); ++i) d *= feat.dims[i];
  Dataset<float> ds;
  ds.features.resize(n, d);
  ds.labels.resize(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) {
      ds.features(i, j) =
          static_cast<float>(feat.bytes[static_cast<size_t>(i * d + j)]) / 255.0f;
    }
    ds.labels[static_cast<size_t>(i)] = static_cast<int>(lab.bytes[static_cast<size_t>(i)]);
  }
  return ds;
}

}  // namespace grasskit
