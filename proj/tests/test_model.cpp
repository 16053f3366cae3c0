// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "grasskit/model.hpp"

using namespace grasskit;

namespace {

template <typename Scalar>
VecX<Scalar> random_vec_m(Index n, std::uint64_t seed) {
  VecX<Scalar> v(n);
  for (Index i = 0; i < n; ++i) {
    const std::uint64_t c = static_cast<std::uint64_t>(i);
    v[i] = static_cast<Scalar>(rng::gaussian_from(rng::draw(seed, 970, c, 0),
                                                  rng::draw(seed, 970, c, 1)));
  }
  return v;
}

template <typename Scalar>
MatX<Scalar> random_mat_m(Index r, Index c, std::uint64_t seed) {
  MatX<Scalar> m(r, c);
  for (Index i = 0; i < r; ++i) {
    for (Index j = 0; j < c; ++j) {
      const std::uint64_t idx = static_cast<std::uint64_t>(i * c + j);
      m(i, j) = static_cast<Scalar>(rng::gaussian_from(rng::draw(seed, 971, idx, 0),
                                                       rng::draw(seed, 971, idx, 1)));
    }
  }
  return m;
}

// CE loss at the given flat parameters, for finite differences.
double loss_at(MlpModel<double> model, const Eigen::VectorXd& flat,
               const Eigen::VectorXd& x, int label) {
  model.unflatten(flat);
  return per_sample_grad(model, x, label).loss;
}

}  // namespace

TEST_CASE("zero weights give zero logits") {
  MlpModel<double> m = make_mlp<double>({4, 3}, 1);
  m.layers[0].W.setZero();
  VecX<double> x = random_vec_m<double>(4, 1);
  CHECK(forward(m, MatX<double>(x)).output().isZero(0.0));
}

TEST_CASE("single identity layer passes input through") {
  MlpModel<double> m;
  LinearLayer<double> l;
  l.W = Eigen::MatrixXd::Identity(5, 5);
  l.act = Activation::Identity;
  m.layers.push_back(l);
  VecX<double> x = random_vec_m<double>(5, 2);
  CHECK(forward(m, MatX<double>(x)).output().col(0) == x);
}

TEST_CASE("forward rejects shape mismatches and bad labels") {
  MlpModel<double> m = make_mlp<double>({4, 6, 3}, 3);
  CHECK_THROWS_AS(forward(m, MatX<double>(random_vec_m<double>(5, 3))), DataError);
  CHECK_THROWS_AS(per_sample_grad(m, random_vec_m<double>(4, 4), 3), DataError);
  CHECK_THROWS_AS(per_sample_grad(m, random_vec_m<double>(4, 4), -1), DataError);
  MlpModel<double> bad = m;
  bad.layers[1].W.resize(3, 7);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("per-sample gradient matches central finite differences (f64)") {
  MlpModel<double> m = make_mlp<double>({6, 8, 4}, 7);
  const Eigen::VectorXd flat0 = m.flatten();
  const Index p = m.param_count();
  const double eps = 1e-6;

  for (int s = 0; s < 10; ++s) {
    VecX<double> x = random_vec_m<double>(6, 100 + s);
    const int label = s % 4;
    PerSampleGrad<double> g = per_sample_grad(m, x, label);
    for (int t = 0; t < 20; ++t) {
      const Index j = static_cast<Index>(
          rng::bounded(rng::draw(55, 972, static_cast<std::uint64_t>(s * 20 + t), 0),
                       static_cast<std::uint64_t>(p)));
      Eigen::VectorXd up = flat0, dn = flat0;
      up[j] += eps;
      dn[j] -= eps;
      const double fd = (loss_at(m, up, x, label) - loss_at(m, dn, x, label)) / (2 * eps);
      const double scale = std::max({std::abs(fd), std::abs(g.flat[j]), 1e-8});
      CHECK(std::abs(fd - g.flat[j]) / scale <= 1e-4);
    }
  }
}

TEST_CASE("directional derivative matches the gradient (f64) and loosely (f32)") {
  MlpModel<double> m = make_mlp<double>({5, 9, 3}, 11);
  VecX<double> x = random_vec_m<double>(5, 200);
  PerSampleGrad<double> g = per_sample_grad(m, x, 1);
  Eigen::VectorXd v = random_vec_m<double>(m.param_count(), 201);
  v.normalize();
  const double eps = 1e-6;
  const Eigen::VectorXd flat0 = m.flatten();
  const double fd =
      (loss_at(m, flat0 + eps * v, x, 1) - loss_at(m, flat0 - eps * v, x, 1)) / (2 * eps);
  CHECK(std::abs(fd - g.flat.dot(v)) / std::max(std::abs(fd), 1e-8) <= 1e-4);

  MlpModel<float> mf = make_mlp<float>({5, 9, 3}, 11);
  VecX<float> xf = x.cast<float>();
  PerSampleGrad<float> gf = per_sample_grad(mf, xf, 1);
  CHECK((gf.flat.cast<double>() - g.flat).norm() <= 1e-2 * g.flat.norm());
}

TEST_CASE("single linear layer squared error has the closed-form gradient") {
  MlpModel<double> m;
  LinearLayer<double> l;
  l.W = random_mat_m<double>(2, 2, 20);
  l.act = Activation::Identity;
  m.layers.push_back(l);
  MatX<double> x = random_mat_m<double>(2, 1, 21);
  MatX<double> y = random_mat_m<double>(2, 1, 22);
  PerSampleGrad<double> g = per_sample_grad(m, x, y);
  Eigen::MatrixXd closed = (m.layers[0].W * x - y) * x.transpose();  // d_out x d_in
  for (Index j = 0; j < 2; ++j) {
    for (Index r = 0; r < 2; ++r) CHECK(g.flat[j * 2 + r] == doctest::Approx(closed(r, j)).epsilon(1e-14));
  }
  CHECK(g.loss == doctest::Approx(0.5 * (m.layers[0].W * x - y).squaredNorm()));
}

TEST_CASE("all-negative first-layer preactivations zero its gradient slice") {
  MlpModel<double> m = make_mlp<double>({4, 6, 3}, 30);
  m.layers[0].W = -m.layers[0].W.cwiseAbs();
  m.layers[0].bias.setConstant(-1.0);
  VecX<double> x = random_vec_m<double>(4, 300).cwiseAbs();  // positive input
  PerSampleGrad<double> g = per_sample_grad(m, x, 0);
  const auto off = m.layer_offsets();
  CHECK(g.flat.segment(off[0].first, off[0].second).isZero(0.0));
  CHECK(g.traces[0].dz_out.isZero(0.0));
  // the second layer still learns its bias path
  CHECK(g.flat.segment(off[1].first, off[1].second).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("flat layer slices equal the trace outer-product sums bitwise") {
  MlpModel<double> m = make_mlp<double>({5, 7, 6, 3}, 40);
  const auto off = m.layer_offsets();

  auto check_sample = [&](const PerSampleGrad<double>& g) {
    for (size_t l = 0; l < m.layers.size(); ++l) {
      const auto& tr = g.traces[l];
      const Index aug = tr.z_in.rows(), dout = tr.dz_out.rows(), T = tr.z_in.cols();
      REQUIRE(aug == m.layers[l].aug_in_dim());
      Eigen::VectorXd want(aug * dout);
      for (Index j = 0; j < aug; ++j) {
        for (Index r = 0; r < dout; ++r) {
          double acc = 0;
          for (Index t = 0; t < T; ++t) acc += tr.z_in(j, t) * tr.dz_out(r, t);
          want[j * dout + r] = acc;
        }
      }
      const Eigen::VectorXd got = g.flat.segment(off[l].first, off[l].second);
      CHECK(got == want);  // same ops, same order: bitwise
    }
  };

  // multi-token squared error exercises the sum over T
  for (int s = 0; s < 8; ++s) {
    MatX<double> x = random_mat_m<double>(5, 4, 400 + s);
    MatX<double> y = random_mat_m<double>(3, 4, 500 + s);
    check_sample(per_sample_grad(m, x, y));
  }
  // single-token cross-entropy
  for (int s = 0; s < 8; ++s) {
    check_sample(per_sample_grad(m, random_vec_m<double>(5, 600 + s), s % 3));
  }
}

TEST_CASE("batch gradient equals the mean of per-sample gradients") {
  MlpModel<double> m = make_mlp<double>({6, 10, 2}, 50);
  const Index B = 16;
  MatX<double> xb = random_mat_m<double>(6, B, 700);
  std::vector<int> yb;
  for (Index t = 0; t < B; ++t) yb.push_back(static_cast<int>(t % 2));

  VecX<double> batch;
  detail::batch_loss_grad(m, xb, yb, Loss::CrossEntropy, &batch);

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(m.param_count());
  for (Index t = 0; t < B; ++t) {
    mean += per_sample_grad(m, VecX<double>(xb.col(t)), yb[static_cast<size_t>(t)]).flat;
  }
  mean /= static_cast<double>(B);
  CHECK((batch - mean).norm() <= 1e-6 * mean.norm());
}

TEST_CASE("per-sample gradients are sparse; batch means much less so") {
  MlpModel<float> m = make_mlp<float>({16, 32, 32, 4}, 60);
  const Index p = m.param_count();
  double nnz_sum = 0;
  Eigen::VectorXf mean = Eigen::VectorXf::Zero(p);
  const int B = 64;
  for (int s = 0; s < B; ++s) {
    PerSampleGrad<float> g = per_sample_grad(m, random_vec_m<float>(16, 800 + s), s % 4);
    const auto gv = GradientVector<float>::dense(g.flat);
    nnz_sum += static_cast<double>(gv.nnz()) / static_cast<double>(p);
    mean += g.flat;
  }
  const double per_sample_nnz = nnz_sum / B;
  mean /= static_cast<float>(B);
  const double batch_nnz =
      static_cast<double>(GradientVector<float>::dense(mean).nnz()) /
      static_cast<double>(p);
  CHECK(per_sample_nnz < 0.9);
  CHECK(batch_nnz > per_sample_nnz);
}

TEST_CASE("flatten and unflatten round-trip with the documented layout") {
  MlpModel<double> m = make_mlp<double>({3, 4, 2}, 70);
  const Eigen::VectorXd flat = m.flatten();
  CHECK(flat.size() == m.param_count());
  CHECK(m.param_count() == 4 * (3 + 1) + 2 * (4 + 1));
  const auto off = m.layer_offsets();
  CHECK(off[0].first == 0);
  CHECK(off[1].first == 16);
  // spot checks of the column-major convention, bias as last column
  CHECK(flat[0 * 4 + 1] == m.layers[0].W(1, 0));
  CHECK(flat[2 * 4 + 3] == m.layers[0].W(3, 2));
  CHECK(flat[3 * 4 + 2] == m.layers[0].bias[2]);
  CHECK(flat[16 + 1 * 2 + 0] == m.layers[1].W(0, 1));

  MlpModel<double> m2 = make_mlp<double>({3, 4, 2}, 71);
  m2.unflatten(flat);
  CHECK(m2.flatten() == flat);
  CHECK(m2.layers[0].W == m.layers[0].W);
  CHECK(m2.layers[1].bias == m.layers[1].bias);
}

TEST_CASE("lr=0 leaves parameters bit-identical") {
  MlpModel<float> m = make_mlp<float>({4, 8, 2}, 80);
  const VecX<float> before = m.flatten();
  Dataset<float> ds = make_blobs<float>(64, 4, 1.0, 0.5, 81);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 0.0;
  TrainReport rep = train_sgd(m, ds, cfg);
  CHECK(m.flatten() == before);
  CHECK(rep.epoch_loss.size() == 3);
}

TEST_CASE("training is bit-deterministic in the seed") {
  Dataset<float> ds = make_blobs<float>(128, 6, 1.5, 0.8, 90);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.lr = 0.05;
  cfg.seed = 17;
  MlpModel<float> a = make_mlp<float>({6, 12, 2}, 91);
  MlpModel<float> b = make_mlp<float>({6, 12, 2}, 91);
  TrainReport ra = train_sgd(a, ds, cfg);
  TrainReport rb = train_sgd(b, ds, cfg);
  CHECK(a.flatten() == b.flatten());
  CHECK(ra.epoch_loss == rb.epoch_loss);
  // a different shuffle seed gives a different trajectory
  cfg.seed = 18;
  MlpModel<float> c = make_mlp<float>({6, 12, 2}, 91);
  train_sgd(c, ds, cfg);
  CHECK(c.flatten() != a.flatten());
}

TEST_CASE("separable blobs reach 99 percent train accuracy in 20 epochs") {
  Dataset<float> ds = make_blobs<float>(200, 8, 2.0, 0.5, 95);
  MlpModel<float> m = make_mlp<float>({8, 16, 2}, 96);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.lr = 0.1;
  cfg.seed = 1;
  TrainReport rep = train_sgd(m, ds, cfg);
  CHECK(rep.epoch_loss.front() > rep.epoch_loss.back());
  auto [loss, acc] = evaluate(m, ds);
  CHECK(acc >= 0.99);
  CHECK(loss < 0.2);
}

TEST_CASE("divergence raises an error naming the epoch") {
  Dataset<float> ds = make_blobs<float>(64, 4, 1.0, 0.5, 97);
  MlpModel<float> m = make_mlp<float>({4, 8, 2}, 98);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.lr = 1e12;
  CHECK_THROWS_WITH_AS(train_sgd(m, ds, cfg), doctest::Contains("epoch"),
                       NumericalError);
}

TEST_CASE("subset training only sees the chosen rows") {
  Dataset<float> ds = make_blobs<float>(100, 4, 1.0, 0.5, 99);
  std::vector<Index> subset;
  for (Index i = 0; i < 50; ++i) subset.push_back(i);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.lr = 0.05;
  MlpModel<float> a = make_mlp<float>({4, 8, 2}, 100);
  MlpModel<float> b = make_mlp<float>({4, 8, 2}, 100);
  train_sgd(a, ds, cfg, &subset);
  train_sgd(b, ds, cfg, &subset);
  CHECK(a.flatten() == b.flatten());  // deterministic under subsets too
  MlpModel<float> c = make_mlp<float>({4, 8, 2}, 100);
  train_sgd(c, ds, cfg);
  CHECK(c.flatten() != a.flatten());
  std::vector<Index> bad = {0, 200};
  MlpModel<float> d = make_mlp<float>({4, 8, 2}, 100);
  CHECK_THROWS_AS(train_sgd(d, ds, cfg, &bad), DataError);
}

TEST_CASE("noiseless blobs label exactly by the sign of the first coordinate") {
  Dataset<double> ds = make_blobs<double>(10, 3, 1.0, 0.0, 101);
  for (Index i = 0; i < ds.size(); ++i) {
    CHECK((ds.features(i, 0) > 0) == (ds.labels[static_cast<size_t>(i)] == 1));
    CHECK(ds.features(i, 1) == 0.0);
  }
  // determinism: the same seed reproduces features bit-identically
  Dataset<double> again = make_blobs<double>(10, 3, 1.0, 0.0, 101);
  CHECK(again.features == ds.features);
  Dataset<double> noisy = make_blobs<double>(10, 3, 1.0, 0.3, 101);
  Dataset<double> noisy2 = make_blobs<double>(10, 3, 1.0, 0.3, 101);
  CHECK(noisy.features == noisy2.features);
  CHECK(noisy.features != ds.features);
}

TEST_CASE("two moons come out balanced and bounded") {
  Dataset<double> ds = make_moons<double>(101, 0.05, 102);
  CHECK(ds.size() == 101);
  Index ones = 0;
  for (int y : ds.labels) ones += y;
  CHECK(ones == 50);
  CHECK(ds.features.array().abs().maxCoeff() < 3.0);
  MlpModel<float> m = make_mlp<float>({2, 16, 2}, 103);
  Dataset<float> dsf = make_moons<float>(200, 0.05, 104);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.lr = 0.2;
  train_sgd(m, dsf, cfg);
  auto [loss, acc] = evaluate(m, dsf);
  CHECK(acc >= 0.9);
}

TEST_CASE("checkpoints round-trip bit-exactly and reject corruption") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "grasskit-model-test";
  fs::create_directories(dir);
  const std::string path = (dir / "model.gmlp").string();

  MlpModel<float> m = make_mlp<float>({5, 9, 3}, 105);
  model_write(path, m);
  const MlpModel<float> back = model_read(path);
  REQUIRE(back.layers.size() == m.layers.size());
  CHECK(back.flatten() == m.flatten());
  CHECK(back.layers[0].act == Activation::ReLU);
  CHECK(back.layers[1].act == Activation::Identity);

  // rewriting the loaded model reproduces the file byte for byte
  const std::string path2 = (dir / "model2.gmlp").string();
  model_write(path2, back);
  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  };
  const std::string bytes = slurp(path);
  CHECK(bytes == slurp(path2));

  // a bias-free model keeps its empty bias on reload
  MlpModel<float> lean = make_mlp<float>({4, 6}, 106, false);
  model_write(path2, lean);
  CHECK_FALSE(model_read(path2).layers[0].has_bias());

  auto rewrite = [&](std::string b) {
    std::ofstream out(path2, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  std::string bad = bytes;
  bad[0] = 'X';
  rewrite(bad);
  CHECK_THROWS_WITH_AS(model_read(path2), "not a checkpoint (bad magic)", DataError);
  bad = bytes;
  bad[4] = 9;  // version
  rewrite(bad);
  CHECK_THROWS_WITH_AS(model_read(path2), "unsupported checkpoint version 9", DataError);
  rewrite(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_WITH_AS(model_read(path2), "checkpoint is truncated", DataError);
  rewrite(bytes + "zz");
  CHECK_THROWS_WITH_AS(model_read(path2), "checkpoint has trailing bytes", DataError);
  CHECK_THROWS_WITH_AS(model_read((dir / "missing.gmlp").string()),
                       doctest::Contains("cannot open checkpoint"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("idx files parse per the big-endian layout") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "grasskit-idx-test";
  fs::create_directories(dir);
  const std::string fpath = (dir / "feat.idx").string();
  const std::string lpath = (dir / "lab.idx").string();

  auto write_file = [](const std::string& p, const std::vector<std::uint8_t>& b) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(b.data()),
              static_cast<std::streamsize>(b.size()));
  };
  // 4 samples of 2x2 u8 images: magic 0x00000803, dims 4,2,2
  std::vector<std::uint8_t> feat = {0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 2, 0, 0, 0, 2};
  for (int v = 0; v < 16; ++v) feat.push_back(static_cast<std::uint8_t>(v * 16));
  // labels: magic 0x00000801, dim 4
  std::vector<std::uint8_t> lab = {0, 0, 8, 1, 0, 0, 0, 4, 1, 0, 1, 2};
  write_file(fpath, feat);
  write_file(lpath, lab);

  const IdxTensor t = read_idx_u8(fpath);
  CHECK(t.dims == std::vector<Index>{4, 2, 2});
  CHECK(t.bytes.size() == 16);

  const Dataset<float> ds = make_idx_dataset(fpath, lpath);
  CHECK(ds.size() == 4);
  CHECK(ds.feature_dim() == 4);
  CHECK(ds.labels == std::vector<int>{1, 0, 1, 2});
  CHECK(ds.features(0, 0) == 0.0f);
  CHECK(ds.features(0, 1) == 16.0f / 255.0f);
  CHECK(ds.features.minCoeff() >= 0.0f);
  CHECK(ds.features.maxCoeff() <= 1.0f);

  // corruption battery
  std::vector<std::uint8_t> bad = feat;
  bad[0] = 1;  // magic prefix must be zero
  write_file(fpath, bad);
  CHECK_THROWS_WITH_AS(read_idx_u8(fpath), "not an idx file (bad magic)", DataError);
  bad = feat;
  bad[2] = 0x0d;  // f32 dtype unsupported
  write_file(fpath, bad);
  CHECK_THROWS_WITH_AS(read_idx_u8(fpath), "unsupported idx dtype 0x0d", DataError);
  bad = feat;
  bad.pop_back();
  write_file(fpath, bad);
  CHECK_THROWS_WITH_AS(read_idx_u8(fpath), "idx file is truncated", DataError);
  bad = feat;
  bad.push_back(0);
  write_file(fpath, bad);
  CHECK_THROWS_WITH_AS(read_idx_u8(fpath), "idx file has trailing bytes", DataError);

  // label/sample count mismatch
  std::vector<std::uint8_t> shortlab = {0, 0, 8, 1, 0, 0, 0, 3, 1, 0, 1};
  write_file(fpath, feat);
  write_file(lpath, shortlab);
  CHECK_THROWS_WITH_AS(make_idx_dataset(fpath, lpath),
                       "idx label count 3 does not match 4 samples", DataError);
  fs::remove_all(dir);
}
