#include "cmkt/data.hpp"
#include "cmkt/diag.hpp"
#include "cmkt/eval.hpp"
#include "cmkt/losses.hpp"
#include "cmkt/nn.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace cmkt;

TEST_CASE("substrate forward/backward matches finite differences") {
  nn::ArchitectureSpec spec;
  spec.input_shape = {1, 8, 8};
  spec.layers.push_back({nn::ConvSpec{3, 3, 1, 0, true}, ""});
  spec.layers.push_back({nn::ActSpec{"relu"}, ""});
  spec.layers.push_back({nn::PoolSpec{2, 2}, ""});
  spec.layers.push_back({nn::FlattenSpec{}, "flatten"});
  spec.layers.push_back({nn::DenseSpec{1}, ""});
  spec.layers.push_back({nn::ActSpec{"sigmoid"}, ""});
  auto model = nn::build_model(spec, 42);

  Rng rng(7);
  Mat x(4, 64);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
  IVec labels(4);
  labels << 0, 1, 0, 1;

  Mat y = model.forward(x);
  REQUIRE(y.rows() == 4);
  REQUIRE(y.cols() == 1);

  model.train();
  model.zero_grad();
  Mat out = model.forward(x);
  auto bce = losses::weighted_bce_grad(out.col(0), labels, {1.5, 0.5});
  model.backward(Mat(bce.grad));
  const Vec analytic = model.flat_grads();
  Vec p = model.flat_params();
  model.eval();

  const double h = 1e-6;
  double max_rel = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    Vec pp = p;
    pp[k] += h;
    model.set_flat_params(pp);
    const double lp = losses::weighted_bce(model.forward(x).col(0), labels, {1.5, 0.5});
    pp[k] = p[k] - h;
    model.set_flat_params(pp);
    const double lm = losses::weighted_bce(model.forward(x).col(0), labels, {1.5, 0.5});
    const double fd = (lp - lm) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(analytic[k]), 1e-8});
    max_rel = std::max(max_rel, std::abs(fd - analytic[k]) / denom);
  }
  model.set_flat_params(p);
  INFO("max relative error " << max_rel);
  REQUIRE(max_rel < 1e-4);
}

TEST_CASE("data and diagnostics basics") {
  data::SyntheticConfig cfg;
  cfg.n_samples = 8;
  cfg.seed = 3;
  auto samples = data::generate_synthetic(cfg);
  REQUIRE(samples.size() == 8);
  auto t = data::to_tensors(samples);
  REQUIRE(t.visual.rows() == 8);
  REQUIRE(t.visual.cols() == 6400);

  Mat x = Mat::Random(5, 3);
  REQUIRE(diag::mmd(x, x) <= 1e-12);
}
