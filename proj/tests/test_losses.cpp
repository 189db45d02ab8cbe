#include "cmkt/losses.hpp"

#include "cmkt/nn.hpp"
#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace cmkt;
using namespace cmkt::losses;

namespace {

// Brute-force pair enumeration, one scalar at a time.
double alignment_oracle(const Mat& u, const IVec& yu, const Mat& v, const IVec& yv) {
  double sum = 0.0;
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    for (Eigen::Index j = 0; j < v.rows(); ++j) {
      if (yu[i] != yv[j]) continue;
      double d2 = 0.0;
      for (Eigen::Index k = 0; k < u.cols(); ++k) {
        d2 += (u(i, k) - v(j, k)) * (u(i, k) - v(j, k));
      }
      sum += d2 / 2.0;
      ++count;
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

double separation_oracle(const Mat& u, const IVec& yu, const Mat& v, const IVec& yv, double m) {
  double sum = 0.0;
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    for (Eigen::Index j = 0; j < v.rows(); ++j) {
      if (yu[i] == yv[j]) continue;
      double d2 = 0.0;
      for (Eigen::Index k = 0; k < u.cols(); ++k) {
        d2 += (u(i, k) - v(j, k)) * (u(i, k) - v(j, k));
      }
      const double shortfall = std::max(0.0, m - std::sqrt(d2));
      sum += shortfall * shortfall / 2.0;
      ++count;
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

nn::EncodedBatch batch_of(const Mat& m, const IVec& y, nn::Modality mod) {
  return nn::EncodedBatch{m, y, mod};
}

IVec labels_of(std::initializer_list<int> v) {
  IVec y(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (int x : v) y[i++] = x;
  return y;
}

}  // namespace

TEST_CASE("pair_distance") {
  Vec u(2), v(2);
  u << 0, 0;
  v << 3, 4;
  CHECK(pair_distance(u, v) == 12.5);
  CHECK(pair_distance(u, u) == 0.0);

  Rng rng(4);
  Vec a(10), b(10);
  for (int i = 0; i < 10; ++i) {
    a[i] = rng.uniform(-2, 2);
    b[i] = rng.uniform(-2, 2);
  }
  double oracle = 0.0;
  for (int i = 0; i < 10; ++i) oracle += (a[i] - b[i]) * (a[i] - b[i]);
  oracle /= 2.0;
  CHECK(std::abs(pair_distance(a, b) - oracle) < 1e-12);

  Vec w(3);
  CHECK_THROWS_AS(pair_distance(u, w), Error);
}

TEST_CASE("pair_similarity") {
  Vec u(2), v(2);
  u << 0, 0;
  v << 2, 0;
  CHECK(pair_similarity(u, v, 1.0) == 0.0);  // distance beyond the margin
  v << 0.5, 0;
  CHECK(pair_similarity(u, v, 1.0) == Catch::Approx(0.125));
  CHECK(pair_similarity(u, u, 1.0) == 0.5);
}

TEST_CASE("semantic alignment loss") {
  // one same-class pair at distance zero
  Mat a(1, 2), b(1, 2);
  a << 1, 2;
  b << 1, 2;
  auto ev = batch_of(a, labels_of({0}), nn::Modality::visual);
  auto ea = batch_of(b, labels_of({0}), nn::Modality::audio);
  CHECK(semantic_alignment_loss(ev, ea) == 0.0);

  // one pair at squared distance 25
  Mat v0(1, 2), a0(1, 2);
  v0 << 0, 0;
  a0 << 3, 4;
  CHECK(semantic_alignment_loss(batch_of(v0, labels_of({0}), nn::Modality::visual),
                                batch_of(a0, labels_of({0}), nn::Modality::audio)) == 12.5);

  Rng rng(9);
  const Mat u = testutil::random_matrix(4, 5, rng);
  const Mat w = testutil::random_matrix(4, 5, rng);
  const IVec yu = labels_of({0, 1, 0, 1});
  const IVec yw = labels_of({1, 1, 0, 0});
  const double got = semantic_alignment_loss(batch_of(u, yu, nn::Modality::visual),
                                             batch_of(w, yw, nn::Modality::audio));
  CHECK(std::abs(got - alignment_oracle(u, yu, w, yw)) < 1e-10);

  SECTION("permutation invariance") {
    Mat u2 = u, w2 = w;
    IVec yu2 = yu, yw2 = yw;
    u2.row(0).swap(u2.row(3));
    std::swap(yu2[0], yu2[3]);
    w2.row(1).swap(w2.row(2));
    std::swap(yw2[1], yw2[2]);
    const double permuted = semantic_alignment_loss(batch_of(u2, yu2, nn::Modality::visual),
                                                    batch_of(w2, yw2, nn::Modality::audio));
    CHECK(permuted == Catch::Approx(got).epsilon(1e-12));
  }

  CHECK_THROWS_AS(semantic_alignment_loss(batch_of(Mat(0, 2), IVec(0), nn::Modality::visual), ea),
                  Error);
}

TEST_CASE("separation loss") {
  // all cross-class pairs beyond the margin
  Mat u(1, 2), v(1, 2);
  u << 0, 0;
  v << 5, 0;
  CHECK(separation_loss(batch_of(u, labels_of({0}), nn::Modality::visual),
                        batch_of(v, labels_of({1}), nn::Modality::audio), 1.0) == 0.0);

  v << 0.5, 0;
  CHECK(separation_loss(batch_of(u, labels_of({0}), nn::Modality::visual),
                        batch_of(v, labels_of({1}), nn::Modality::audio), 1.0) ==
        Catch::Approx(0.125));

  Rng rng(13);
  const Mat a = testutil::random_matrix(5, 4, rng);
  const Mat b = testutil::random_matrix(3, 4, rng);
  const IVec ya = labels_of({0, 1, 0, 1, 1});
  const IVec yb = labels_of({1, 0, 0});
  const double got = separation_loss(batch_of(a, ya, nn::Modality::visual),
                                     batch_of(b, yb, nn::Modality::audio), 1.5);
  CHECK(std::abs(got - separation_oracle(a, ya, b, yb, 1.5)) < 1e-10);
}

TEST_CASE("pair loss gradients match finite differences") {
  Rng rng(31);
  Mat u = testutil::random_matrix(3, 4, rng);
  Mat v = testutil::random_matrix(3, 4, rng);
  const IVec yu = labels_of({0, 1, 0});
  const IVec yv = labels_of({1, 0, 0});
  const double margin = 2.0;

  auto sa = semantic_alignment_loss_grad(batch_of(u, yu, nn::Modality::visual),
                                         batch_of(v, yv, nn::Modality::audio));
  auto sep = separation_loss_grad(batch_of(u, yu, nn::Modality::visual),
                                  batch_of(v, yv, nn::Modality::audio), margin);

  const double h = 1e-6;
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    for (Eigen::Index k = 0; k < u.cols(); ++k) {
      Mat up = u, dn = u;
      up(i, k) += h;
      dn(i, k) -= h;
      const double fd_sa = (alignment_oracle(up, yu, v, yv) - alignment_oracle(dn, yu, v, yv)) /
                           (2 * h);
      const double fd_sep = (separation_oracle(up, yu, v, yv, margin) -
                             separation_oracle(dn, yu, v, yv, margin)) /
                            (2 * h);
      CHECK(sa.grad_visual(i, k) == Catch::Approx(fd_sa).margin(1e-6));
      CHECK(sep.grad_visual(i, k) == Catch::Approx(fd_sep).margin(1e-6));
    }
  }

  SECTION("margin deadzone has exactly zero gradient") {
    // push the cross-class pair far beyond the margin
    Mat far_u(1, 2), far_v(1, 2);
    far_u << 0, 0;
    far_v << 10, 0;
    auto g = separation_loss_grad(batch_of(far_u, labels_of({0}), nn::Modality::visual),
                                  batch_of(far_v, labels_of({1}), nn::Modality::audio), 1.0);
    CHECK(g.grad_visual.cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.grad_audio.cwiseAbs().maxCoeff() == 0.0);
    const double base = separation_oracle(far_u, labels_of({0}), far_v, labels_of({1}), 1.0);
    Mat nudged = far_u;
    nudged(0, 0) += 1e-5;
    CHECK(separation_oracle(nudged, labels_of({0}), far_v, labels_of({1}), 1.0) == base);
  }
}

TEST_CASE("weighted binary cross entropy") {
  Vec p(2);
  p << 0.5, 0.5;
  CHECK(weighted_bce(p, labels_of({1, 0}), {1.0, 1.0}) == Catch::Approx(std::log(2.0)));

  Vec perfect(2);
  perfect << 1.0, 0.0;
  CHECK(weighted_bce(perfect, labels_of({1, 0}), {1.5, 0.5}) < 1e-6);

  Rng rng(8);
  Vec probs(6);
  for (int i = 0; i < 6; ++i) probs[i] = rng.uniform(0.05, 0.95);
  const IVec y = labels_of({0, 1, 1, 0, 1, 0});
  const std::array<double, 2> w{1.5, 0.5};
  double oracle = 0.0;
  for (int i = 0; i < 6; ++i) {
    const double weight = y[i] == 0 ? w[0] : w[1];
    oracle += weight * (-y[i] * std::log(probs[i]) - (1 - y[i]) * std::log(1 - probs[i]));
  }
  oracle /= 6.0;
  CHECK(std::abs(weighted_bce(probs, y, w) - oracle) < 1e-12);

  CHECK_THROWS_AS(weighted_bce(p, labels_of({2, 0}), w), Error);

  SECTION("gradient matches finite differences") {
    auto res = weighted_bce_grad(probs, y, w);
    const double h = 1e-7;
    for (int i = 0; i < 6; ++i) {
      Vec up = probs, dn = probs;
      up[i] += h;
      dn[i] -= h;
      const double fd = (weighted_bce(up, y, w) - weighted_bce(dn, y, w)) / (2 * h);
      CHECK(res.grad[i] == Catch::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("mean classification loss and ccsa combination") {
  CHECK(mean_classification_loss(0.4, 0.2) == Catch::Approx(0.3));
  CHECK(mean_classification_loss(0.7, 0.7) == 0.7);
  CHECK(mean_classification_loss(0.0, 1.0) == 0.5);

  CHECK(ccsa_loss(0.2, 0.1, 0.4, 1.0) == 0.4);
  CHECK(ccsa_loss(0.2, 0.1, 0.4, 0.5) == Catch::Approx(0.35));
  CHECK(ccsa_loss(0.2, 0.1, 0.4, 0.0) == Catch::Approx(0.3));
  CHECK_THROWS_AS(ccsa_loss(0.2, 0.1, 0.4, 1.5), Error);

  SECTION("linear in each term") {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
      const double sa = rng.uniform(0, 2), s = rng.uniform(0, 2), c = rng.uniform(0, 2);
      const double g = rng.uniform(0, 1);
      CHECK(ccsa_loss(sa, s, c, g) ==
            Catch::Approx((1 - g) * sa + (1 - g) * s + g * c).epsilon(1e-12));
    }
  }
}

TEST_CASE("mse") {
  Mat a(1, 2), b(1, 2);
  a << 0, 0;
  b << 2, 2;
  CHECK(mse(a, a) == 0.0);
  CHECK(mse(a, b) == 4.0);

  Rng rng(6);
  const Mat x = testutil::random_matrix(3, 4, rng);
  const Mat y = testutil::random_matrix(3, 4, rng);
  double oracle = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    oracle += (x.data()[i] - y.data()[i]) * (x.data()[i] - y.data()[i]);
  }
  oracle /= static_cast<double>(x.size());
  CHECK(std::abs(mse(x, y) - oracle) < 1e-12);

  Mat c(2, 2);
  CHECK_THROWS_AS(mse(a, c), Error);
}

TEST_CASE("losses are non-negative") {
  Rng rng(12);
  for (int rep = 0; rep < 10; ++rep) {
    const Mat u = testutil::random_matrix(4, 3, rng, -3, 3);
    const Mat v = testutil::random_matrix(5, 3, rng, -3, 3);
    IVec yu(4), yv(5);
    for (int i = 0; i < 4; ++i) yu[i] = static_cast<int>(rng.index(2));
    for (int i = 0; i < 5; ++i) yv[i] = static_cast<int>(rng.index(2));
    auto ev = batch_of(u, yu, nn::Modality::visual);
    auto ea = batch_of(v, yv, nn::Modality::audio);
    CHECK(semantic_alignment_loss(ev, ea) >= 0.0);
    CHECK(separation_loss(ev, ea, 1.0) >= 0.0);
    CHECK(mse(u, Mat(u.array() + rng.normal())) >= 0.0);
  }
}

// Gradient of the full objective with respect to encoder parameters, checked
// against central finite differences through the composed value path.
TEST_CASE("ccsa encoder gradient matches finite differences") {
  nn::Model encoder = nn::build_model(testutil::tiny_encoder_spec(), 3);
  const std::size_t enc_dim = encoder.output_shape().flat;
  nn::Model classifier = nn::build_model(testutil::tiny_classifier_spec(enc_dim), 4);
  REQUIRE(encoder.param_count() <= 500);

  Rng rng(10);
  const Mat xv = testutil::random_matrix(4, 64, rng, 0, 1);
  const Mat xa = testutil::random_matrix(4, 64, rng, 0, 1);
  const IVec y = labels_of({0, 1, 0, 1});
  const CCSAConfig cfg{1.0, 0.5, {1.5, 0.5}};

  const auto objective = [&]() {
    encoder.eval();
    classifier.eval();
    const Mat ev = encoder.forward(xv);
    const Mat ea = encoder.forward(xa);
    const double sa = semantic_alignment_loss(batch_of(ev, y, nn::Modality::visual),
                                              batch_of(ea, y, nn::Modality::audio));
    const double sep = separation_loss(batch_of(ev, y, nn::Modality::visual),
                                       batch_of(ea, y, nn::Modality::audio), cfg.margin);
    const double lv = weighted_bce(classifier.forward(ev).col(0), y, cfg.class_weights);
    const double la = weighted_bce(classifier.forward(ea).col(0), y, cfg.class_weights);
    return ccsa_loss(sa, sep, mean_classification_loss(lv, la), cfg.gamma);
  };

  // analytic gradient via the training decomposition
  encoder.train();
  encoder.zero_grad();
  const Mat ea_value = encoder.forward(xa);
  const Mat ev_value = encoder.forward(xv);
  auto ev_b = batch_of(ev_value, y, nn::Modality::visual);
  auto ea_b = batch_of(ea_value, y, nn::Modality::audio);
  auto sa = semantic_alignment_loss_grad(ev_b, ea_b);
  auto sep = separation_loss_grad(ev_b, ea_b, cfg.margin);

  const auto embedding_grad = [&](const Mat& e, const Mat& pair_grad) {
    classifier.train();
    classifier.zero_grad();
    const Mat p = classifier.forward(e);
    auto b = weighted_bce_grad(p.col(0), y, cfg.class_weights);
    const Mat de = classifier.backward(Mat(b.grad));
    return Mat((1.0 - cfg.gamma) * pair_grad + cfg.gamma * 0.5 * de);
  };
  encoder.backward(embedding_grad(ev_value, Mat(sa.grad_visual + sep.grad_visual)));
  encoder.forward(xa);
  encoder.backward(embedding_grad(ea_value, Mat(sa.grad_audio + sep.grad_audio)));
  const Vec analytic = encoder.flat_grads();

  const double max_rel = testutil::max_grad_rel_error(encoder, analytic, objective);
  INFO("max relative error " << max_rel);
  CHECK(max_rel < 1e-4);
}
