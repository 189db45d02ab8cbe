#include "cmkt/nn.hpp"

#include "cmkt/losses.hpp"
#include "cmkt/presets.hpp"
#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

using namespace cmkt;
using namespace cmkt::nn;

namespace {

std::string preset_path(const char* name) {
  return std::string(CMKT_PRESET_DIR) + "/" + name;
}

Mat random_batch(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  return testutil::random_matrix(n, dim, rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("shipped preset shape chains") {
  struct Expected {
    const char* file;
    const char* part;
    const char* tag;      // boundary to probe, empty = final output
    std::size_t dim;
  };
  const Expected cases[] = {
      {"table4.cfg", "encoder", "flatten", 3200},
      {"table4.cfg", "classifier", "", 1},
      {"tableA1_phase1.cfg", "source", "flatten", 5700},
      {"tableA1_phase1.cfg", "source", "hidden", 134},
      {"tableA1_phase2.cfg", "mapping", "", 15},
      {"tableA1_phase3.cfg", "head", "", 1},
      {"tableA2_visual_ae.cfg", "visual_autoencoder", "bottleneck", 42},
      {"tableA2_visual_ae.cfg", "visual_autoencoder", "", 6400},
      {"tableA2_audio_ae.cfg", "audio_autoencoder", "bottleneck", 89},
      {"tableA2_audio_ae.cfg", "audio_autoencoder", "", 6400},
      {"tableA2_audio_ae_128x12.cfg", "audio_autoencoder", "bottleneck", 89},
      {"tableA2_audio_ae_128x12.cfg", "audio_autoencoder", "", 1536},
      {"tableA2_mapping.cfg", "mapping", "", 42},
      {"tableA2_head.cfg", "head", "", 1},
      {"fusion_data.cfg", "encoder", "flatten", 3200},
      {"fusion_feature.cfg", "classifier", "", 1},
      {"fusion_decision.cfg", "classifier", "", 1},
  };
  for (const auto& c : cases) {
    CAPTURE(c.file, c.part, c.tag);
    auto specs = presets::load_pipeline_specs(preset_path(c.file));
    Model model = build_model(specs.at(c.part), 1);
    const Mat x = random_batch(2, model.input_dim(), 99);
    if (std::string(c.tag).empty()) {
      const Mat y = model.forward(x);
      CHECK(static_cast<std::size_t>(y.cols()) == c.dim);
      CHECK(y.rows() == 2);
    } else {
      CHECK(model.tagged_dim(c.tag) == c.dim);
      const Mat h = extract_hidden(model, c.tag)(x);
      CHECK(static_cast<std::size_t>(h.cols()) == c.dim);
    }
  }
}

TEST_CASE("dense identity forward") {
  ArchitectureSpec spec;
  spec.input_shape = {1, 1, 1};
  spec.layers.push_back({FlattenSpec{}, ""});
  spec.layers.push_back({DenseSpec{1}, ""});
  Model model = build_model(spec, 0);
  Vec p(2);
  p << 1.0, 0.0;  // weight 1, bias 0
  model.set_flat_params(p);
  Mat x(3, 1);
  x << -2.5, 0.0, 7.25;
  CHECK(model.forward(x) == x);
}

TEST_CASE("construction errors name the offending layer") {
  ArchitectureSpec spec;
  spec.input_shape = {1, 8, 8};
  spec.layers.push_back({DenseSpec{4}, ""});  // dense on a spatial input
  try {
    spec.chain();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
  }

  ArchitectureSpec unflatten_bad;
  unflatten_bad.input_shape = {1, 4, 4};
  unflatten_bad.layers.push_back({FlattenSpec{}, ""});
  unflatten_bad.layers.push_back({UnflattenSpec{{2, 3, 3}}, ""});
  try {
    unflatten_bad.chain();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("eval mode determinism and encode") {
  auto specs = presets::desk_specs(training::Method::visual_only);
  Model encoder = build_model(specs.at("encoder"), 5);
  const Mat x = random_batch(4, 6400, 3);
  const Mat a = encoder.forward(x);
  const Mat b = encoder.forward(x);
  CHECK(a == b);

  // identical inputs give identical rows
  Mat same(2, 6400);
  same.row(0) = x.row(0);
  same.row(1) = x.row(0);
  const Mat y = encoder.forward(same);
  CHECK(y.row(0) == y.row(1));

  IVec labels(4);
  labels << 0, 1, 1, 0;
  auto batch = encode(encoder, x, labels, Modality::audio);
  CHECK(batch.vectors.rows() == 4);
  CHECK(batch.vectors.cols() == 800);
  CHECK(batch.modality == Modality::audio);

  // empty batch: no error, zero rows
  auto empty = encode(encoder, Mat(0, 6400), IVec(0), Modality::visual);
  CHECK(empty.vectors.rows() == 0);
  CHECK(empty.vectors.cols() == 800);
}

TEST_CASE("extract_hidden output tag equals forward") {
  auto specs = presets::desk_specs(training::Method::visual_only);
  Model model = build_model(specs.at("classifier"), 5);
  const Mat x = random_batch(3, 800, 4);
  model.eval();
  CHECK(extract_hidden(model, "output")(x) == model.forward(x));
  CHECK_THROWS_AS(extract_hidden(model, "no-such-tag"), Error);
}

TEST_CASE("gradient of every layer kind matches finite differences") {
  Model model = build_model(testutil::tiny_full_spec(), 21);
  REQUIRE(model.param_count() <= 500);

  Rng rng(77);
  const Mat x = testutil::random_matrix(5, 36, rng, -1.0, 1.0);
  IVec labels(5);
  labels << 0, 1, 0, 1, 1;
  const std::array<double, 2> w{1.5, 0.5};

  model.train();
  model.zero_grad();
  const Mat probs = model.forward(x);
  auto bce = losses::weighted_bce_grad(probs.col(0), labels, w);
  model.backward(Mat(bce.grad));
  const Vec analytic = model.flat_grads();

  // finite differences in train mode; batchnorm uses batch statistics both
  // times and the model has no dropout, so the function is deterministic
  const double max_rel = testutil::max_grad_rel_error(model, analytic, [&] {
    model.train();
    const Mat p = model.forward(x);
    return losses::weighted_bce(p.col(0), labels, w);
  });
  INFO("max relative error " << max_rel);
  CHECK(max_rel < 1e-4);
}

TEST_CASE("checkpoint round trip") {
  auto specs = presets::desk_specs(training::Method::visual_only);
  Model model = build_model(specs.at("encoder"), 9);
  const Mat x = random_batch(2, 6400, 1);
  const Mat before = model.forward(x);

  const auto path = std::filesystem::temp_directory_path() / "cmkt_test_ckpt.bin";
  save_checkpoint(path.string(), model);
  Model loaded = load_checkpoint(path.string());
  CHECK(loaded.flat_params() == model.flat_params());
  CHECK(loaded.forward(x) == before);
  std::filesystem::remove(path);

  const auto bogus = std::filesystem::temp_directory_path() / "cmkt_test_bogus.bin";
  std::ofstream(bogus) << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(bogus.string()), Error);
  std::filesystem::remove(bogus);
}

TEST_CASE("seeded initialization is reproducible and seed dependent") {
  auto specs = presets::desk_specs(training::Method::visual_only);
  Model a = build_model(specs.at("encoder"), 42);
  Model b = build_model(specs.at("encoder"), 42);
  Model c = build_model(specs.at("encoder"), 43);
  CHECK(a.flat_params() == b.flat_params());
  CHECK(a.flat_params() != c.flat_params());
}

TEST_CASE("spec json round trip") {
  auto specs = presets::load_pipeline_specs(preset_path("tableA2_visual_ae.cfg"));
  const auto& spec = specs.at("visual_autoencoder");
  auto round = ArchitectureSpec::from_json(spec.to_json());
  CHECK(round.to_json() == spec.to_json());
  CHECK(round.output_shape().flat == 6400);
}
