#include "cmkt/diag.hpp"

#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

using namespace cmkt;
using namespace cmkt::diag;

TEST_CASE("mmd identity, symmetry, non-negativity") {
  Rng rng(2);
  const Mat x = testutil::random_matrix(8, 3, rng);
  const Mat y = testutil::random_matrix(5, 3, rng);

  CHECK(mmd(x, x) <= 1e-12);
  CHECK(mmd(x, y) == mmd(y, x));
  CHECK(mmd(x, y) >= 0.0);
  CHECK(mmd(x, y, Kernel::linear) == mmd(y, x, Kernel::linear));

  Mat z(4, 2);
  CHECK_THROWS_AS(mmd(x, z), Error);
}

TEST_CASE("linear-kernel mmd equals the distance between means") {
  Mat x = Mat::Zero(3, 2);
  Mat y(2, 2);
  y << 3, 4, 3, 4;
  CHECK(mmd(x, y, Kernel::linear) == Catch::Approx(5.0).epsilon(1e-12));

  Rng rng(7);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 2 + rng.index(49);
    const std::size_t m = 2 + rng.index(49);
    const std::size_t d = 1 + rng.index(10);
    const Mat a = testutil::random_matrix(n, d, rng, -2, 2);
    const Mat b = testutil::random_matrix(m, d, rng, -2, 2);
    const Vec mean_a = a.colwise().mean();
    const Vec mean_b = b.colwise().mean();
    CHECK(std::abs(mmd(a, b, Kernel::linear) - (mean_a - mean_b).norm()) < 1e-9);
  }
}

TEST_CASE("group mmds") {
  Rng rng(5);
  const Mat cloud = testutil::random_matrix(6, 4, rng);
  IVec labels(6);
  labels << 0, 0, 0, 1, 1, 1;

  nn::EncodedBatch ev{cloud, labels, nn::Modality::visual};
  nn::EncodedBatch ea{cloud, labels, nn::Modality::audio};
  const auto g = group_mmds(ev, ea);
  CHECK(g.cross_modal_defect_free <= 1e-12);
  CHECK(g.cross_modal_defective <= 1e-12);
  CHECK(g.audio_between_classes == g.visual_between_classes);

  IVec single(6);
  single.setZero();
  nn::EncodedBatch bad{cloud, single, nn::Modality::visual};
  CHECK_THROWS_AS(group_mmds(bad, ea), Error);
}

TEST_CASE("kde") {
  // constant data with explicit bandwidth 1: a single standard normal
  Kde point(std::vector<double>(5, 0.0), 1.0);
  CHECK(point(0.0) == Catch::Approx(0.3989422804014327).epsilon(1e-12));

  Rng rng(9);
  std::vector<double> values;
  for (int i = 0; i < 40; ++i) values.push_back(rng.normal(1.5, 0.7));
  Kde density(values);

  SECTION("integrates to one") {
    const double h = density.bandwidth();
    const double lo = *std::min_element(values.begin(), values.end()) - 8 * h;
    const double hi = *std::max_element(values.begin(), values.end()) + 8 * h;
    const int steps = 4000;
    double integral = 0.0;
    for (int i = 0; i <= steps; ++i) {
      const double q = lo + (hi - lo) * i / steps;
      const double w = (i == 0 || i == steps) ? 0.5 : 1.0;
      integral += w * density(q);
    }
    integral *= (hi - lo) / steps;
    CHECK(integral == Catch::Approx(1.0).margin(0.01));
  }

  SECTION("symmetric data gives a symmetric density") {
    std::vector<double> sym{-2.0, -1.0, -0.5, 0.5, 1.0, 2.0};
    Kde d(sym, 0.8);
    for (double q : {0.3, 0.9, 1.7, 2.5}) {
      CHECK(std::abs(d(q) - d(-q)) < 1e-6);
    }
  }

  SECTION("scale equivariance") {
    const double c = 3.5;
    std::vector<double> scaled;
    for (double v : values) scaled.push_back(v * c);
    Kde base(values, 0.6);
    Kde wide(scaled, 0.6 * c);
    for (double q : {0.0, 1.0, 2.2}) {
      CHECK(std::abs(wide(q * c) - base(q) / c) < 1e-9);
    }
  }

  CHECK_THROWS_AS(Kde(std::vector<double>{1.0}), Error);
}

TEST_CASE("snapshot schedule") {
  CHECK(snapshot_epochs(150, 1200).size() == 8);
  CHECK(snapshot_epochs(150, 1200).front() == 150);
  CHECK(snapshot_epochs(150, 1200).back() == 1200);
  CHECK(snapshot_epochs(0, 100).empty());
  CHECK(snapshot_epochs(7, 20) == std::vector<std::size_t>{7, 14});
}

TEST_CASE("encoding export") {
  namespace fs = std::filesystem;
  Rng rng(4);
  nn::EncodedBatch ev{testutil::random_matrix(5, 3, rng), IVec(5), nn::Modality::visual};
  nn::EncodedBatch ea{testutil::random_matrix(5, 3, rng), IVec(5), nn::Modality::audio};
  for (int i = 0; i < 5; ++i) {
    ev.labels[i] = i % 2;
    ea.labels[i] = i % 2;
  }

  const auto dir = fs::temp_directory_path() / "cmkt_export_test";
  fs::create_directories(dir);
  const auto pv = (dir / "epoch150_visual.tsv").string();
  const auto pa = (dir / "epoch150_audio.tsv").string();
  export_encodings(pv, 150, ev);
  export_encodings(pa, 150, ea);

  const auto count_rows = [](const std::string& path) {
    std::ifstream is(path);
    std::string line;
    std::size_t rows = 0;
    std::string header;
    std::getline(is, header);
    while (std::getline(is, line)) rows += line.empty() ? 0 : 1;
    return std::make_pair(header, rows);
  };
  auto [hv, rows_v] = count_rows(pv);
  auto [ha, rows_a] = count_rows(pa);
  CHECK(rows_v + rows_a == 10);  // 2n rows across modalities
  CHECK(hv.find("modality=visual") != std::string::npos);
  CHECK(ha.find("modality=audio") != std::string::npos);
  CHECK(hv.find("epoch=150") != std::string::npos);
  CHECK(hv.find("dim=3") != std::string::npos);

  // re-export is byte identical
  const auto slurp = [](const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  };
  const std::string first = slurp(pv);
  export_encodings(pv, 150, ev);
  CHECK(slurp(pv) == first);
  fs::remove_all(dir);
}
