#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "catagg/flow.hpp"
#include "catagg/ops.hpp"
#include "oracles.hpp"

using namespace catagg;

TEST_CASE("grid positions are (column, row) in row-major order") {
  const auto p = grid_positions(2, 3, DType::f64).values();
  CHECK(p == std::vector<double>{0, 0, 1, 0, 2, 0, 0, 1, 1, 1, 2, 1});
}

TEST_CASE("soft-argmax equals the explicit expectation") {
  std::mt19937_64 rng(21);
  const Tensor c = oracle::random_f64({6, 6}, rng, 0.0, 1.0);
  const double beta = 7.0;
  const auto f = soft_argmax_flow(c, 2, 3, beta).values();
  for (std::int64_t i = 0; i < 6; ++i) {
    double z = 0.0, ex = 0.0, ey = 0.0;
    for (std::int64_t j = 0; j < 6; ++j) {
      const double w = std::exp(beta * c.at({i, j}));
      z += w;
      ex += w * static_cast<double>(j % 3);
      ey += w * static_cast<double>(j / 3);
    }
    CHECK(f[2 * i] == doctest::Approx(ex / z - static_cast<double>(i % 3)).epsilon(1e-12));
    CHECK(f[2 * i + 1] == doctest::Approx(ey / z - static_cast<double>(i / 3)).epsilon(1e-12));
  }
}

TEST_CASE("argmax flow picks the first maximum") {
  // Row 0 ties between columns 1 and 3.
  const Tensor c = Tensor::from_values({4, 4}, {0, 1, 0, 1, 5, 0, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0});
  const auto f = argmax_flow(c, 2, 2, 2, 2).values();
  CHECK(f == std::vector<double>{1, 0, -1, 0, 1, 0, -1, 0});
}

TEST_CASE("zero flow transfers keypoints onto themselves") {
  KeypointSet k{64, 32, {{3.0, 5.0}, {31.0, 60.0}, {16.0, 0.0}}};
  const KeypointSet out = transfer_keypoints(Tensor::zeros({4, 4, 2}, DType::f64), k);
  for (std::size_t i = 0; i < k.points.size(); ++i) {
    CHECK(out.points[i].x == doctest::Approx(k.points[i].x));
    CHECK(out.points[i].y == doctest::Approx(k.points[i].y));
  }
}

TEST_CASE("uniform flow shifts keypoints by whole cells") {
  // One cell is 8 px wide and 16 px tall on a 64x32 image with a 4x4 grid.
  Tensor flow({4, 4, 2}, DType::f64);
  for (std::int64_t i = 0; i < 16; ++i) {
    flow.set_flat(2 * i, 1.0);
    flow.set_flat(2 * i + 1, -0.5);
  }
  const KeypointSet out = transfer_keypoints(flow, KeypointSet{64, 32, {{10.0, 20.0}}});
  CHECK(out.points[0].x == doctest::Approx(18.0));
  CHECK(out.points[0].y == doctest::Approx(12.0));
}

TEST_CASE("aepe against hand values") {
  const Tensor pred = Tensor::from_values({1, 2, 2}, {3, 4, 0, 0}, DType::f64);
  const Tensor gt = Tensor::zeros({1, 2, 2}, DType::f64);
  CHECK(aepe(pred, gt).item() == doctest::Approx(2.5));
  const Tensor mask = Tensor::from_values({1, 2}, {1, 0}, DType::f64);
  CHECK(aepe(pred, gt, mask).item() == doctest::Approx(5.0));
  CHECK(aepe(pred, gt, mask).item() == doctest::Approx(oracle::aepe(pred, gt, mask)));
}

TEST_CASE("aepe gradient is finite at zero distance") {
  Tensor pred = Tensor::zeros({1, 1, 2}, DType::f64);
  pred.set_requires_grad(true);
  backward(aepe(pred, Tensor::zeros({1, 1, 2}, DType::f64)));
  CHECK(pred.grad().values() == std::vector<double>{0, 0});
}

TEST_CASE("pck counts points within the threshold, inclusive") {
  const std::vector<Point> gt = {{0, 0}, {0, 0}, {0, 0}, {0, 0}};
  const std::vector<Point> pred = {{1, 0}, {0, 2}, {3, 4}, {10, 0}};
  CHECK(pck(pred, gt, 0.1, 20.0) == 0.5);
  CHECK(pck(pred, gt, 0.1, 50.0) == 0.75);
  CHECK(pck(pred, gt, 0.5, 20.0) == 1.0);
  CHECK(pck(pred, gt, 0.1, 20.0) == oracle::pck(pred, gt, 0.1, 20.0));
  CHECK_THROWS_AS(pck(pred, gt, 0.0, 20.0), ArgumentError);
  CHECK_THROWS_AS(pck({}, {}, 0.1, 20.0), ArgumentError);
}

TEST_CASE("pck bases") {
  const KeypointSet gt{100, 200, {{10, 10}, {50, 30}}};
  const KeypointSet pred{100, 200, {{14, 10}, {50, 45}}};
  // Image basis 200: threshold 20. Box basis max(40, 20) = 40: threshold 4.
  CHECK(pck(pred, gt, 0.1, PckBasis::img) == 1.0);
  CHECK(pck(pred, gt, 0.1, PckBasis::bbox) == 0.5);
  CHECK(parse_pck_basis("bbox") == PckBasis::bbox);
  CHECK_THROWS_AS(parse_pck_basis("box"), ConfigError);
}

TEST_CASE("pck is monotone in alpha") {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(-30, 30);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Point> gt(40), pred(40);
    for (std::size_t i = 0; i < gt.size(); ++i) pred[i] = {u(rng), u(rng)};
    double last = -1.0;
    for (double a : {0.05, 0.1, 0.15}) {
      const double p = pck(pred, gt, a, 128.0);
      CHECK(p >= last);
      last = p;
    }
  }
}

TEST_CASE("keypoint files round trip exactly") {
  const auto path = (std::filesystem::temp_directory_path() / "catagg_kp.txt").string();
  const KeypointSet k{128, 96, {{0.1, 1.0 / 3.0}, {95.5, 127.25}}};
  write_keypoints(path, k);
  const KeypointSet back = read_keypoints(path);
  CHECK(back.height == 128);
  CHECK(back.width == 96);
  REQUIRE(back.points.size() == 2);
  CHECK(back.points[0].y == k.points[0].y);
  CHECK(back.points[1].x == k.points[1].x);
  std::filesystem::remove(path);
}
