#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "catagg/dataset.hpp"
#include "catagg/eval.hpp"
#include "catagg/ops.hpp"
#include "catagg/synthetic.hpp"
#include "catagg/train.hpp"
#include "oracles.hpp"
#include "toy.hpp"

using namespace catagg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("catagg_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

std::vector<PairData> pairs(std::uint64_t first, int count) {
  std::vector<PairData> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(to_pair_data(generate_pair(first + i), 16, "p" + std::to_string(i)));
  }
  return out;
}

std::map<std::string, std::vector<double>> snapshot(const ParamStore& s) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& n : s.names()) out[n] = s.get(n).values();
  return out;
}

}  // namespace

TEST_CASE("affine helpers") {
  const Affine a = Affine::about_centre({64, 64}, 1.1, 0.9, 0.2, 3.0, -2.0);
  const Point p{17.0, 91.0};
  const Point back = a.inverse().apply(a.apply(p));
  CHECK(back.x == doctest::Approx(p.x).epsilon(1e-12));
  CHECK(back.y == doctest::Approx(p.y).epsilon(1e-12));
  // The centre only moves by the shift.
  const Point c = a.apply({64, 64});
  CHECK(c.x == doctest::Approx(67.0));
  CHECK(c.y == doctest::Approx(62.0));
}

TEST_CASE("identity warp gives zero flow and a perfect WTA") {
  const SyntheticPair p = generate_pair(3, 128, 16, 0.0);
  CHECK(p.target.bit_equal(p.source));
  const Tensor flow = analytic_flow(p.warp, 128, 128, 16, 16);
  for (double v : flow.values()) CHECK(v == 0.0);
  Model m(toy::config("cats"));
  const PairData d = to_pair_data(p, 16, "id");
  const Prediction pred = predict(m, d);
  for (double v : pred.wta_flow.values()) CHECK(v == 0.0);
  CHECK(pck(pred.wta_keypoints, d.target_keypoints(), 0.05) == 1.0);
}

TEST_CASE("a two-cell translation gives constant flow (2, 0)") {
  // 128 px over 16 cells: two cells are 16 px.
  const Tensor flow = analytic_flow(Affine::translation(16.0, 0.0), 128, 128, 16, 16);
  for (std::int64_t i = 0; i < 256; ++i) {
    CHECK(flow.flat(2 * i) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(flow.flat(2 * i + 1) == doctest::Approx(0.0));
  }
  const Tensor mask = valid_mask(flow);
  // The last two columns leave the hull.
  CHECK(sum(mask).item() == doctest::Approx(16.0 * 14.0));
}

TEST_CASE("ground-truth flow equals per-cell evaluation of the warp") {
  const SyntheticPair p = generate_pair(17);
  for (std::int64_t g : {8, 16, 32}) {
    const Tensor flow = analytic_flow(p.warp, 128, 128, g, g);
    const double cell = 128.0 / static_cast<double>(g);
    for (std::int64_t v = 0; v < g; ++v) {
      for (std::int64_t u = 0; u < g; ++u) {
        const Point s{(u + 0.5) * cell, (v + 0.5) * cell};
        const Point t = p.warp.apply(s);
        CHECK(flow.at({v, u, 0}) == doctest::Approx((t.x - s.x) / cell).epsilon(1e-6));
        CHECK(flow.at({v, u, 1}) == doctest::Approx((t.y - s.y) / cell).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("generated warps keep enough cells in bounds") {
  for (std::uint64_t s = 0; s < 30; ++s) {
    const SyntheticPair p = generate_pair(s);
    const Tensor mask = valid_mask(analytic_flow(p.warp, 128, 128, 16, 16));
    CHECK(sum(mask).item() >= kMinValidFraction * 256.0 - 1e-9);
  }
}

TEST_CASE("toy backbone extents and determinism") {
  Model a(toy::config("cats")), b(toy::config("cats"));
  const SyntheticPair p = generate_pair(1);
  const auto fa = a.backbone().forward(p.source);
  const auto fb = b.backbone().forward(p.source);
  REQUIRE(fa.size() == 6);
  const std::int64_t extents[6] = {32, 32, 16, 16, 8, 8};
  for (int l = 0; l < 6; ++l) {
    CHECK(fa[l].height() == extents[l]);
    CHECK(fa[l].layer == 3 + l / 2);
    CHECK(fa[l].grid.bit_equal(fb[l].grid));
  }
}

TEST_CASE("zero input and zero bias give zero correlations") {
  Model m(toy::config("cats"));
  for (const auto& n : m.params().names()) {
    if (n.rfind("backbone.", 0) == 0 && n.find("bias") != std::string::npos) m.params().fill(n, 0.0);
  }
  const auto f = m.backbone().forward(Tensor::zeros({128, 128, 3}));
  for (const auto& map : f) {
    for (double v : map.grid.values()) CHECK(v == 0.0);
  }
  for (double v : cosine_correlation(f[2], f[2]).values()) CHECK(v == 0.0);
}

TEST_CASE("dataset generation is byte-reproducible and loads back") {
  const fs::path a = scratch("data_a"), b = scratch("data_b");
  generate_dataset(a.string(), 3, 42, 1.0);
  generate_dataset(b.string(), 3, 42, 1.0);
  CHECK(tree(a) == tree(b));
  const auto loaded = load_dataset((a / "manifest.txt").string());
  REQUIRE(loaded.size() == 3);
  const PairData direct = to_pair_data(generate_pair(43), 16, "x");
  CHECK(loaded[1].seed == 43);
  CHECK(loaded[1].flow.bit_equal(direct.flow));
  CHECK(loaded[1].source.bit_equal(direct.source));
  CHECK_THROWS_AS(load_dataset((a / "missing.txt").string()), IoError);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("a single identity pair has an all-zero ground truth file") {
  const fs::path dir = scratch("data_identity");
  generate_dataset(dir.string(), 1, 5, 0.0);
  const auto loaded = load_dataset((dir / "manifest.txt").string());
  for (double v : loaded[0].flow.values()) CHECK(v == 0.0);
  fs::remove_all(dir);
}

TEST_CASE("config keys, overrides and rejection") {
  RunConfig c;
  CHECK(c.get("train.lr_aggregator") == "3e-5");
  CHECK(c.get("train.lr_backbone") == "3e-6");
  CHECK(c.get("cats.n_encoders") == "1");
  CHECK(c.mode() == "serial");
  c.set("model", "catspp");
  CHECK(c.mode() == "parallel");
  c.parse_text("# comment\n\n seed = 9 \n");
  CHECK(c.get_int("seed") == 9);
  CHECK_THROWS_AS(c.set("nope", "1"), ConfigError);
  CHECK_THROWS_AS(c.set_assignment("seed"), ConfigError);
  RunConfig back;
  back.parse_text(c.text());
  CHECK(back.text() == c.text());
  for (const auto& k : config_keys()) CHECK(!k.help.empty());
}

TEST_CASE("model construction rejects inconsistent configs") {
  RunConfig c = toy::config("catspp");
  c.set("mode", "serial");
  CHECK_THROWS_AS(Model m(c), ConfigError);
  c = toy::config("cats");
  c.set("model", "other");
  CHECK_THROWS_AS(Model m(c), ConfigError);
}

TEST_CASE("cats with zeroed projections scores the raw stacked correlation") {
  Model m(toy::config("cats"));
  m.zero_output_projections();
  const PairData d = pairs(70, 1)[0];
  InferenceGuard g;
  const auto fs = m.backbone().forward(d.source);
  const auto ft = m.backbone().forward(d.target);
  std::vector<FeatureMap> ss, tt;
  for (int l : m.cats_levels()) {
    ss.push_back(fs[static_cast<std::size_t>(l)]);
    tt.push_back(ft[static_cast<std::size_t>(l)]);
  }
  const Tensor raw = mean_axis(build_stack(ss, tt, 16, 16).volume, 0);
  const Model::Output out = m.forward(d.source, d.target);
  CHECK(out.scores.bit_equal(raw));
  CHECK(out.flow.bit_equal(soft_argmax_flow(raw, 16, 16, m.beta())));
  CHECK(argmax_flow(out.scores, 16, 16, 16, 16).bit_equal(m.wta_flow(d.source, d.target)));
}

TEST_CASE("zero learning rate leaves parameters and loss unchanged") {
  RunConfig c = toy::config("catspp");
  c.set("train.lr_aggregator", "0");
  c.set("train.lr_backbone", "0");
  Model m(c);
  const auto before = snapshot(m.params());
  Trainer t(m, TrainConfig::from(c), pairs(90, 1), 1);
  const double l0 = t.train_step();
  const double l1 = t.train_step();
  const double l2 = t.train_step();
  CHECK(l0 == l1);
  CHECK(l1 == l2);
  CHECK(snapshot(m.params()) == before);
}

TEST_CASE("learning-rate groups and cosine decay") {
  RunConfig c = toy::config("cats");
  c.set("train.steps", "10");
  Model m(c);
  Trainer t(m, TrainConfig::from(c), pairs(1, 1), 1);
  CHECK(t.learning_rate("cats.head.weight") == doctest::Approx(3e-4));
  CHECK(t.learning_rate("backbone.q3.down.weight") == doctest::Approx(3e-5));
  CHECK(cosine_factor(0, 10, 0.1) == doctest::Approx(1.0));
  // The last step runs at the floor.
  CHECK(cosine_factor(9, 10, 0.1) == doctest::Approx(0.1));
  CHECK(cosine_factor(5, 11, 0.1) == doctest::Approx(0.55));
}

TEST_CASE("training aborts on a non-finite loss naming the op") {
  RunConfig c = toy::config("cats");
  c.set("train.steps", "2");
  Model m(c);
  m.params().fill("cats.head.bias", std::nan(""));
  Trainer t(m, TrainConfig::from(c), pairs(5, 1), 1);
  try {
    t.train_step();
    FAIL("expected a NumericError");
  } catch (const NumericError& e) {
    INFO(std::string(e.what()));
    CHECK(std::string(e.what()).find("first non-finite op: add_broadcast") != std::string::npos);
  }
}

TEST_CASE("checkpoints round trip byte-exactly and reject corruption") {
  const fs::path dir = scratch("ckpt");
  RunConfig c = toy::config("catspp");
  c.set("train.steps", "2");
  Model m(c);
  Trainer t(m, TrainConfig::from(c), pairs(10, 2), 3);
  t.run();
  const std::string p1 = (dir / "a.catk").string(), p2 = (dir / "b.catk").string();
  t.save_checkpoint(p1);

  Model m2(c);
  Trainer t2(m2, TrainConfig::from(c), pairs(10, 2), 99);
  t2.load_checkpoint(p1);
  t2.save_checkpoint(p2);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(t2.step() == 2);

  // Loaded parameters reproduce the forward pass exactly.
  const PairData d = pairs(50, 1)[0];
  InferenceGuard g;
  CHECK(m.forward(d.source, d.target).scores.bit_equal(m2.forward(d.source, d.target).scores));
  CHECK(checkpoint_config(p1) == c.text());

  std::string bytes = slurp(p1);
  bytes[1] = 'Z';
  const std::string bad = (dir / "bad.catk").string();
  std::ofstream(bad, std::ios::binary) << bytes;
  CHECK_THROWS_AS(t2.load_checkpoint(bad), LoadError);

  const std::string cut = (dir / "cut.catk").string();
  std::ofstream(cut, std::ios::binary) << slurp(p1).substr(0, 1000);
  CHECK_THROWS_AS(t2.load_checkpoint(cut), LoadError);

  // A different architecture has other parameter names.
  Model other(toy::config("cats"));
  CHECK_THROWS_AS(load_model_parameters(other, p1), LoadError);
  fs::remove_all(dir);
}

TEST_CASE("evaluation is side-effect free and matches per-pair recomputation") {
  Model m(toy::config("cats"));
  const auto data = pairs(200, 3);
  const auto before = snapshot(m.params());
  const Report r = evaluate(m, data, {0.05, 0.1, 0.15});
  CHECK(snapshot(m.params()) == before);
  REQUIRE(r.pairs.size() == 3);
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Prediction p = predict(m, data[i]);
    const double a = oracle::aepe(p.flow.to(DType::f64), data[i].flow, data[i].mask);
    CHECK(r.pairs[i].aepe == doctest::Approx(a).epsilon(1e-12));
    const KeypointSet gt = data[i].target_keypoints();
    CHECK(r.pairs[i].pck[1] ==
          oracle::pck(p.keypoints.points, gt.points, 0.1, std::max(gt.height, gt.width)));
    total += a;
  }
  CHECK(r.mean_aepe() == doctest::Approx(total / 3.0).epsilon(1e-12));
  // Threaded evaluation gives the same report.
  CHECK(evaluate(m, data, {0.05, 0.1, 0.15}, PckBasis::img, 3).text() == r.text());
  CHECK_THROWS_AS(evaluate(m, {}, {0.1}), ArgumentError);
  const std::string text = r.text();
  CHECK(text.find("pair=p0 aepe=") != std::string::npos);
  CHECK(text.find("summary pairs=3") != std::string::npos);
  CHECK(text.find("# model = cats") != std::string::npos);
}
