// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "catagg/bench.hpp"
#include "catagg/correlation.hpp"
#include "catagg/dataset.hpp"
#include "catagg/eval.hpp"
#include "catagg/ops.hpp"
#include "catagg/tensor_io.hpp"
#include "catagg/train.hpp"
#include "oracles.hpp"
#include "toy.hpp"

using namespace catagg;
namespace fs = std::filesystem;

namespace {

// Pinned thresholds.
constexpr double kGradcheckSeconds = 60.0;
constexpr double kConvTolerance = 1e-5;
constexpr double kConvSeconds = 30.0;
constexpr double kCosineTolerance = 1e-6;
constexpr double kEquivarianceTolerance = 1e-5;
constexpr double kOverfitAepe = 0.5;
constexpr std::int64_t kOverfitMaxSteps = 2000;
constexpr double kOverfitSeconds = 600.0;
constexpr int kTrainPairs = 200;
constexpr int kTestPairs = 50;
constexpr double kPckMargin = 0.05;
constexpr double kGeneralisationSeconds = 45.0 * 60.0;
constexpr double kParamRatio = 0.30;
constexpr double kMetricTolerance = 1e-6;

// Training lengths for the generalisation run.
constexpr std::int64_t kCatsSteps = 600;
constexpr std::int64_t kCatsppSteps = 300;

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

struct Run {
  int code = -1;
  std::string out;
};

Run shell(const std::string& args) {
  const std::string cmd = std::string(CATAGG_BIN) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof(buf), p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("catagg_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<PairData> make_pairs(std::uint64_t first, int count) {
  std::vector<PairData> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(to_pair_data(generate_pair(first + i), 16, "p" + std::to_string(first + i)));
  }
  return out;
}

void randomise(ParamStore& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (const auto& n : store.names()) {
    Tensor t = store.get(n).clone();
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set_flat(i, u(rng));
    store.set(n, t);
  }
}

// -- 1 ----------------------------------------------------------------------

Verdict gradcheck() {
  const auto t0 = Clock::now();
  const Run r = shell("gradcheck --ops all --dtype f64 --seeds 5");
  const double secs = since(t0);
  std::size_t cases = 0;
  for (std::size_t p = r.out.find(" pass "); p != std::string::npos; p = r.out.find(" pass ", p + 1)) {
    ++cases;
  }
  return {r.code == 0 && secs < kGradcheckSeconds,
          std::to_string(cases) + " ops pass, exit " + std::to_string(r.code) + ", " +
              fmt("%.1f s", secs)};
}

// -- 2 ----------------------------------------------------------------------

Verdict conv_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2);
  double worst = 0.0;
  long configs = 0;
  for (std::int64_t a = 1; a <= 4; ++a)
    for (std::int64_t b = 1; b <= 4; ++b)
      for (std::int64_t c = 1; c <= 4; ++c)
        for (std::int64_t d = 1; d <= 4; ++d)
          for (std::int64_t k : {1, 3})
            for (std::int64_t s : {1, 2})
              for (std::int64_t cin = 1; cin <= 3; ++cin)
                for (std::int64_t cout = 1; cout <= 3; ++cout) {
                  const Tensor x = oracle::random_f64({a, b, c, d, cin}, rng);
                  const Tensor w = oracle::random_f64({k, k, k, k, cin, cout}, rng);
                  const Tensor bias = oracle::random_f64({cout}, rng);
                  Shape shape;
                  const auto ref = oracle::conv4d(x, w, bias, {s, s, s, s}, shape);
                  for (DType dt : {DType::f64, DType::f32}) {
                    const Tensor y = conv4d(x.to(dt), w.to(dt), bias.to(dt), {s, s, s, s});
                    worst = y.shape() == shape ? std::max(worst, oracle::max_abs_diff(y.values(), ref))
                                               : INFINITY;
                  }
                  ++configs;
                }
  const double secs = since(t0);
  return {worst < kConvTolerance && secs < kConvSeconds,
          std::to_string(configs) + " configs x {f64, f32}, max abs diff " + fmt("%.2e", worst) +
              ", " + fmt("%.1f s", secs)};
}

// -- 3 ----------------------------------------------------------------------

Verdict residual_identity() {
  const PairData pair = make_pairs(31, 1)[0];
  std::vector<std::string> failures;
  InferenceGuard guard;

  // CATs at the default size, every mode.
  for (const char* mode : {"serial", "parallel", "both"}) {
    RunConfig c;
    c.set("mode", mode);
    Model m(c);
    randomise(m.params(), 1);
    m.zero_output_projections();
    const auto fs = m.backbone().forward(pair.source);
    const auto ft = m.backbone().forward(pair.target);
    std::vector<FeatureMap> ss, tt;
    std::vector<Tensor> ds, dt;
    for (int l : m.cats_levels()) {
      ss.push_back(fs[static_cast<std::size_t>(l)]);
      tt.push_back(ft[static_cast<std::size_t>(l)]);
      ds.push_back(resize_bilinear(fs[static_cast<std::size_t>(l)].grid, 16, 16));
      dt.push_back(resize_bilinear(ft[static_cast<std::size_t>(l)].grid, 16, 16));
    }
    const CorrelationStack stack = build_stack(ss, tt, 16, 16);
    const Tensor out = m.cats()->aggregate(stack, ds, dt).volume;
    // Each branch adds one copy of the input.
    const Tensor want = std::string(mode) == "serial" ? stack.volume : add(stack.volume, stack.volume);
    if (!out.bit_equal(want)) failures.push_back(std::string("cats ") + mode);
  }

  // CATs++ at the default size: the cascade of embedded volumes.
  {
    RunConfig c;
    c.set("model", "catspp");
    Model m(c);
    randomise(m.params(), 2);
    m.zero_output_projections();
    const CatsppAggregator& agg = *m.catspp();
    const auto fs = m.backbone().forward(pair.source);
    const auto ft = m.backbone().forward(pair.target);
    std::vector<int> layers;
    for (const auto& l : agg.layers()) layers.push_back(l.layer);
    const auto hyper = build_hypercorrelation(fs, ft, layers);
    std::vector<Tensor> embedded, app_s, app_t;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      embedded.push_back(agg.conv_embed(hyper[i].volume, layers[i]));
      const std::int64_t e = embedded.back().dim(0);
      // Last level of each layer, resized onto the embedded grid.
      const auto& f = fs[static_cast<std::size_t>(2 * (layers[i] - 3) + 1)].grid;
      const auto& g = ft[static_cast<std::size_t>(2 * (layers[i] - 3) + 1)].grid;
      app_s.push_back(resize_bilinear(f, e, e));
      app_t.push_back(resize_bilinear(g, e, e));
    }
    Tensor cascade;
    for (const auto& m_q : embedded) {
      const Tensor in = cascade.defined()
                            ? add(m_q, upsample4d_bilinear(cascade, m_q.dim(0) / cascade.dim(0)))
                            : m_q;
      cascade = add(in, in);
    }
    if (!agg.pyramid(embedded, app_s, app_t).bit_equal(cascade)) failures.push_back("catspp pyramid");
  }
  std::string detail = "cats serial/parallel/both and catspp pyramid bitwise";
  for (const auto& f : failures) detail += "; mismatch: " + f;
  return {failures.empty(), detail};
}

// -- 4 ----------------------------------------------------------------------

Verdict swap_properties() {
  std::mt19937_64 rng(4);
  bool involution = true;
  for (int trial = 0; trial < 10; ++trial) {
    CorrelationStack c;
    c.volume = oracle::random_f64({3, 12, 20}, rng).to(DType::f32);
    involution = involution && swap(swap(c)).volume.bit_equal(c.volume);
    Hypercorrelation h;
    h.volume = oracle::random_f64({2, 3, 4, 5, 2}, rng).to(DType::f32);
    involution = involution && swap(swap(h)).volume.bit_equal(h.volume);
  }

  double cosine = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = oracle::random_f64({5, 6, 8}, rng).to(DType::f32);
    const Tensor b = oracle::random_f64({4, 7, 8}, rng).to(DType::f32);
    cosine = std::max(cosine, oracle::max_abs_diff(cosine_correlation(a, b).values(),
                                                   permute(cosine_correlation(b, a), {1, 0}).values()));
  }

  Model m(toy::config("catspp"));
  randomise(m.params(), 5);
  const CatsppAggregator& agg = *m.catspp();
  double equivariance = 0.0;
  InferenceGuard guard;
  for (const auto& l : agg.layers()) {
    const std::int64_t e = agg.config().embedded_extent(l.extent);
    const Tensor vol = oracle::random_f64({e, e, e, e, agg.config().d}, rng).to(DType::f32);
    const Tensor a = oracle::random_f64({e * e, agg.config().p}, rng).to(DType::f32);
    const Tensor b = oracle::random_f64({e * e, agg.config().p}, rng).to(DType::f32);
    const Tensor lhs = agg.parallel(swap_pairs(vol), b, a, l.layer);
    const Tensor rhs = swap_pairs(agg.parallel(vol, a, b, l.layer));
    equivariance = std::max(equivariance, oracle::max_abs_diff(lhs.values(), rhs.values()));
  }
  return {involution && cosine < kCosineTolerance && equivariance < kEquivarianceTolerance,
          std::string("involution ") + (involution ? "bitwise" : "BROKEN") + ", cosine diff " +
              fmt("%.2e", cosine) + ", parallel equivariance diff " + fmt("%.2e", equivariance)};
}

// -- 5 ----------------------------------------------------------------------

struct Overfit {
  double aepe = INFINITY;
  std::int64_t steps = 0;
  double seconds = 0.0;
};

Overfit overfit(const std::string& model) {
  RunConfig c = toy::config(model);
  c.set("train.steps", std::to_string(kOverfitMaxSteps));
  // Early stop on the training loss; the criterion is judged on a fresh evaluation.
  c.set("train.stop_aepe", "0.3");
  Model m(c);
  const std::vector<PairData> data = make_pairs(1, 1);
  const auto t0 = Clock::now();
  Overfit r;
  Trainer t(m, TrainConfig::from(c), data, 1);
  t.run();
  r.aepe = evaluate(m, data, {0.1}).mean_aepe();
  r.steps = t.step();
  r.seconds = since(t0);
  return r;
}

Verdict overfit_both() {
  const Overfit a = overfit("cats");
  const Overfit b = overfit("catspp");
  const auto ok = [](const Overfit& o) {
    return o.aepe < kOverfitAepe && o.steps <= kOverfitMaxSteps && o.seconds < kOverfitSeconds;
  };
  return {ok(a) && ok(b), "cats serial aepe " + fmt("%.3f", a.aepe) + " after " +
                              std::to_string(a.steps) + " steps " + fmt("%.0f s", a.seconds) +
                              "; catspp parallel aepe " + fmt("%.3f", b.aepe) + " after " +
                              std::to_string(b.steps) + " steps " + fmt("%.0f s", b.seconds)};
}

// -- 6 ----------------------------------------------------------------------

Verdict beats_wta() {
  const auto t0 = Clock::now();
  const std::vector<PairData> train = make_pairs(1000, kTrainPairs);
  const std::vector<PairData> test = make_pairs(5000, kTestPairs);
  bool ok = true;
  std::string detail;
  for (const auto& [model, steps] : {std::pair{"cats", kCatsSteps}, std::pair{"catspp", kCatsppSteps}}) {
    RunConfig c = toy::config(model);
    c.set("train.steps", std::to_string(steps));
    Model m(c);
    Trainer t(m, TrainConfig::from(c), train, 1);
    t.run();
    const Report r = evaluate(m, test, {0.1}, PckBasis::img);
    const double gain = r.mean_pck(0) - r.mean_wta_pck(0);
    ok = ok && gain >= kPckMargin;
    detail += std::string(detail.empty() ? "" : "; ") + model + " pck@0.1 " +
              fmt("%.3f", r.mean_pck(0)) + " vs wta " + fmt("%.3f", r.mean_wta_pck(0)) + " (" +
              std::to_string(steps) + " steps)";
  }
  const double secs = since(t0);
  return {ok && secs < kGeneralisationSeconds, detail + ", " + fmt("%.0f s", secs)};
}

// -- 7 ----------------------------------------------------------------------

double field(const std::string& text, const std::string& key) {
  const auto p = text.find(key + "=");
  if (p == std::string::npos) return NAN;
  return std::strtod(text.c_str() + p + key.size() + 1, nullptr);
}

Verdict efficiency() {
  const Run r = shell("bench --model catspp --set catspp.d=4 --set catspp.p=16 "
                      "--set catspp.attn_dim=32 --extent 16");
  const double params = field(r.out, "param_ratio");
  const double memory = field(r.out, "memory_ratio");
  return {r.code == 0 && params <= kParamRatio && memory <= 1.0,
          "16^4 volume, d=4: param ratio " + fmt("%.4f", params) + ", peak memory ratio " +
              fmt("%.3f", memory)};
}

// -- 8 ----------------------------------------------------------------------

std::map<std::string, double> report_fields(const std::string& line) {
  std::map<std::string, double> out;
  std::istringstream in(line);
  for (std::string tok; in >> tok;) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || tok.rfind("pair=", 0) == 0) continue;
    out[tok.substr(0, eq)] = std::strtod(tok.c_str() + eq + 1, nullptr);
  }
  return out;
}

// The valid-cell rule restated: the displaced centre stays within the hull
// of cell centres.
Tensor mask_oracle(const Tensor& flow) {
  const std::int64_t h = flow.dim(0), w = flow.dim(1);
  Tensor m({h, w}, DType::f64);
  for (std::int64_t v = 0; v < h; ++v)
    for (std::int64_t u = 0; u < w; ++u) {
      const double x = static_cast<double>(u) + flow.at({v, u, 0});
      const double y = static_cast<double>(v) + flow.at({v, u, 1});
      m.set_flat(v * w + u, x >= 0 && x <= static_cast<double>(w - 1) && y >= 0 &&
                                    y <= static_cast<double>(h - 1));
    }
  return m;
}

Verdict metric_oracles() {
  const fs::path dir = scratch("metrics");
  const std::string data = (dir / "data").string();
  const std::string manifest = (dir / "data" / "manifest.txt").string();
  const std::string ckpt = (dir / "model.catk").string();
  const std::string toy_cats =
      "--model cats --set cats.p=16 --set cats.ffn_ratio=2 --set cats.levels=0,2 "
      "--set train.lr_aggregator=3e-4 --set train.lr_backbone=3e-5 --set train.log_every=0";
  bool ok = shell("gen-data --out " + data + " --pairs 12 --seed 7000").code == 0 &&
            shell("train " + toy_cats + " --set train.steps=30 --data " + manifest + " --out " +
                  ckpt)
                    .code == 0 &&
            shell("infer --data " + manifest + " --checkpoint " + ckpt + " --out " +
                  (dir / "infer").string())
                    .code == 0 &&
            shell("eval --data " + manifest + " --checkpoint " + ckpt + " --out " +
                  (dir / "report.txt").string())
                    .code == 0;
  if (!ok) return {false, "pipeline commands failed"};

  double worst = 0.0;
  bool monotone = true;
  int pairs = 0;
  std::istringstream report(slurp(dir / "report.txt"));
  std::istringstream lines(slurp(manifest));
  std::vector<std::string> flows;
  for (std::string l; std::getline(lines, l);) {
    const auto p = l.find("flow=");
    if (p != std::string::npos) flows.push_back(l.substr(p + 5, l.find(' ', p) - p - 5));
  }
  for (std::string line; std::getline(report, line);) {
    if (line.rfind("pair=", 0) != 0) continue;
    const std::string id = line.substr(5, line.find(' ') - 5);
    const auto f = report_fields(line);
    const fs::path base = dir / "infer" / id;
    const Tensor pred = load_tensor(base.string() + "_flow.catt").to(DType::f64);
    const Tensor gt = load_tensor((dir / "data" / flows[static_cast<std::size_t>(pairs)]).string())
                          .to(DType::f64);
    worst = std::max(worst, std::abs(oracle::aepe(pred, gt, mask_oracle(gt)) - f.at("aepe")));
    const KeypointSet kp = read_keypoints(base.string() + "_kp_pred.txt");
    const KeypointSet kw = read_keypoints(base.string() + "_kp_wta.txt");
    const KeypointSet kg = read_keypoints(base.string() + "_kp_gt.txt");
    const double img = static_cast<double>(std::max(kg.height, kg.width));
    double last = -1.0;
    for (const char* a : {"0.05", "0.1", "0.15"}) {
      const double alpha = std::strtod(a, nullptr);
      const double p = oracle::pck(kp.points, kg.points, alpha, img);
      worst = std::max(worst, std::abs(p - f.at(std::string("pck@") + a)));
      worst = std::max(worst, std::abs(oracle::pck(kw.points, kg.points, alpha, img) -
                                       f.at(std::string("wta_pck@") + a)));
      monotone = monotone && p >= last;
      last = p;
    }
    ++pairs;
  }
  fs::remove_all(dir);
  return {pairs == 12 && worst < kMetricTolerance && monotone,
          std::to_string(pairs) + " pairs, max diff " + fmt("%.2e", worst) + ", pck monotone in alpha: " +
              (monotone ? "yes" : "no")};
}

// -- 9 ----------------------------------------------------------------------

std::string train_to(const std::string& path, std::int64_t steps, const std::string& resume) {
  RunConfig c = toy::config("catspp");
  c.set("train.steps", "6");
  c.set("train.batch", "2");
  Model m(c);
  TrainConfig tc = TrainConfig::from(c);
  Trainer t(m, tc, make_pairs(800, 4), 9);
  if (!resume.empty()) t.load_checkpoint(resume);
  while (t.step() < steps) t.train_step();
  t.save_checkpoint(path);
  return slurp(path);
}

Verdict determinism() {
  const fs::path dir = scratch("determinism");
  const std::string a = train_to((dir / "a.catk").string(), 6, "");
  const std::string b = train_to((dir / "b.catk").string(), 6, "");
  train_to((dir / "k.catk").string(), 3, "");
  const std::string resumed = train_to((dir / "r.catk").string(), 6, (dir / "k.catk").string());
  fs::remove_all(dir);
  const bool repro = !a.empty() && a == b;
  const bool resume = a == resumed;
  return {repro && resume, std::string("repeat run ") + (repro ? "identical" : "DIFFERS") +
                               ", resume at step 3 " + (resume ? "identical" : "DIFFERS") +
                               " to straight-through (6 steps, batch 2)"};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
      {"gradient suite", gradcheck},
      {"conv4d oracle", conv_oracle},
      {"residual identity", residual_identity},
      {"swap properties", swap_properties},
      {"single-pair overfit", overfit_both},
      {"aggregation beats WTA", beats_wta},
      {"efficient block cost", efficiency},
      {"metric oracles", metric_oracles},
      {"determinism and resume", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += v.pass ? 0 : 1;
    std::printf("criterion %zu (%s): %s  %s\n", i + 1, criteria[i].first, v.pass ? "PASS" : "FAIL",
                v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
