#include "catagg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "catagg/cats.hpp"
#include "catagg/catspp.hpp"
#include "catagg/correlation.hpp"
#include "catagg/flow.hpp"
#include "catagg/ops.hpp"
#include "catagg/params.hpp"
#include "catagg/transformer.hpp"

namespace catagg {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi,
                     bool requires_grad) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape, DType::f64);
  auto v = t.data_mut<double>();
  for (auto& x : v) x = u(rng);
  t.set_requires_grad(requires_grad);
  return t;
}

namespace {

using Targets = std::vector<std::pair<std::string, Tensor>>;

// Uniform magnitude in [0.05, 1) with a random sign; keeps kinks out of reach
// of the finite-difference step.
Tensor away_from_zero(const Shape& shape, std::mt19937_64& rng) {
  Tensor t = random_tensor(shape, rng, -1.0, 1.0, false);
  for (auto& x : t.data_mut<double>()) x = std::copysign(0.05 + 0.95 * std::abs(x), x);
  t.set_requires_grad(true);
  return t;
}

// Replaces every parameter with random values (zero-initialised ones too, so
// no path is trivially dead) and lists them as targets.
void randomize_params(ParamStore& store, std::mt19937_64& rng, Targets& targets,
                      double range = 0.5) {
  for (const auto& name : store.names()) {
    const Tensor& p = store.get(name);
    store.set(name, random_tensor(p.shape(), rng, -range, range, false));
    targets.emplace_back(name, p);
  }
}

GradCase unary(std::string name, Shape shape, std::function<Tensor(const Tensor&)> f,
               double lo = -1.0, double hi = 1.0) {
  return {name, [=](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            Tensor x = random_tensor(shape, rng, lo, hi);
            return GradProblem{{{"x", x}}, [=] { return f(x); }};
          }};
}

GradCase binary(std::string name, Shape sa, Shape sb,
                std::function<Tensor(const Tensor&, const Tensor&)> f) {
  return {name, [=](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            Tensor a = random_tensor(sa, rng);
            Tensor b = random_tensor(sb, rng);
            return GradProblem{{{"a", a}, {"b", b}}, [=] { return f(a, b); }};
          }};
}

GradCase conv_case(std::string name, int rank, std::int64_t extent, std::int64_t kernel,
                   std::vector<std::int64_t> stride) {
  return {name, [=](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            Shape xs(static_cast<std::size_t>(rank), extent);
            xs.push_back(2);
            Shape ks(static_cast<std::size_t>(rank), kernel);
            ks.push_back(2);
            ks.push_back(3);
            Tensor x = random_tensor(xs, rng);
            Tensor k = random_tensor(ks, rng);
            Tensor b = random_tensor({3}, rng);
            auto fwd = [=]() {
              if (rank == 2) return conv2d(x, k, b, {stride[0], stride[1]});
              return conv4d(x, k, b, {stride[0], stride[1], stride[2], stride[3]});
            };
            return GradProblem{{{"x", x}, {"kernel", k}, {"bias", b}}, fwd};
          }};
}

GradCase cats_case(AggregationMode mode) {
  return {std::string("cats_") + mode_name(mode), [=](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            CatsConfig cfg;
            cfg.h = 2;
            cfg.w = 2;
            cfg.p = 2;
            cfg.n_heads = 2;
            cfg.ffn_ratio = 2;
            cfg.level_channels = {3, 2};
            cfg.mode = mode;
            auto store = std::make_shared<ParamStore>(seed, DType::f64);
            auto agg = std::make_shared<CatsAggregator>(cfg, *store);
            Targets targets;
            randomize_params(*store, rng, targets);
            Tensor corr = random_tensor({2, 4, 4}, rng, 0.0, 1.0);
            std::vector<Tensor> ds{random_tensor({2, 2, 3}, rng), random_tensor({2, 2, 2}, rng)};
            std::vector<Tensor> dt{random_tensor({2, 2, 3}, rng), random_tensor({2, 2, 2}, rng)};
            targets.emplace_back("correlation", corr);
            for (std::size_t l = 0; l < 2; ++l) {
              targets.emplace_back("ds" + std::to_string(l), ds[l]);
              targets.emplace_back("dt" + std::to_string(l), dt[l]);
            }
            return GradProblem{targets, [=] {
                                 (void)store;  // keeps the parameters alive
                                 CorrelationStack c;
                                 c.volume = corr;
                                 c.h = 2;
                                 c.w = 2;
                                 return agg->aggregate(c, ds, dt).volume;
                               }};
          }};
}

CatsppConfig small_catspp() {
  CatsppConfig cfg;
  cfg.layers = {{4, 8, 2, 3}, {5, 4, 1, 2}};
  cfg.d = 4;
  cfg.kernel = 3;
  cfg.embed_stride = 2;
  cfg.proj_stride = 2;
  cfg.attn_dim = 4;
  cfg.ffn_ratio = 2;
  cfg.p = 2;
  return cfg;
}

GradCase catspp_case() {
  GradCase c{"catspp_pyramid", [](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            auto store = std::make_shared<ParamStore>(seed, DType::f64);
            auto agg = std::make_shared<CatsppAggregator>(small_catspp(), *store);
            Targets targets;
            randomize_params(*store, rng, targets);
            std::vector<Hypercorrelation> hyper;
            std::vector<Tensor> fs, ft;
            for (const auto& l : agg->layers()) {
              Hypercorrelation h;
              h.layer = l.layer;
              const std::int64_t n = l.extent;
              h.volume = random_tensor({n, n, n, n, l.correlation_channels}, rng, 0.0, 1.0);
              const std::int64_t e = agg->config().embedded_extent(n);
              fs.push_back(random_tensor({e, e, l.feature_channels}, rng));
              ft.push_back(random_tensor({e, e, l.feature_channels}, rng));
              const std::string q = std::to_string(l.layer);
              targets.emplace_back("hyper" + q, h.volume);
              targets.emplace_back("fs" + q, fs.back());
              targets.emplace_back("ft" + q, ft.back());
              hyper.push_back(std::move(h));
            }
            return GradProblem{targets, [=] {
                                 (void)store;
                                 return agg->aggregate(hyper, fs, ft);
                               }};
          }};
  c.max_coords = 6;
  return c;
}

GradCase volumetric_ffn_case() {
  return {"volumetric_ffn", [](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            auto store = std::make_shared<ParamStore>(seed, DType::f64);
            auto agg = std::make_shared<CatsppAggregator>(small_catspp(), *store);
            Targets targets;
            randomize_params(*store, rng, targets);
            // Only the layer-4 block parameters reach the output.
            std::erase_if(targets, [&](const auto& t) {
              return t.first.rfind(agg->block_prefix(4, 0) + ".ffn", 0) != 0;
            });
            Tensor z = random_tensor({4, 4, 4, 4, 4}, rng);
            targets.emplace_back("z", z);
            return GradProblem{targets, [=] {
                                 (void)store;
                                 return agg->volumetric_ffn(z, 4, 0);
                               }};
          }};
}

GradCase transformer_case() {
  return {"transformer_block", [](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            auto store = std::make_shared<ParamStore>(seed, DType::f64);
            create_transformer_block(*store, "blk", 6, 2);
            Targets targets;
            randomize_params(*store, rng, targets);
            Tensor x = random_tensor({2, 4, 6}, rng);
            Tensor pos = random_tensor({4, 6}, rng);
            targets.emplace_back("x", x);
            targets.emplace_back("pos", pos);
            return GradProblem{targets, [=] { return transformer_block(*store, "blk", x, pos, 2); }};
          }};
}

std::vector<GradCase> build_suite() {
  std::vector<GradCase> s;
  s.push_back(binary("add", {2, 3}, {2, 3}, add));
  s.push_back(binary("sub", {2, 3}, {2, 3}, sub));
  s.push_back(binary("mul", {2, 3}, {2, 3}, mul));
  s.push_back(unary("scale", {2, 3}, [](const Tensor& x) { return scale(x, -1.7); }));
  s.push_back(unary("add_scalar", {2, 3}, [](const Tensor& x) { return add_scalar(x, 0.3); }));
  s.push_back(binary("add_broadcast", {2, 3, 4}, {3, 4}, add_broadcast));
  s.push_back({"relu", [](std::uint64_t seed) {
                 std::mt19937_64 rng(seed);
                 Tensor x = away_from_zero({3, 4}, rng);
                 return GradProblem{{{"x", x}}, [=] { return relu(x); }};
               }});
  s.push_back(unary("gelu", {3, 4}, [](const Tensor& x) { return gelu(x); }, -3.0, 3.0));
  s.push_back(unary("sum", {2, 3}, [](const Tensor& x) { return sum(x); }));
  s.push_back(unary("mean", {2, 3}, [](const Tensor& x) { return mean(x); }));
  s.push_back(unary("mean_axis", {2, 3, 4}, [](const Tensor& x) { return mean_axis(x, 1); }));
  s.push_back(binary("matmul", {2, 3, 4}, {2, 4, 5}, matmul));
  s.push_back(binary("matmul_shared", {2, 3, 4}, {4, 5}, matmul));
  s.push_back(binary("matmul_nt", {2, 3, 4}, {2, 5, 4}, matmul_nt));
  s.push_back({"linear", [](std::uint64_t seed) {
                 std::mt19937_64 rng(seed);
                 Tensor x = random_tensor({2, 3, 4}, rng);
                 Tensor w = random_tensor({4, 5}, rng);
                 Tensor b = random_tensor({5}, rng);
                 return GradProblem{{{"x", x}, {"weight", w}, {"bias", b}},
                                    [=] { return linear(x, w, b); }};
               }});
  s.push_back(unary("softmax", {3, 5}, [](const Tensor& x) { return softmax(x, 1); }, -2.0, 2.0));
  s.push_back(unary("softmax_axis0", {4, 3}, [](const Tensor& x) { return softmax(x, 0); }));
  s.push_back({"layer_norm", [](std::uint64_t seed) {
                 std::mt19937_64 rng(seed);
                 Tensor x = random_tensor({3, 6}, rng);
                 Tensor g = random_tensor({6}, rng);
                 Tensor b = random_tensor({6}, rng);
                 return GradProblem{{{"x", x}, {"gamma", g}, {"beta", b}},
                                    [=] { return layer_norm(x, g, b); }};
               }});
  s.push_back(unary("l2_normalize", {3, 4}, [](const Tensor& x) { return l2_normalize(x); }));
  s.push_back(unary("reshape", {2, 6}, [](const Tensor& x) { return reshape(x, {3, -1}); }));
  s.push_back(unary("permute", {2, 3, 4}, [](const Tensor& x) { return permute(x, {2, 0, 1}); }));
  s.push_back(binary("concat", {2, 3}, {2, 2},
                     [](const Tensor& a, const Tensor& b) { return concat({a, b}, 1); }));
  s.push_back(unary("slice", {4, 3}, [](const Tensor& x) { return slice(x, 0, 1, 2); }));
  s.push_back(conv_case("conv2d", 2, 5, 3, {1, 1}));
  s.push_back(conv_case("conv2d_stride", 2, 5, 3, {2, 1}));
  s.push_back(conv_case("conv4d", 4, 3, 3, {1, 1, 1, 1}));
  s.push_back(conv_case("conv4d_stride", 4, 4, 3, {1, 1, 2, 2}));
  s.push_back(conv_case("conv4d_k1", 4, 3, 1, {2, 1, 1, 2}));
  s.push_back(unary("resample_up", {2, 3, 2},
                    [](const Tensor& x) { return resample_axis(x, 1, 5); }));
  s.push_back(unary("resample_down", {2, 5, 2},
                    [](const Tensor& x) { return resample_axis(x, 1, 2); }));
  s.push_back(unary("resize_bilinear", {3, 4, 2},
                    [](const Tensor& x) { return resize_bilinear(x, 5, 3); }));
  s.push_back(unary("upsample4d", {2, 2, 2, 2, 2},
                    [](const Tensor& x) { return upsample4d_bilinear(x, 2); }));
  s.push_back({"cosine_correlation", [](std::uint64_t seed) {
                 std::mt19937_64 rng(seed);
                 // Positive features give positive cosines, away from the ReLU kink.
                 Tensor a = random_tensor({2, 3, 4}, rng, 0.1, 1.0);
                 Tensor b = random_tensor({3, 2, 4}, rng, 0.1, 1.0);
                 return GradProblem{{{"a", a}, {"b", b}}, [=] { return cosine_correlation(a, b); }};
               }});
  s.push_back({"attention", [](std::uint64_t seed) {
                 std::mt19937_64 rng(seed);
                 Tensor q = random_tensor({2, 5, 4}, rng);
                 Tensor k = random_tensor({2, 5, 4}, rng);
                 Tensor v = random_tensor({2, 5, 6}, rng);
                 return GradProblem{{{"q", q}, {"k", k}, {"v", v}},
                                    [=] { return multi_head_attention(q, k, v, 2); }};
               }});
  s.push_back(transformer_case());
  s.push_back(cats_case(AggregationMode::serial));
  s.push_back(cats_case(AggregationMode::parallel));
  s.push_back(cats_case(AggregationMode::both));
  s.push_back(volumetric_ffn_case());
  s.push_back(catspp_case());
  s.push_back(unary("soft_argmax", {9, 12},
                    [](const Tensor& c) { return soft_argmax_flow(c, 3, 3, 3, 4); }, 0.0, 0.25));
  s.push_back({"aepe", [](std::uint64_t seed) {
                 std::mt19937_64 rng(seed);
                 Tensor pred = random_tensor({3, 4, 2}, rng, -2.0, 2.0);
                 Tensor gt = random_tensor({3, 4, 2}, rng, -2.0, 2.0, false);
                 Tensor mask = Tensor::full({3, 4}, 1.0, DType::f64);
                 mask.set_flat(5, 0.0);
                 return GradProblem{{{"pred", pred}}, [=] { return aepe(pred, gt, mask); }};
               }});
  return s;
}

}  // namespace

GradResult check_gradients(const GradCase& c, const GradCheckOptions& options) {
  GradResult r;
  r.name = c.name;
  for (int s = 0; s < options.seeds; ++s) {
    const std::uint64_t seed = 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(s + 1);
    GradProblem p = c.make(seed);
    std::mt19937_64 rng(seed ^ 0x2545f4914f6cdd1dULL);
    Tensor out;
    {
      ModeGuard train(Mode::train);
      out = p.forward();
    }
    if (out.dtype() != DType::f64) throw ArgumentError("gradcheck: " + c.name + " is not f64");
    const Tensor weights = random_tensor(out.shape(), rng, -1.0, 1.0, false);
    {
      ModeGuard train(Mode::train);
      backward(sum(mul(out, weights)));
    }
    auto loss = [&] {
      InferenceGuard infer;
      return sum(mul(p.forward(), weights)).item();
    };
    for (auto& [name, t] : p.targets) {
      const Tensor g = t.grad();
      const std::int64_t n = t.numel();
      std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
      std::iota(idx.begin(), idx.end(), 0);
      const std::int64_t budget = c.max_coords > 0 ? c.max_coords : options.max_coords;
      if (n > budget) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(static_cast<std::size_t>(budget));
      }
      for (const std::int64_t i : idx) {
        const double v = t.flat(i);
        t.set_flat(i, v + options.step);
        const double fp = loss();
        t.set_flat(i, v - options.step);
        const double fm = loss();
        t.set_flat(i, v);
        const double fd = (fp - fm) / (2.0 * options.step);
        const double analytic = g.defined() ? g.flat(i) : 0.0;
        const double err = std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
        ++r.checked;
        if (err > r.max_error || !std::isfinite(err)) {
          r.max_error = std::isfinite(err) ? err : INFINITY;
          r.worst = name + "[" + std::to_string(i) + "] seed=" + std::to_string(s);
        }
      }
    }
  }
  r.passed = r.max_error < options.tolerance;
  return r;
}

const std::vector<GradCase>& gradient_suite() {
  static const std::vector<GradCase> suite = build_suite();
  return suite;
}

const GradCase& find_gradient_case(const std::string& name) {
  for (const auto& c : gradient_suite()) {
    if (c.name == name) return c;
  }
  throw ArgumentError("unknown gradient check '" + name + "'");
}

}  // namespace catagg
