#include "catagg/bench.hpp"

#include <chrono>
#include <functional>
#include <random>

#include "catagg/dataset.hpp"
#include "catagg/ops.hpp"
#include "catagg/transformer.hpp"

namespace catagg {

namespace {

std::string module_of(const std::string& name) {
  const auto first = name.find('.');
  if (first == std::string::npos) return name;
  const auto second = name.find('.', first + 1);
  return second == std::string::npos ? name : name.substr(0, second);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor uniform(const Shape& shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(shape);
  for (auto& x : t.data_mut<float>()) x = static_cast<float>(u(rng));
  return t;
}

// Peak memory of an inference forward, then timing of a train-mode forward
// and backward of sum(output).
Cost measure(const std::function<Tensor()>& forward) {
  Cost c;
  {
    InferenceGuard infer;
    const std::int64_t before = memory_stats().live_bytes;
    reset_peak_memory();
    Tensor out = forward();
    c.peak_forward_bytes = memory_stats().peak_bytes - before;
  }
  ModeGuard train(Mode::train);
  auto t0 = std::chrono::steady_clock::now();
  const Tensor loss = sum(forward());
  c.forward_seconds = seconds_since(t0);
  t0 = std::chrono::steady_clock::now();
  backward(loss);
  c.backward_seconds = seconds_since(t0);
  return c;
}

}  // namespace

std::vector<ModuleParams> params_by_module(const ParamStore& store) {
  std::vector<ModuleParams> out;
  for (const auto& name : store.names()) {
    const std::string m = module_of(name);
    if (out.empty() || out.back().module != m) out.push_back({m, 0});
    out.back().count += store.get(name).numel();
  }
  return out;
}

ModelBench bench_model(Model& model, std::uint64_t seed) {
  ModelBench b;
  b.modules = params_by_module(model.params());
  b.cost.params = model.params().count();
  const PairData pair = to_pair_data(generate_pair(seed), model.grid(), "bench");
  const DType dt = model.params().dtype();
  const Tensor src = pair.source.to(dt);
  const Tensor tgt = pair.target.to(dt);
  const Cost c = measure([&] { return model.forward(src, tgt).flow; });
  b.cost.peak_forward_bytes = c.peak_forward_bytes;
  b.cost.forward_seconds = c.forward_seconds;
  b.cost.backward_seconds = c.backward_seconds;
  model.params().zero_grad();
  return b;
}

BlockComparison compare_blocks(std::int64_t extent, const CatsppConfig& base, std::uint64_t seed) {
  CatsppConfig cfg = base;
  cfg.embed_stride = 1;
  cfg.n_encoders = 1;
  cfg.layers = {{3, extent, 1, 1}};
  const std::int64_t t = extent * extent;
  BlockComparison r;
  r.tokens = t;
  r.features = t * cfg.d;
  std::mt19937_64 rng(seed);

  ParamStore eff_store(seed);
  CatsppAggregator agg(cfg, eff_store);
  const Tensor m = uniform({extent, extent, extent, extent, cfg.d}, rng);
  const Tensor app = uniform({t, cfg.p}, rng);
  r.efficient = measure([&] { return agg.efficient_block(m, app, 3); });
  r.efficient.params = eff_store.count(agg.block_prefix(3, 0) + ".");

  ParamStore std_store(seed);
  create_transformer_block(std_store, "standard", r.features, 4);
  const Tensor x = uniform({1, t, r.features}, rng);
  r.standard = measure([&] { return transformer_block(std_store, "standard", x, Tensor(), 1); });
  r.standard.params = std_store.count("standard.");
  return r;
}

}  // namespace catagg
