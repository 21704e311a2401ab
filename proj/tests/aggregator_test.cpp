#include <doctest.h>

#include <cmath>
#include <random>

#include "catagg/cats.hpp"
#include "catagg/catspp.hpp"
#include "catagg/ops.hpp"
#include "catagg/transformer.hpp"
#include "oracles.hpp"

using namespace catagg;

namespace {

CatsConfig small_cats(AggregationMode mode) {
  CatsConfig c;
  c.h = c.w = 4;
  c.p = 4;
  c.n_heads = 2;
  c.ffn_ratio = 2;
  c.level_channels = {3, 2};
  c.mode = mode;
  return c;
}

CatsppConfig small_catspp() {
  CatsppConfig c;
  c.layers = {{4, 8, 2, 3}, {5, 4, 1, 2}};
  c.d = 4;
  c.attn_dim = 8;
  c.p = 4;
  return c;
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

void zero(ParamStore& store, const std::vector<std::string>& names) {
  for (const auto& n : names) store.fill(n, 0.0);
}

struct CatsInputs {
  CorrelationStack stack;
  std::vector<Tensor> ds, dt;
};

CatsInputs cats_inputs(std::uint64_t seed, DType dt = DType::f32) {
  std::mt19937_64 rng(seed);
  CatsInputs in;
  in.stack.volume = oracle::random_f64({2, 16, 16}, rng, 0.0, 1.0).to(dt);
  in.stack.h = in.stack.w = 4;
  for (std::int64_t c : {3, 2}) {
    in.ds.push_back(oracle::random_f64({4, 4, c}, rng).to(dt));
    in.dt.push_back(oracle::random_f64({4, 4, c}, rng).to(dt));
  }
  return in;
}

}  // namespace

TEST_CASE("single-head attention equals softmax(q k^T / sqrt(f)) v") {
  std::mt19937_64 rng(31);
  const Tensor q = oracle::random_f64({1, 5, 4}, rng);
  const Tensor k = oracle::random_f64({1, 5, 4}, rng);
  const Tensor v = oracle::random_f64({1, 5, 3}, rng);
  const auto y = multi_head_attention(q, k, v, 1).values();
  for (std::int64_t i = 0; i < 5; ++i) {
    std::vector<double> w(5);
    double z = 0.0;
    for (std::int64_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::int64_t f = 0; f < 4; ++f) s += q.flat(i * 4 + f) * k.flat(j * 4 + f);
      w[j] = std::exp(s / 2.0);
      z += w[j];
    }
    for (std::int64_t c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < 5; ++j) acc += w[j] / z * v.flat(j * 3 + c);
      CHECK(y[i * 3 + c] == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("a transformer block with zeroed output projections is x + pos") {
  ParamStore store(1, DType::f64);
  create_transformer_block(store, "blk", 6, 2);
  randomise(store, 2);
  zero(store, transformer_block_output_projections("blk"));
  std::mt19937_64 rng(3);
  const Tensor x = oracle::random_f64({2, 5, 6}, rng);
  const Tensor pos = oracle::random_f64({5, 6}, rng);
  CHECK(transformer_block(store, "blk", x, pos, 2).bit_equal(add_broadcast(x, pos)));
  CHECK(transformer_block(store, "blk", x, Tensor(), 3).bit_equal(x));
}

TEST_CASE("cats config validation") {
  CatsConfig c = small_cats(AggregationMode::serial);
  c.n_heads = 3;  // 20 features
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_cats(AggregationMode::serial);
  c.level_channels.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_mode("both") == AggregationMode::both);
  CHECK_THROWS_AS(parse_mode("sideways"), ConfigError);
}

TEST_CASE("cats with zeroed output projections returns its input") {
  for (auto mode : {AggregationMode::serial, AggregationMode::parallel, AggregationMode::both}) {
    ParamStore store(4);
    CatsAggregator agg(small_cats(mode), store);
    randomise(store, 5);
    zero(store, agg.output_projections());
    const CatsInputs in = cats_inputs(6);
    const Tensor out = agg.aggregate(in.stack, in.ds, in.dt).volume;
    // Two-branch modes sum the two residual paths.
    const Tensor want =
        mode == AggregationMode::serial ? in.stack.volume : add(in.stack.volume, in.stack.volume);
    CHECK(out.bit_equal(want));
  }
}

TEST_CASE("cats keeps the caller's orientation") {
  ParamStore store(7, DType::f64);
  CatsAggregator agg(small_cats(AggregationMode::serial), store);
  randomise(store, 8);
  const CatsInputs in = cats_inputs(9, DType::f64);
  const CorrelationStack a = agg.aggregate(in.stack, in.ds, in.dt);
  const CorrelationStack b = agg.aggregate(swap(in.stack), in.ds, in.dt);
  CHECK(b.token_axis == TokenAxis::target);
  CHECK(oracle::max_abs_diff(swap(b).volume.values(), a.volume.values()) < 1e-12);
}

TEST_CASE("cats rejects mismatched inputs") {
  ParamStore store(1);
  CatsAggregator agg(small_cats(AggregationMode::serial), store);
  CatsInputs in = cats_inputs(2);
  in.ds.pop_back();
  CHECK_THROWS_AS(agg.aggregate(in.stack, in.ds, in.dt), DimensionError);
  in = cats_inputs(2);
  in.stack.h = 8;
  CHECK_THROWS_AS(agg.aggregate(in.stack, in.ds, in.dt), DimensionError);
}

TEST_CASE("doubling encoders doubles encoder parameters") {
  for (int model = 0; model < 2; ++model) {
    ParamStore one(1), two(1);
    std::int64_t per_block_one = 0, per_block_two = 0, total_one = 0, total_two = 0;
    if (model == 0) {
      CatsConfig c = small_cats(AggregationMode::serial);
      CatsAggregator a(c, one);
      c.n_encoders = 2;
      CatsAggregator b(c, two);
      per_block_one = one.count("cats.enc");
      per_block_two = two.count("cats.enc");
    } else {
      CatsppConfig c = small_catspp();
      CatsppAggregator a(c, one);
      c.n_encoders = 2;
      CatsppAggregator b(c, two);
      for (int q : {4, 5}) {
        per_block_one += one.count(a.block_prefix(q, 0) + ".");
        per_block_two += two.count(b.block_prefix(q, 0) + ".") + two.count(b.block_prefix(q, 1) + ".");
      }
    }
    total_one = one.count();
    total_two = two.count();
    CHECK(per_block_one > 0);
    CHECK(per_block_two == 2 * per_block_one);
    CHECK(total_two - total_one == per_block_one);
  }
}

TEST_CASE("catspp config validation") {
  CatsppConfig c = small_catspp();
  c.mode = AggregationMode::serial;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_catspp();
  c.layers[1].extent = 6;  // 8 -> 4 embedded does not double 6 -> 3
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_catspp();
  c.kernel = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("catspp layers are processed coarse to fine") {
  ParamStore store(1);
  CatsppAggregator agg(small_catspp(), store);
  REQUIRE(agg.layers().size() == 2);
  CHECK(agg.layers()[0].layer == 5);
  CHECK(agg.layers()[1].layer == 4);
}

TEST_CASE("catspp efficient block with zeroed projections is the identity") {
  ParamStore store(2);
  CatsppAggregator agg(small_catspp(), store);
  randomise(store, 3);
  zero(store, agg.output_projections());
  std::mt19937_64 rng(4);
  const Tensor m = oracle::random_f64({4, 4, 4, 4, 4}, rng).to(DType::f32);
  const Tensor app = oracle::random_f64({16, 4}, rng).to(DType::f32);
  CHECK(agg.efficient_block(m, app, 4).bit_equal(m));
  CHECK(agg.parallel(m, app, app, 4).bit_equal(add(m, m)));
}

TEST_CASE("catspp pyramid with zeroed projections reproduces the cascade") {
  ParamStore store(5);
  CatsppAggregator agg(small_catspp(), store);
  randomise(store, 6);
  zero(store, agg.output_projections());
  std::mt19937_64 rng(7);
  const std::vector<Tensor> embedded = {oracle::random_f64({2, 2, 2, 2, 4}, rng).to(DType::f32),
                                        oracle::random_f64({4, 4, 4, 4, 4}, rng).to(DType::f32)};
  const std::vector<Tensor> fs = {oracle::random_f64({2, 2, 2}, rng).to(DType::f32),
                                  oracle::random_f64({4, 4, 3}, rng).to(DType::f32)};
  const Tensor coarse = add(embedded[0], embedded[0]);
  const Tensor fine_in = add(embedded[1], upsample4d_bilinear(coarse, 2));
  CHECK(agg.pyramid(embedded, fs, fs).bit_equal(add(fine_in, fine_in)));
}

TEST_CASE("catspp parallel branch is swap equivariant") {
  ParamStore store(8);
  CatsppAggregator agg(small_catspp(), store);
  randomise(store, 9);
  std::mt19937_64 rng(10);
  const Tensor m = oracle::random_f64({4, 4, 4, 4, 4}, rng).to(DType::f32);
  const Tensor a = oracle::random_f64({16, 4}, rng).to(DType::f32);
  const Tensor b = oracle::random_f64({16, 4}, rng).to(DType::f32);
  const Tensor lhs = agg.parallel(swap_pairs(m), b, a, 4);
  const Tensor rhs = swap_pairs(agg.parallel(m, a, b, 4));
  CHECK(oracle::max_abs_diff(lhs.values(), rhs.values()) < 1e-5);
}

TEST_CASE("catspp aggregate shape and missing layers") {
  ParamStore store(11);
  CatsppAggregator agg(small_catspp(), store);
  std::mt19937_64 rng(12);
  Hypercorrelation h4, h5;
  h4.layer = 4;
  h4.volume = oracle::random_f64({8, 8, 8, 8, 2}, rng).to(DType::f32);
  h5.layer = 5;
  h5.volume = oracle::random_f64({4, 4, 4, 4, 1}, rng).to(DType::f32);
  const std::vector<Tensor> fs = {oracle::random_f64({2, 2, 2}, rng).to(DType::f32),
                                  oracle::random_f64({4, 4, 3}, rng).to(DType::f32)};
  CHECK(agg.aggregate({h4, h5}, fs, fs).shape() == Shape{4, 4, 4, 4, 4});
  CHECK_THROWS_AS(agg.aggregate({h4}, fs, fs), ArgumentError);
}
