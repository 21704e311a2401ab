#include "catagg/cats.hpp"

#include "catagg/ops.hpp"
#include "catagg/transformer.hpp"

namespace catagg {

namespace {

std::string encoder_prefix(std::int64_t n, const char* kind) {
  return "cats.enc" + std::to_string(n) + "." + kind;
}

Tensor transpose_maps(const Tensor& v) { return permute(v, {0, 2, 1}); }

}  // namespace

AggregationMode parse_mode(const std::string& name) {
  if (name == "serial") return AggregationMode::serial;
  if (name == "parallel") return AggregationMode::parallel;
  if (name == "both") return AggregationMode::both;
  throw ConfigError("unknown aggregation mode '" + name + "' (serial | parallel | both)");
}

const char* mode_name(AggregationMode mode) {
  switch (mode) {
    case AggregationMode::serial: return "serial";
    case AggregationMode::parallel: return "parallel";
    case AggregationMode::both: return "both";
  }
  return "?";
}

void CatsConfig::validate() const {
  if (h < 1 || w < 1) throw ConfigError("cats: grid extents must be positive");
  if (n_encoders < 1) throw ConfigError("cats: n_encoders must be >= 1");
  if (p < 1) throw ConfigError("cats: p must be >= 1");
  if (ffn_ratio < 1) throw ConfigError("cats: ffn_ratio must be >= 1");
  if (level_channels.empty()) throw ConfigError("cats: at least one correlation level is required");
  if (n_heads < 1 || features() % n_heads != 0) {
    throw ConfigError("cats: token features hw + p = " + std::to_string(features()) +
                      " not divisible by n_heads = " + std::to_string(n_heads));
  }
}

CatsAggregator::CatsAggregator(CatsConfig cfg, ParamStore& store)
    : cfg_(std::move(cfg)), store_(&store) {
  cfg_.validate();
  const std::int64_t f = cfg_.features();
  for (std::int64_t l = 0; l < cfg_.levels(); ++l) {
    const std::int64_t c = cfg_.level_channels[static_cast<std::size_t>(l)];
    const std::string pre = "cats.appearance.l" + std::to_string(l);
    store.create(pre + ".weight", {c, cfg_.p}, Init::kaiming_uniform, c);
    store.create(pre + ".bias", {cfg_.p}, Init::zeros);
  }
  store.create("cats.pos_embed", {cfg_.tokens(), f}, Init::zeros);
  for (std::int64_t n = 0; n < cfg_.n_encoders; ++n) {
    create_transformer_block(store, encoder_prefix(n, "intra"), f, cfg_.ffn_ratio);
    create_transformer_block(store, encoder_prefix(n, "inter"), f, cfg_.ffn_ratio);
  }
  store.create("cats.head_norm.gamma", {f}, Init::ones);
  store.create("cats.head_norm.beta", {f}, Init::zeros);
  // Zero start: the aggregated map begins as the raw correlation.
  store.create("cats.head.weight", {f, cfg_.tokens()}, Init::zeros);
  store.create("cats.head.bias", {cfg_.tokens()}, Init::zeros);
}

Tensor CatsAggregator::appearance(const Tensor& d, std::int64_t level) const {
  if (d.rank() != 3 || d.dim(0) != cfg_.h || d.dim(1) != cfg_.w) {
    throw DimensionError("cats appearance: features " + shape_str(d.shape()) +
                         " are not on the " + std::to_string(cfg_.h) + "x" +
                         std::to_string(cfg_.w) + " grid");
  }
  const std::string pre = "cats.appearance.l" + std::to_string(level);
  return linear(reshape(d, {cfg_.tokens(), d.dim(2)}), store_->get(pre + ".weight"),
                store_->get(pre + ".bias"));
}

Tensor CatsAggregator::intra_attention(const Tensor& x, std::int64_t encoder) const {
  const Tensor pos = encoder == 0 ? store_->get("cats.pos_embed") : Tensor();
  return transformer_block(*store_, encoder_prefix(encoder, "intra"), x, pos, cfg_.n_heads);
}

Tensor CatsAggregator::inter_attention(const Tensor& x, std::int64_t encoder) const {
  const Tensor y = transformer_block(*store_, encoder_prefix(encoder, "inter"),
                                     permute(x, {1, 0, 2}), Tensor(), cfg_.n_heads);
  return permute(y, {1, 0, 2});
}

Tensor CatsAggregator::transform(const Tensor& corr, const std::vector<Tensor>& features) const {
  const std::int64_t t = cfg_.tokens();
  if (corr.shape() != Shape{cfg_.levels(), t, t}) {
    throw DimensionError("cats: correlation stack " + shape_str(corr.shape()) +
                         " does not match config [" + std::to_string(cfg_.levels()) + ", " +
                         std::to_string(t) + ", " + std::to_string(t) + "]");
  }
  if (static_cast<std::int64_t>(features.size()) != cfg_.levels()) {
    throw DimensionError("cats: expected " + std::to_string(cfg_.levels()) +
                         " feature levels, got " + std::to_string(features.size()));
  }
  std::vector<Tensor> app;
  for (std::int64_t l = 0; l < cfg_.levels(); ++l) {
    app.push_back(reshape(appearance(features[static_cast<std::size_t>(l)], l), {1, t, cfg_.p}));
  }
  Tensor x = concat({corr, app.size() == 1 ? app.front() : concat(app, 0)}, 2);
  for (std::int64_t n = 0; n < cfg_.n_encoders; ++n) {
    x = intra_attention(x, n);
    x = inter_attention(x, n);
  }
  x = layer_norm(x, store_->get("cats.head_norm.gamma"), store_->get("cats.head_norm.beta"));
  return linear(x, store_->get("cats.head.weight"), store_->get("cats.head.bias"));
}

Tensor CatsAggregator::serial(const Tensor& first, const Tensor& first_residual,
                              const std::vector<Tensor>& first_features,
                              const Tensor& second_residual,
                              const std::vector<Tensor>& second_features) const {
  const Tensor s = add(transform(first, first_features), first_residual);
  const Tensor st = transpose_maps(s);
  return add(transform(st, second_features), second_residual);
}

CorrelationStack CatsAggregator::aggregate(const CorrelationStack& c,
                                           const std::vector<Tensor>& ds,
                                           const std::vector<Tensor>& dt) const {
  if (c.h != cfg_.h || c.w != cfg_.w) throw DimensionError("cats: stack grid does not match config");
  // Rows index source positions from here on.
  const Tensor cs = c.token_axis == TokenAxis::source ? c.volume : transpose_maps(c.volume);
  const Tensor ct = transpose_maps(cs);
  Tensor out;
  switch (cfg_.mode) {
    case AggregationMode::serial:
      out = serial(ct, ct, dt, cs, ds);
      break;
    case AggregationMode::parallel:
      out = add(add(transform(cs, ds), cs), transpose_maps(add(transform(ct, dt), ct)));
      break;
    case AggregationMode::both:
      out = add(serial(ct, ct, dt, cs, ds), transpose_maps(serial(cs, cs, ds, ct, dt)));
      break;
  }
  CorrelationStack result = c;
  result.volume = c.token_axis == TokenAxis::source ? out : transpose_maps(out);
  return result;
}

std::vector<std::string> CatsAggregator::output_projections() const {
  std::vector<std::string> names;
  for (std::int64_t n = 0; n < cfg_.n_encoders; ++n) {
    for (const char* kind : {"intra", "inter"}) {
      for (auto& s : transformer_block_output_projections(encoder_prefix(n, kind))) {
        names.push_back(s);
      }
    }
  }
  names.push_back("cats.head.weight");
  names.push_back("cats.head.bias");
  return names;
}

}  // namespace catagg
