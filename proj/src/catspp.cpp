#include "catagg/catspp.hpp"

#include <algorithm>

#include "catagg/ops.hpp"
#include "catagg/transformer.hpp"

namespace catagg {

namespace {

std::string layer_prefix(int q) { return "catspp.l" + std::to_string(q); }

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

void create_conv(ParamStore& store, const std::string& name, std::int64_t k, std::int64_t cin,
                 std::int64_t cout) {
  const std::int64_t taps = k * k * k * k;
  store.create(name + ".weight", {k, k, k, k, cin, cout}, Init::kaiming_uniform, taps * cin);
  store.create(name + ".bias", {cout}, Init::zeros);
}

void create_ln(ParamStore& store, const std::string& name, std::int64_t n) {
  store.create(name + ".gamma", {n}, Init::ones);
  store.create(name + ".beta", {n}, Init::zeros);
}

Tensor ln(const ParamStore& s, const std::string& name, const Tensor& x) {
  return layer_norm(x, s.get(name + ".gamma"), s.get(name + ".beta"));
}

Tensor conv(const ParamStore& s, const std::string& name, const Tensor& x,
            std::array<std::int64_t, 4> stride) {
  return conv4d(x, s.get(name + ".weight"), s.get(name + ".bias"), stride);
}

// Token-major LayerNorm over the flattened (b1, b2, ch) features of a volume.
Tensor ln_tokens(const ParamStore& s, const std::string& name, const Tensor& vol) {
  const Shape shape = vol.shape();
  const std::int64_t t = shape[0] * shape[1];
  return reshape(ln(s, name, reshape(vol, {t, -1})), shape);
}

}  // namespace

void CatsppConfig::validate() const {
  if (mode != AggregationMode::parallel) {
    throw ConfigError(std::string("catspp supports mode = parallel only, got ") + mode_name(mode));
  }
  if (layers.empty()) throw ConfigError("catspp: no pyramid layers configured");
  if (d < 1 || p < 1 || attn_dim < 1 || ffn_ratio < 1 || n_encoders < 1) {
    throw ConfigError("catspp: d, p, attn_dim, ffn_ratio and n_encoders must be >= 1");
  }
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("catspp: kernel extent must be odd");
  if (embed_stride < 1 || proj_stride < 1) throw ConfigError("catspp: strides must be >= 1");
  if (n_heads < 1 || attn_dim % n_heads != 0) {
    throw ConfigError("catspp: attn_dim not divisible by n_heads");
  }
  auto sorted = layers;
  std::sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.layer > b.layer; });
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& l = sorted[i];
    if (l.extent < kernel) {
      throw ConfigError("catspp: layer " + std::to_string(l.layer) + " extent " +
                        std::to_string(l.extent) + " is smaller than the kernel");
    }
    if (l.correlation_channels < 1 || l.feature_channels < 1) {
      throw ConfigError("catspp: layer " + std::to_string(l.layer) + " has no channels");
    }
    if (i > 0 && sorted[i - 1].layer == l.layer) {
      throw ConfigError("catspp: duplicate layer " + std::to_string(l.layer));
    }
    const std::int64_t e = embedded_extent(l.extent);
    const std::int64_t tokens = e * e;
    const std::int64_t feat = e * e * d;
    if (feat % n_heads != 0 || tokens < 1) {
      throw ConfigError("catspp: value features not divisible by n_heads");
    }
    if (i > 0) {
      const std::int64_t coarse = embedded_extent(sorted[i - 1].extent);
      if (2 * coarse != e) {
        throw ConfigError("catspp: broken extent chain, layer " + std::to_string(sorted[i - 1].layer) +
                          " embeds to " + std::to_string(coarse) + " but layer " +
                          std::to_string(l.layer) + " embeds to " + std::to_string(e));
      }
    }
  }
}

CatsppAggregator::CatsppAggregator(CatsppConfig cfg, ParamStore& store)
    : cfg_(std::move(cfg)), store_(&store) {
  cfg_.validate();
  layers_ = cfg_.layers;
  std::sort(layers_.begin(), layers_.end(), [](auto& a, auto& b) { return a.layer > b.layer; });
  const std::int64_t k = cfg_.kernel, d = cfg_.d;
  for (const auto& l : layers_) {
    const std::string pre = layer_prefix(l.layer);
    const std::int64_t e = cfg_.embedded_extent(l.extent);
    const std::int64_t er = ceil_div(e, cfg_.proj_stride);
    const std::int64_t tokens = e * e;
    const std::int64_t feat = e * e * d;
    const std::int64_t feat_r = er * er * d;
    create_conv(store, pre + ".embed", k, l.correlation_channels, d);
    store.create(pre + ".appearance.weight", {l.feature_channels, cfg_.p}, Init::kaiming_uniform,
                 l.feature_channels);
    store.create(pre + ".appearance.bias", {cfg_.p}, Init::zeros);
    for (std::int64_t n = 0; n < cfg_.n_encoders; ++n) {
      const std::string b = block_prefix(l.layer, n);
      create_ln(store, b + ".ln_in", feat);
      for (const char* qk : {"q", "k"}) {
        const std::string s = b + "." + qk;
        create_conv(store, s + "conv", k, d, d);
        create_ln(store, s + "_ln", feat_r);
        store.create(s + "_proj.weight", {feat_r + cfg_.p, cfg_.attn_dim}, Init::kaiming_uniform,
                     feat_r + cfg_.p);
        store.create(s + "_proj.bias", {cfg_.attn_dim}, Init::zeros);
        store.create(s + "_pos", {tokens, cfg_.attn_dim}, Init::zeros);
      }
      create_conv(store, b + ".vconv", k, d, d);
      create_ln(store, b + ".v_ln", feat);
      create_ln(store, b + ".ffn_ln", feat);
      create_conv(store, b + ".ffn1", k, d, cfg_.ffn_ratio * d);
      create_conv(store, b + ".ffn2", k, cfg_.ffn_ratio * d, d);
    }
  }
}

std::string CatsppAggregator::block_prefix(int layer, std::int64_t encoder) const {
  return layer_prefix(layer) + ".enc" + std::to_string(encoder);
}

const CatsppLayer& CatsppAggregator::layer_config(int layer) const {
  for (const auto& l : layers_) {
    if (l.layer == layer) return l;
  }
  throw ArgumentError("catspp: layer " + std::to_string(layer) + " is not configured");
}

Tensor CatsppAggregator::conv_embed(const Tensor& hyper, int layer) const {
  const auto& l = layer_config(layer);
  const Shape want{l.extent, l.extent, l.extent, l.extent, l.correlation_channels};
  if (hyper.shape() != want) {
    throw DimensionError("catspp: layer " + std::to_string(layer) + " hypercorrelation " +
                         shape_str(hyper.shape()) + ", expected " + shape_str(want));
  }
  const std::int64_t s = cfg_.embed_stride;
  return gelu(conv(*store_, layer_prefix(layer) + ".embed", hyper, {s, s, s, s}));
}

Tensor CatsppAggregator::appearance(const Tensor& d, int layer) const {
  const auto& l = layer_config(layer);
  const std::int64_t e = cfg_.embedded_extent(l.extent);
  if (d.rank() != 3 || d.dim(0) != e || d.dim(1) != e) {
    throw DimensionError("catspp: appearance features " + shape_str(d.shape()) +
                         " not on the embedded " + std::to_string(e) + "x" + std::to_string(e) +
                         " grid");
  }
  const std::string pre = layer_prefix(layer) + ".appearance";
  return linear(reshape(d, {e * e, d.dim(2)}), store_->get(pre + ".weight"),
                store_->get(pre + ".bias"));
}

CatsppAggregator::Qkv CatsppAggregator::affinity_qkv(const Tensor& m, const Tensor& app, int layer,
                                                     std::int64_t encoder) const {
  const auto& l = layer_config(layer);
  const std::int64_t e = cfg_.embedded_extent(l.extent);
  const Shape want{e, e, e, e, cfg_.d};
  if (m.shape() != want) {
    throw DimensionError("catspp: volume " + shape_str(m.shape()) + ", expected " + shape_str(want));
  }
  const std::int64_t t = e * e;
  if (app.shape() != Shape{t, cfg_.p}) {
    throw DimensionError("catspp: appearance " + shape_str(app.shape()) + " does not match " +
                         std::to_string(t) + " tokens");
  }
  const std::string b = block_prefix(layer, encoder);
  const Tensor normed = ln_tokens(*store_, b + ".ln_in", m);
  const std::int64_t s = cfg_.proj_stride;
  Qkv out;
  Tensor* slots[2] = {&out.q, &out.k};
  const char* names[2] = {"q", "k"};
  for (int i = 0; i < 2; ++i) {
    const std::string p = b + "." + names[i];
    const Tensor reduced = reshape(conv(*store_, p + "conv", normed, {1, 1, s, s}), {t, -1});
    const Tensor tokens = concat({ln(*store_, p + "_ln", reduced), app}, 1);
    *slots[i] = add(linear(tokens, store_->get(p + "_proj.weight"), store_->get(p + "_proj.bias")),
                    store_->get(p + "_pos"));
  }
  out.v = ln(*store_, b + ".v_ln", reshape(conv(*store_, b + ".vconv", normed, {1, 1, 1, 1}), {t, -1}));
  return out;
}

Tensor CatsppAggregator::volumetric_ffn(const Tensor& z, int layer, std::int64_t encoder) const {
  if (z.rank() != 5) throw DimensionError("volumetric_ffn expects a 5-d volume");
  const std::string b = block_prefix(layer, encoder);
  const Tensor x = ln_tokens(*store_, b + ".ffn_ln", z);
  const Tensor hidden = gelu(conv(*store_, b + ".ffn1", x, {1, 1, 1, 1}));
  return add(conv(*store_, b + ".ffn2", hidden, {1, 1, 1, 1}), z);
}

Tensor CatsppAggregator::efficient_block(const Tensor& m, const Tensor& app, int layer) const {
  Tensor x = m;
  for (std::int64_t n = 0; n < cfg_.n_encoders; ++n) {
    const Qkv qkv = affinity_qkv(x, app, layer, n);
    const std::int64_t t = qkv.q.dim(0);
    const Tensor zhat = multi_head_attention(reshape(qkv.q, {1, t, -1}), reshape(qkv.k, {1, t, -1}),
                                             reshape(qkv.v, {1, t, -1}), cfg_.n_heads);
    const Tensor z = add(reshape(zhat, x.shape()), x);
    x = volumetric_ffn(z, layer, n);
  }
  return x;
}

Tensor CatsppAggregator::parallel(const Tensor& m, const Tensor& app_first,
                                  const Tensor& app_second, int layer) const {
  return add(efficient_block(m, app_first, layer),
             swap_pairs(efficient_block(swap_pairs(m), app_second, layer)));
}

Tensor CatsppAggregator::pyramid(const std::vector<Tensor>& embedded,
                                 const std::vector<Tensor>& feats_s,
                                 const std::vector<Tensor>& feats_t) const {
  if (embedded.size() != layers_.size() || feats_s.size() != layers_.size() ||
      feats_t.size() != layers_.size()) {
    throw DimensionError("catspp: expected " + std::to_string(layers_.size()) +
                         " layers of volumes and features");
  }
  Tensor prev;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const int q = layers_[i].layer;
    Tensor m = embedded[i];
    if (prev.defined()) {
      const std::int64_t factor = m.dim(0) / prev.dim(0);
      const Tensor up = upsample4d_bilinear(prev, factor);
      if (up.shape() != m.shape()) {
        throw ConfigError("catspp: upsampled layer " + shape_str(up.shape()) +
                          " does not match " + shape_str(m.shape()));
      }
      m = add(m, up);
    }
    prev = parallel(m, appearance(feats_s[i], q), appearance(feats_t[i], q), q);
  }
  return prev;
}

Tensor CatsppAggregator::aggregate(const std::vector<Hypercorrelation>& hyper,
                                   const std::vector<Tensor>& feats_s,
                                   const std::vector<Tensor>& feats_t) const {
  std::vector<Tensor> embedded;
  for (const auto& l : layers_) {
    const Hypercorrelation* h = nullptr;
    for (const auto& c : hyper) {
      if (c.layer == l.layer) h = &c;
    }
    if (!h) throw ArgumentError("catspp: missing hypercorrelation for layer " + std::to_string(l.layer));
    embedded.push_back(conv_embed(h->volume, l.layer));
  }
  return pyramid(embedded, feats_s, feats_t);
}

std::vector<std::string> CatsppAggregator::output_projections() const {
  std::vector<std::string> names;
  for (const auto& l : layers_) {
    for (std::int64_t n = 0; n < cfg_.n_encoders; ++n) {
      const std::string b = block_prefix(l.layer, n);
      for (const char* s : {".vconv.weight", ".vconv.bias", ".v_ln.beta", ".ffn2.weight", ".ffn2.bias"}) {
        names.push_back(b + s);
      }
    }
  }
  return names;
}

}  // namespace catagg
