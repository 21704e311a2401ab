#include "catagg/transformer.hpp"

#include <cmath>

#include "catagg/ops.hpp"

namespace catagg {

namespace {

Tensor split_heads(const Tensor& x, std::int64_t heads) {
  const std::int64_t b = x.dim(0), t = x.dim(1), f = x.dim(2);
  return permute(reshape(x, {b, t, heads, f / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const std::int64_t b = x.dim(0), h = x.dim(1), t = x.dim(2), d = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, t, h * d});
}

}  // namespace

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::int64_t heads) {
  if (q.rank() != 3 || k.shape() != q.shape() || v.rank() != 3 || v.dim(0) != q.dim(0) ||
      v.dim(1) != q.dim(1)) {
    throw DimensionError("attention: incompatible q/k/v shapes " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  if (heads < 1 || q.dim(2) % heads != 0 || v.dim(2) % heads != 0) {
    throw ConfigError("attention: feature extents " + std::to_string(q.dim(2)) + "/" +
                      std::to_string(v.dim(2)) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.dim(2) / heads));
  if (heads == 1) {
    return matmul(softmax(scale(matmul_nt(q, k), inv_sqrt), -1), v);
  }
  const Tensor qh = split_heads(q, heads);
  const Tensor kh = split_heads(k, heads);
  const Tensor vh = split_heads(v, heads);
  return merge_heads(matmul(softmax(scale(matmul_nt(qh, kh), inv_sqrt), -1), vh));
}

void create_transformer_block(ParamStore& store, const std::string& prefix,
                              std::int64_t features, std::int64_t ffn_ratio) {
  const std::int64_t f = features;
  const std::int64_t hidden = f * ffn_ratio;
  store.create(prefix + ".ln1.gamma", {f}, Init::ones);
  store.create(prefix + ".ln1.beta", {f}, Init::zeros);
  store.create(prefix + ".qkv.weight", {f, 3 * f}, Init::kaiming_uniform, f);
  store.create(prefix + ".qkv.bias", {3 * f}, Init::zeros);
  store.create(prefix + ".proj.weight", {f, f}, Init::kaiming_uniform, f);
  store.create(prefix + ".proj.bias", {f}, Init::zeros);
  store.create(prefix + ".ln2.gamma", {f}, Init::ones);
  store.create(prefix + ".ln2.beta", {f}, Init::zeros);
  store.create(prefix + ".ffn1.weight", {f, hidden}, Init::kaiming_uniform, f);
  store.create(prefix + ".ffn1.bias", {hidden}, Init::zeros);
  store.create(prefix + ".ffn2.weight", {hidden, f}, Init::kaiming_uniform, hidden);
  store.create(prefix + ".ffn2.bias", {f}, Init::zeros);
}

Tensor transformer_block(const ParamStore& store, const std::string& prefix, const Tensor& x,
                         const Tensor& pos, std::int64_t heads) {
  if (x.rank() != 3) throw DimensionError("transformer block expects [B, T, F], got " + shape_str(x.shape()));
  const std::int64_t f = x.dim(2);
  const Tensor zpos = pos.defined() ? add_broadcast(x, pos) : x;
  const Tensor h = layer_norm(zpos, store.get(prefix + ".ln1.gamma"), store.get(prefix + ".ln1.beta"));
  const Tensor qkv = linear(h, store.get(prefix + ".qkv.weight"), store.get(prefix + ".qkv.bias"));
  const Tensor q = slice(qkv, 2, 0, f);
  const Tensor k = slice(qkv, 2, f, f);
  const Tensor v = slice(qkv, 2, 2 * f, f);
  const Tensor attn = multi_head_attention(q, k, v, heads);
  const Tensor z =
      add(linear(attn, store.get(prefix + ".proj.weight"), store.get(prefix + ".proj.bias")), zpos);
  const Tensor n = layer_norm(z, store.get(prefix + ".ln2.gamma"), store.get(prefix + ".ln2.beta"));
  const Tensor hidden =
      gelu(linear(n, store.get(prefix + ".ffn1.weight"), store.get(prefix + ".ffn1.bias")));
  return add(linear(hidden, store.get(prefix + ".ffn2.weight"), store.get(prefix + ".ffn2.bias")), z);
}

std::vector<std::string> transformer_block_output_projections(const std::string& prefix) {
  return {prefix + ".proj.weight", prefix + ".proj.bias", prefix + ".ffn2.weight",
          prefix + ".ffn2.bias"};
}

}  // namespace catagg
