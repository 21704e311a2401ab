#pragma once

#include <string>
#include <vector>

#include "catagg/cats.hpp"
#include "catagg/correlation.hpp"
#include "catagg/params.hpp"

namespace catagg {

// One pyramid layer: square native correlation extent (source and target),
// hypercorrelation channels |L^q| and appearance feature channels.
struct CatsppLayer {
  int layer = 3;
  std::int64_t extent = 0;
  std::int64_t correlation_channels = 1;
  std::int64_t feature_channels = 1;
};

struct CatsppConfig {
  std::vector<CatsppLayer> layers;  // any order; processed coarse to fine
  std::int64_t d = 16;              // embedded channels
  std::int64_t kernel = 3;          // extent of every 4D kernel
  std::int64_t embed_stride = 2;
  std::int64_t proj_stride = 2;  // Q/K stride over the feature pair
  std::int64_t attn_dim = 128;
  std::int64_t ffn_ratio = 2;
  std::int64_t n_encoders = 1;
  std::int64_t n_heads = 1;
  std::int64_t p = 128;
  AggregationMode mode = AggregationMode::parallel;

  std::int64_t embedded_extent(std::int64_t native) const {
    return (native + embed_stride - 1) / embed_stride;
  }
  // Throws ConfigError (mode other than parallel, broken extent chain, ...).
  void validate() const;
};

// Convolution + transformer aggregator over hypercorrelations. Parameters
// live under "catspp.l<q>." and are shared by both parallel branches.
//
// Volumes are [a1, a2, b1, b2, ch]; inside a block the (a1, a2) pair indexes
// tokens and (b1, b2, ch) is flattened into token features.
class CatsppAggregator {
 public:
  CatsppAggregator(CatsppConfig cfg, ParamStore& store);

  const CatsppConfig& config() const { return cfg_; }
  // Layers sorted coarse to fine (decreasing q).
  const std::vector<CatsppLayer>& layers() const { return layers_; }

  // conv4d (stride embed_stride) + GELU: [e, e, e, e, |L^q|] -> [e', e', e', e', d].
  Tensor conv_embed(const Tensor& hyper, int layer) const;
  // d: [e', e', c] on the embedded grid of the token pair -> [e'^2, p].
  Tensor appearance(const Tensor& d, int layer) const;

  struct Qkv {
    Tensor q, k, v;  // [T, attn_dim], [T, attn_dim], [T, F]
  };
  // app: [T, p] projected appearance of the token image.
  Qkv affinity_qkv(const Tensor& m, const Tensor& app, int layer, std::int64_t encoder) const;
  // LN, conv d -> r*d, GELU, conv r*d -> d, residual.
  Tensor volumetric_ffn(const Tensor& z, int layer, std::int64_t encoder) const;
  // n_encoders x (attention with residual, then volumetric FFN).
  Tensor efficient_block(const Tensor& m, const Tensor& app, int layer) const;
  // block(M, P(D_a)) + swap(block(swap(M), P(D_b))) with a the first pair's image.
  Tensor parallel(const Tensor& m, const Tensor& app_first, const Tensor& app_second,
                  int layer) const;

  // Coarse-to-fine recursion over embedded volumes (coarse first):
  // M^{q-1} += up(C^q). app_*: per layer projected appearance inputs as
  // features on the embedded grid. Returns the finest aggregated volume.
  Tensor pyramid(const std::vector<Tensor>& embedded, const std::vector<Tensor>& feats_s,
                 const std::vector<Tensor>& feats_t) const;

  // Full path from hypercorrelations (any order) to the finest volume.
  Tensor aggregate(const std::vector<Hypercorrelation>& hyper, const std::vector<Tensor>& feats_s,
                   const std::vector<Tensor>& feats_t) const;

  std::vector<std::string> output_projections() const;
  std::string block_prefix(int layer, std::int64_t encoder) const;

 private:
  const CatsppLayer& layer_config(int layer) const;

  CatsppConfig cfg_;
  std::vector<CatsppLayer> layers_;
  const ParamStore* store_;
};

}  // namespace catagg
