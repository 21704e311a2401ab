#pragma once

#include <string>
#include <vector>

#include "catagg/correlation.hpp"
#include "catagg/params.hpp"

namespace catagg {

enum class AggregationMode { serial, parallel, both };
AggregationMode parse_mode(const std::string& name);
const char* mode_name(AggregationMode mode);

struct CatsConfig {
  std::int64_t h = 16, w = 16;
  std::int64_t n_encoders = 1;
  std::int64_t n_heads = 8;
  std::int64_t p = 128;  // appearance embedding width
  std::int64_t ffn_ratio = 4;
  // Feature channels of each correlation level; L = level_channels.size().
  std::vector<std::int64_t> level_channels;
  AggregationMode mode = AggregationMode::serial;

  std::int64_t tokens() const { return h * w; }
  std::int64_t features() const { return h * w + p; }
  std::int64_t levels() const { return static_cast<std::int64_t>(level_channels.size()); }
  // Throws ConfigError.
  void validate() const;
};

// Transformer aggregator over stacked correlation maps with appearance
// embedding, intra/inter-correlation attention and swapped passes. All
// parameters live under "cats." in the store.
class CatsAggregator {
 public:
  CatsAggregator(CatsConfig cfg, ParamStore& store);

  const CatsConfig& config() const { return cfg_; }

  // d: [h, w, c_l] on the working grid -> [hw, p].
  Tensor appearance(const Tensor& d, std::int64_t level) const;
  // x: [L, hw, hw + p]. Attention among the hw tokens of each level.
  Tensor intra_attention(const Tensor& x, std::int64_t encoder) const;
  // x: [L, hw, hw + p]. Attention among the L level tokens at each position.
  Tensor inter_attention(const Tensor& x, std::int64_t encoder) const;
  // T([C, P(D)]) for one pass, without the residual. corr: [L, hw, hw] with
  // rows indexing the image that `features` (per level [h, w, c_l]) belong to.
  Tensor transform(const Tensor& corr, const std::vector<Tensor>& features) const;

  // Refined stack in the caller's orientation. ds / dt: per level features on
  // the working grid for source / target.
  CorrelationStack aggregate(const CorrelationStack& c, const std::vector<Tensor>& ds,
                             const std::vector<Tensor>& dt) const;

  // Parameters whose zeroing turns every pass into the residual path.
  std::vector<std::string> output_projections() const;

 private:
  Tensor serial(const Tensor& first, const Tensor& first_residual,
                const std::vector<Tensor>& first_features, const Tensor& second_residual,
                const std::vector<Tensor>& second_features) const;

  CatsConfig cfg_;
  const ParamStore* store_;
};

}  // namespace catagg
