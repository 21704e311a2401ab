#pragma once

#include <vector>

#include "catagg/correlation.hpp"
#include "catagg/params.hpp"

namespace catagg {

// Small strided conv stack standing in for a pretrained backbone. A stride-2
// stem is followed by three stages (pyramid layers 3, 4, 5), each a stride-2
// conv then a stride-1 conv, both emitting a feature map. A 128 px input
// gives maps of extent 32, 32, 16, 16, 8, 8.
struct BackboneConfig {
  std::int64_t image = 128;
  std::vector<std::int64_t> channels = {8, 16, 32, 32};  // stem, q=3, q=4, q=5
};

class ToyBackbone {
 public:
  ToyBackbone(BackboneConfig cfg, ParamStore& store);

  const BackboneConfig& config() const { return cfg_; }
  // Extent and channels of each emitted level.
  std::int64_t level_extent(int level) const;
  std::int64_t level_channels(int level) const;
  int level_layer(int level) const { return 3 + level / 2; }
  int levels() const { return 6; }

  // image: [S, S, 3] -> six feature maps tagged with level and layer.
  std::vector<FeatureMap> forward(const Tensor& image) const;

 private:
  BackboneConfig cfg_;
  const ParamStore* store_;
};

}  // namespace catagg
