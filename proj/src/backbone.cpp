#include "catagg/backbone.hpp"

#include <cmath>

#include "catagg/ops.hpp"

namespace catagg {

namespace {

void create_conv2d(ParamStore& store, const std::string& name, std::int64_t cin, std::int64_t cout) {
  store.create(name + ".weight", {3, 3, cin, cout}, Init::kaiming_uniform, 9 * cin, std::sqrt(2.0));
  store.create(name + ".bias", {cout}, Init::zeros);
}

}  // namespace

ToyBackbone::ToyBackbone(BackboneConfig cfg, ParamStore& store) : cfg_(std::move(cfg)), store_(&store) {
  if (cfg_.channels.size() != 4) throw ConfigError("backbone: expected 4 channel counts (stem, q3, q4, q5)");
  for (auto c : cfg_.channels) {
    if (c < 1) throw ConfigError("backbone: channel counts must be positive");
  }
  if (cfg_.image < 32 || cfg_.image % 16 != 0) {
    throw ConfigError("backbone: image extent must be a multiple of 16, at least 32");
  }
  create_conv2d(store, "backbone.stem", 3, cfg_.channels[0]);
  for (int stage = 0; stage < 3; ++stage) {
    const std::int64_t cin = cfg_.channels[static_cast<std::size_t>(stage)];
    const std::int64_t cout = cfg_.channels[static_cast<std::size_t>(stage) + 1];
    const std::string pre = "backbone.q" + std::to_string(stage + 3);
    create_conv2d(store, pre + ".down", cin, cout);
    create_conv2d(store, pre + ".conv", cout, cout);
  }
}

std::int64_t ToyBackbone::level_extent(int level) const { return cfg_.image / (4 << (level / 2)); }

std::int64_t ToyBackbone::level_channels(int level) const {
  return cfg_.channels[static_cast<std::size_t>(level / 2) + 1];
}

std::vector<FeatureMap> ToyBackbone::forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != cfg_.image || image.dim(1) != cfg_.image ||
      image.dim(2) != 3) {
    throw DimensionError("backbone: expected [" + std::to_string(cfg_.image) + ", " +
                         std::to_string(cfg_.image) + ", 3] image, got " + shape_str(image.shape()));
  }
  auto conv = [&](const std::string& name, const Tensor& x, std::int64_t s) {
    return relu(conv2d(x, store_->get(name + ".weight"), store_->get(name + ".bias"), {s, s}));
  };
  std::vector<FeatureMap> out;
  Tensor x = conv("backbone.stem", image, 2);
  for (int stage = 0; stage < 3; ++stage) {
    const std::string pre = "backbone.q" + std::to_string(stage + 3);
    x = conv(pre + ".down", x, 2);
    out.push_back({2 * stage, stage + 3, x});
    x = conv(pre + ".conv", x, 1);
    out.push_back({2 * stage + 1, stage + 3, x});
  }
  return out;
}

}  // namespace catagg
