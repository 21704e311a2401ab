#include "catagg/model.hpp"

#include <algorithm>

#include "catagg/flow.hpp"
#include "catagg/ops.hpp"

namespace catagg {

Model::Model(const RunConfig& config, DType dtype)
    : config_(config),
      kind_(config.model() == "cats" ? ModelKind::cats : ModelKind::catspp),
      grid_(config.get_int("grid")),
      beta_(config.get_double("beta")),
      params_(static_cast<std::uint64_t>(config.get_int("seed")), dtype) {
  if (!(beta_ > 0.0)) throw ConfigError("beta must be positive");
  BackboneConfig bcfg;
  bcfg.image = config.get_int("image");
  bcfg.channels = config.get_int_list("backbone.channels");
  backbone_ = std::make_unique<ToyBackbone>(bcfg, params_);
  const AggregationMode mode = parse_mode(config.mode());

  if (kind_ == ModelKind::cats) {
    const std::string levels = config.get("cats.levels");
    if (levels == "auto") {
      for (int l = 0; l < backbone_->levels(); ++l) {
        if (backbone_->level_extent(l) >= grid_) cats_levels_.push_back(l);
      }
    } else {
      for (auto l : config.get_int_list("cats.levels")) {
        if (l < 0 || l >= backbone_->levels()) {
          throw ConfigError("cats.levels: no backbone level " + std::to_string(l));
        }
        if (backbone_->level_extent(static_cast<int>(l)) < grid_) {
          throw ConfigError("cats.levels: level " + std::to_string(l) + " is coarser than the grid");
        }
        cats_levels_.push_back(static_cast<int>(l));
      }
    }
    CatsConfig c;
    c.h = c.w = grid_;
    c.n_encoders = config.get_int("cats.n_encoders");
    c.n_heads = config.get_int("cats.n_heads");
    c.p = config.get_int("cats.p");
    c.ffn_ratio = config.get_int("cats.ffn_ratio");
    c.mode = mode;
    for (int l : cats_levels_) c.level_channels.push_back(backbone_->level_channels(l));
    cats_.emplace(c, params_);
  } else {
    CatsppConfig c;
    c.d = config.get_int("catspp.d");
    c.kernel = config.get_int("catspp.kernel");
    c.embed_stride = config.get_int("catspp.embed.stride");
    c.proj_stride = config.get_int("catspp.proj_stride");
    c.attn_dim = config.get_int("catspp.attn_dim");
    c.ffn_ratio = config.get_int("catspp.ffn_ratio");
    c.n_encoders = config.get_int("catspp.n_encoders");
    c.n_heads = config.get_int("catspp.n_heads");
    c.p = config.get_int("catspp.p");
    c.mode = mode;
    for (auto q : config.get_int_list("catspp.layers")) {
      if (q < 3 || q > 5) throw ConfigError("catspp.layers: layer " + std::to_string(q) + " not in {3,4,5}");
      CatsppLayer layer;
      layer.layer = static_cast<int>(q);
      const int first = static_cast<int>(2 * (q - 3));
      layer.extent = backbone_->level_extent(first);
      layer.correlation_channels = 2;
      layer.feature_channels = backbone_->level_channels(first);
      c.layers.push_back(layer);
    }
    catspp_.emplace(c, params_);
    const auto& finest = catspp_->layers().back();
    if (c.embedded_extent(finest.extent) != grid_) {
      throw ConfigError("catspp: finest embedded extent " +
                        std::to_string(c.embedded_extent(finest.extent)) +
                        " differs from grid " + std::to_string(grid_));
    }
  }
}

std::vector<Tensor> Model::appearance_inputs(const std::vector<FeatureMap>& f,
                                             std::int64_t extent,
                                             const std::vector<int>& levels) const {
  std::vector<Tensor> out;
  for (int l : levels) {
    out.push_back(l2_normalize(resize_bilinear(f[static_cast<std::size_t>(l)].grid, extent, extent)));
  }
  return out;
}

// Deepest backbone level of each CATs++ layer, coarse to fine.
std::vector<int> Model::layer_feature_levels() const {
  std::vector<int> out;
  for (const auto& l : catspp_->layers()) out.push_back(2 * (l.layer - 3) + 1);
  return out;
}

Model::Output Model::forward(const Tensor& source, const Tensor& target) const {
  const auto fs = backbone_->forward(source);
  const auto ft = backbone_->forward(target);
  Output out;
  if (kind_ == ModelKind::cats) {
    std::vector<FeatureMap> ss, tt;
    for (int l : cats_levels_) {
      ss.push_back(fs[static_cast<std::size_t>(l)]);
      tt.push_back(ft[static_cast<std::size_t>(l)]);
    }
    const CorrelationStack stack = build_stack(ss, tt, grid_, grid_);
    const CorrelationStack refined =
        cats_->aggregate(stack, appearance_inputs(fs, grid_, cats_levels_),
                         appearance_inputs(ft, grid_, cats_levels_));
    out.scores = mean_axis(refined.volume, 0);
  } else {
    std::vector<int> layers;
    for (const auto& l : catspp_->layers()) layers.push_back(l.layer);
    const auto hyper = build_hypercorrelation(fs, ft, layers);
    const auto feature_levels = layer_feature_levels();
    std::vector<Tensor> app_s, app_t;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::int64_t e = catspp_->config().embedded_extent(catspp_->layers()[i].extent);
      const std::vector<int> one{feature_levels[i]};
      app_s.push_back(appearance_inputs(fs, e, one).front());
      app_t.push_back(appearance_inputs(ft, e, one).front());
    }
    const Tensor finest = catspp_->aggregate(hyper, app_s, app_t);
    out.scores = reshape(mean_axis(finest, 4), {grid_ * grid_, grid_ * grid_});
  }
  out.flow = soft_argmax_flow(out.scores, grid_, grid_, beta_);
  return out;
}

Tensor Model::wta_flow(const Tensor& source, const Tensor& target) const {
  InferenceGuard guard;
  const auto fs = backbone_->forward(source);
  const auto ft = backbone_->forward(target);
  if (kind_ == ModelKind::cats) {
    std::vector<FeatureMap> ss, tt;
    for (int l : cats_levels_) {
      ss.push_back(fs[static_cast<std::size_t>(l)]);
      tt.push_back(ft[static_cast<std::size_t>(l)]);
    }
    const CorrelationStack stack = build_stack(ss, tt, grid_, grid_);
    return argmax_flow(mean_axis(stack.volume, 0), grid_, grid_, grid_, grid_);
  }
  const auto hyper = build_hypercorrelation(fs, ft, {catspp_->layers().back().layer});
  const Tensor& v = hyper.front().volume;
  const std::int64_t e = v.dim(0);
  return argmax_flow(reshape(mean_axis(v, 4), {e * e, e * e}), e, e, e, e);
}

bool Model::is_backbone_param(const std::string& name) const {
  return name.rfind("backbone.", 0) == 0;
}

std::vector<std::string> Model::output_projections() const {
  return kind_ == ModelKind::cats ? cats_->output_projections() : catspp_->output_projections();
}

void Model::zero_output_projections() {
  for (const auto& name : output_projections()) params_.fill(name, 0.0);
}

}  // namespace catagg
