#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "catagg/backbone.hpp"
#include "catagg/cats.hpp"
#include "catagg/catspp.hpp"
#include "catagg/config.hpp"
#include "catagg/params.hpp"

namespace catagg {

enum class ModelKind { cats, catspp };

// Backbone, aggregator and flow head built from a RunConfig.
class Model {
 public:
  explicit Model(const RunConfig& config, DType dtype = DType::f32);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  ModelKind kind() const { return kind_; }
  const RunConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const ToyBackbone& backbone() const { return *backbone_; }
  const CatsAggregator* cats() const { return cats_ ? &*cats_ : nullptr; }
  const CatsppAggregator* catspp() const { return catspp_ ? &*catspp_ : nullptr; }
  std::int64_t grid() const { return grid_; }
  double beta() const { return beta_; }
  // Backbone levels stacked by the CATs path.
  const std::vector<int>& cats_levels() const { return cats_levels_; }

  struct Output {
    Tensor scores;  // [g*g, g*g] level/channel averaged refined correlation
    Tensor flow;    // [g, g, 2] soft-argmax flow
  };
  Output forward(const Tensor& source, const Tensor& target) const;
  // Winner-takes-all flow from the raw (unaggregated) correlation.
  Tensor wta_flow(const Tensor& source, const Tensor& target) const;

  bool is_backbone_param(const std::string& name) const;
  std::vector<std::string> output_projections() const;
  void zero_output_projections();

 private:
  std::vector<Tensor> appearance_inputs(const std::vector<FeatureMap>& f,
                                        std::int64_t extent, const std::vector<int>& levels) const;
  std::vector<int> layer_feature_levels() const;

  RunConfig config_;
  ModelKind kind_;
  std::int64_t grid_;
  double beta_;
  ParamStore params_;
  std::unique_ptr<ToyBackbone> backbone_;
  std::optional<CatsAggregator> cats_;
  std::optional<CatsppAggregator> catspp_;
  std::vector<int> cats_levels_;
};

}  // namespace catagg
