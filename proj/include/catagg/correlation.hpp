#pragma once

#include <string>
#include <vector>

#include "catagg/tensor.hpp"

namespace catagg {

struct FeatureMap {
  int level = 0;
  int layer = 3;  // pyramid layer q
  Tensor grid;    // [h, w, c]

  std::int64_t height() const { return grid.dim(0); }
  std::int64_t width() const { return grid.dim(1); }
  std::int64_t channels() const { return grid.dim(2); }
};

enum class TokenAxis { source, target };

// L stacked correlation maps; rows index positions of the image named by
// token_axis, columns the other image. volume: [L, hw, hw].
struct CorrelationStack {
  Tensor volume;
  TokenAxis token_axis = TokenAxis::source;
  std::int64_t h = 0, w = 0;

  std::int64_t levels() const { return volume.dim(0); }
  std::int64_t tokens() const { return h * w; }
  Tensor level(std::int64_t l) const;
};

// Correlations of all backbone levels sharing pyramid layer q.
// volume: [h_s, w_s, h_t, w_t, |L^q|].
struct Hypercorrelation {
  int layer = 3;
  std::vector<int> levels;
  Tensor volume;
};

// ReLU of cosine similarity between every source and target position:
// ds [h_s, w_s, c], dt [h_t, w_t, c] -> [h_s*w_s, h_t*w_t]. Zero vectors
// give zero scores.
Tensor cosine_correlation(const Tensor& ds, const Tensor& dt);
inline Tensor cosine_correlation(const FeatureMap& ds, const FeatureMap& dt) {
  return cosine_correlation(ds.grid, dt.grid);
}

// Resizes each level to (h, w) bilinearly, then stacks per-level correlations.
CorrelationStack build_stack(const std::vector<FeatureMap>& features_s,
                             const std::vector<FeatureMap>& features_t, std::int64_t h = 16,
                             std::int64_t w = 16);

// One hypercorrelation per requested layer, in the order given.
std::vector<Hypercorrelation> build_hypercorrelation(const std::vector<FeatureMap>& features_s,
                                                     const std::vector<FeatureMap>& features_t,
                                                     const std::vector<int>& layers = {3, 4, 5});

// Exchanges the source and target axes.
CorrelationStack swap(const CorrelationStack& c);
Hypercorrelation swap(const Hypercorrelation& c);
// [a, b, c, d, ch] -> [c, d, a, b, ch]
Tensor swap_pairs(const Tensor& volume);

// Reads `level=<l> layer=<q> file=<path>` lines; relative paths resolve
// against the manifest's directory.
std::vector<FeatureMap> read_feature_manifest(const std::string& path);
void write_feature_manifest(const std::string& path, const std::vector<FeatureMap>& features,
                            const std::string& file_prefix);

}  // namespace catagg
