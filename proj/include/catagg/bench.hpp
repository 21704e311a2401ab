#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "catagg/catspp.hpp"
#include "catagg/model.hpp"

namespace catagg {

struct ModuleParams {
  std::string module;
  std::int64_t count = 0;
};

// Learnable scalars grouped by the first two dot-separated name components
// ("backbone.q3", "cats.enc0", "catspp.l4", ...), in creation order.
std::vector<ModuleParams> params_by_module(const ParamStore& store);

struct Cost {
  std::int64_t params = 0;
  // Tensor bytes allocated above the starting live count during one
  // inference-mode forward.
  std::int64_t peak_forward_bytes = 0;
  double forward_seconds = 0.0;   // train-mode forward
  double backward_seconds = 0.0;
};

struct ModelBench {
  std::vector<ModuleParams> modules;
  Cost cost;
};

// One forward/backward of `model` on a generated pair.
ModelBench bench_model(Model& model, std::uint64_t seed = 0);

struct BlockComparison {
  std::int64_t tokens = 0;    // e^2
  std::int64_t features = 0;  // e^2 * d
  Cost efficient;
  Cost standard;
};

// The CATs++ efficient block on an [e, e, e, e, d] volume against a standard
// encoder block (ffn ratio 4) over the same tokens and feature extent. Only
// the block's own parameters are counted.
BlockComparison compare_blocks(std::int64_t extent, const CatsppConfig& base,
                               std::uint64_t seed = 0);

}  // namespace catagg
