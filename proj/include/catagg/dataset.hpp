#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "catagg/synthetic.hpp"

namespace catagg {

// One training / evaluation pair as stored on disk.
struct PairData {
  std::string id;
  std::uint64_t seed = 0;
  Tensor source;  // [S, S, 3]
  Tensor target;
  Tensor flow;  // [g, g, 2] ground truth in cells
  Tensor mask;  // [g, g] valid cells

  KeypointSet source_keypoints() const;
  KeypointSet target_keypoints() const;
};

PairData to_pair_data(const SyntheticPair& pair, std::int64_t grid, const std::string& id);

// Writes `count` pairs plus `manifest.txt` (lines `src= tgt= flow= seed=`)
// into `dir`. Pair i uses seed `seed + i`. Each line of `header` is written
// to the manifest as a `# ` comment.
void generate_dataset(const std::string& dir, std::int64_t count, std::uint64_t seed,
                      double magnitude, std::int64_t image_size = 128, std::int64_t grid = 16,
                      const std::string& header = {});

// Paths in the manifest resolve against its directory.
std::vector<PairData> load_dataset(const std::string& manifest);

}  // namespace catagg
