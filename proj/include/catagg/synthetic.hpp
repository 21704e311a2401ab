#pragma once

#include <cstdint>

#include "catagg/flow.hpp"
#include "catagg/tensor.hpp"

namespace catagg {

// Maps source pixel coordinates to target pixel coordinates:
// t = A s + b, with A = {a, b; c, d} stored row-major in m[0..3] and b in m[4..5].
struct Affine {
  double m[6] = {1, 0, 0, 1, 0, 0};

  Point apply(Point s) const { return {m[0] * s.x + m[1] * s.y + m[4], m[2] * s.x + m[3] * s.y + m[5]}; }
  double det() const { return m[0] * m[3] - m[1] * m[2]; }
  Affine inverse() const;
  static Affine translation(double tx, double ty);
  // Scale (sx, sy), then rotation by `radians`, about `centre`, then shift.
  static Affine about_centre(Point centre, double sx, double sy, double radians, double tx,
                             double ty);
};

struct SyntheticPair {
  std::uint64_t seed = 0;
  Affine warp;
  Tensor source;  // [S, S, 3]
  Tensor target;  // source warped by `warp` (bilinear, edge clamped)
};

constexpr double kMinValidFraction = 0.8;

// Smooth random multi-octave image [size, size, 3].
Tensor random_image(std::uint64_t seed, std::int64_t size);
// target(y) = source(warp^-1(y)) with bilinear sampling.
Tensor warp_image(const Tensor& source, const Affine& warp);

// Ground truth displacement at the centres of an h x w grid, in cells.
Tensor analytic_flow(const Affine& warp, std::int64_t image_h, std::int64_t image_w,
                     std::int64_t h, std::int64_t w);
// 1 where the cell's displaced centre lies within the grid's cell-centre hull.
Tensor valid_mask(const Tensor& flow);

// Random affine with magnitude scaling every range (0 = identity). Rejects
// warps keeping fewer than kMinValidFraction of grid cells in bounds and
// retries with derived seeds; throws NumericError after 10 attempts.
SyntheticPair generate_pair(std::uint64_t seed, std::int64_t image_size = 128,
                            std::int64_t grid = 16, double magnitude = 1.0);
SyntheticPair make_pair(std::uint64_t seed, const Affine& warp, std::int64_t image_size = 128);

// Source keypoints at valid cell centres and their ground-truth targets.
void grid_keypoints(const Tensor& flow, std::int64_t image_h, std::int64_t image_w,
                    KeypointSet& source, KeypointSet& target);

}  // namespace catagg
