#pragma once

#include <string>
#include <vector>

#include "catagg/tensor.hpp"

namespace catagg {

// Flow fields are Tensor[h, w, 2] of (dx, dy) displacements in grid cells.
// Cell (u, v) has its centre at pixel ((u + 0.5) * W / w, (v + 0.5) * H / h).

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct KeypointSet {
  std::int64_t height = 0;  // image H
  std::int64_t width = 0;   // image W
  std::vector<Point> points;
};

constexpr double kDefaultBeta = 20.0;

// [h*w, 2] cell indices (u, v) in row-major order.
Tensor grid_positions(std::int64_t h, std::int64_t w, DType dtype = DType::f32);

// F(i) = sum_j softmax_j(beta * C(i, .)) pos(j) - pos(i). c: [hs*ws, ht*wt]
// (rows: source cells). Returns [hs, ws, 2].
Tensor soft_argmax_flow(const Tensor& c, std::int64_t hs, std::int64_t ws, std::int64_t ht,
                        std::int64_t wt, double beta = kDefaultBeta);
inline Tensor soft_argmax_flow(const Tensor& c, std::int64_t h, std::int64_t w,
                               double beta = kDefaultBeta) {
  return soft_argmax_flow(c, h, w, h, w, beta);
}

// Winner-takes-all flow from the row argmax (first maximum on ties).
Tensor argmax_flow(const Tensor& c, std::int64_t hs, std::int64_t ws, std::int64_t ht,
                   std::int64_t wt);

// Maps source keypoints through a flow field (bilinear sampling, edge clamped).
KeypointSet transfer_keypoints(const Tensor& flow, const KeypointSet& k);

// Mean end-point error over cells; `mask` ([h, w], 1 = counted) may be
// undefined. Differentiable w.r.t. pred; zero-distance cells get zero gradient.
Tensor aepe(const Tensor& pred, const Tensor& gt, const Tensor& mask = Tensor());

// Fraction of points within alpha * base pixels of the ground truth.
double pck(const std::vector<Point>& pred, const std::vector<Point>& gt, double alpha,
           double base);
enum class PckBasis { img, bbox };
PckBasis parse_pck_basis(const std::string& name);
// base = max(H, W) of the image, or of the bounding box of the gt points.
double pck(const KeypointSet& pred, const KeypointSet& gt, double alpha,
           PckBasis basis = PckBasis::img);

// Text format: header line "H W", then one "x y" line per point.
void write_keypoints(const std::string& path, const KeypointSet& k);
KeypointSet read_keypoints(const std::string& path);

}  // namespace catagg
