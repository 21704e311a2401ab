#include "catagg/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "catagg/ops.hpp"

namespace catagg {

Affine Affine::inverse() const {
  const double d = det();
  if (std::abs(d) < 1e-12) throw NumericError("affine warp is singular");
  Affine r;
  r.m[0] = m[3] / d;
  r.m[1] = -m[1] / d;
  r.m[2] = -m[2] / d;
  r.m[3] = m[0] / d;
  r.m[4] = -(r.m[0] * m[4] + r.m[1] * m[5]);
  r.m[5] = -(r.m[2] * m[4] + r.m[3] * m[5]);
  return r;
}

Affine Affine::translation(double tx, double ty) {
  Affine a;
  a.m[4] = tx;
  a.m[5] = ty;
  return a;
}

Affine Affine::about_centre(Point c, double sx, double sy, double radians, double tx, double ty) {
  const double co = std::cos(radians), si = std::sin(radians);
  Affine a;
  a.m[0] = co * sx;
  a.m[1] = -si * sy;
  a.m[2] = si * sx;
  a.m[3] = co * sy;
  a.m[4] = c.x - (a.m[0] * c.x + a.m[1] * c.y) + tx;
  a.m[5] = c.y - (a.m[2] * c.x + a.m[3] * c.y) + ty;
  return a;
}

Tensor random_image(std::uint64_t seed, std::int64_t size) {
  InferenceGuard guard;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor image({size, size, 3});
  double amplitude = 1.0;
  for (std::int64_t lattice = 4; lattice <= std::min<std::int64_t>(32, size); lattice *= 2) {
    Tensor coarse({lattice, lattice, 3});
    for (std::int64_t i = 0; i < coarse.numel(); ++i) coarse.set_flat(i, amplitude * normal(rng));
    image = add(image, resize_bilinear(coarse, size, size));
    amplitude *= 0.7;
  }
  return image;
}

Tensor warp_image(const Tensor& source, const Affine& warp) {
  const std::int64_t h = source.dim(0), w = source.dim(1), c = source.dim(2);
  const Affine inv = warp.inverse();
  Tensor out(source.shape(), source.dtype());
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      // Pixel (x, y) has its centre at (x + 0.5, y + 0.5).
      const Point s = inv.apply({x + 0.5, y + 0.5});
      const double gx = std::clamp(s.x - 0.5, 0.0, static_cast<double>(w - 1));
      const double gy = std::clamp(s.y - 0.5, 0.0, static_cast<double>(h - 1));
      const auto x0 = static_cast<std::int64_t>(std::floor(gx));
      const auto y0 = static_cast<std::int64_t>(std::floor(gy));
      const std::int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = gx - x0, fy = gy - y0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double v = (1 - fy) * ((1 - fx) * source.at({y0, x0, ch}) + fx * source.at({y0, x1, ch})) +
                         fy * ((1 - fx) * source.at({y1, x0, ch}) + fx * source.at({y1, x1, ch}));
        out.set_flat((y * w + x) * c + ch, v);
      }
    }
  }
  return out;
}

Tensor analytic_flow(const Affine& warp, std::int64_t image_h, std::int64_t image_w,
                     std::int64_t h, std::int64_t w) {
  Tensor flow({h, w, 2});
  const double cx = static_cast<double>(image_w) / static_cast<double>(w);
  const double cy = static_cast<double>(image_h) / static_cast<double>(h);
  for (std::int64_t v = 0; v < h; ++v) {
    for (std::int64_t u = 0; u < w; ++u) {
      const Point s{(u + 0.5) * cx, (v + 0.5) * cy};
      const Point t = warp.apply(s);
      flow.set_flat((v * w + u) * 2, (t.x - s.x) / cx);
      flow.set_flat((v * w + u) * 2 + 1, (t.y - s.y) / cy);
    }
  }
  return flow;
}

Tensor valid_mask(const Tensor& flow) {
  const std::int64_t h = flow.dim(0), w = flow.dim(1);
  Tensor mask({h, w});
  for (std::int64_t v = 0; v < h; ++v) {
    for (std::int64_t u = 0; u < w; ++u) {
      const double x = u + flow.at({v, u, 0});
      const double y = v + flow.at({v, u, 1});
      const bool inside = x >= 0.0 && x <= static_cast<double>(w - 1) && y >= 0.0 &&
                          y <= static_cast<double>(h - 1);
      mask.set_flat(v * w + u, inside ? 1.0 : 0.0);
    }
  }
  return mask;
}

SyntheticPair make_pair(std::uint64_t seed, const Affine& warp, std::int64_t image_size) {
  SyntheticPair pair;
  pair.seed = seed;
  pair.warp = warp;
  pair.source = random_image(seed, image_size);
  pair.target = warp_image(pair.source, warp);
  return pair;
}

SyntheticPair generate_pair(std::uint64_t seed, std::int64_t image_size, std::int64_t grid,
                            double magnitude) {
  constexpr double kPi = 3.14159265358979323846;
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + 1);
  for (int attempt = 0; attempt < 10; ++attempt) {
    std::uniform_real_distribution<double> log_scale(magnitude * std::log(0.8),
                                                     magnitude * std::log(1.25));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const double sx = std::exp(log_scale(rng));
    const double sy = std::exp(log_scale(rng));
    const double rot = unit(rng) * magnitude * 20.0 * kPi / 180.0;
    const double tx = unit(rng) * magnitude * 0.1 * static_cast<double>(image_size);
    const double ty = unit(rng) * magnitude * 0.1 * static_cast<double>(image_size);
    const double c = static_cast<double>(image_size) / 2.0;
    const Affine warp = Affine::about_centre({c, c}, sx, sy, rot, tx, ty);
    if (std::abs(warp.det()) < 1e-3) continue;
    const Tensor mask = valid_mask(analytic_flow(warp, image_size, image_size, grid, grid));
    double valid = 0.0;
    for (double v : mask.values()) valid += v;
    if (valid < kMinValidFraction * static_cast<double>(mask.numel())) continue;
    return make_pair(seed, warp, image_size);
  }
  throw NumericError("generate_pair: no acceptable warp after 10 attempts (seed " +
                     std::to_string(seed) + ")");
}

void grid_keypoints(const Tensor& flow, std::int64_t image_h, std::int64_t image_w,
                    KeypointSet& source, KeypointSet& target) {
  const std::int64_t h = flow.dim(0), w = flow.dim(1);
  const double cx = static_cast<double>(image_w) / static_cast<double>(w);
  const double cy = static_cast<double>(image_h) / static_cast<double>(h);
  const Tensor mask = valid_mask(flow);
  source = {image_h, image_w, {}};
  target = {image_h, image_w, {}};
  for (std::int64_t v = 0; v < h; ++v) {
    for (std::int64_t u = 0; u < w; ++u) {
      if (mask.flat(v * w + u) == 0.0) continue;
      const Point s{(u + 0.5) * cx, (v + 0.5) * cy};
      source.points.push_back(s);
      target.points.push_back({s.x + flow.at({v, u, 0}) * cx, s.y + flow.at({v, u, 1}) * cy});
    }
  }
}

}  // namespace catagg
