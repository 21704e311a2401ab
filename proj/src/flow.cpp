#include "catagg/flow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "catagg/ops.hpp"

namespace catagg {

Tensor grid_positions(std::int64_t h, std::int64_t w, DType dtype) {
  Tensor pos({h * w, 2}, dtype);
  for (std::int64_t v = 0; v < h; ++v) {
    for (std::int64_t u = 0; u < w; ++u) {
      pos.set_flat((v * w + u) * 2, static_cast<double>(u));
      pos.set_flat((v * w + u) * 2 + 1, static_cast<double>(v));
    }
  }
  return pos;
}

namespace {

void check_scores(const Tensor& c, std::int64_t rows, std::int64_t cols, const char* op) {
  if (c.numel() != rows * cols || c.rank() < 2) {
    throw DimensionError(std::string(op) + ": scores " + shape_str(c.shape()) + " do not match a " +
                         std::to_string(rows) + " x " + std::to_string(cols) + " map");
  }
  dispatch(c.dtype(), [&]<class T>() {
    for (T v : c.data<T>()) {
      if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite score");
    }
  });
}

}  // namespace

Tensor soft_argmax_flow(const Tensor& c, std::int64_t hs, std::int64_t ws, std::int64_t ht,
                        std::int64_t wt, double beta) {
  if (!(beta > 0.0)) throw ArgumentError("soft_argmax_flow: beta must be positive");
  check_scores(c, hs * ws, ht * wt, "soft_argmax_flow");
  const Tensor probs = softmax(scale(reshape(c, {hs * ws, ht * wt}), beta), 1);
  const Tensor expected = matmul(probs, grid_positions(ht, wt, c.dtype()));
  return reshape(sub(expected, grid_positions(hs, ws, c.dtype())), {hs, ws, 2});
}

Tensor argmax_flow(const Tensor& c, std::int64_t hs, std::int64_t ws, std::int64_t ht,
                   std::int64_t wt) {
  check_scores(c, hs * ws, ht * wt, "argmax_flow");
  const std::int64_t n = ht * wt;
  Tensor flow({hs, ws, 2}, c.dtype());
  dispatch(c.dtype(), [&]<class T>() {
    auto s = c.data<T>();
    for (std::int64_t i = 0; i < hs * ws; ++i) {
      const auto row = s.begin() + i * n;
      const std::int64_t j = std::max_element(row, row + n) - row;
      flow.set_flat(i * 2, static_cast<double>(j % wt - i % ws));
      flow.set_flat(i * 2 + 1, static_cast<double>(j / wt - i / ws));
    }
  });
  return flow;
}

KeypointSet transfer_keypoints(const Tensor& flow, const KeypointSet& k) {
  if (flow.rank() != 3 || flow.dim(2) != 2) {
    throw DimensionError("transfer_keypoints: flow must be [h, w, 2], got " + shape_str(flow.shape()));
  }
  const std::int64_t h = flow.dim(0), w = flow.dim(1);
  const double sx = static_cast<double>(w) / static_cast<double>(k.width);
  const double sy = static_cast<double>(h) / static_cast<double>(k.height);
  KeypointSet out{k.height, k.width, {}};
  for (const auto& p : k.points) {
    if (!(p.x >= 0.0 && p.x < static_cast<double>(k.width) && p.y >= 0.0 &&
          p.y < static_cast<double>(k.height))) {
      throw ArgumentError("transfer_keypoints: keypoint outside the image");
    }
    const double gx = std::clamp(p.x * sx - 0.5, 0.0, static_cast<double>(w - 1));
    const double gy = std::clamp(p.y * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto x0 = static_cast<std::int64_t>(std::floor(gx));
    const auto y0 = static_cast<std::int64_t>(std::floor(gy));
    const std::int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = gx - static_cast<double>(x0), fy = gy - static_cast<double>(y0);
    double d[2];
    for (int ch = 0; ch < 2; ++ch) {
      const double a = flow.at({y0, x0, ch}), b = flow.at({y0, x1, ch});
      const double c = flow.at({y1, x0, ch}), e = flow.at({y1, x1, ch});
      d[ch] = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * e);
    }
    // Unclamped grid coordinate so keypoints off the cell-centre hull keep their offset.
    const double ux = p.x * sx - 0.5 + d[0];
    const double uy = p.y * sy - 0.5 + d[1];
    out.points.push_back({(ux + 0.5) / sx, (uy + 0.5) / sy});
  }
  return out;
}

Tensor aepe(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
  if (pred.shape() != gt.shape() || pred.rank() != 3 || pred.dim(2) != 2) {
    throw DimensionError("aepe: flow shapes " + shape_str(pred.shape()) + " and " +
                         shape_str(gt.shape()) + " differ or are not [h, w, 2]");
  }
  if (pred.dtype() != gt.dtype()) throw ArgumentError("aepe: dtype mismatch");
  const std::int64_t cells = pred.dim(0) * pred.dim(1);
  std::vector<double> weight(static_cast<std::size_t>(cells), 1.0);
  if (mask.defined()) {
    if (mask.numel() != cells) throw DimensionError("aepe: mask does not match the flow grid");
    for (std::int64_t i = 0; i < cells; ++i) weight[static_cast<std::size_t>(i)] = mask.flat(i) != 0.0 ? 1.0 : 0.0;
  }
  double count = 0.0;
  for (double v : weight) count += v;
  if (count == 0.0) throw ArgumentError("aepe: no cells to average");
  Tensor out = Tensor::zeros({}, pred.dtype());
  std::vector<double> dist(static_cast<std::size_t>(cells));
  dispatch(pred.dtype(), [&]<class T>() {
    auto p = pred.data<T>();
    auto g = gt.data<T>();
    double total = 0.0;
    for (std::int64_t i = 0; i < cells; ++i) {
      const double dx = static_cast<double>(p[2 * i]) - g[2 * i];
      const double dy = static_cast<double>(p[2 * i + 1]) - g[2 * i + 1];
      dist[static_cast<std::size_t>(i)] = std::sqrt(dx * dx + dy * dy);
      total += weight[static_cast<std::size_t>(i)] * dist[static_cast<std::size_t>(i)];
    }
    out.data_mut<T>()[0] = static_cast<T>(total / count);
  });
  detail::attach(out, "aepe", {pred, gt},
                 [pred, gt, weight, dist, count](const Tensor& g) {
                   Tensor gp(pred.shape(), pred.dtype());
                   Tensor gg(pred.shape(), pred.dtype());
                   const double scale_out = g.item() / count;
                   dispatch(pred.dtype(), [&]<class T>() {
                     auto p = pred.data<T>();
                     auto t = gt.data<T>();
                     auto dp = gp.data_mut<T>();
                     auto dg = gg.data_mut<T>();
                     for (std::size_t i = 0; i < dist.size(); ++i) {
                       if (dist[i] == 0.0 || weight[i] == 0.0) continue;
                       for (int ch = 0; ch < 2; ++ch) {
                         const double diff = static_cast<double>(p[2 * i + ch]) - t[2 * i + ch];
                         const double v = scale_out * diff / dist[i];
                         dp[2 * i + ch] = static_cast<T>(v);
                         dg[2 * i + ch] = static_cast<T>(-v);
                       }
                     }
                   });
                   return std::vector<Tensor>{gp, gg};
                 });
  return out;
}

double pck(const std::vector<Point>& pred, const std::vector<Point>& gt, double alpha,
           double base) {
  if (pred.size() != gt.size()) throw ArgumentError("pck: keypoint sets differ in length");
  if (pred.empty()) throw ArgumentError("pck: no keypoints");
  if (!(alpha > 0.0)) throw ArgumentError("pck: alpha must be positive");
  const double threshold = alpha * base;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (std::hypot(pred[i].x - gt[i].x, pred[i].y - gt[i].y) <= threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

PckBasis parse_pck_basis(const std::string& name) {
  if (name == "img") return PckBasis::img;
  if (name == "bbox") return PckBasis::bbox;
  throw ConfigError("unknown pck basis '" + name + "' (img | bbox)");
}

double pck(const KeypointSet& pred, const KeypointSet& gt, double alpha, PckBasis basis) {
  double base = static_cast<double>(std::max(gt.height, gt.width));
  if (basis == PckBasis::bbox && !gt.points.empty()) {
    double x0 = gt.points[0].x, x1 = x0, y0 = gt.points[0].y, y1 = y0;
    for (const auto& p : gt.points) {
      x0 = std::min(x0, p.x);
      x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y);
      y1 = std::max(y1, p.y);
    }
    base = std::max(x1 - x0, y1 - y0);
  }
  return pck(pred.points, gt.points, alpha, base);
}

void write_keypoints(const std::string& path, const KeypointSet& k) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << k.height << " " << k.width << "\n" << std::setprecision(17);
  for (const auto& p : k.points) out << p.x << " " << p.y << "\n";
  if (!out) throw IoError("failed writing '" + path + "'");
}

KeypointSet read_keypoints(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  KeypointSet k;
  std::string line;
  if (!std::getline(in, line)) throw LoadError(path + ": missing header");
  {
    std::istringstream ss(line);
    if (!(ss >> k.height >> k.width) || k.height <= 0 || k.width <= 0) {
      throw LoadError(path + ": header must be 'H W'");
    }
  }
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    Point p;
    if (!(ss >> p.x >> p.y)) throw LoadError(path + ": bad keypoint line '" + line + "'");
    k.points.push_back(p);
  }
  return k;
}

}  // namespace catagg
