#pragma once

// Straightforward reference implementations used to pin the library's
// results. Everything here works on plain f64 vectors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "catagg/flow.hpp"
#include "catagg/tensor.hpp"

namespace oracle {

inline catagg::Tensor random_f64(const catagg::Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                                 double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  catagg::Tensor t(shape, catagg::DType::f64);
  for (auto& v : t.data_mut<double>()) v = u(rng);
  return t;
}

// Zero "same" padding, odd kernels, output extent ceil(n / stride).
inline std::vector<double> conv4d(const catagg::Tensor& x, const catagg::Tensor& w,
                                  const catagg::Tensor& bias, std::array<std::int64_t, 4> stride,
                                  catagg::Shape& out_shape) {
  const auto xs = x.values();
  const auto ws = w.values();
  std::array<std::int64_t, 4> n{}, k{}, o{};
  for (int a = 0; a < 4; ++a) {
    n[a] = x.dim(a);
    k[a] = w.dim(a);
    o[a] = (n[a] + stride[a] - 1) / stride[a];
  }
  const std::int64_t cin = x.dim(4), cout = w.dim(5);
  out_shape = {o[0], o[1], o[2], o[3], cout};
  std::vector<double> out;
  for (std::int64_t p0 = 0; p0 < o[0]; ++p0)
    for (std::int64_t p1 = 0; p1 < o[1]; ++p1)
      for (std::int64_t p2 = 0; p2 < o[2]; ++p2)
        for (std::int64_t p3 = 0; p3 < o[3]; ++p3)
          for (std::int64_t co = 0; co < cout; ++co) {
            double acc = bias.defined() ? bias.flat(co) : 0.0;
            for (std::int64_t a = 0; a < k[0]; ++a)
              for (std::int64_t b = 0; b < k[1]; ++b)
                for (std::int64_t c = 0; c < k[2]; ++c)
                  for (std::int64_t d = 0; d < k[3]; ++d) {
                    const std::int64_t q0 = p0 * stride[0] + a - k[0] / 2;
                    const std::int64_t q1 = p1 * stride[1] + b - k[1] / 2;
                    const std::int64_t q2 = p2 * stride[2] + c - k[2] / 2;
                    const std::int64_t q3 = p3 * stride[3] + d - k[3] / 2;
                    if (q0 < 0 || q0 >= n[0] || q1 < 0 || q1 >= n[1] || q2 < 0 || q2 >= n[2] ||
                        q3 < 0 || q3 >= n[3])
                      continue;
                    for (std::int64_t ci = 0; ci < cin; ++ci) {
                      const std::int64_t xi = (((q0 * n[1] + q1) * n[2] + q2) * n[3] + q3) * cin + ci;
                      const std::int64_t wi =
                          ((((a * k[1] + b) * k[2] + c) * k[3] + d) * cin + ci) * cout + co;
                      acc += xs[xi] * ws[wi];
                    }
                  }
            out.push_back(acc);
          }
  return out;
}

inline std::vector<double> conv2d(const catagg::Tensor& x, const catagg::Tensor& w,
                                  const catagg::Tensor& bias, std::array<std::int64_t, 2> stride) {
  const std::int64_t h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const std::int64_t kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  const std::int64_t oh = (h + stride[0] - 1) / stride[0], ow = (wd + stride[1] - 1) / stride[1];
  std::vector<double> out;
  for (std::int64_t i = 0; i < oh; ++i)
    for (std::int64_t j = 0; j < ow; ++j)
      for (std::int64_t co = 0; co < cout; ++co) {
        double acc = bias.defined() ? bias.flat(co) : 0.0;
        for (std::int64_t a = 0; a < kh; ++a)
          for (std::int64_t b = 0; b < kw; ++b) {
            const std::int64_t y = i * stride[0] + a - kh / 2, x0 = j * stride[1] + b - kw / 2;
            if (y < 0 || y >= h || x0 < 0 || x0 >= wd) continue;
            for (std::int64_t ci = 0; ci < cin; ++ci)
              acc += x.at({y, x0, ci}) * w.at({a, b, ci, co});
          }
        out.push_back(acc);
      }
  return out;
}

// Fraction of points within alpha * base of the ground truth.
inline double pck(const std::vector<catagg::Point>& pred, const std::vector<catagg::Point>& gt,
                  double alpha, double base) {
  if (gt.empty()) return 0.0;
  long hits = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double dx = pred[i].x - gt[i].x, dy = pred[i].y - gt[i].y;
    if (std::sqrt(dx * dx + dy * dy) <= alpha * base) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(gt.size());
}

// Mean end-point error over cells whose mask is nonzero.
inline double aepe(const catagg::Tensor& pred, const catagg::Tensor& gt, const catagg::Tensor& mask) {
  const std::int64_t cells = pred.dim(0) * pred.dim(1);
  double total = 0.0;
  double count = 0.0;
  for (std::int64_t c = 0; c < cells; ++c) {
    if (mask.defined() && mask.flat(c) == 0.0) continue;
    const double dx = pred.flat(2 * c) - gt.flat(2 * c);
    const double dy = pred.flat(2 * c + 1) - gt.flat(2 * c + 1);
    total += std::sqrt(dx * dx + dy * dy);
    count += 1.0;
  }
  return count > 0.0 ? total / count : 0.0;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace oracle
