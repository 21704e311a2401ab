#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "catagg/tensor.hpp"

// Differentiable tensor operations. Every op checks shapes, records a graph
// node in train mode and flags non-finite outputs for diagnostics. Inputs of
// one op must share a dtype.
namespace catagg {

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
// y's shape must equal a suffix of x's shape; y is broadcast over the rest.
Tensor add_broadcast(const Tensor& x, const Tensor& y);

enum class Activation { relu, gelu };
Tensor activation(const Tensor& x, Activation kind);
inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }
// Exact form x * Phi(x) with Phi the standard normal CDF.
inline Tensor gelu(const Tensor& x) { return activation(x, Activation::gelu); }

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Mean over one axis, which is removed from the shape.
Tensor mean_axis(const Tensor& x, int axis);

// Products. a: [..., m, k], b: [..., k, n] with identical leading dims, or b
// rank 2 shared across every leading index of a.
Tensor matmul(const Tensor& a, const Tensor& b);
// a: [..., m, k], b: [..., n, k] -> [..., m, n] (a times b transposed).
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x: [..., in], weight: [in, out], bias: [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor softmax(const Tensor& x, int axis);
// Normalizes over the last axis; gamma/beta have that extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Unit l2 norm over the last axis; all-zero vectors stay zero.
Tensor l2_normalize(const Tensor& x);

// Layout.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);

// Zero "same" padded cross-correlation with odd kernels; output extent per
// axis is ceil(n / stride).
// x: [h, w, cin], kernel: [kh, kw, cin, cout], bias: [cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::array<std::int64_t, 2> stride);
// x: [h1, w1, h2, w2, cin], kernel: [k1, k2, k3, k4, cin, cout].
Tensor conv4d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::array<std::int64_t, 4> stride);

// Linear interpolation along one axis to a new extent, half-pixel centres
// (src = (dst + 0.5) * in / out - 0.5) with edge clamping.
Tensor resample_axis(const Tensor& x, int axis, std::int64_t out_extent);
// x: [h, w, c] -> [out_h, out_w, c].
Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w);
// x: [h1, w1, h2, w2, c]: bilinear over (h1, w1), then over (h2, w2).
Tensor upsample4d_bilinear(const Tensor& x, std::int64_t factor);

}  // namespace catagg
