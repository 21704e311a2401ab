#include "catagg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "catagg/gemm.hpp"

namespace catagg {

namespace {

using detail::attach;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ArgumentError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                        dtype_name(b.dtype()) + ")");
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_same_dtype(a, b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " invalid for rank " + std::to_string(rank));
  }
  return a;
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t extent = 1;
  std::int64_t inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.extent = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
    s.inner *= shape[i];
  }
  return s;
}

template <class T, class F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out(x.shape(), x.dtype());
  auto src = x.data<T>();
  auto dst = out.data_mut<T>();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <class T, class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape(), a.dtype());
  auto x = a.data<T>();
  auto y = b.data<T>();
  auto dst = out.data_mut<T>();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

// Sums `g` over its leading dims down to a tensor of `suffix` shape.
Tensor reduce_to_suffix(const Tensor& g, const Shape& suffix) {
  Tensor out(suffix, g.dtype());
  dispatch(g.dtype(), [&]<class T>() {
    auto src = g.data<T>();
    auto dst = out.data_mut<T>();
    const std::size_t n = dst.size();
    if (n == 0) return;
    for (std::size_t r = 0; r < src.size() / n; ++r) {
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[r * n + j];
    }
  });
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = dispatch(a.dtype(), [&]<class T>() {
    return map_binary<T>(a, b, [](T x, T y) { return x + y; });
  });
  attach(out, "add", {a, b}, [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = dispatch(a.dtype(), [&]<class T>() {
    return map_binary<T>(a, b, [](T x, T y) { return x - y; });
  });
  attach(out, "sub", {a, b},
         [](const Tensor& g) { return std::vector<Tensor>{g, scale(g, -1.0)}; });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = dispatch(a.dtype(), [&]<class T>() {
    return map_binary<T>(a, b, [](T x, T y) { return x * y; });
  });
  attach(out, "mul", {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{mul(g, b), mul(g, a)};
  });
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    const T f = static_cast<T>(factor);
    return map_unary<T>(x, [f](T v) { return v * f; });
  });
  attach(out, "scale", {x},
         [factor](const Tensor& g) { return std::vector<Tensor>{scale(g, factor)}; });
  return out;
}

Tensor add_scalar(const Tensor& x, double value) {
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    const T c = static_cast<T>(value);
    return map_unary<T>(x, [c](T v) { return v + c; });
  });
  attach(out, "add_scalar", {x}, [](const Tensor& g) { return std::vector<Tensor>{g}; });
  return out;
}

Tensor add_broadcast(const Tensor& x, const Tensor& y) {
  require_same_dtype(x, y, "add_broadcast");
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.rbegin(), ys.rend(), xs.rbegin())) {
    throw DimensionError("add_broadcast: " + shape_str(ys) + " is not a suffix of " +
                         shape_str(xs));
  }
  Tensor out(xs, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto a = x.data<T>();
    auto b = y.data<T>();
    auto dst = out.data_mut<T>();
    const std::size_t n = b.size();
    if (n == 0) return;
    for (std::size_t r = 0; r < a.size() / n; ++r) {
      for (std::size_t j = 0; j < n; ++j) dst[r * n + j] = a[r * n + j] + b[j];
    }
  });
  attach(out, "add_broadcast", {x, y}, [ys](const Tensor& g) {
    return std::vector<Tensor>{g, reduce_to_suffix(g, ys)};
  });
  return out;
}

Tensor activation(const Tensor& x, Activation kind) {
  if (kind == Activation::relu) {
    Tensor out = dispatch(x.dtype(), [&]<class T>() {
      return map_unary<T>(x, [](T v) { return v > T(0) ? v : T(0); });
    });
    attach(out, "relu", {x}, [x](const Tensor& g) {
      return std::vector<Tensor>{dispatch(x.dtype(), [&]<class T>() {
        return map_binary<T>(g, x, [](T gv, T xv) { return xv > T(0) ? gv : T(0); });
      })};
    });
    return out;
  }
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    return map_unary<T>(x, [](T v) {
      return static_cast<T>(0.5 * v * (1.0 + std::erf(static_cast<double>(v) / std::sqrt(2.0))));
    });
  });
  attach(out, "gelu", {x}, [x](const Tensor& g) {
    return std::vector<Tensor>{dispatch(x.dtype(), [&]<class T>() {
      return map_binary<T>(g, x, [](T gv, T xv) {
        const double v = xv;
        const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
        return static_cast<T>(gv * (cdf + v * pdf));
      });
    })};
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    double acc = 0.0;
    for (T v : x.data<T>()) acc += v;
    out.data_mut<T>()[0] = static_cast<T>(acc);
  });
  const Shape shape = x.shape();
  attach(out, "sum", {x}, [shape](const Tensor& g) {
    return std::vector<Tensor>{Tensor::full(shape, g.item(), g.dtype())};
  });
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean_axis(const Tensor& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "mean_axis");
  const AxisSplit s = split_at(x.shape(), a);
  if (s.extent == 0) throw DimensionError("mean_axis over empty axis");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + a);
  Tensor out(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data_mut<T>();
    const T inv = T(1) / static_cast<T>(s.extent);
    for (std::int64_t o = 0; o < s.outer; ++o) {
      T* d = dst.data() + o * s.inner;
      for (std::int64_t k = 0; k < s.extent; ++k) {
        const T* p = src.data() + (o * s.extent + k) * s.inner;
        for (std::int64_t i = 0; i < s.inner; ++i) d[i] += p[i];
      }
      for (std::int64_t i = 0; i < s.inner; ++i) d[i] *= inv;
    }
  });
  const Shape in_shape = x.shape();
  attach(out, "mean_axis", {x}, [in_shape, s](const Tensor& g) {
    Tensor gx(in_shape, g.dtype());
    dispatch(g.dtype(), [&]<class T>() {
      auto src = g.data<T>();
      auto dst = gx.data_mut<T>();
      const T inv = T(1) / static_cast<T>(s.extent);
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t k = 0; k < s.extent; ++k) {
          T* d = dst.data() + (o * s.extent + k) * s.inner;
          const T* p = src.data() + o * s.inner;
          for (std::int64_t i = 0; i < s.inner; ++i) d[i] = p[i] * inv;
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

// ---------------------------------------------------------------------------
// Products

namespace {

struct MatDims {
  Shape batch;
  std::int64_t batch_count = 1;
  std::int64_t m = 0, k = 0, n = 0;
  bool shared_b = false;
};

// op(a) @ op(b); see mm_raw.
MatDims mat_dims(const Tensor& a, const Tensor& b, bool ta, bool tb, const char* op) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError(std::string(op) + ": operands need rank >= 2, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  MatDims d;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  d.batch.assign(as.begin(), as.end() - 2);
  d.batch_count = shape_numel(d.batch);
  const std::int64_t ar = as[as.size() - 2], ac = as.back();
  const std::int64_t br = bs[bs.size() - 2], bc = bs.back();
  d.m = ta ? ac : ar;
  d.k = ta ? ar : ac;
  const std::int64_t bk = tb ? bc : br;
  d.n = tb ? br : bc;
  if (bk != d.k) {
    throw DimensionError(std::string(op) + ": inner extents differ: " + shape_str(as) + " vs " +
                         shape_str(bs));
  }
  if (b.rank() == 2 && a.rank() > 2) {
    if (ta) throw DimensionError(std::string(op) + ": shared operand with transposed lhs");
    d.shared_b = true;
  } else if (Shape(bs.begin(), bs.end() - 2) != d.batch) {
    throw DimensionError(std::string(op) + ": batch dims differ: " + shape_str(as) + " vs " +
                         shape_str(bs));
  }
  return d;
}

Tensor mm_raw(const Tensor& a, const Tensor& b, bool ta, bool tb, const char* op) {
  require_same_dtype(a, b, op);
  const MatDims d = mat_dims(a, b, ta, tb, op);
  Shape out_shape = d.batch;
  out_shape.push_back(d.m);
  out_shape.push_back(d.n);
  Tensor out(out_shape, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* pc = out.data_mut<T>().data();
    const std::int64_t rsa = ta ? 1 : d.k, csa = ta ? d.m : 1;
    const std::int64_t rsb = tb ? 1 : d.n, csb = tb ? d.k : 1;
    if (d.shared_b) {
      kernels::gemm<T>(d.batch_count * d.m, d.n, d.k, pa, rsa, csa, pb, rsb, csb, pc, d.n, false);
      return;
    }
    for (std::int64_t bi = 0; bi < d.batch_count; ++bi) {
      kernels::gemm<T>(d.m, d.n, d.k, pa + bi * d.m * d.k, rsa, csa, pb + bi * d.k * d.n, rsb,
                       csb, pc + bi * d.m * d.n, d.n, false);
    }
  });
  return out;
}

// Gradient of a shared rank-2 operand: sum over all rows of a and g.
// tb == false: dB[k, n] = sum_r A[r, k] G[r, n]; tb == true: dB[n, k] = sum_r G[r, n] A[r, k].
Tensor shared_operand_grad(const Tensor& a, const Tensor& g, bool tb) {
  const std::int64_t k = a.dim(-1), n = g.dim(-1);
  const std::int64_t rows = a.numel() / std::max<std::int64_t>(k, 1);
  Tensor out(tb ? Shape{n, k} : Shape{k, n}, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = a.data<T>().data();
    const T* pg = g.data<T>().data();
    T* pc = out.data_mut<T>().data();
    if (!tb) {
      kernels::gemm<T>(k, n, rows, pa, 1, k, pg, n, 1, pc, n, false);
    } else {
      kernels::gemm<T>(n, k, rows, pg, 1, n, pa, k, 1, pc, k, false);
    }
  });
  return out;
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool tb, const char* op) {
  Tensor out = mm_raw(a, b, false, tb, op);
  const bool shared = b.rank() == 2 && a.rank() > 2;
  attach(out, op, {a, b}, [a, b, tb, shared, op](const Tensor& g) {
    std::vector<Tensor> grads(2);
    if (a.requires_grad()) grads[0] = mm_raw(g, b, false, !tb, op);
    if (b.requires_grad()) {
      if (shared) {
        grads[1] = shared_operand_grad(a, g, tb);
      } else {
        grads[1] = tb ? mm_raw(g, a, true, false, op) : mm_raw(a, g, true, false, op);
      }
    }
    return grads;
  });
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false, "matmul"); }

Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, true, "matmul_nt"); }

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) throw DimensionError("linear: weight must be rank 2");
  Tensor y = x.rank() == 1 ? reshape(matmul(reshape(x, {1, x.dim(0)}), weight), {weight.dim(1)})
                           : matmul(x, weight);
  return bias.defined() ? add_broadcast(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_at(x.shape(), a);
  if (s.extent == 0) throw DimensionError("softmax over empty axis");
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data_mut<T>();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t i = 0; i < s.inner; ++i) {
        const std::int64_t base = o * s.extent * s.inner + i;
        T mx = src[base];
        for (std::int64_t k = 1; k < s.extent; ++k) mx = std::max(mx, src[base + k * s.inner]);
        double total = 0.0;
        for (std::int64_t k = 0; k < s.extent; ++k) {
          const T e = std::exp(src[base + k * s.inner] - mx);
          dst[base + k * s.inner] = e;
          total += e;
        }
        const T inv = static_cast<T>(1.0 / total);
        for (std::int64_t k = 0; k < s.extent; ++k) dst[base + k * s.inner] *= inv;
      }
    }
  });
  attach(out, "softmax", {x}, [out = out.detach(), s](const Tensor& g) {
    Tensor gx(out.shape(), out.dtype());
    dispatch(out.dtype(), [&]<class T>() {
      auto y = out.data<T>();
      auto gy = g.data<T>();
      auto d = gx.data_mut<T>();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
          const std::int64_t base = o * s.extent * s.inner + i;
          double dot = 0.0;
          for (std::int64_t k = 0; k < s.extent; ++k) {
            dot += static_cast<double>(gy[base + k * s.inner]) * y[base + k * s.inner];
          }
          for (std::int64_t k = 0; k < s.extent; ++k) {
            const auto idx = base + k * s.inner;
            d[idx] = static_cast<T>(y[idx] * (gy[idx] - dot));
          }
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm on a scalar");
  const std::int64_t n = x.dim(-1);
  if (n == 0) throw DimensionError("layer_norm: feature extent is 0");
  require_same_dtype(x, gamma, "layer_norm");
  require_same_dtype(x, beta, "layer_norm");
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(n) + "], got " +
                         shape_str(gamma.shape()) + " / " + shape_str(beta.shape()));
  }
  const std::int64_t rows = x.numel() / n;
  Tensor out(x.shape(), x.dtype());
  Tensor xhat(x.shape(), x.dtype());
  Tensor rstd({rows}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto gm = gamma.data<T>();
    auto bt = beta.data<T>();
    auto dst = out.data_mut<T>();
    auto xh = xhat.data_mut<T>();
    auto rs = rstd.data_mut<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* p = src.data() + r * n;
      double mu = 0.0;
      for (std::int64_t i = 0; i < n; ++i) mu += p[i];
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const double c = p[i] - mu;
        var += c * c;
      }
      var /= static_cast<double>(n);
      const double inv = 1.0 / std::sqrt(var + eps);
      rs[r] = static_cast<T>(inv);
      for (std::int64_t i = 0; i < n; ++i) {
        const T h = static_cast<T>((p[i] - mu) * inv);
        xh[r * n + i] = h;
        dst[r * n + i] = gm[i] * h + bt[i];
      }
    }
  });
  attach(out, "layer_norm", {x, gamma, beta}, [xhat, rstd, gamma, n, rows](const Tensor& g) {
    Tensor gx(xhat.shape(), xhat.dtype());
    Tensor gg({n}, xhat.dtype());
    Tensor gb({n}, xhat.dtype());
    dispatch(xhat.dtype(), [&]<class T>() {
      auto gy = g.data<T>();
      auto xh = xhat.data<T>();
      auto rs = rstd.data<T>();
      auto gm = gamma.data<T>();
      auto dx = gx.data_mut<T>();
      auto dg = gg.data_mut<T>();
      auto db = gb.data_mut<T>();
      for (std::int64_t r = 0; r < rows; ++r) {
        double mean_gh = 0.0, mean_ghx = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          const double gh = static_cast<double>(gy[r * n + i]) * gm[i];
          mean_gh += gh;
          mean_ghx += gh * xh[r * n + i];
          dg[i] += gy[r * n + i] * xh[r * n + i];
          db[i] += gy[r * n + i];
        }
        mean_gh /= static_cast<double>(n);
        mean_ghx /= static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i) {
          const double gh = static_cast<double>(gy[r * n + i]) * gm[i];
          dx[r * n + i] = static_cast<T>(rs[r] * (gh - mean_gh - xh[r * n + i] * mean_ghx));
        }
      }
    });
    return std::vector<Tensor>{gx, gg, gb};
  });
  return out;
}

Tensor l2_normalize(const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("l2_normalize on a scalar");
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = n == 0 ? 0 : x.numel() / n;
  Tensor out(x.shape(), x.dtype());
  Tensor norms({rows}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data_mut<T>();
    auto nm = norms.data_mut<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      double ss = 0.0;
      for (std::int64_t i = 0; i < n; ++i) ss += static_cast<double>(src[r * n + i]) * src[r * n + i];
      const double norm = std::sqrt(ss);
      nm[r] = static_cast<T>(norm);
      for (std::int64_t i = 0; i < n; ++i) {
        dst[r * n + i] = norm > 0.0 ? static_cast<T>(src[r * n + i] / norm) : T(0);
      }
    }
  });
  attach(out, "l2_normalize", {x}, [out = out.detach(), norms, n, rows](const Tensor& g) {
    Tensor gx(out.shape(), out.dtype());
    dispatch(out.dtype(), [&]<class T>() {
      auto y = out.data<T>();
      auto gy = g.data<T>();
      auto nm = norms.data<T>();
      auto dx = gx.data_mut<T>();
      for (std::int64_t r = 0; r < rows; ++r) {
        if (!(nm[r] > T(0))) continue;
        double dot = 0.0;
        for (std::int64_t i = 0; i < n; ++i) dot += static_cast<double>(y[r * n + i]) * gy[r * n + i];
        for (std::int64_t i = 0; i < n; ++i) {
          dx[r * n + i] = static_cast<T>((gy[r * n + i] - y[r * n + i] * dot) / nm[r]);
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape: more than one -1");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) {
      throw DimensionError("reshape: cannot infer extent for " + shape_str(shape));
    }
    shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  }
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->dtype = x.dtype();
  impl->data = x.impl()->data;
  Tensor out(std::move(impl));
  const Shape in_shape = x.shape();
  attach(out, "reshape", {x},
         [in_shape](const Tensor& g) { return std::vector<Tensor>{reshape(g, in_shape)}; });
  return out;
}

namespace {

template <class T>
void permute_copy(const T* src, T* dst, const Shape& in_shape, const std::vector<int>& axes) {
  const std::size_t r = in_shape.size();
  std::vector<std::int64_t> in_strides(r, 1);
  for (int i = static_cast<int>(r) - 2; i >= 0; --i) {
    in_strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(i) + 1] * in_shape[static_cast<std::size_t>(i) + 1];
  }
  Shape out_shape(r);
  std::vector<std::int64_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
    strides[i] = in_strides[static_cast<std::size_t>(axes[i])];
  }
  const std::int64_t total = shape_numel(out_shape);
  if (total == 0) return;
  if (r == 0) {
    dst[0] = src[0];
    return;
  }
  const std::int64_t last = out_shape.back();
  const std::int64_t last_stride = strides.back();
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t offset = 0;
  for (std::int64_t o = 0; o < total; o += last) {
    const T* s = src + offset;
    T* d = dst + o;
    for (std::int64_t j = 0; j < last; ++j) d[j] = s[j * last_stride];
    for (int ax = static_cast<int>(r) - 2; ax >= 0; --ax) {
      const auto a = static_cast<std::size_t>(ax);
      if (++idx[a] < out_shape[a]) {
        offset += strides[a];
        break;
      }
      offset -= strides[a] * (out_shape[a] - 1);
      idx[a] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) throw DimensionError("permute: wrong number of axes");
  std::vector<int> inverse(axes.size(), -1);
  for (int i = 0; i < r; ++i) {
    const int a = axes[static_cast<std::size_t>(i)];
    if (a < 0 || a >= r || inverse[static_cast<std::size_t>(a)] != -1) {
      throw DimensionError("permute: axes are not a permutation");
    }
    inverse[static_cast<std::size_t>(a)] = i;
  }
  Shape out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    out_shape[i] = x.shape()[static_cast<std::size_t>(axes[i])];
  }
  Tensor out(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    permute_copy<T>(x.data<T>().data(), out.data_mut<T>().data(), x.shape(), axes);
  });
  attach(out, "permute", {x},
         [inverse](const Tensor& g) { return std::vector<Tensor>{permute(g, inverse)}; });
  return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ArgumentError("concat of an empty list");
  const int a = normalize_axis(axis, xs.front().rank(), "concat");
  Shape out_shape = xs.front().shape();
  std::int64_t total = 0;
  std::vector<std::int64_t> extents;
  for (const auto& x : xs) {
    require_same_dtype(xs.front(), x, "concat");
    Shape s = x.shape();
    if (s.size() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != a && s[i] != out_shape[i]) {
        throw DimensionError("concat: " + shape_str(s) + " vs " + shape_str(out_shape));
      }
    }
    extents.push_back(s[static_cast<std::size_t>(a)]);
    total += s[static_cast<std::size_t>(a)];
  }
  out_shape[static_cast<std::size_t>(a)] = total;
  const AxisSplit s = split_at(out_shape, a);
  Tensor out(out_shape, xs.front().dtype());
  dispatch(out.dtype(), [&]<class T>() {
    auto dst = out.data_mut<T>();
    std::int64_t offset = 0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
      auto src = xs[t].data<T>();
      const std::int64_t chunk = extents[t] * s.inner;
      for (std::int64_t o = 0; o < s.outer; ++o) {
        std::copy(src.begin() + o * chunk, src.begin() + (o + 1) * chunk,
                  dst.begin() + o * total * s.inner + offset);
      }
      offset += chunk;
    }
  });
  attach(out, "concat", xs, [a, extents](const Tensor& g) {
    std::vector<Tensor> grads;
    std::int64_t start = 0;
    for (auto e : extents) {
      grads.push_back(slice(g, a, start, e));
      start += e;
    }
    return grads;
  });
  return out;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  const int a = normalize_axis(axis, x.rank(), "slice");
  const AxisSplit s = split_at(x.shape(), a);
  if (start < 0 || length < 0 || start + length > s.extent) {
    throw DimensionError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                         ") out of range for extent " + std::to_string(s.extent));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(a)] = length;
  Tensor out(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data_mut<T>();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      const auto from = src.begin() + (o * s.extent + start) * s.inner;
      std::copy(from, from + length * s.inner, dst.begin() + o * length * s.inner);
    }
  });
  const Shape in_shape = x.shape();
  attach(out, "slice", {x}, [in_shape, a, start, length, s](const Tensor& g) {
    Tensor gx(in_shape, g.dtype());
    dispatch(g.dtype(), [&]<class T>() {
      auto src = g.data<T>();
      auto dst = gx.data_mut<T>();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        std::copy(src.begin() + o * length * s.inner, src.begin() + (o + 1) * length * s.inner,
                  dst.begin() + (o * s.extent + start) * s.inner);
      }
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (im2col over chunks of whole output rows + gemm)

namespace {

template <int R>
struct ConvGeom {
  std::array<std::int64_t, R> in{}, out{}, k{}, stride{}, pad{};
  std::int64_t cin = 0, cout = 0;
  std::int64_t taps = 1;
  std::int64_t out_positions = 1;
  std::int64_t in_positions = 1;
  std::int64_t rows = 1;  // output positions excluding the last axis
  std::int64_t K() const { return taps * cin; }
};

template <int R>
ConvGeom<R> conv_geom(const Tensor& x, const Tensor& w, const std::array<std::int64_t, R>& stride,
                      const char* op) {
  if (x.rank() != R + 1 || w.rank() != R + 2) {
    throw DimensionError(std::string(op) + ": expected input rank " + std::to_string(R + 1) +
                         " and kernel rank " + std::to_string(R + 2) + ", got " +
                         shape_str(x.shape()) + " / " + shape_str(w.shape()));
  }
  ConvGeom<R> g;
  g.cin = x.dim(-1);
  if (w.dim(R) != g.cin) {
    throw DimensionError(std::string(op) + ": channel mismatch, input has " +
                         std::to_string(g.cin) + " channels, kernel expects " +
                         std::to_string(w.dim(R)));
  }
  g.cout = w.dim(R + 1);
  for (int a = 0; a < R; ++a) {
    g.in[a] = x.dim(a);
    g.k[a] = w.dim(a);
    g.stride[a] = stride[static_cast<std::size_t>(a)];
    if (g.k[a] % 2 == 0) throw ArgumentError(std::string(op) + ": kernel extents must be odd");
    if (g.stride[a] < 1) throw ArgumentError(std::string(op) + ": strides must be >= 1");
    g.pad[a] = (g.k[a] - 1) / 2;
    g.out[a] = (g.in[a] + g.stride[a] - 1) / g.stride[a];
    g.taps *= g.k[a];
    g.out_positions *= g.out[a];
    g.in_positions *= g.in[a];
    if (a < R - 1) g.rows *= g.out[a];
  }
  return g;
}

// Visits every (output row, tap over the leading axes) pair in a chunk of
// rows. Yields the first flat tap index, the row offset within the chunk and
// the input position of the row's prefix, or -1 inside the zero padding.
template <int R, class F>
void for_each_row_tap(const ConvGeom<R>& g, std::int64_t row0, std::int64_t row1, F&& f) {
  const std::int64_t kl = g.k[R - 1];
  const std::int64_t prefix_taps = g.taps / kl;
  std::array<std::int64_t, R> o{};
  for (std::int64_t row = row0; row < row1; ++row) {
    std::int64_t r = row;
    for (int a = R - 2; a >= 0; --a) {
      o[a] = r % g.out[a];
      r /= g.out[a];
    }
    for (std::int64_t tp = 0; tp < prefix_taps; ++tp) {
      std::int64_t rem = tp;
      std::int64_t in_prefix = 0;
      std::int64_t in_mult = 1;
      bool valid = true;
      for (int a = R - 2; a >= 0; --a) {
        const std::int64_t q = o[a] * g.stride[a] + rem % g.k[a] - g.pad[a];
        rem /= g.k[a];
        if (q < 0 || q >= g.in[a]) {
          valid = false;
          break;
        }
        in_prefix += q * in_mult;
        in_mult *= g.in[a];
      }
      f(tp * kl, row - row0, valid ? in_prefix : -1);
    }
  }
}

// col is position major: col[j, t * cin + ci].
template <int R, class T>
void im2col(const ConvGeom<R>& g, const T* x, std::int64_t row0, std::int64_t row1, T* col) {
  const std::int64_t ol = g.out[R - 1], il = g.in[R - 1], sl = g.stride[R - 1], pl = g.pad[R - 1];
  const std::int64_t kl = g.k[R - 1], cin = g.cin, K = g.K();
  const std::int64_t run = kl * cin;
  for_each_row_tap<R>(g, row0, row1, [&](std::int64_t t0, std::int64_t lr, std::int64_t in_prefix) {
    T* dst = col + lr * ol * K + t0 * cin;
    if (in_prefix < 0) {
      for (std::int64_t j = 0; j < ol; ++j) std::fill(dst + j * K, dst + j * K + run, T(0));
      return;
    }
    const T* src = x + in_prefix * il * cin;
    for (std::int64_t j = 0; j < ol; ++j, dst += K) {
      const std::int64_t q0 = j * sl - pl;
      if (q0 >= 0 && q0 + kl <= il) {
        std::copy(src + q0 * cin, src + q0 * cin + run, dst);
        continue;
      }
      for (std::int64_t dl = 0; dl < kl; ++dl) {
        const std::int64_t q = q0 + dl;
        if (q >= 0 && q < il) {
          std::copy(src + q * cin, src + q * cin + cin, dst + dl * cin);
        } else {
          std::fill(dst + dl * cin, dst + dl * cin + cin, T(0));
        }
      }
    }
  });
}

template <int R, class T>
void col2im_add(const ConvGeom<R>& g, const T* col, std::int64_t row0, std::int64_t row1, T* gx) {
  const std::int64_t ol = g.out[R - 1], il = g.in[R - 1], sl = g.stride[R - 1], pl = g.pad[R - 1];
  const std::int64_t kl = g.k[R - 1], cin = g.cin, K = g.K();
  for_each_row_tap<R>(g, row0, row1, [&](std::int64_t t0, std::int64_t lr, std::int64_t in_prefix) {
    if (in_prefix < 0) return;
    const T* src = col + lr * ol * K + t0 * cin;
    T* dst = gx + in_prefix * il * cin;
    for (std::int64_t j = 0; j < ol; ++j, src += K) {
      const std::int64_t q0 = j * sl - pl;
      const std::int64_t lo = std::max<std::int64_t>(0, -q0);
      const std::int64_t hi = std::min(kl, il - q0);
      for (std::int64_t e = lo * cin; e < hi * cin; ++e) dst[q0 * cin + e] += src[e];
    }
  });
}

template <int R>
std::int64_t rows_per_chunk(const ConvGeom<R>& g) {
  const std::int64_t target_cols = std::clamp<std::int64_t>(262144 / std::max<std::int64_t>(g.K(), 1), 256, 4096);
  return std::max<std::int64_t>(1, target_cols / std::max<std::int64_t>(g.out[R - 1], 1));
}

// wT[co, kk] = w[kk, co]
template <class T>
TrackedVector<T> transpose_kernel(const T* w, std::int64_t K, std::int64_t cout) {
  TrackedVector<T> wT(static_cast<std::size_t>(K * cout));
  for (std::int64_t kk = 0; kk < K; ++kk) {
    for (std::int64_t co = 0; co < cout; ++co) wT[co * K + kk] = w[kk * cout + co];
  }
  return wT;
}

template <int R>
Tensor conv_forward(const Tensor& x, const Tensor& w, const Tensor& bias, const ConvGeom<R>& g) {
  Shape out_shape;
  for (int a = 0; a < R; ++a) out_shape.push_back(g.out[a]);
  out_shape.push_back(g.cout);
  Tensor out(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.data<T>().data();
    T* po = out.data_mut<T>().data();
    const std::int64_t ol = g.out[R - 1];
    const std::int64_t K = g.K();
    const std::int64_t chunk_rows = rows_per_chunk<R>(g);
    const TrackedVector<T> wT = transpose_kernel(w.data<T>().data(), K, g.cout);
    TrackedVector<T> col(static_cast<std::size_t>(K * chunk_rows * ol));
    for (std::int64_t row0 = 0; row0 < g.rows; row0 += chunk_rows) {
      const std::int64_t row1 = std::min(g.rows, row0 + chunk_rows);
      const std::int64_t ncols = (row1 - row0) * ol;
      im2col<R, T>(g, px, row0, row1, col.data());
      // out[j, co] = sum_kk col[j, kk] * wT[co, kk]
      kernels::gemm<T>(ncols, g.cout, K, col.data(), K, 1, wT.data(), 1, K,
                       po + row0 * ol * g.cout, g.cout, false);
    }
    if (bias.defined()) {
      const T* pb = bias.data<T>().data();
      for (std::int64_t p = 0; p < g.out_positions; ++p) {
        for (std::int64_t co = 0; co < g.cout; ++co) po[p * g.cout + co] += pb[co];
      }
    }
  });
  return out;
}

template <int R>
std::vector<Tensor> conv_backward(const Tensor& x, const Tensor& w, const Tensor& bias,
                                  const ConvGeom<R>& g, const Tensor& gout) {
  std::vector<Tensor> grads(3);
  const bool need_x = x.requires_grad();
  const bool need_w = w.requires_grad();
  if (need_x) grads[0] = Tensor(x.shape(), x.dtype());
  if (need_w) grads[1] = Tensor(w.shape(), w.dtype());
  if (bias.defined() && bias.requires_grad()) {
    grads[2] = Tensor(bias.shape(), bias.dtype());
    dispatch(x.dtype(), [&]<class T>() {
      const T* pg = gout.data<T>().data();
      T* pb = grads[2].data_mut<T>().data();
      for (std::int64_t p = 0; p < g.out_positions; ++p) {
        for (std::int64_t co = 0; co < g.cout; ++co) pb[co] += pg[p * g.cout + co];
      }
    });
  }
  if (!need_x && !need_w) return grads;
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.data<T>().data();
    const T* pg = gout.data<T>().data();
    const std::int64_t ol = g.out[R - 1];
    const std::int64_t chunk_rows = rows_per_chunk<R>(g);
    const std::int64_t K = g.K();
    const TrackedVector<T> wT = transpose_kernel(w.data<T>().data(), K, g.cout);
    TrackedVector<T> col(static_cast<std::size_t>(K * chunk_rows * ol));
    TrackedVector<T> gwT;
    if (need_w) gwT.assign(static_cast<std::size_t>(g.cout * K), T(0));
    TrackedVector<T> goutT(static_cast<std::size_t>(g.cout * chunk_rows * ol));
    for (std::int64_t row0 = 0; row0 < g.rows; row0 += chunk_rows) {
      const std::int64_t row1 = std::min(g.rows, row0 + chunk_rows);
      const std::int64_t ncols = (row1 - row0) * ol;
      const T* gchunk = pg + row0 * ol * g.cout;
      if (need_w) {
        for (std::int64_t j = 0; j < ncols; ++j) {
          for (std::int64_t co = 0; co < g.cout; ++co) goutT[co * ncols + j] = gchunk[j * g.cout + co];
        }
        im2col<R, T>(g, px, row0, row1, col.data());
        // gwT[co, kk] += sum_j goutT[co, j] * col[j, kk]
        kernels::gemm<T>(g.cout, K, ncols, goutT.data(), ncols, 1, col.data(), K, 1, gwT.data(),
                         K, true);
      }
      if (need_x) {
        // gcol[j, kk] = sum_co gout[j, co] * wT[co, kk]
        kernels::gemm<T>(ncols, K, g.cout, gchunk, g.cout, 1, wT.data(), K, 1, col.data(), K,
                         false);
        col2im_add<R, T>(g, col.data(), row0, row1, grads[0].data_mut<T>().data());
      }
    }
    if (need_w) {
      T* gw = grads[1].data_mut<T>().data();
      for (std::int64_t kk = 0; kk < K; ++kk) {
        for (std::int64_t co = 0; co < g.cout; ++co) gw[kk * g.cout + co] = gwT[co * K + kk];
      }
    }
  });
  return grads;
}

template <int R>
Tensor conv_nd(const Tensor& x, const Tensor& w, const Tensor& bias,
               const std::array<std::int64_t, R>& stride, const char* op) {
  require_same_dtype(x, w, op);
  const ConvGeom<R> g = conv_geom<R>(x, w, stride, op);
  if (bias.defined()) {
    require_same_dtype(x, bias, op);
    if (bias.shape() != Shape{g.cout}) throw DimensionError(std::string(op) + ": bias shape");
  }
  Tensor out = conv_forward<R>(x, w, bias, g);
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  attach(out, op, inputs, [x, w, bias, g](const Tensor& gout) {
    auto grads = conv_backward<R>(x, w, bias, g, gout);
    if (!bias.defined()) grads.pop_back();
    return grads;
  });
  return out;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::array<std::int64_t, 2> stride) {
  return conv_nd<2>(x, kernel, bias, stride, "conv2d");
}

Tensor conv4d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::array<std::int64_t, 4> stride) {
  return conv_nd<4>(x, kernel, bias, stride, "conv4d");
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

struct LerpTap {
  std::int64_t i0 = 0, i1 = 0;
  double w = 0.0;
};

std::vector<LerpTap> lerp_taps(std::int64_t in, std::int64_t out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    auto& t = taps[static_cast<std::size_t>(o)];
    t.i0 = static_cast<std::int64_t>(std::floor(src));
    t.i1 = std::min(t.i0 + 1, in - 1);
    t.w = src - static_cast<double>(t.i0);
  }
  return taps;
}

}  // namespace

Tensor resample_axis(const Tensor& x, int axis, std::int64_t out_extent) {
  const int a = normalize_axis(axis, x.rank(), "resample_axis");
  const AxisSplit s = split_at(x.shape(), a);
  if (out_extent < 1 || s.extent < 1) throw ArgumentError("resample_axis: empty extent");
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(a)] = out_extent;
  if (out_extent == s.extent) {
    Tensor out = x.clone();
    attach(out, "resample_axis", {x}, [](const Tensor& g) { return std::vector<Tensor>{g}; });
    return out;
  }
  const auto taps = lerp_taps(s.extent, out_extent);
  Tensor out(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data_mut<T>();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t k = 0; k < out_extent; ++k) {
        const auto& t = taps[static_cast<std::size_t>(k)];
        const T w = static_cast<T>(t.w);
        const T* p0 = src.data() + (o * s.extent + t.i0) * s.inner;
        const T* p1 = src.data() + (o * s.extent + t.i1) * s.inner;
        T* d = dst.data() + (o * out_extent + k) * s.inner;
        for (std::int64_t i = 0; i < s.inner; ++i) d[i] = p0[i] + w * (p1[i] - p0[i]);
      }
    }
  });
  const Shape in_shape = x.shape();
  attach(out, "resample_axis", {x}, [in_shape, s, taps, out_extent](const Tensor& g) {
    Tensor gx(in_shape, g.dtype());
    dispatch(g.dtype(), [&]<class T>() {
      auto src = g.data<T>();
      auto dst = gx.data_mut<T>();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t k = 0; k < out_extent; ++k) {
          const auto& t = taps[static_cast<std::size_t>(k)];
          const T w = static_cast<T>(t.w);
          const T* gp = src.data() + (o * out_extent + k) * s.inner;
          T* d0 = dst.data() + (o * s.extent + t.i0) * s.inner;
          T* d1 = dst.data() + (o * s.extent + t.i1) * s.inner;
          for (std::int64_t i = 0; i < s.inner; ++i) {
            d0[i] += gp[i] - w * gp[i];
            d1[i] += w * gp[i];
          }
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  if (x.rank() != 3) throw DimensionError("resize_bilinear expects [h, w, c], got " + shape_str(x.shape()));
  return resample_axis(resample_axis(x, 0, out_h), 1, out_w);
}

Tensor upsample4d_bilinear(const Tensor& x, std::int64_t factor) {
  if (x.rank() != 5) {
    throw DimensionError("upsample4d_bilinear expects [h1, w1, h2, w2, c], got " +
                         shape_str(x.shape()));
  }
  if (factor < 1) throw ArgumentError("upsample4d_bilinear: factor must be >= 1");
  if (factor == 1) return resample_axis(x, 0, x.dim(0));
  Tensor y = x;
  for (int a = 0; a < 4; ++a) y = resample_axis(y, a, x.dim(a) * factor);
  return y;
}

}  // namespace catagg
