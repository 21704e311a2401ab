#include "catagg/gemm.hpp"

#include <algorithm>

#include "catagg/tensor.hpp"

namespace catagg::kernels {

namespace {

constexpr std::int64_t kMr = 4;
constexpr std::int64_t kKc = 256;

template <class T>
constexpr std::int64_t nr() {
  return 128 / static_cast<std::int64_t>(sizeof(T));
}

template <class T, std::int64_t MR>
inline void micro_kernel(T (&acc)[kMr][nr<T>()], const T* a, std::int64_t rsa, std::int64_t csa,
                         const T* bpanel, std::int64_t bstride, std::int64_t kc) {
  constexpr std::int64_t NR = nr<T>();
  for (std::int64_t kk = 0; kk < kc; ++kk) {
    const T* brow = bpanel + kk * bstride;
    for (std::int64_t i = 0; i < MR; ++i) {
      const T av = a[i * rsa + kk * csa];
      for (std::int64_t j = 0; j < NR; ++j) acc[i][j] += av * brow[j];
    }
  }
}

template <class T>
inline void micro_kernel_rows(std::int64_t mr, T (&acc)[kMr][nr<T>()], const T* a,
                              std::int64_t rsa, std::int64_t csa, const T* bpanel,
                              std::int64_t bstride, std::int64_t kc) {
  switch (mr) {
    case 4: micro_kernel<T, 4>(acc, a, rsa, csa, bpanel, bstride, kc); break;
    case 3: micro_kernel<T, 3>(acc, a, rsa, csa, bpanel, bstride, kc); break;
    case 2: micro_kernel<T, 2>(acc, a, rsa, csa, bpanel, bstride, kc); break;
    default: micro_kernel<T, 1>(acc, a, rsa, csa, bpanel, bstride, kc); break;
  }
}

// Both operands contiguous along k: each output is a dot product, reduced in a
// fixed lane order so repeated calls agree bit for bit.
template <class T>
void gemm_dot(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, std::int64_t rsa,
              const T* b, std::int64_t csb, T* c, std::int64_t ldc, bool accumulate) {
  constexpr std::int64_t L = 64 / static_cast<std::int64_t>(sizeof(T));
  const std::int64_t kv = k - k % L;
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * rsa;
    for (std::int64_t j = 0; j < n; ++j) {
      const T* bcol = b + j * csb;
      T lane[L] = {};
      for (std::int64_t kk = 0; kk < kv; kk += L) {
        for (std::int64_t l = 0; l < L; ++l) lane[l] += arow[kk + l] * bcol[kk + l];
      }
      T s = 0;
      for (std::int64_t l = 0; l < L; ++l) s += lane[l];
      for (std::int64_t kk = kv; kk < k; ++kk) s += arow[kk] * bcol[kk];
      T& dst = c[i * ldc + j];
      dst = accumulate ? dst + s : s;
    }
  }
}

}  // namespace

template <class T>
void gemm(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, std::int64_t rsa,
          std::int64_t csa, const T* b, std::int64_t rsb, std::int64_t csb, T* c,
          std::int64_t ldc, bool accumulate) {
  constexpr std::int64_t NR = nr<T>();
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    if (!accumulate) {
      for (std::int64_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, T(0));
    }
    return;
  }
  if (csa == 1 && rsb == 1 && csb != 1) {
    gemm_dot<T>(m, n, k, a, rsa, b, csb, c, ldc, accumulate);
    return;
  }
  TrackedVector<T> bpack(static_cast<std::size_t>(kKc * NR));
  for (std::int64_t k0 = 0; k0 < k; k0 += kKc) {
    const std::int64_t kc = std::min(kKc, k - k0);
    const bool load_c = accumulate || k0 > 0;
    for (std::int64_t j0 = 0; j0 < n; j0 += NR) {
      const std::int64_t nr_valid = std::min(NR, n - j0);
      // Short or single-use strips are read in place.
      const bool direct = csb == 1 && nr_valid == NR && (m <= kMr || kc <= 16);
      const T* bpanel = direct ? b + k0 * rsb + j0 : bpack.data();
      const std::int64_t bstride = direct ? rsb : NR;
      for (std::int64_t kk = 0; kk < kc && !direct; ++kk) {
        const T* src = b + (k0 + kk) * rsb + j0 * csb;
        T* dst = bpack.data() + kk * NR;
        if (csb == 1) {
          std::copy(src, src + nr_valid, dst);
        } else {
          for (std::int64_t j = 0; j < nr_valid; ++j) dst[j] = src[j * csb];
        }
        std::fill(dst + nr_valid, dst + NR, T(0));
      }
      for (std::int64_t i0 = 0; i0 < m; i0 += kMr) {
        const std::int64_t mr = std::min(kMr, m - i0);
        alignas(64) T acc[kMr][NR];
        for (std::int64_t i = 0; i < kMr; ++i) {
          for (std::int64_t j = 0; j < NR; ++j) acc[i][j] = T(0);
        }
        if (load_c) {
          for (std::int64_t i = 0; i < mr; ++i) {
            const T* crow = c + (i0 + i) * ldc + j0;
            for (std::int64_t j = 0; j < nr_valid; ++j) acc[i][j] = crow[j];
          }
        }
        micro_kernel_rows<T>(mr, acc, a + i0 * rsa + k0 * csa, rsa, csa, bpanel, bstride, kc);
        for (std::int64_t i = 0; i < mr; ++i) {
          T* crow = c + (i0 + i) * ldc + j0;
          for (std::int64_t j = 0; j < nr_valid; ++j) crow[j] = acc[i][j];
        }
      }
    }
  }
}

template void gemm<float>(std::int64_t, std::int64_t, std::int64_t, const float*, std::int64_t,
                          std::int64_t, const float*, std::int64_t, std::int64_t, float*,
                          std::int64_t, bool);
template void gemm<double>(std::int64_t, std::int64_t, std::int64_t, const double*, std::int64_t,
                           std::int64_t, const double*, std::int64_t, std::int64_t, double*,
                           std::int64_t, bool);

}  // namespace catagg::kernels
