#pragma once

#include <cstdint>

namespace catagg::kernels {

// C[i,j] = (accumulate ? C[i,j] : 0) + sum_k A[i,k] * B[k,j], where
// A[i,k] = a[i*rsa + k*csa] and B[k,j] = b[k*rsb + j*csb]; C is row-major
// with leading dimension ldc.
//
// Each output element is reduced strictly in increasing k, so results do not
// depend on blocking and are bit-stable across runs.
template <class T>
void gemm(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, std::int64_t rsa,
          std::int64_t csa, const T* b, std::int64_t rsb, std::int64_t csb, T* c,
          std::int64_t ldc, bool accumulate);

}  // namespace catagg::kernels
