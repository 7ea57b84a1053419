#pragma once

// Dense row-major products c += a * b used by the tape kernels. double and
// float go to CBLAS; dual numbers are split into value and tangent planes so
// that the same routine does the work.

#include <algorithm>
#include <vector>

#include <cblas.h>

#include "tensornet/dual.hpp"

namespace tensornet::detail {

// c (m x n) += a (m x k) * b (k x n).
template <class T> void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T *a, const T *b, T *c) {
  for (std::size_t i = 0; i < m; ++i) {
    T *ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T *bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j)
        ci[j] += aip * bp[j];
    }
  }
}

inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double *a, const double *b, double *c) {
  if (m == 0 || n == 0 || k == 0)
    return;
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0, a, static_cast<int>(k), b, static_cast<int>(n), 1.0, c, static_cast<int>(n));
}

inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float *a, const float *b, float *c) {
  if (m == 0 || n == 0 || k == 0)
    return;
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0f, a, static_cast<int>(k), b, static_cast<int>(n), 1.0f, c, static_cast<int>(n));
}

// (av + ad e)(bv + bd e) = av bv + (ad bv + av bd) e
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Dual<double> *a, const Dual<double> *b,
                    Dual<double> *c) {
  if (m == 0 || n == 0 || k == 0)
    return;
  auto split = [](const Dual<double> *x, std::size_t len, std::vector<double> &v, std::vector<double> &d) {
    v.resize(len);
    d.resize(len);
    bool any = false;
    for (std::size_t i = 0; i < len; ++i) {
      v[i] = x[i].v;
      d[i] = x[i].d;
      any = any || x[i].d != 0.0;
    }
    return any;
  };
  std::vector<double> av, ad, bv, bd;
  const bool a_tan = split(a, m * k, av, ad);
  const bool b_tan = split(b, k * n, bv, bd);
  std::vector<double> cv(m * n), cd(m * n);
  for (std::size_t i = 0; i < m * n; ++i) {
    cv[i] = c[i].v;
    cd[i] = c[i].d;
  }
  gemm_nn(m, n, k, av.data(), bv.data(), cv.data());
  if (a_tan)
    gemm_nn(m, n, k, ad.data(), bv.data(), cd.data());
  if (b_tan)
    gemm_nn(m, n, k, av.data(), bd.data(), cd.data());
  for (std::size_t i = 0; i < m * n; ++i)
    c[i] = Dual<double>(cv[i], cd[i]);
}

} // namespace tensornet::detail
