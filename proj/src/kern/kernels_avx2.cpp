#include "macswin/kern/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <algorithm>
#include <cstring>

// AVX2+FMA variants of the hot loops. This translation unit is the only one
// compiled with -mavx2 -mfma; callers go through the dispatch table so the
// binary still runs on SSE-only machines.

namespace macswin::kern {

namespace {

inline float hsum256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

inline float hmax256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_max_ps(lo, hi);
  lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_max_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

// C row <- C row + a * B row, the shared inner step of gemm_nn / gemm_tn.
inline void fma_row(float av, const float* brow, float* crow, int n) {
  __m256 va = _mm256_set1_ps(av);
  int j = 0;
  for (; j + 15 < n; j += 16) {
    __m256 c0 = _mm256_loadu_ps(crow + j);
    __m256 c1 = _mm256_loadu_ps(crow + j + 8);
    c0 = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j), c0);
    c1 = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j + 8), c1);
    _mm256_storeu_ps(crow + j, c0);
    _mm256_storeu_ps(crow + j + 8, c1);
  }
  for (; j + 7 < n; j += 8) {
    __m256 c0 = _mm256_loadu_ps(crow + j);
    c0 = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j), c0);
    _mm256_storeu_ps(crow + j, c0);
  }
  for (; j < n; ++j) crow[j] += av * brow[j];
}

void gemm_nn_avx2(int m, int n, int k, const float* a, const float* b, float* c,
                  bool accumulate) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + int64_t(i) * n;
    if (!accumulate) std::memset(crow, 0, sizeof(float) * size_t(n));
    const float* arow = a + int64_t(i) * k;
    int p = 0;
    // Two B rows per pass halves the C row traffic.
    for (; p + 1 < k; p += 2) {
      __m256 va0 = _mm256_set1_ps(arow[p]);
      __m256 va1 = _mm256_set1_ps(arow[p + 1]);
      const float* b0 = b + int64_t(p) * n;
      const float* b1 = b0 + n;
      int j = 0;
      for (; j + 7 < n; j += 8) {
        __m256 cc = _mm256_loadu_ps(crow + j);
        cc = _mm256_fmadd_ps(va0, _mm256_loadu_ps(b0 + j), cc);
        cc = _mm256_fmadd_ps(va1, _mm256_loadu_ps(b1 + j), cc);
        _mm256_storeu_ps(crow + j, cc);
      }
      for (; j < n; ++j) crow[j] += arow[p] * b0[j] + arow[p + 1] * b1[j];
    }
    if (p < k) fma_row(arow[p], b + int64_t(p) * n, crow, n);
  }
}

void gemm_nt_avx2(int m, int n, int k, const float* a, const float* b, float* c,
                  bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + int64_t(i) * k;
    float* crow = c + int64_t(i) * n;
    int j = 0;
    for (; j + 3 < n; j += 4) {
      const float* b0 = b + int64_t(j) * k;
      const float* b1 = b0 + k;
      const float* b2 = b1 + k;
      const float* b3 = b2 + k;
      __m256 s0 = _mm256_setzero_ps(), s1 = _mm256_setzero_ps();
      __m256 s2 = _mm256_setzero_ps(), s3 = _mm256_setzero_ps();
      int p = 0;
      for (; p + 7 < k; p += 8) {
        __m256 va = _mm256_loadu_ps(arow + p);
        s0 = _mm256_fmadd_ps(va, _mm256_loadu_ps(b0 + p), s0);
        s1 = _mm256_fmadd_ps(va, _mm256_loadu_ps(b1 + p), s1);
        s2 = _mm256_fmadd_ps(va, _mm256_loadu_ps(b2 + p), s2);
        s3 = _mm256_fmadd_ps(va, _mm256_loadu_ps(b3 + p), s3);
      }
      float r0 = hsum256(s0), r1 = hsum256(s1), r2 = hsum256(s2), r3 = hsum256(s3);
      for (; p < k; ++p) {
        r0 += arow[p] * b0[p];
        r1 += arow[p] * b1[p];
        r2 += arow[p] * b2[p];
        r3 += arow[p] * b3[p];
      }
      if (accumulate) {
        crow[j] += r0, crow[j + 1] += r1, crow[j + 2] += r2, crow[j + 3] += r3;
      } else {
        crow[j] = r0, crow[j + 1] = r1, crow[j + 2] = r2, crow[j + 3] = r3;
      }
    }
    for (; j < n; ++j) {
      const float* brow = b + int64_t(j) * k;
      __m256 s = _mm256_setzero_ps();
      int p = 0;
      for (; p + 7 < k; p += 8)
        s = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p), _mm256_loadu_ps(brow + p), s);
      float r = hsum256(s);
      for (; p < k; ++p) r += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + r : r;
    }
  }
}

void gemm_tn_avx2(int m, int n, int k, const float* a, const float* b, float* c,
                  bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * size_t(m) * size_t(n));
  for (int p = 0; p < k; ++p) {
    const float* arow = a + int64_t(p) * m;
    const float* brow = b + int64_t(p) * n;
    for (int i = 0; i < m; ++i) {
      fma_row(arow[i], brow, c + int64_t(i) * n, n);
    }
  }
}

void add_avx2(const float* a, const float* b, float* out, int64_t n) {
  int64_t i = 0;
  for (; i + 7 < n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_avx2(const float* a, const float* b, float* out, int64_t n) {
  int64_t i = 0;
  for (; i + 7 < n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_avx2(const float* a, const float* b, float* out, int64_t n) {
  int64_t i = 0;
  for (; i + 7 < n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_avx2(const float* a, float s, float* out, int64_t n) {
  __m256 vs = _mm256_set1_ps(s);
  int64_t i = 0;
  for (; i + 7 < n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), vs));
  for (; i < n; ++i) out[i] = a[i] * s;
}

void axpby_avx2(float alpha, const float* x, float beta, float* y, int64_t n) {
  __m256 va = _mm256_set1_ps(alpha);
  __m256 vb = _mm256_set1_ps(beta);
  int64_t i = 0;
  for (; i + 7 < n; i += 8) {
    __m256 vy = _mm256_mul_ps(vb, _mm256_loadu_ps(y + i));
    vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vy);
    _mm256_storeu_ps(y + i, vy);
  }
  for (; i < n; ++i) y[i] = alpha * x[i] + beta * y[i];
}

void relu_avx2(const float* a, float* out, int64_t n) {
  __m256 zero = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 7 < n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_max_ps(_mm256_loadu_ps(a + i), zero));
  for (; i < n; ++i) out[i] = a[i] > 0.0f ? a[i] : 0.0f;
}

float reduce_sum_avx2(const float* a, int64_t n) {
  __m256 s = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 7 < n; i += 8) s = _mm256_add_ps(s, _mm256_loadu_ps(a + i));
  float acc = hsum256(s);
  for (; i < n; ++i) acc += a[i];
  return acc;
}

float reduce_max_avx2(const float* a, int64_t n) {
  if (n < 8) {
    float m = a[0];
    for (int64_t i = 1; i < n; ++i) m = std::max(m, a[i]);
    return m;
  }
  __m256 vm = _mm256_loadu_ps(a);
  int64_t i = 8;
  for (; i + 7 < n; i += 8) vm = _mm256_max_ps(vm, _mm256_loadu_ps(a + i));
  float m = hmax256(vm);
  for (; i < n; ++i) m = std::max(m, a[i]);
  return m;
}

float dot_avx2(const float* a, const float* b, int64_t n) {
  __m256 s = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 7 < n; i += 8)
    s = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), s);
  float acc = hsum256(s);
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void bias_add_rows_avx2(float* x, const float* bias, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    float* xr = x + r * cols;
    int64_t j = 0;
    for (; j + 7 < cols; j += 8)
      _mm256_storeu_ps(xr + j, _mm256_add_ps(_mm256_loadu_ps(xr + j), _mm256_loadu_ps(bias + j)));
    for (; j < cols; ++j) xr[j] += bias[j];
  }
}

}  // namespace

const Kernels kAvx2 = {
    gemm_nn_avx2, gemm_nt_avx2, gemm_tn_avx2, add_avx2,        sub_avx2,
    mul_avx2,     scale_avx2,   axpby_avx2,   relu_avx2,       reduce_sum_avx2,
    reduce_max_avx2, dot_avx2,  bias_add_rows_avx2,
};

}  // namespace macswin::kern

#endif  // x86_64
