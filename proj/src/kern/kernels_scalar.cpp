#include <algorithm>
#include <cstring>

#include "macswin/kern/kernels.hpp"

// Reference kernels. Deliberately plain loops: these define the semantics the
// SIMD variants are equivalence-tested against.

namespace macswin::kern {

namespace {

void gemm_nn_scalar(int m, int n, int k, const float* a, const float* b, float* c,
                    bool accumulate) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + int64_t(i) * n;
    if (!accumulate) std::memset(crow, 0, sizeof(float) * size_t(n));
    const float* arow = a + int64_t(i) * k;
    for (int p = 0; p < k; ++p) {
      float av = arow[p];
      const float* brow = b + int64_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt_scalar(int m, int n, int k, const float* a, const float* b, float* c,
                    bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + int64_t(i) * k;
    float* crow = c + int64_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + int64_t(j) * k;
      float acc = 0.0f;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

void gemm_tn_scalar(int m, int n, int k, const float* a, const float* b, float* c,
                    bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * size_t(m) * size_t(n));
  for (int p = 0; p < k; ++p) {
    const float* arow = a + int64_t(p) * m;
    const float* brow = b + int64_t(p) * n;
    for (int i = 0; i < m; ++i) {
      float av = arow[i];
      float* crow = c + int64_t(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void add_scalar(const float* a, const float* b, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_scalar(const float* a, const float* b, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_scalar(const float* a, const float* b, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_scalar(const float* a, float s, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] * s;
}

void axpby_scalar(float alpha, const float* x, float beta, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = alpha * x[i] + beta * y[i];
}

void relu_scalar(const float* a, float* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] > 0.0f ? a[i] : 0.0f;
}

float reduce_sum_scalar(const float* a, int64_t n) {
  float acc = 0.0f;
  for (int64_t i = 0; i < n; ++i) acc += a[i];
  return acc;
}

float reduce_max_scalar(const float* a, int64_t n) {
  float m = a[0];
  for (int64_t i = 1; i < n; ++i) m = std::max(m, a[i]);
  return m;
}

float dot_scalar(const float* a, const float* b, int64_t n) {
  float acc = 0.0f;
  for (int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void bias_add_rows_scalar(float* x, const float* bias, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    float* xr = x + r * cols;
    for (int64_t j = 0; j < cols; ++j) xr[j] += bias[j];
  }
}

}  // namespace

const Kernels kScalar = {
    gemm_nn_scalar, gemm_nt_scalar, gemm_tn_scalar, add_scalar,        sub_scalar,
    mul_scalar,     scale_scalar,   axpby_scalar,   relu_scalar,       reduce_sum_scalar,
    reduce_max_scalar, dot_scalar,  bias_add_rows_scalar,
};

}  // namespace macswin::kern
