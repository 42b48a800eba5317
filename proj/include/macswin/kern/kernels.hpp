#pragma once

#include <cstdint>

namespace macswin::kern {

enum class Backend { Scalar, Avx2 };

// Flat single-precision kernel table. All matrices are row-major and tightly
// packed. gemm_nn computes C(MxN) = A(MxK) * B(KxN); _nt takes B as NxK and
// uses its transpose; _tn takes A as KxM. With accumulate the product is
// added onto C instead of overwriting it.
struct Kernels {
  void (*gemm_nn)(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
  void (*gemm_nt)(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
  void (*gemm_tn)(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
  void (*add)(const float* a, const float* b, float* out, int64_t n);
  void (*sub)(const float* a, const float* b, float* out, int64_t n);
  void (*mul)(const float* a, const float* b, float* out, int64_t n);
  void (*scale)(const float* a, float s, float* out, int64_t n);
  // y = alpha * x + beta * y
  void (*axpby)(float alpha, const float* x, float beta, float* y, int64_t n);
  void (*relu)(const float* a, float* out, int64_t n);
  float (*reduce_sum)(const float* a, int64_t n);
  float (*reduce_max)(const float* a, int64_t n);
  float (*dot)(const float* a, const float* b, int64_t n);
  // x[r, :] += bias for every row r
  void (*bias_add_rows)(float* x, const float* bias, int64_t rows, int64_t cols);
};

extern const Kernels kScalar;
#if defined(__x86_64__) || defined(_M_X64)
extern const Kernels kAvx2;
#endif

bool avx2_supported();

// Active table: AVX2 when the CPU has it, overridable with
// MACSWIN_KERNELS=scalar|avx2 or force_backend() (tests).
const Kernels& active();
Backend active_backend();
void force_backend(Backend b);
const Kernels& table(Backend b);

// Typed front ends used by the tensor layer. Float routes through the active
// table and splits rows across threads for large products; double always runs
// the scalar reference path (it only serves gradient checking).
void gemm_nn(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
void gemm_nt(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
void gemm_tn(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);

}  // namespace macswin::kern
