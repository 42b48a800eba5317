#include <cstdlib>
#include <cstring>
#include <string>

#include "macswin/kern/kernels.hpp"
#include "macswin/util/errors.hpp"
#include "macswin/util/parallel.hpp"

namespace macswin::kern {

namespace {

Backend detect_backend() {
  if (const char* env = std::getenv("MACSWIN_KERNELS")) {
    std::string v(env);
    if (v == "scalar") return Backend::Scalar;
    if (v == "avx2") {
      if (!avx2_supported()) throw ConfigError("MACSWIN_KERNELS=avx2 but the CPU lacks AVX2+FMA");
      return Backend::Avx2;
    }
    throw ConfigError("unknown MACSWIN_KERNELS value: " + v + " (expected scalar|avx2)");
  }
  return avx2_supported() ? Backend::Avx2 : Backend::Scalar;
}

Backend& backend_slot() {
  static Backend b = detect_backend();
  return b;
}

// Splits gemm row ranges across the pool when the product is large enough to
// pay for the handoff. Row chunks write disjoint C rows.
constexpr int64_t kGemmParallelFlops = 1 << 21;

template <class F>
void rows_parallel(int m, int64_t flops, const F& body) {
  if (flops < kGemmParallelFlops || m < 2) {
    body(0, m);
  } else {
    parallel_for(m, 8, [&](int64_t b, int64_t e) { body(int(b), int(e)); });
  }
}

void gemm_nn_d(int m, int n, int k, const double* a, const double* b, double* c,
               bool accumulate) {
  for (int i = 0; i < m; ++i) {
    double* crow = c + int64_t(i) * n;
    if (!accumulate) std::memset(crow, 0, sizeof(double) * size_t(n));
    const double* arow = a + int64_t(i) * k;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = b + int64_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt_d(int m, int n, int k, const double* a, const double* b, double* c,
               bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + int64_t(i) * k;
    double* crow = c + int64_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + int64_t(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

void gemm_tn_d(int m, int n, int k, const double* a, const double* b, double* c,
               bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * size_t(m) * size_t(n));
  for (int p = 0; p < k; ++p) {
    const double* arow = a + int64_t(p) * m;
    const double* brow = b + int64_t(p) * n;
    for (int i = 0; i < m; ++i) {
      double av = arow[i];
      double* crow = c + int64_t(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

bool avx2_supported() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Kernels& table(Backend b) {
#if defined(__x86_64__) || defined(_M_X64)
  if (b == Backend::Avx2) return kAvx2;
#endif
  (void)b;
  return kScalar;
}

const Kernels& active() { return table(backend_slot()); }

Backend active_backend() { return backend_slot(); }

void force_backend(Backend b) {
  if (b == Backend::Avx2 && !avx2_supported())
    throw ConfigError("cannot force AVX2 kernels: CPU lacks AVX2+FMA");
  backend_slot() = b;
}

void gemm_nn(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate) {
  const Kernels& kr = active();
  rows_parallel(m, int64_t(m) * n * k, [&](int rb, int re) {
    kr.gemm_nn(re - rb, n, k, a + int64_t(rb) * k, b, c + int64_t(rb) * n, accumulate);
  });
}

void gemm_nt(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate) {
  const Kernels& kr = active();
  rows_parallel(m, int64_t(m) * n * k, [&](int rb, int re) {
    kr.gemm_nt(re - rb, n, k, a + int64_t(rb) * k, b, c + int64_t(rb) * n, accumulate);
  });
}

void gemm_tn(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate) {
  // Rows of C come from columns of A; the k-major loop inside the kernel
  // writes every C row, so this one stays single threaded per call.
  active().gemm_tn(m, n, k, a, b, c, accumulate);
}

void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  gemm_nn_d(m, n, k, a, b, c, accumulate);
}
void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  gemm_nt_d(m, n, k, a, b, c, accumulate);
}
void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  gemm_tn_d(m, n, k, a, b, c, accumulate);
}

}  // namespace macswin::kern
