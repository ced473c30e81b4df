#pragma once
// Dense arithmetic kernels with a scalar reference and an AVX2/FMA variant.
// The variant is chosen once at startup from CPUID; CRPN_SIMD=scalar in the
// environment (or force_level) pins the reference path.

#include <cstddef>

namespace crpn::simd {

enum class Level { Scalar, Avx2 };

const char* level_name(Level level);

/// Best level the running CPU supports.
Level detect_level();

/// Level used by kernels<T>(); defaults to detect_level() unless overridden.
Level active_level();
void force_level(Level level);

/// Row-major C[M,N] (+)= A[M,K] * B[K,N]. Every C element accumulates its K
/// products in ascending k order, so a given level is bit-reproducible.
template <typename T>
using GemmFn = void (*)(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c,
                        int ldc, bool accumulate);

/// y[i] += alpha * x[i]
template <typename T>
using AxpyFn = void (*)(std::size_t n, T alpha, const T* x, T* y);

/// sum x[i] * y[i], lanes reduced in a fixed order
template <typename T>
using DotFn = T (*)(std::size_t n, const T* x, const T* y);

template <typename T>
struct KernelTable {
  GemmFn<T> gemm_nn;
  AxpyFn<T> axpy;
  DotFn<T> dot;
};

template <typename T>
const KernelTable<T>& kernels(Level level);

template <>
const KernelTable<float>& kernels<float>(Level level);
template <>
const KernelTable<double>& kernels<double>(Level level);

template <typename T>
const KernelTable<T>& kernels() {
  return kernels<T>(active_level());
}

enum class Trans { No, Yes };

/// General GEMM on top of the active table. Transposed operands are packed
/// into contiguous scratch before the nn kernel runs.
template <typename T>
void gemm(Trans ta, Trans tb, int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c,
          int ldc, bool accumulate);

namespace detail {
const KernelTable<float>& scalar_f32();
const KernelTable<double>& scalar_f64();
#if defined(CRPN_WITH_AVX2)
const KernelTable<float>& avx2_f32();
const KernelTable<double>& avx2_f64();
#endif
}  // namespace detail

}  // namespace crpn::simd
