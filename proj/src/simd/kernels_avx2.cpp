// Compiled with -mavx2 -mfma; only reached through the dispatch table after
// detect_level() has confirmed CPU support.
#include "crpn/simd/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#if !defined(__AVX2__) || !defined(__FMA__)
#error "kernels_avx2.cpp must be compiled with -mavx2 -mfma"
#endif
#include <immintrin.h>

namespace crpn::simd::detail {

namespace {

struct F32 {
  using T = float;
  using V = __m256;
  static constexpr int kLanes = 8;
  static V zero() { return _mm256_setzero_ps(); }
  static V load(const T* p) { return _mm256_loadu_ps(p); }
  static void store(T* p, V v) { _mm256_storeu_ps(p, v); }
  static V set1(T x) { return _mm256_set1_ps(x); }
  static V fma(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  // first `count` lanes active
  static __m256i mask(int count) {
    return _mm256_cmpgt_epi32(_mm256_set1_epi32(count), _mm256_setr_epi32(0, 1, 2, 3, 4, 5, 6, 7));
  }
  static V maskload(const T* p, __m256i m) { return _mm256_maskload_ps(p, m); }
  static void maskstore(T* p, __m256i m, V v) { _mm256_maskstore_ps(p, m, v); }
  static T hsum(V v) {
    alignas(32) T lanes[kLanes];
    _mm256_store_ps(lanes, v);
    T s = 0;
    for (int i = 0; i < kLanes; ++i) s += lanes[i];
    return s;
  }
};

struct F64 {
  using T = double;
  using V = __m256d;
  static constexpr int kLanes = 4;
  static V zero() { return _mm256_setzero_pd(); }
  static V load(const T* p) { return _mm256_loadu_pd(p); }
  static void store(T* p, V v) { _mm256_storeu_pd(p, v); }
  static V set1(T x) { return _mm256_set1_pd(x); }
  static V fma(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  static __m256i mask(int count) {
    return _mm256_cmpgt_epi64(_mm256_set1_epi64x(count), _mm256_setr_epi64x(0, 1, 2, 3));
  }
  static V maskload(const T* p, __m256i m) { return _mm256_maskload_pd(p, m); }
  static void maskstore(T* p, __m256i m, V v) { _mm256_maskstore_pd(p, m, v); }
  static T hsum(V v) {
    alignas(32) T lanes[kLanes];
    _mm256_store_pd(lanes, v);
    T s = 0;
    for (int i = 0; i < kLanes; ++i) s += lanes[i];
    return s;
  }
};

// R rows x 2 vectors register block; 6 rows fill 12 of the 16 ymm registers.
template <typename L, int R>
inline void block_rx2(int k, const typename L::T* a, int lda, const typename L::T* b, int ldb,
                      typename L::T* c, int ldc, bool accumulate) {
  using V = typename L::V;
  constexpr int W = L::kLanes;
  V acc0[R], acc1[R];
  for (int r = 0; r < R; ++r) {
    if (accumulate) {
      acc0[r] = L::load(c + r * ldc);
      acc1[r] = L::load(c + r * ldc + W);
    } else {
      acc0[r] = acc1[r] = L::zero();
    }
  }
  for (int p = 0; p < k; ++p) {
    const typename L::T* bp = b + static_cast<std::ptrdiff_t>(p) * ldb;
    const V b0 = L::load(bp);
    const V b1 = L::load(bp + W);
    for (int r = 0; r < R; ++r) {
      const V av = L::set1(a[r * lda + p]);
      acc0[r] = L::fma(av, b0, acc0[r]);
      acc1[r] = L::fma(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    L::store(c + r * ldc, acc0[r]);
    L::store(c + r * ldc + W, acc1[r]);
  }
}

// R rows x one partial vector of `cols` <= kLanes columns.
template <typename L, int R>
inline void block_rx1_masked(int k, int cols, const typename L::T* a, int lda, const typename L::T* b,
                             int ldb, typename L::T* c, int ldc, bool accumulate) {
  using V = typename L::V;
  const __m256i m = L::mask(cols);
  V acc[R];
  for (int r = 0; r < R; ++r) acc[r] = accumulate ? L::maskload(c + r * ldc, m) : L::zero();
  for (int p = 0; p < k; ++p) {
    const V bv = L::maskload(b + static_cast<std::ptrdiff_t>(p) * ldb, m);
    for (int r = 0; r < R; ++r) acc[r] = L::fma(L::set1(a[r * lda + p]), bv, acc[r]);
  }
  for (int r = 0; r < R; ++r) L::maskstore(c + r * ldc, m, acc[r]);
}

// Copies a k x `cols` strip of b into a dense k x `width` panel, zero padded.
// Wide-stride rows of b would otherwise alias in L1 across the k loop.
template <typename T>
void pack_strip(int k, int cols, int width, const T* b, int ldb, std::vector<T>& panel) {
  panel.resize(static_cast<std::size_t>(k) * width);
  T* dst = panel.data();
  for (int p = 0; p < k; ++p, dst += width) {
    const T* src = b + static_cast<std::ptrdiff_t>(p) * ldb;
    std::copy(src, src + cols, dst);
    std::fill(dst + cols, dst + width, T(0));
  }
}

// Leftover rows (fewer than 6) as one register block instead of single rows.
template <typename L, bool Masked>
void tail_rows(int rows, int k, int cols, const typename L::T* a, int lda, const typename L::T* b,
               int ldb, typename L::T* c, int ldc, bool accumulate) {
  switch (rows) {
#define CRPN_TAIL(R)                                                        \
  case R:                                                                   \
    if constexpr (Masked) {                                                 \
      block_rx1_masked<L, R>(k, cols, a, lda, b, ldb, c, ldc, accumulate); \
    } else {                                                                \
      block_rx2<L, R>(k, a, lda, b, ldb, c, ldc, accumulate);              \
    }                                                                       \
    break;
    CRPN_TAIL(1)
    CRPN_TAIL(2)
    CRPN_TAIL(3)
    CRPN_TAIL(4)
    CRPN_TAIL(5)
#undef CRPN_TAIL
    default:
      break;
  }
}

template <typename L>
void gemm_nn_avx2(int m, int n, int k, const typename L::T* a, int lda, const typename L::T* b,
                  int ldb, typename L::T* c, int ldc, bool accumulate) {
  constexpr int W = L::kLanes;
  constexpr int R = 6;
  const int n2 = n - n % (2 * W);
  const int m6 = m - m % R;
  thread_local std::vector<typename L::T> panel;
  // Column strips outermost: a packed k x 2W strip of b is reused by every row block.
  for (int j = 0; j < n2; j += 2 * W) {
    pack_strip(k, 2 * W, 2 * W, b + j, ldb, panel);
    int i = 0;
    for (; i < m6; i += R) {
      block_rx2<L, R>(k, a + static_cast<std::ptrdiff_t>(i) * lda, lda, panel.data(), 2 * W,
                      c + static_cast<std::ptrdiff_t>(i) * ldc + j, ldc, accumulate);
    }
    tail_rows<L, false>(m - i, k, 2 * W, a + static_cast<std::ptrdiff_t>(i) * lda, lda, panel.data(), 2 * W,
                        c + static_cast<std::ptrdiff_t>(i) * ldc + j, ldc, accumulate);
  }
  for (int j = n2; j < n; j += W) {
    const int cols = std::min(W, n - j);
    pack_strip(k, cols, W, b + j, ldb, panel);
    int i = 0;
    for (; i < m6; i += R) {
      block_rx1_masked<L, R>(k, cols, a + static_cast<std::ptrdiff_t>(i) * lda, lda, panel.data(), W,
                             c + static_cast<std::ptrdiff_t>(i) * ldc + j, ldc, accumulate);
    }
    tail_rows<L, true>(m - i, k, cols, a + static_cast<std::ptrdiff_t>(i) * lda, lda, panel.data(), W,
                       c + static_cast<std::ptrdiff_t>(i) * ldc + j, ldc, accumulate);
  }
}

template <typename L>
void axpy_avx2(std::size_t n, typename L::T alpha, const typename L::T* x, typename L::T* y) {
  constexpr std::size_t W = L::kLanes;
  const auto av = L::set1(alpha);
  std::size_t i = 0;
  for (; i + W <= n; i += W) L::store(y + i, L::fma(av, L::load(x + i), L::load(y + i)));
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

template <typename L>
typename L::T dot_avx2(std::size_t n, const typename L::T* x, const typename L::T* y) {
  constexpr std::size_t W = L::kLanes;
  auto acc = L::zero();
  std::size_t i = 0;
  for (; i + W <= n; i += W) acc = L::fma(L::load(x + i), L::load(y + i), acc);
  typename L::T s = L::hsum(acc);
  for (; i < n; ++i) s = std::fma(x[i], y[i], s);
  return s;
}

}  // namespace

const KernelTable<float>& avx2_f32() {
  static const KernelTable<float> table{&gemm_nn_avx2<F32>, &axpy_avx2<F32>, &dot_avx2<F32>};
  return table;
}

const KernelTable<double>& avx2_f64() {
  static const KernelTable<double> table{&gemm_nn_avx2<F64>, &axpy_avx2<F64>, &dot_avx2<F64>};
  return table;
}

}  // namespace crpn::simd::detail
