#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <cstring>
#include <vector>

#include "crpn/simd/kernels.hpp"

namespace crpn::simd {

namespace {

Level initial_level() {
  if (const char* env = std::getenv("CRPN_SIMD"); env != nullptr && std::strcmp(env, "scalar") == 0) {
    return Level::Scalar;
  }
  return detect_level();
}

std::atomic<Level>& level_slot() {
  static std::atomic<Level> slot{initial_level()};
  return slot;
}

template <typename T>
void transpose_into(int rows, int cols, const T* src, int ld, std::vector<T>& dst) {
  dst.resize(static_cast<std::size_t>(rows) * cols);
  // dst is cols x rows; tiled so both sides stay in L1
  constexpr int kTile = 32;
  for (int r0 = 0; r0 < rows; r0 += kTile) {
    const int r1 = std::min(rows, r0 + kTile);
    for (int c0 = 0; c0 < cols; c0 += kTile) {
      const int c1 = std::min(cols, c0 + kTile);
      for (int r = r0; r < r1; ++r) {
        const T* s = src + static_cast<std::ptrdiff_t>(r) * ld;
        for (int c = c0; c < c1; ++c) dst[static_cast<std::size_t>(c) * rows + r] = s[c];
      }
    }
  }
}

}  // namespace

const char* level_name(Level level) {
  switch (level) {
    case Level::Scalar:
      return "scalar";
    case Level::Avx2:
      return "avx2";
  }
  return "unknown";
}

Level detect_level() {
#if defined(CRPN_WITH_AVX2)
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return Level::Avx2;
#endif
  return Level::Scalar;
}

Level active_level() { return level_slot().load(std::memory_order_relaxed); }

void force_level(Level level) {
  if (level == Level::Avx2 && detect_level() != Level::Avx2) level = Level::Scalar;
  level_slot().store(level, std::memory_order_relaxed);
}

template <>
const KernelTable<float>& kernels<float>(Level level) {
#if defined(CRPN_WITH_AVX2)
  if (level == Level::Avx2) return detail::avx2_f32();
#endif
  (void)level;
  return detail::scalar_f32();
}

template <>
const KernelTable<double>& kernels<double>(Level level) {
#if defined(CRPN_WITH_AVX2)
  if (level == Level::Avx2) return detail::avx2_f64();
#endif
  (void)level;
  return detail::scalar_f64();
}

// Below this depth per-call overhead of the dot path outweighs the cost of
// packing b.
constexpr int kDotMinK = 100000;

template <typename T>
void gemm(Trans ta, Trans tb, int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c,
          int ldc, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    if (!accumulate) {
      for (int i = 0; i < m; ++i) std::memset(c + static_cast<std::ptrdiff_t>(i) * ldc, 0, sizeof(T) * n);
    }
    return;
  }
  if (ta == Trans::No && tb == Trans::Yes && k >= kDotMinK) {
    // Rows of a and b are both contiguous along k: one dot product per entry.
    const auto dot = kernels<T>().dot;
    for (int i = 0; i < m; ++i) {
      const T* ai = a + static_cast<std::ptrdiff_t>(i) * lda;
      T* ci = c + static_cast<std::ptrdiff_t>(i) * ldc;
      for (int j = 0; j < n; ++j) {
        const T v = dot(static_cast<std::size_t>(k), ai, b + static_cast<std::ptrdiff_t>(j) * ldb);
        ci[j] = accumulate ? ci[j] + v : v;
      }
    }
    return;
  }
  thread_local std::vector<T> a_packed;
  thread_local std::vector<T> b_packed;
  if (ta == Trans::Yes) {
    // a is stored k x m
    transpose_into(k, m, a, lda, a_packed);
    a = a_packed.data();
    lda = k;
  }
  if (tb == Trans::Yes) {
    // b is stored n x k
    transpose_into(n, k, b, ldb, b_packed);
    b = b_packed.data();
    ldb = n;
  }
  // Panels of kKBlock rows of B stay cache resident; per-element accumulation
  // order over k is unchanged by the split.
  constexpr int kKBlock = 256;
  const auto nn = kernels<T>().gemm_nn;
  for (int k0 = 0; k0 < k; k0 += kKBlock) {
    const int kc = std::min(kKBlock, k - k0);
    nn(m, n, kc, a + k0, lda, b + static_cast<std::ptrdiff_t>(k0) * ldb, ldb, c, ldc,
       accumulate || k0 > 0);
  }
}

template void gemm<float>(Trans, Trans, int, int, int, const float*, int, const float*, int, float*,
                          int, bool);
template void gemm<double>(Trans, Trans, int, int, int, const double*, int, const double*, int,
                           double*, int, bool);

}  // namespace crpn::simd
