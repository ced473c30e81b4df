#include "crpn/simd/kernels.hpp"

namespace crpn::simd::detail {
namespace {

template <typename T>
void gemm_nn_scalar(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc,
                    bool accumulate) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    if (!accumulate) {
      for (int j = 0; j < n; ++j) crow[j] = T(0);
    }
    const T* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void axpy_scalar(std::size_t n, T alpha, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T dot_scalar(std::size_t n, const T* x, const T* y) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

}  // namespace

const KernelTable<float>& scalar_f32() {
  static const KernelTable<float> table{&gemm_nn_scalar<float>, &axpy_scalar<float>,
                                        &dot_scalar<float>};
  return table;
}

const KernelTable<double>& scalar_f64() {
  static const KernelTable<double> table{&gemm_nn_scalar<double>, &axpy_scalar<double>,
                                         &dot_scalar<double>};
  return table;
}

}  // namespace crpn::simd::detail
