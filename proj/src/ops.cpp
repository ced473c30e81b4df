#include "crpn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "crpn/simd/kernels.hpp"

namespace crpn::ops {

namespace {

using simd::Trans;

std::string dims_str(const Shape& s) { return s.str(); }

void require_rank(const Shape& s, int rank, const char* what) {
  if (s.rank() != rank) {
    throw ShapeError(std::string(what) + " must be rank " + std::to_string(rank) + ", got " +
                     dims_str(s));
  }
}

struct ConvGeometry {
  int channels, height, width;
  int kh, kw, stride, pad;
  int out_h, out_w;

  int patch() const { return channels * kh * kw; }
  int positions() const { return out_h * out_w; }
};

ConvGeometry make_geometry(const Shape& in, int kh, int kw, int stride, int pad) {
  if (stride < 1) throw ShapeError("stride must be positive, got " + std::to_string(stride));
  if (pad < 0) throw ShapeError("pad must be non-negative, got " + std::to_string(pad));
  const int h = in[1], w = in[2];
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw ShapeError("kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than padded input " + std::to_string(h + 2 * pad) + "x" +
                     std::to_string(w + 2 * pad));
  }
  return {in[0], h, w, kh, kw, stride, pad, (h + 2 * pad - kh) / stride + 1,
          (w + 2 * pad - kw) / stride + 1};
}

// col is (C*kh*kw) x (out_h*out_w); every entry is written, padding as zero
template <typename T>
void im2col(const T* in, const ConvGeometry& g, std::vector<T>& col) {
  const std::size_t p = static_cast<std::size_t>(g.positions());
  col.resize(static_cast<std::size_t>(g.patch()) * p);
  for (int c = 0; c < g.channels; ++c) {
    const T* plane = in + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = col.data() + (static_cast<std::size_t>(c * g.kh + ky) * g.kw + kx) * p;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.width;
          if (g.stride == 1) {
            const int ox_lo = std::clamp(g.pad - kx, 0, g.out_w);
            const int ox_hi = std::clamp(g.width + g.pad - kx, ox_lo, g.out_w);
            std::fill(dst, dst + ox_lo, T(0));
            for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox] = src[ox - g.pad + kx];
            std::fill(dst + ox_hi, dst + g.out_w, T(0));
          } else {
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              dst[ox] = ix >= 0 && ix < g.width ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Transposed im2col: (out_h*out_w) x (C*kh*kw), so weight gradients need no
// transpose of the large operand.
template <typename T>
void im2row(const T* in, const ConvGeometry& g, std::vector<T>& rows) {
  const std::size_t patch = static_cast<std::size_t>(g.patch());
  rows.resize(patch * static_cast<std::size_t>(g.positions()));
  T* dst = rows.data();
  for (int oy = 0; oy < g.out_h; ++oy) {
    for (int ox = 0; ox < g.out_w; ++ox) {
      for (int c = 0; c < g.channels; ++c) {
        const T* plane = in + static_cast<std::size_t>(c) * g.height * g.width;
        for (int ky = 0; ky < g.kh; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          const bool row_in = iy >= 0 && iy < g.height;
          const T* src = plane + static_cast<std::ptrdiff_t>(iy) * g.width;
          for (int kx = 0; kx < g.kw; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            *dst++ = row_in && ix >= 0 && ix < g.width ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-adds col back into an image of geometry g (the adjoint of im2col).
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* out) {
  const std::size_t p = static_cast<std::size_t>(g.positions());
  for (int c = 0; c < g.channels; ++c) {
    T* plane = out + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c * g.kh + ky) * g.kw + kx) * p;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.width;
          const T* src = row + static_cast<std::size_t>(oy) * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T>& scratch_col() {
  thread_local std::vector<T> buf;
  return buf;
}

template <typename T>
Tensor<T> bias_grad(const Tensor<T>& grad_out) {
  const int channels = grad_out.dim(0);
  const std::size_t plane = grad_out.size() / static_cast<std::size_t>(channels);
  Tensor<T> gb(Shape{channels});
  for (int c = 0; c < channels; ++c) {
    T acc = 0;
    const T* g = grad_out.data() + static_cast<std::size_t>(c) * plane;
    for (std::size_t i = 0; i < plane; ++i) acc += g[i];
    gb[static_cast<std::size_t>(c)] = acc;
  }
  return gb;
}

template <typename T>
void add_bias(Tensor<T>& out, const Tensor<T>& bias) {
  if (bias.empty()) return;
  const int channels = out.dim(0);
  if (bias.rank() != 1 || bias.dim(0) != channels) {
    throw ShapeError("bias " + bias.shape().str() + " does not match " + std::to_string(channels) +
                     " output channels");
  }
  const std::size_t plane = out.size() / static_cast<std::size_t>(channels);
  for (int c = 0; c < channels; ++c) {
    T* o = out.data() + static_cast<std::size_t>(c) * plane;
    const T b = bias[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < plane; ++i) o[i] += b;
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, int stride,
                 int pad) {
  require_rank(input.shape(), 3, "conv2d input");
  require_rank(weights.shape(), 4, "conv2d weights");
  if (weights.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(input.dim(0)) +
                     " channels, weights expect " + std::to_string(weights.dim(1)));
  }
  const ConvGeometry g = make_geometry(input.shape(), weights.dim(2), weights.dim(3), stride, pad);
  const int cout = weights.dim(0);
  Tensor<T> out(Shape{cout, g.out_h, g.out_w});
  auto& col = scratch_col<T>();
  im2col(input.data(), g, col);
  simd::gemm<T>(Trans::No, Trans::No, cout, g.positions(), g.patch(), weights.data(), g.patch(),
                col.data(), g.positions(), out.data(), g.positions(), false);
  add_bias(out, bias);
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weights, bool has_bias,
                             const Tensor<T>& grad_out, int stride, int pad, GradRequest request) {
  const ConvGeometry g = make_geometry(input.shape(), weights.dim(2), weights.dim(3), stride, pad);
  const int cout = weights.dim(0);
  if (grad_out.shape() != Shape{cout, g.out_h, g.out_w}) {
    throw ShapeError("conv2d grad_out " + grad_out.shape().str() + " does not match output " +
                     Shape{cout, g.out_h, g.out_w}.str());
  }
  ConvGrads<T> grads;
  auto& col = scratch_col<T>();
  if (request.weights) {
    im2row(input.data(), g, col);
    grads.weights = Tensor<T>(weights.shape());
    simd::gemm<T>(Trans::No, Trans::No, cout, g.patch(), g.positions(), grad_out.data(),
                  g.positions(), col.data(), g.patch(), grads.weights.data(), g.patch(), false);
  }
  if (has_bias) grads.bias = bias_grad(grad_out);
  if (request.input) {
    col.resize(static_cast<std::size_t>(g.patch()) * g.positions());
    simd::gemm<T>(Trans::Yes, Trans::No, g.patch(), g.positions(), cout, weights.data(), g.patch(),
                  grad_out.data(), g.positions(), col.data(), g.positions(), false);
    grads.input = Tensor<T>(input.shape());
    col2im(col.data(), g, grads.input.data());
  }
  return grads;
}

template <typename T>
Tensor<T> transposed_conv(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                          int stride) {
  require_rank(input.shape(), 3, "transposed_conv input");
  require_rank(weights.shape(), 4, "transposed_conv weights");
  if (weights.dim(0) != input.dim(0)) {
    throw ShapeError("transposed_conv channel mismatch: input has " + std::to_string(input.dim(0)) +
                     " channels, weights expect " + std::to_string(weights.dim(0)));
  }
  if (stride < 1) throw ShapeError("stride must be positive, got " + std::to_string(stride));
  const int cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int cout = weights.dim(1), kh = weights.dim(2), kw = weights.dim(3);
  const int out_h = (h - 1) * stride + kh, out_w = (w - 1) * stride + kw;
  // The output plays the role of a conv input whose conv output is (h, w).
  const ConvGeometry g{cout, out_h, out_w, kh, kw, stride, 0, h, w};
  auto& col = scratch_col<T>();
  col.resize(static_cast<std::size_t>(g.patch()) * g.positions());
  simd::gemm<T>(Trans::Yes, Trans::No, g.patch(), g.positions(), cin, weights.data(), g.patch(),
                input.data(), g.positions(), col.data(), g.positions(), false);
  Tensor<T> out(Shape{cout, out_h, out_w});
  col2im(col.data(), g, out.data());
  add_bias(out, bias);
  return out;
}

template <typename T>
ConvGrads<T> transposed_conv_backward(const Tensor<T>& input, const Tensor<T>& weights,
                                      bool has_bias, const Tensor<T>& grad_out, int stride,
                                      GradRequest request) {
  const int cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int cout = weights.dim(1), kh = weights.dim(2), kw = weights.dim(3);
  const int out_h = (h - 1) * stride + kh, out_w = (w - 1) * stride + kw;
  if (grad_out.shape() != Shape{cout, out_h, out_w}) {
    throw ShapeError("transposed_conv grad_out " + grad_out.shape().str() +
                     " does not match output " + Shape{cout, out_h, out_w}.str());
  }
  const ConvGeometry g{cout, out_h, out_w, kh, kw, stride, 0, h, w};
  auto& col = scratch_col<T>();
  ConvGrads<T> grads;
  if (request.input) {
    im2col(grad_out.data(), g, col);
    grads.input = Tensor<T>(input.shape());
    simd::gemm<T>(Trans::No, Trans::No, cin, g.positions(), g.patch(), weights.data(), g.patch(),
                  col.data(), g.positions(), grads.input.data(), g.positions(), false);
  }
  if (request.weights) {
    im2row(grad_out.data(), g, col);
    grads.weights = Tensor<T>(weights.shape());
    simd::gemm<T>(Trans::No, Trans::No, cin, g.patch(), g.positions(), input.data(),
                  g.positions(), col.data(), g.patch(), grads.weights.data(), g.patch(), false);
  }
  if (has_bias) grads.bias = bias_grad(grad_out);
  return grads;
}

namespace {

struct Interp {
  int i0, i1;
  double frac;
};

std::vector<Interp> interp_table(int in, int out) {
  std::vector<Interp> table(static_cast<std::size_t>(out));
  const double scale = out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
  for (int o = 0; o < out; ++o) {
    const double src = o * scale;
    int i0 = static_cast<int>(std::floor(src));
    i0 = std::clamp(i0, 0, in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    table[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
  }
  return table;
}

}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, int out_h, int out_w) {
  require_rank(input.shape(), 3, "resize_bilinear input");
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("resize_bilinear target " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " must be at least 1x1");
  }
  const int channels = input.dim(0), h = input.dim(1), w = input.dim(2);
  const auto ty = interp_table(h, out_h);
  const auto tx = interp_table(w, out_w);
  Tensor<T> out(Shape{channels, out_h, out_w});
  for (int c = 0; c < channels; ++c) {
    for (int oy = 0; oy < out_h; ++oy) {
      const Interp& iy = ty[static_cast<std::size_t>(oy)];
      const T fy = static_cast<T>(iy.frac);
      for (int ox = 0; ox < out_w; ++ox) {
        const Interp& ix = tx[static_cast<std::size_t>(ox)];
        const T fx = static_cast<T>(ix.frac);
        const T a = input(c, iy.i0, ix.i0), b = input(c, iy.i0, ix.i1);
        const T d = input(c, iy.i1, ix.i0), e = input(c, iy.i1, ix.i1);
        const T top = a + fx * (b - a);
        const T bottom = d + fx * (e - d);
        out(c, oy, ox) = top + fy * (bottom - top);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& grad_out, int in_h, int in_w) {
  const int channels = grad_out.dim(0), out_h = grad_out.dim(1), out_w = grad_out.dim(2);
  const auto ty = interp_table(in_h, out_h);
  const auto tx = interp_table(in_w, out_w);
  Tensor<T> grad_in(Shape{channels, in_h, in_w});
  for (int c = 0; c < channels; ++c) {
    for (int oy = 0; oy < out_h; ++oy) {
      const Interp& iy = ty[static_cast<std::size_t>(oy)];
      const T fy = static_cast<T>(iy.frac);
      for (int ox = 0; ox < out_w; ++ox) {
        const Interp& ix = tx[static_cast<std::size_t>(ox)];
        const T fx = static_cast<T>(ix.frac);
        const T g = grad_out(c, oy, ox);
        grad_in(c, iy.i0, ix.i0) += g * (1 - fy) * (1 - fx);
        grad_in(c, iy.i0, ix.i1) += g * (1 - fy) * fx;
        grad_in(c, iy.i1, ix.i0) += g * fy * (1 - fx);
        grad_in(c, iy.i1, ix.i1) += g * fy * fx;
      }
    }
  }
  return grad_in;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  if (input.shape() != grad_out.shape()) {
    throw ShapeError("relu grad " + grad_out.shape().str() + " vs input " + input.shape().str());
  }
  Tensor<T> g(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  add_inplace(out, b);
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
  }
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename T>
void scale_inplace(Tensor<T>& a, T factor) {
  for (auto& v : a.values()) v *= factor;
}

namespace {

template <typename T>
Tensor<T> as_kernel_bank(const Tensor<T>& kernel) {
  if (kernel.rank() == 3) return kernel.reshaped(Shape{1, kernel.dim(0), kernel.dim(1), kernel.dim(2)});
  require_rank(kernel.shape(), 4, "cross_correlate kernel");
  return kernel;
}

template <typename T>
void check_corr(const Tensor<T>& bank, const Tensor<T>& search) {
  require_rank(search.shape(), 3, "cross_correlate search");
  if (bank.dim(1) != search.dim(0)) {
    throw ShapeError("cross_correlate channel mismatch: kernel has " + std::to_string(bank.dim(1)) +
                     " channels, search has " + std::to_string(search.dim(0)));
  }
  if (bank.dim(2) > search.dim(1) || bank.dim(3) > search.dim(2)) {
    throw ShapeError("cross_correlate kernel " + std::to_string(bank.dim(2)) + "x" +
                     std::to_string(bank.dim(3)) + " larger than search " +
                     std::to_string(search.dim(1)) + "x" + std::to_string(search.dim(2)));
  }
}

}  // namespace

template <typename T>
Tensor<T> cross_correlate(const Tensor<T>& kernel, const Tensor<T>& search, int stride) {
  const Tensor<T> bank = as_kernel_bank(kernel);
  check_corr(bank, search);
  return conv2d(search, bank, Tensor<T>{}, stride, 0);
}

template <typename T>
CorrGrads<T> cross_correlate_backward(const Tensor<T>& kernel, const Tensor<T>& search,
                                      const Tensor<T>& grad_out, int stride) {
  const Tensor<T> bank = as_kernel_bank(kernel);
  check_corr(bank, search);
  ConvGrads<T> g = conv2d_backward(search, bank, false, grad_out, stride, 0);
  return {g.weights.reshaped(kernel.shape()), std::move(g.input)};
}

template <typename T>
Tensor<T> softmax_pair(const Tensor<T>& logits) {
  require_rank(logits.shape(), 3, "softmax_pair logits");
  if (logits.dim(0) % 2 != 0) {
    throw ShapeError("softmax_pair needs an even channel count, got " + std::to_string(logits.dim(0)));
  }
  Tensor<T> probs(logits.shape());
  const std::size_t plane = static_cast<std::size_t>(logits.dim(1)) * logits.dim(2);
  for (int pair = 0; pair < logits.dim(0) / 2; ++pair) {
    const T* neg = logits.data() + static_cast<std::size_t>(2 * pair) * plane;
    const T* pos = neg + plane;
    T* pn = probs.data() + static_cast<std::size_t>(2 * pair) * plane;
    T* pp = pn + plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const T m = std::max(neg[i], pos[i]);
      const T en = std::exp(neg[i] - m), ep = std::exp(pos[i] - m);
      const T z = en + ep;
      pn[i] = en / z;
      pp[i] = ep / z;
    }
  }
  return probs;
}

template <typename T>
Tensor<T> softmax_pair_backward(const Tensor<T>& probs, const Tensor<T>& grad_probs) {
  if (probs.shape() != grad_probs.shape()) {
    throw ShapeError("softmax_pair grad " + grad_probs.shape().str() + " vs " + probs.shape().str());
  }
  Tensor<T> g(probs.shape());
  const std::size_t plane = static_cast<std::size_t>(probs.dim(1)) * probs.dim(2);
  for (int pair = 0; pair < probs.dim(0) / 2; ++pair) {
    const std::size_t n0 = static_cast<std::size_t>(2 * pair) * plane, p0 = n0 + plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const T pn = probs[n0 + i], pp = probs[p0 + i];
      const T gn = grad_probs[n0 + i], gp = grad_probs[p0 + i];
      const T inner = pn * gn + pp * gp;
      g[n0 + i] = pn * (gn - inner);
      g[p0 + i] = pp * (gp - inner);
    }
  }
  return g;
}

#define CRPN_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);       \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, bool,                  \
                                        const Tensor<T>&, int, int, GradRequest);                 \
  template Tensor<T> transposed_conv(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int);   \
  template ConvGrads<T> transposed_conv_backward(const Tensor<T>&, const Tensor<T>&, bool,         \
                                                 const Tensor<T>&, int, GradRequest);             \
  template Tensor<T> resize_bilinear(const Tensor<T>&, int, int);                                  \
  template Tensor<T> resize_bilinear_backward(const Tensor<T>&, int, int);                         \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                                         \
  template void scale_inplace(Tensor<T>&, T);                                                      \
  template Tensor<T> cross_correlate(const Tensor<T>&, const Tensor<T>&, int);                     \
  template CorrGrads<T> cross_correlate_backward(const Tensor<T>&, const Tensor<T>&,               \
                                                 const Tensor<T>&, int);                          \
  template Tensor<T> softmax_pair(const Tensor<T>&);                                               \
  template Tensor<T> softmax_pair_backward(const Tensor<T>&, const Tensor<T>&);

CRPN_INSTANTIATE_OPS(float)
CRPN_INSTANTIATE_OPS(double)

#undef CRPN_INSTANTIATE_OPS

}  // namespace crpn::ops
