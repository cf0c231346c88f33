#ifndef DFN_OPS_HPP_
#define DFN_OPS_HPP_

#include <cblas.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <mutex>
#include <string>
#include <vector>

#include "dfn/errors.hpp"
#include "dfn/tensor.hpp"

extern "C" void openblas_set_num_threads(int);

// Differentiable ops over [N, C, H, W] tensors. Every op allocates its output
// (no in-place mutation of graph tensors) and registers a closure that
// accumulates gradients into the inputs that require them.

namespace dfn {

namespace detail {

inline void init_blas_once() {
  static std::once_flag flag;
  // One BLAS thread keeps results bitwise reproducible regardless of load.
  std::call_once(flag, [] { openblas_set_num_threads(1); });
}

// Row-major C = alpha * op(A) * op(B) + beta * C.
inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
  init_blas_once();
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  init_blas_once();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

template <typename T, int Which>
std::vector<T>& scratch(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

// Unrolls conv patches of one [C, H, W] plane into [C*kh*kw, OH*OW] with zero
// padding.
template <typename T>
void im2col(const T* im, int C, int H, int W, int kh, int kw, int stride,
            int pad, int OH, int OW, T* cols) {
  const std::int64_t plane = std::int64_t(H) * W;
  const std::int64_t ocols = std::int64_t(OH) * OW;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = cols + ((std::int64_t(c) * kh + ki) * kw + kj) * ocols;
        const T* src = im + c * plane;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + ki;
          T* dst = row + std::int64_t(oh) * OW;
          if (ih < 0 || ih >= H) {
            std::memset(dst, 0, std::size_t(OW) * sizeof(T));
            continue;
          }
          const T* srow = src + std::int64_t(ih) * W;
          int ow = 0;
          const int iw0 = -pad + kj;
          // leading out-of-bounds columns
          for (; ow < OW && iw0 + ow * stride < 0; ++ow) dst[ow] = T(0);
          if (stride == 1) {
            const int last = std::min(OW, W - iw0);
            for (; ow < last; ++ow) dst[ow] = srow[iw0 + ow];
          } else {
            for (; ow < OW && iw0 + ow * stride < W; ++ow)
              dst[ow] = srow[iw0 + ow * stride];
          }
          for (; ow < OW; ++ow) dst[ow] = T(0);
        }
      }
    }
  }
}

// Transpose of im2col: accumulates column gradients back into the image.
template <typename T>
void col2im_add(const T* cols, int C, int H, int W, int kh, int kw, int stride,
                int pad, int OH, int OW, T* im) {
  const std::int64_t plane = std::int64_t(H) * W;
  const std::int64_t ocols = std::int64_t(OH) * OW;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((std::int64_t(c) * kh + ki) * kw + kj) * ocols;
        T* dst = im + c * plane;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          T* drow = dst + std::int64_t(ih) * W;
          const T* srow = row + std::int64_t(oh) * OW;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) drow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

template <typename T>
void require_rank4(const Tensor<T>& t, const char* name) {
  if (!t.defined() || t.rank() != 4)
    throw DimensionError(std::string(name) + " must be rank-4 [N,C,H,W]" +
                         (t.defined() ? ", got " + shape_str(t.shape()) : ""));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution (direct cross-correlation, zero padding)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int stride = 1, int padding = 0) {
  detail::require_rank4(input, "conv2d input");
  detail::require_rank4(kernel, "conv2d kernel");
  const int N = input.dim(0), Cin = input.dim(1), H = input.dim(2),
            W = input.dim(3);
  const int Cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != Cin)
    throw DimensionError("conv2d: input channel axis (" + std::to_string(Cin) +
                         ") does not match kernel input-channel axis (" +
                         std::to_string(kernel.dim(1)) + ")");
  if (bias.rank() != 1 || bias.dim(0) != Cout)
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) +
                         " does not match output channel axis (" +
                         std::to_string(Cout) + ")");
  if (stride < 1) throw ConfigError("conv2d: stride must be positive");
  if (padding < 0) throw ConfigError("conv2d: padding must be non-negative");
  // floor-division output size, the standard convention
  const int numh = H + 2 * padding - kh;
  const int numw = W + 2 * padding - kw;
  if (numh < 0 || numw < 0)
    throw ConfigError("conv2d: output size ((" + std::to_string(H) + "+2*" +
                      std::to_string(padding) + "-" + std::to_string(kh) +
                      ")/" + std::to_string(stride) +
                      " + 1) is not a positive integer");
  const int OH = numh / stride + 1, OW = numw / stride + 1;

  const std::int64_t in_plane = std::int64_t(Cin) * H * W;
  const std::int64_t out_plane = std::int64_t(Cout) * OH * OW;
  const std::int64_t ohw = std::int64_t(OH) * OW;
  const int ckk = Cin * kh * kw;
  const bool unit = (kh == 1 && kw == 1 && stride == 1 && padding == 0);

  std::vector<T> out(std::size_t(N) * out_plane);
  {
    std::vector<T>& cols = detail::scratch<T, 0>(unit ? 0 : std::size_t(ckk) * ohw);
    for (int n = 0; n < N; ++n) {
      const T* x = input.ptr() + n * in_plane;
      if (!unit) {
        detail::im2col(x, Cin, H, W, kh, kw, stride, padding, OH, OW,
                       cols.data());
        x = cols.data();
      }
      detail::gemm(false, false, Cout, int(ohw), ckk, T(1), kernel.ptr(), ckk,
                   x, int(ohw), T(0), out.data() + n * out_plane, int(ohw));
    }
    const T* b = bias.ptr();
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Cout; ++co) {
        T* row = out.data() + n * out_plane + co * ohw;
        const T bv = b[co];
        for (std::int64_t i = 0; i < ohw; ++i) row[i] += bv;
      }
  }

  auto xn = input.node();
  auto wn = kernel.node();
  auto bn = bias.node();
  return make_op_output<T>(
      {N, Cout, OH, OW}, std::move(out), {input, kernel, bias},
      [=](TensorNode<T>& self) {
        const T* g = self.grad.data();
        if (bn->requires_grad) {
          T* gb = bn->ensure_grad().data();
          for (int n = 0; n < N; ++n)
            for (int co = 0; co < Cout; ++co) {
              const T* row = g + n * out_plane + co * ohw;
              T acc = T(0);
              for (std::int64_t i = 0; i < ohw; ++i) acc += row[i];
              gb[co] += acc;
            }
        }
        if (wn->requires_grad) {
          T* gw = wn->ensure_grad().data();
          std::vector<T>& cols =
              detail::scratch<T, 0>(unit ? 0 : std::size_t(ckk) * ohw);
          for (int n = 0; n < N; ++n) {
            const T* x = xn->value.data() + n * in_plane;
            if (!unit) {
              detail::im2col(x, Cin, H, W, kh, kw, stride, padding, OH, OW,
                             cols.data());
              x = cols.data();
            }
            detail::gemm(false, true, Cout, ckk, int(ohw), T(1),
                         g + n * out_plane, int(ohw), x, int(ohw), T(1), gw,
                         ckk);
          }
        }
        if (xn->requires_grad) {
          T* gx = xn->ensure_grad().data();
          if (unit) {
            for (int n = 0; n < N; ++n)
              detail::gemm(true, false, ckk, int(ohw), Cout, T(1),
                           wn->value.data(), ckk, g + n * out_plane, int(ohw),
                           T(1), gx + n * in_plane, int(ohw));
          } else {
            std::vector<T>& gcols = detail::scratch<T, 1>(std::size_t(ckk) * ohw);
            for (int n = 0; n < N; ++n) {
              detail::gemm(true, false, ckk, int(ohw), Cout, T(1),
                           wn->value.data(), ckk, g + n * out_plane, int(ohw),
                           T(0), gcols.data(), int(ohw));
              detail::col2im_add(gcols.data(), Cin, H, W, kh, kw, stride,
                                 padding, OH, OW, gx + n * in_plane);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Max-pool downsampling, window == stride == factor
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> maxpool_down(const Tensor<T>& input, int factor) {
  detail::require_rank4(input, "maxpool input");
  if (factor < 1) throw ConfigError("maxpool: factor must be positive");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2),
            W = input.dim(3);
  if (H % factor || W % factor)
    throw ConfigError("maxpool: spatial size " + std::to_string(H) + "x" +
                      std::to_string(W) + " not divisible by factor " +
                      std::to_string(factor));
  const int OH = H / factor, OW = W / factor;
  std::vector<T> out(std::size_t(N) * C * OH * OW);
  // flat index of the winning cell; first occurrence in row-major order wins
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  const T* x = input.ptr();
  std::int64_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::int64_t base = (std::int64_t(n) * C + c) * H * W;
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow, ++o) {
          std::int64_t best_idx =
              base + std::int64_t(oh) * factor * W + ow * factor;
          T best = x[best_idx];
          for (int i = 0; i < factor; ++i)
            for (int j = 0; j < factor; ++j) {
              const std::int64_t idx =
                  base + (std::int64_t(oh) * factor + i) * W + ow * factor + j;
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          out[std::size_t(o)] = best;
          (*argmax)[std::size_t(o)] = best_idx;
        }
    }
  auto xn = input.node();
  return make_op_output<T>({N, C, OH, OW}, std::move(out), {input},
                           [xn, argmax](TensorNode<T>& self) {
                             if (!xn->requires_grad) return;
                             T* gx = xn->ensure_grad().data();
                             const T* g = self.grad.data();
                             for (std::size_t i = 0; i < argmax->size(); ++i)
                               gx[(*argmax)[i]] += g[i];
                           });
}

// ---------------------------------------------------------------------------
// Bilinear upsampling (half-pixel centers, borders replicated)
// ---------------------------------------------------------------------------

namespace detail {

struct LerpTap {
  int lo, hi;
  double w_hi;  // weight of `hi`; `lo` gets 1 - w_hi
};

inline std::vector<LerpTap> bilinear_taps(int out_size, int in_size,
                                          double ratio) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out_size));
  for (int o = 0; o < out_size; ++o) {
    const double src = (o + 0.5) * ratio - 0.5;
    double f = std::floor(src);
    int lo = int(f), hi = lo + 1;
    double w = src - f;
    if (lo < 0) lo = hi = 0, w = 0.0;
    if (hi > in_size - 1) lo = hi = in_size - 1, w = 0.0;
    taps[std::size_t(o)] = {lo, hi, w};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, int factor) {
  detail::require_rank4(input, "upsample input");
  if (factor < 1) throw ConfigError("upsample: factor must be positive");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2),
            W = input.dim(3);
  const int OH = H * factor, OW = W * factor;
  const auto ytap = detail::bilinear_taps(OH, H, 1.0 / factor);
  const auto xtap = detail::bilinear_taps(OW, W, 1.0 / factor);

  std::vector<T> out(std::size_t(N) * C * OH * OW);
  const T* x = input.ptr();
  T* op = out.data();
  for (std::int64_t p = 0; p < std::int64_t(N) * C; ++p) {
    const T* plane = x + p * H * W;
    for (int oh = 0; oh < OH; ++oh) {
      const auto& ty = ytap[std::size_t(oh)];
      const T* r0 = plane + std::int64_t(ty.lo) * W;
      const T* r1 = plane + std::int64_t(ty.hi) * W;
      const T wy = T(ty.w_hi);
      for (int ow = 0; ow < OW; ++ow) {
        const auto& tx = xtap[std::size_t(ow)];
        const T wx = T(tx.w_hi);
        const T top = r0[tx.lo] + wx * (r0[tx.hi] - r0[tx.lo]);
        const T bot = r1[tx.lo] + wx * (r1[tx.hi] - r1[tx.lo]);
        *op++ = top + wy * (bot - top);
      }
    }
  }

  auto xn = input.node();
  return make_op_output<T>(
      {N, C, OH, OW}, std::move(out), {input},
      [xn, ytap, xtap, N, C, H, W, OH, OW](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        T* gx = xn->ensure_grad().data();
        const T* g = self.grad.data();
        for (std::int64_t p = 0; p < std::int64_t(N) * C; ++p) {
          T* plane = gx + p * H * W;
          const T* gp = g + p * OH * OW;
          for (int oh = 0; oh < OH; ++oh) {
            const auto& ty = ytap[std::size_t(oh)];
            for (int ow = 0; ow < OW; ++ow) {
              const auto& tx = xtap[std::size_t(ow)];
              const T gv = gp[std::int64_t(oh) * OW + ow];
              const T wy1 = T(ty.w_hi), wy0 = T(1) - wy1;
              const T wx1 = T(tx.w_hi), wx0 = T(1) - wx1;
              plane[std::int64_t(ty.lo) * W + tx.lo] += gv * wy0 * wx0;
              plane[std::int64_t(ty.lo) * W + tx.hi] += gv * wy0 * wx1;
              plane[std::int64_t(ty.hi) * W + tx.lo] += gv * wy1 * wx0;
              plane[std::int64_t(ty.hi) * W + tx.hi] += gv * wy1 * wx1;
            }
          }
        }
      });
}

// Replicates a [N,C,1,1] tensor over an HxW grid.
template <typename T>
Tensor<T> broadcast_hw(const Tensor<T>& input, int H, int W) {
  detail::require_rank4(input, "broadcast input");
  if (input.dim(2) != 1 || input.dim(3) != 1)
    throw DimensionError("broadcast_hw: spatial axes must be 1x1, got " +
                         shape_str(input.shape()));
  const int N = input.dim(0), C = input.dim(1);
  const std::int64_t hw = std::int64_t(H) * W;
  std::vector<T> out(std::size_t(N) * C * hw);
  for (std::int64_t p = 0; p < std::int64_t(N) * C; ++p)
    for (std::int64_t i = 0; i < hw; ++i) out[std::size_t(p * hw + i)] = input.ptr()[p];
  auto xn = input.node();
  return make_op_output<T>({N, C, H, W}, std::move(out), {input},
                           [xn, N, C, hw](TensorNode<T>& self) {
                             if (!xn->requires_grad) return;
                             T* gx = xn->ensure_grad().data();
                             const T* g = self.grad.data();
                             for (std::int64_t p = 0; p < std::int64_t(N) * C;
                                  ++p) {
                               T acc = T(0);
                               for (std::int64_t i = 0; i < hw; ++i)
                                 acc += g[p * hw + i];
                               gx[p] += acc;
                             }
                           });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  detail::require_rank4(input, "global_avg_pool input");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2),
            W = input.dim(3);
  const std::int64_t hw = std::int64_t(H) * W;
  std::vector<T> out(std::size_t(N) * C);
  const T* x = input.ptr();
  for (std::int64_t p = 0; p < std::int64_t(N) * C; ++p) {
    T acc = T(0);
    for (std::int64_t i = 0; i < hw; ++i) acc += x[p * hw + i];
    out[std::size_t(p)] = acc / T(hw);
  }
  auto xn = input.node();
  return make_op_output<T>({N, C, 1, 1}, std::move(out), {input},
                           [xn, N, C, hw](TensorNode<T>& self) {
                             if (!xn->requires_grad) return;
                             T* gx = xn->ensure_grad().data();
                             const T* g = self.grad.data();
                             for (std::int64_t p = 0; p < std::int64_t(N) * C;
                                  ++p) {
                               const T gv = g[p] / T(hw);
                               for (std::int64_t i = 0; i < hw; ++i)
                                 gx[p * hw + i] += gv;
                             }
                           });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  std::vector<T> out(input.data());
  for (auto& v : out)
    if (v < T(0)) v = T(0);
  auto xn = input.node();
  return make_op_output<T>(input.shape(), std::move(out), {input},
                           [xn](TensorNode<T>& self) {
                             if (!xn->requires_grad) return;
                             T* gx = xn->ensure_grad().data();
                             const T* g = self.grad.data();
                             const T* x = xn->value.data();
                             for (std::size_t i = 0; i < self.value.size(); ++i)
                               if (x[i] > T(0)) gx[i] += g[i];
                           });
}

template <typename T>
T stable_sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  std::vector<T> out(input.data().size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = stable_sigmoid(input.data()[i]);
  auto xn = input.node();
  return make_op_output<T>(input.shape(), std::move(out), {input},
                           [xn](TensorNode<T>& self) {
                             if (!xn->requires_grad) return;
                             T* gx = xn->ensure_grad().data();
                             const T* g = self.grad.data();
                             const T* s = self.value.data();
                             for (std::size_t i = 0; i < self.value.size(); ++i)
                               gx[i] += g[i] * s[i] * (T(1) - s[i]);
                           });
}

// ---------------------------------------------------------------------------
// Channel softmax (per pixel, max-subtracted)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& input) {
  detail::require_rank4(input, "softmax input");
  const int N = input.dim(0), K = input.dim(1), H = input.dim(2),
            W = input.dim(3);
  const std::int64_t hw = std::int64_t(H) * W;
  const std::int64_t cstride = hw;
  std::vector<T> out(input.data().size());
  const T* x = input.ptr();
  for (int n = 0; n < N; ++n) {
    const std::int64_t base = std::int64_t(n) * K * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
      T mx = x[base + p];
      for (int k = 1; k < K; ++k)
        mx = std::max(mx, x[base + k * cstride + p]);
      T denom = T(0);
      for (int k = 0; k < K; ++k) {
        const T e = std::exp(x[base + k * cstride + p] - mx);
        out[std::size_t(base + k * cstride + p)] = e;
        denom += e;
      }
      for (int k = 0; k < K; ++k)
        out[std::size_t(base + k * cstride + p)] /= denom;
    }
  }
  auto xn = input.node();
  return make_op_output<T>(
      input.shape(), std::move(out), {input},
      [xn, N, K, hw, cstride](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        T* gx = xn->ensure_grad().data();
        const T* g = self.grad.data();
        const T* p = self.value.data();
        for (int n = 0; n < N; ++n) {
          const std::int64_t base = std::int64_t(n) * K * hw;
          for (std::int64_t px = 0; px < hw; ++px) {
            T dot = T(0);
            for (int k = 0; k < K; ++k) {
              const std::int64_t i = base + k * cstride + px;
              dot += g[i] * p[i];
            }
            for (int k = 0; k < K; ++k) {
              const std::int64_t i = base + k * cstride + px;
              gx[i] += p[i] * (g[i] - dot);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank4(a, "concat lhs");
  detail::require_rank4(b, "concat rhs");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw DimensionError("concat_channels: batch/spatial axes differ, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2),
            W = a.dim(3);
  const std::int64_t hw = std::int64_t(H) * W;
  std::vector<T> out(std::size_t(N) * (Ca + Cb) * hw);
  for (int n = 0; n < N; ++n) {
    std::memcpy(out.data() + std::int64_t(n) * (Ca + Cb) * hw,
                a.ptr() + std::int64_t(n) * Ca * hw,
                std::size_t(Ca * hw) * sizeof(T));
    std::memcpy(out.data() + std::int64_t(n) * (Ca + Cb) * hw + Ca * hw,
                b.ptr() + std::int64_t(n) * Cb * hw,
                std::size_t(Cb * hw) * sizeof(T));
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op_output<T>(
      {N, Ca + Cb, H, W}, std::move(out), {a, b},
      [an, bn, N, Ca, Cb, hw](TensorNode<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
          T* ga = an->ensure_grad().data();
          for (int n = 0; n < N; ++n) {
            const T* src = g + std::int64_t(n) * (Ca + Cb) * hw;
            T* dst = ga + std::int64_t(n) * Ca * hw;
            for (std::int64_t i = 0; i < Ca * hw; ++i) dst[i] += src[i];
          }
        }
        if (bn->requires_grad) {
          T* gb = bn->ensure_grad().data();
          for (int n = 0; n < N; ++n) {
            const T* src = g + std::int64_t(n) * (Ca + Cb) * hw + Ca * hw;
            T* dst = gb + std::int64_t(n) * Cb * hw;
            for (std::int64_t i = 0; i < Cb * hw; ++i) dst[i] += src[i];
          }
        }
      });
}

// out[n,c,h,w] = alpha[n,c] * x[n,c,h,w]
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& alpha) {
  detail::require_rank4(x, "channel_scale input");
  detail::require_rank4(alpha, "channel_scale alpha");
  if (alpha.dim(2) != 1 || alpha.dim(3) != 1)
    throw DimensionError("channel_scale: alpha must be [N,C,1,1], got " +
                         shape_str(alpha.shape()));
  if (alpha.dim(0) != x.dim(0) || alpha.dim(1) != x.dim(1))
    throw DimensionError("channel_scale: channel axis mismatch, x " +
                         shape_str(x.shape()) + " vs alpha " +
                         shape_str(alpha.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t hw = std::int64_t(x.dim(2)) * x.dim(3);
  std::vector<T> out(x.data().size());
  for (std::int64_t p = 0; p < std::int64_t(N) * C; ++p) {
    const T a = alpha.ptr()[p];
    const T* xp = x.ptr() + p * hw;
    T* op = out.data() + p * hw;
    for (std::int64_t i = 0; i < hw; ++i) op[i] = a * xp[i];
  }
  auto xn = x.node();
  auto an = alpha.node();
  return make_op_output<T>(
      x.shape(), std::move(out), {x, alpha},
      [xn, an, N, C, hw](TensorNode<T>& self) {
        const T* g = self.grad.data();
        if (xn->requires_grad) {
          T* gx = xn->ensure_grad().data();
          for (std::int64_t p = 0; p < std::int64_t(N) * C; ++p) {
            const T a = an->value[std::size_t(p)];
            for (std::int64_t i = 0; i < hw; ++i) gx[p * hw + i] += a * g[p * hw + i];
          }
        }
        if (an->requires_grad) {
          T* ga = an->ensure_grad().data();
          const T* xv = xn->value.data();
          for (std::int64_t p = 0; p < std::int64_t(N) * C; ++p) {
            T acc = T(0);
            for (std::int64_t i = 0; i < hw; ++i)
              acc += xv[p * hw + i] * g[p * hw + i];
            ga[p] += acc;
          }
        }
      });
}

// Elementwise sum; a [N,C,1,1] operand broadcasts over the other's H,W.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape();
  auto broadcastable = [](const Tensor<T>& small, const Tensor<T>& big) {
    return small.rank() == 4 && big.rank() == 4 && small.dim(2) == 1 &&
           small.dim(3) == 1 && small.dim(0) == big.dim(0) &&
           small.dim(1) == big.dim(1);
  };
  if (same) {
    std::vector<T> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = a.data()[i] + b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return make_op_output<T>(a.shape(), std::move(out), {a, b},
                             [an, bn](TensorNode<T>& self) {
                               const T* g = self.grad.data();
                               if (an->requires_grad) {
                                 T* ga = an->ensure_grad().data();
                                 for (std::size_t i = 0; i < self.value.size(); ++i)
                                   ga[i] += g[i];
                               }
                               if (bn->requires_grad) {
                                 T* gb = bn->ensure_grad().data();
                                 for (std::size_t i = 0; i < self.value.size(); ++i)
                                   gb[i] += g[i];
                               }
                             });
  }
  if (broadcastable(b, a) || broadcastable(a, b)) {
    const Tensor<T>& big = broadcastable(b, a) ? a : b;
    const Tensor<T>& small = broadcastable(b, a) ? b : a;
    const int N = big.dim(0), C = big.dim(1);
    const std::int64_t hw = std::int64_t(big.dim(2)) * big.dim(3);
    std::vector<T> out(big.data().size());
    for (std::int64_t p = 0; p < std::int64_t(N) * C; ++p) {
      const T s = small.ptr()[p];
      const T* bp = big.ptr() + p * hw;
      T* op = out.data() + p * hw;
      for (std::int64_t i = 0; i < hw; ++i) op[i] = bp[i] + s;
    }
    auto bign = big.node();
    auto smalln = small.node();
    return make_op_output<T>(
        big.shape(), std::move(out), {big, small},
        [bign, smalln, N, C, hw](TensorNode<T>& self) {
          const T* g = self.grad.data();
          if (bign->requires_grad) {
            T* gb = bign->ensure_grad().data();
            for (std::size_t i = 0; i < self.value.size(); ++i) gb[i] += g[i];
          }
          if (smalln->requires_grad) {
            T* gs = smalln->ensure_grad().data();
            for (std::int64_t p = 0; p < std::int64_t(N) * C; ++p) {
              T acc = T(0);
              for (std::int64_t i = 0; i < hw; ++i) acc += g[p * hw + i];
              gs[p] += acc;
            }
          }
        });
  }
  throw DimensionError("add: incompatible shapes " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
}

// Elementwise product of same-shape tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shapes differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  std::vector<T> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] * b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op_output<T>(a.shape(), std::move(out), {a, b},
                           [an, bn](TensorNode<T>& self) {
                             const T* g = self.grad.data();
                             if (an->requires_grad) {
                               T* ga = an->ensure_grad().data();
                               const T* bv = bn->value.data();
                               for (std::size_t i = 0; i < self.value.size(); ++i)
                                 ga[i] += bv[i] * g[i];
                             }
                             if (bn->requires_grad) {
                               T* gb = bn->ensure_grad().data();
                               const T* av = an->value.data();
                               for (std::size_t i = 0; i < self.value.size(); ++i)
                                 gb[i] += av[i] * g[i];
                             }
                           });
}

// out = c * x for a plain scalar constant c.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  std::vector<T> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.data()[i];
  auto xn = x.node();
  return make_op_output<T>(x.shape(), std::move(out), {x},
                           [xn, c](TensorNode<T>& self) {
                             if (!xn->requires_grad) return;
                             T* gx = xn->ensure_grad().data();
                             const T* g = self.grad.data();
                             for (std::size_t i = 0; i < self.value.size(); ++i)
                               gx[i] += c * g[i];
                           });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (const T& v : x.data()) acc += v;
  auto xn = x.node();
  return make_op_output<T>(Shape{}, std::vector<T>{acc}, {x},
                           [xn](TensorNode<T>& self) {
                             if (!xn->requires_grad) return;
                             T* gx = xn->ensure_grad().data();
                             const T g = self.grad[0];
                             for (std::size_t i = 0; i < xn->value.size(); ++i)
                               gx[i] += g;
                           });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Running statistics live outside the graph; train mode updates them in place
// by exponential moving average (unbiased variance, matching the common
// framework convention).
template <typename T>
struct BNStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BNStats(int channels = 0)
      : running_mean(std::size_t(channels), T(0)),
        running_var(std::size_t(channels), T(1)) {}
};

enum class BNMode { kTrain, kEval };

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BNStats<T>& stats, BNMode mode,
                     double momentum_bn, double eps) {
  detail::require_rank4(x, "batch_norm input");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 ||
      beta.dim(0) != C)
    throw DimensionError("batch_norm: gamma/beta must be [C] with C=" +
                         std::to_string(C));
  if (int(stats.running_mean.size()) != C)
    throw DimensionError("batch_norm: running stats sized for " +
                         std::to_string(stats.running_mean.size()) +
                         " channels, input has " + std::to_string(C));
  if (!(eps > 0)) throw ConfigError("batch_norm: eps must be positive");
  const std::int64_t hw = std::int64_t(H) * W;
  const std::int64_t m = std::int64_t(N) * hw;
  const std::int64_t cstride = std::int64_t(C) * hw;

  std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  if (mode == BNMode::kTrain) {
    if (m < 2)
      throw StatisticsError(
          "batch_norm: train mode needs at least 2 values per channel, got " +
          std::to_string(m));
    for (int c = 0; c < C; ++c) {
      T acc = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = x.ptr() + n * cstride + c * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
      }
      const T mu = acc / T(m);
      T var = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = x.ptr() + n * cstride + c * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const T d = p[i] - mu;
          var += d * d;
        }
      }
      var /= T(m);
      mean[std::size_t(c)] = mu;
      invstd[std::size_t(c)] = T(1) / std::sqrt(var + T(eps));
      const T mom = T(momentum_bn);
      stats.running_mean[std::size_t(c)] =
          (T(1) - mom) * stats.running_mean[std::size_t(c)] + mom * mu;
      stats.running_var[std::size_t(c)] =
          (T(1) - mom) * stats.running_var[std::size_t(c)] +
          mom * var * T(m) / T(m - 1);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[std::size_t(c)] = stats.running_mean[std::size_t(c)];
      invstd[std::size_t(c)] =
          T(1) / std::sqrt(stats.running_var[std::size_t(c)] + T(eps));
    }
  }

  std::vector<T> out(x.data().size());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x.ptr() + n * cstride + c * hw;
      T* op = out.data() + n * cstride + c * hw;
      const T mu = mean[std::size_t(c)], is = invstd[std::size_t(c)];
      const T gm = gamma.ptr()[c], bt = beta.ptr()[c];
      for (std::int64_t i = 0; i < hw; ++i)
        op[i] = gm * (p[i] - mu) * is + bt;
    }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  const bool train = (mode == BNMode::kTrain);
  return make_op_output<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, mean, invstd, N, C, hw, cstride, m,
       train](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* xv = xn->value.data();
        for (int c = 0; c < C; ++c) {
          const T mu = mean[std::size_t(c)], is = invstd[std::size_t(c)];
          T sum_g = T(0), sum_gx = T(0);  // sum of g and of g * xhat
          for (int n = 0; n < N; ++n) {
            const T* gp = g + n * cstride + c * hw;
            const T* xp = xv + n * cstride + c * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              sum_g += gp[i];
              sum_gx += gp[i] * (xp[i] - mu) * is;
            }
          }
          if (gn->requires_grad) gn->ensure_grad()[std::size_t(c)] += sum_gx;
          if (bn->requires_grad) bn->ensure_grad()[std::size_t(c)] += sum_g;
          if (xn->requires_grad) {
            T* gx = xn->ensure_grad().data();
            const T gm = gn->value[std::size_t(c)];
            if (train) {
              const T a = gm * is;
              const T mg = sum_g / T(m), mgx = sum_gx / T(m);
              for (int n = 0; n < N; ++n) {
                const T* gp = g + n * cstride + c * hw;
                const T* xp = xv + n * cstride + c * hw;
                T* gxp = gx + n * cstride + c * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                  const T xhat = (xp[i] - mu) * is;
                  gxp[i] += a * (gp[i] - mg - xhat * mgx);
                }
              }
            } else {
              const T a = gm * is;
              for (int n = 0; n < N; ++n) {
                const T* gp = g + n * cstride + c * hw;
                T* gxp = gx + n * cstride + c * hw;
                for (std::int64_t i = 0; i < hw; ++i) gxp[i] += a * gp[i];
              }
            }
          }
        }
      });
}

}  // namespace dfn

#endif  // DFN_OPS_HPP_
