#ifndef SFANET_CONV_HPP
#define SFANET_CONV_HPP

#include "sfanet/tensor.hpp"

namespace sfanet {

// Declarative 2-D convolution geometry. Weight layout (Cout, Cin/groups, kh, kw).
struct ConvSpec {
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int64_t kh = 1, kw = 1;
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t dilation = 1;
  int64_t groups = 1;
  bool has_bias = false;

  int64_t out_extent(int64_t in, int64_t k) const {
    return (in + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
  }

  void validate() const {
    SFA_CHECK(in_channels > 0 && out_channels > 0) << "bad channel counts";
    SFA_CHECK(kh > 0 && kw > 0 && stride > 0 && dilation > 0 && groups > 0) << "bad conv geometry";
    SFA_CHECK(padding >= 0) << "negative padding";
    SFA_CHECK(in_channels % groups == 0) << in_channels << " in-channels not divisible by " << groups << " groups";
    SFA_CHECK(out_channels % groups == 0) << out_channels << " out-channels not divisible by " << groups << " groups";
  }
};

namespace detail {

// Valid output index range [lo, hi) such that o*stride - pad + k*dil lands in [0, in).
inline void valid_out_range(int64_t in, int64_t out, int64_t stride, int64_t pad, int64_t kd,
                            int64_t& lo, int64_t& hi) {
  // o*stride + kd - pad >= 0  and  o*stride + kd - pad <= in-1
  int64_t num = pad - kd;
  lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  int64_t top = in - 1 + pad - kd;
  hi = top < 0 ? 0 : top / stride + 1;
  lo = std::min(std::max<int64_t>(lo, 0), out);
  hi = std::min(std::max<int64_t>(hi, lo), out);
}

template <typename T>
void conv2d_forward_grouped(const T* x, const T* w, const T* b, T* out, int64_t N, int64_t C,
                           int64_t H, int64_t W, const ConvSpec& sp, int64_t OH, int64_t OW) {
  const int64_t cpg_in = sp.in_channels / sp.groups;
  const int64_t cpg_out = sp.out_channels / sp.groups;
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t co = 0; co < sp.out_channels; ++co) {
      T* o = out + (n * sp.out_channels + co) * OH * OW;
      // each output plane accumulates in double and rounds to T exactly once,
      // so value is independent of the tap walk order up to ~1e-16
      std::vector<double> acc(static_cast<size_t>(OH * OW),
                              b ? static_cast<double>(b[co]) : 0.0);
      const int64_t g = co / cpg_out;
      for (int64_t cig = 0; cig < cpg_in; ++cig) {
        const T* xc = x + (n * C + g * cpg_in + cig) * H * W;
        const T* wc = w + ((co * cpg_in + cig) * sp.kh) * sp.kw;
        for (int64_t kh = 0; kh < sp.kh; ++kh) {
          int64_t oh_lo, oh_hi;
          valid_out_range(H, OH, sp.stride, sp.padding, kh * sp.dilation, oh_lo, oh_hi);
          for (int64_t kw = 0; kw < sp.kw; ++kw) {
            const double wv = static_cast<double>(wc[kh * sp.kw + kw]);
            int64_t ow_lo, ow_hi;
            valid_out_range(W, OW, sp.stride, sp.padding, kw * sp.dilation, ow_lo, ow_hi);
            const int64_t xoff = kw * sp.dilation - sp.padding;
            for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
              const T* xr = xc + (oh * sp.stride - sp.padding + kh * sp.dilation) * W + xoff;
              double* arow = acc.data() + oh * OW;
              if (sp.stride == 1) {
                for (int64_t ow = ow_lo; ow < ow_hi; ++ow)
                  arow[ow] += wv * static_cast<double>(xr[ow]);
              } else {
                for (int64_t ow = ow_lo; ow < ow_hi; ++ow)
                  arow[ow] += wv * static_cast<double>(xr[ow * sp.stride]);
              }
            }
          }
        }
      }
      for (int64_t i = 0; i < OH * OW; ++i) o[i] = static_cast<T>(acc[static_cast<size_t>(i)]);
    }
  }
}

template <typename T>
void conv2d_backward_input_grouped(const T* gout, const T* w, T* gx, int64_t N, int64_t C,
                                  int64_t H, int64_t W, const ConvSpec& sp, int64_t OH,
                                  int64_t OW) {
  const int64_t cpg_in = sp.in_channels / sp.groups;
  const int64_t cpg_out = sp.out_channels / sp.groups;
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t ci = 0; ci < C; ++ci) {
      T* gxc = gx + (n * C + ci) * H * W;
      const int64_t g = ci / cpg_in;
      const int64_t cig = ci % cpg_in;
      for (int64_t cog = 0; cog < cpg_out; ++cog) {
        const int64_t co = g * cpg_out + cog;
        const T* go = gout + (n * sp.out_channels + co) * OH * OW;
        const T* wc = w + ((co * cpg_in + cig) * sp.kh) * sp.kw;
        for (int64_t kh = 0; kh < sp.kh; ++kh) {
          int64_t oh_lo, oh_hi;
          valid_out_range(H, OH, sp.stride, sp.padding, kh * sp.dilation, oh_lo, oh_hi);
          for (int64_t kw = 0; kw < sp.kw; ++kw) {
            const T wv = wc[kh * sp.kw + kw];
            if (wv == T(0)) continue;
            int64_t ow_lo, ow_hi;
            valid_out_range(W, OW, sp.stride, sp.padding, kw * sp.dilation, ow_lo, ow_hi);
            const int64_t xoff = kw * sp.dilation - sp.padding;
            for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
              T* gxr = gxc + (oh * sp.stride - sp.padding + kh * sp.dilation) * W + xoff;
              const T* gr = go + oh * OW;
              if (sp.stride == 1) {
                for (int64_t ow = ow_lo; ow < ow_hi; ++ow) gxr[ow] += wv * gr[ow];
              } else {
                for (int64_t ow = ow_lo; ow < ow_hi; ++ow) gxr[ow * sp.stride] += wv * gr[ow];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight_grouped(const T* gout, const T* x, T* gw, int64_t N, int64_t C,
                                   int64_t H, int64_t W, const ConvSpec& sp, int64_t OH,
                                   int64_t OW) {
  const int64_t cpg_in = sp.in_channels / sp.groups;
  const int64_t cpg_out = sp.out_channels / sp.groups;
#pragma omp parallel for schedule(static)
  for (int64_t co = 0; co < sp.out_channels; ++co) {
    const int64_t g = co / cpg_out;
    for (int64_t cig = 0; cig < cpg_in; ++cig) {
      for (int64_t kh = 0; kh < sp.kh; ++kh) {
        int64_t oh_lo, oh_hi;
        valid_out_range(H, OH, sp.stride, sp.padding, kh * sp.dilation, oh_lo, oh_hi);
        for (int64_t kw = 0; kw < sp.kw; ++kw) {
          int64_t ow_lo, ow_hi;
          valid_out_range(W, OW, sp.stride, sp.padding, kw * sp.dilation, ow_lo, ow_hi);
          const int64_t xoff = kw * sp.dilation - sp.padding;
          T acc = 0;
          for (int64_t n = 0; n < N; ++n) {
            const T* go = gout + (n * sp.out_channels + co) * OH * OW;
            const T* xc = x + (n * C + g * cpg_in + cig) * H * W;
            for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
              const T* xr = xc + (oh * sp.stride - sp.padding + kh * sp.dilation) * W + xoff;
              const T* gr = go + oh * OW;
              if (sp.stride == 1) {
                for (int64_t ow = ow_lo; ow < ow_hi; ++ow) acc += gr[ow] * xr[ow];
              } else {
                for (int64_t ow = ow_lo; ow < ow_hi; ++ow) acc += gr[ow] * xr[ow * sp.stride];
              }
            }
          }
          gw[((co * cpg_in + cig) * sp.kh + kh) * sp.kw + kw] += acc;
        }
      }
    }
  }
}

// Patch matrix: cols[k][p] = x[ci, oh*s - pad + kh*d, ow*s - pad + kw*d] with
// k = (ci, kh, kw) and p = (oh, ow); out-of-image taps are zero.
template <typename T>
void im2col(const T* x, T* cols, int64_t C, int64_t H, int64_t W, const ConvSpec& sp,
            int64_t OH, int64_t OW) {
  const int64_t P = OH * OW;
  int64_t k = 0;
  for (int64_t ci = 0; ci < C; ++ci) {
    const T* xp = x + ci * H * W;
    for (int64_t kh = 0; kh < sp.kh; ++kh) {
      for (int64_t kw = 0; kw < sp.kw; ++kw, ++k) {
        T* row = cols + k * P;
        int64_t oh_lo, oh_hi, ow_lo, ow_hi;
        valid_out_range(H, OH, sp.stride, sp.padding, kh * sp.dilation, oh_lo, oh_hi);
        valid_out_range(W, OW, sp.stride, sp.padding, kw * sp.dilation, ow_lo, ow_hi);
        if (oh_lo > 0) std::fill(row, row + oh_lo * OW, T(0));
        if (oh_hi < OH) std::fill(row + oh_hi * OW, row + P, T(0));
        for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
          T* r = row + oh * OW;
          const int64_t ih = oh * sp.stride - sp.padding + kh * sp.dilation;
          const T* xr = xp + ih * W + (kw * sp.dilation - sp.padding);
          if (ow_lo > 0) std::fill(r, r + ow_lo, T(0));
          if (ow_hi < OW) std::fill(r + ow_hi, r + OW, T(0));
          if (sp.stride == 1) {
            std::copy(xr + ow_lo, xr + ow_hi, r + ow_lo);
          } else {
            for (int64_t ow = ow_lo; ow < ow_hi; ++ow) r[ow] = xr[ow * sp.stride];
          }
        }
      }
    }
  }
}

// Scatter transpose of im2col: adds each patch row back into the image grid.
template <typename T>
void col2im_add(const T* cols, T* gx, int64_t C, int64_t H, int64_t W, const ConvSpec& sp,
                int64_t OH, int64_t OW) {
  const int64_t P = OH * OW;
  int64_t k = 0;
  for (int64_t ci = 0; ci < C; ++ci) {
    T* xp = gx + ci * H * W;
    for (int64_t kh = 0; kh < sp.kh; ++kh) {
      for (int64_t kw = 0; kw < sp.kw; ++kw, ++k) {
        const T* row = cols + k * P;
        int64_t oh_lo, oh_hi, ow_lo, ow_hi;
        valid_out_range(H, OH, sp.stride, sp.padding, kh * sp.dilation, oh_lo, oh_hi);
        valid_out_range(W, OW, sp.stride, sp.padding, kw * sp.dilation, ow_lo, ow_hi);
        for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
          const T* r = row + oh * OW;
          const int64_t ih = oh * sp.stride - sp.padding + kh * sp.dilation;
          T* xr = xp + ih * W + (kw * sp.dilation - sp.padding);
          if (sp.stride == 1) {
            for (int64_t ow = ow_lo; ow < ow_hi; ++ow) xr[ow] += r[ow];
          } else {
            for (int64_t ow = ow_lo; ow < ow_hi; ++ow) xr[ow * sp.stride] += r[ow];
          }
        }
      }
    }
  }
}

// out(CO x P) = a(CO x K) * b(K x P), plus optional per-row bias. Four output
// rows share each loaded b row, and every row accumulates in double with a
// single rounding at the store, so results do not depend on the tap order.
template <typename T>
void gemm_rows(const T* a, const T* b, const T* bias, T* out, int64_t CO, int64_t K, int64_t P,
               bool accumulate) {
  std::vector<double> acc(static_cast<size_t>(4 * P));
  for (int64_t r0 = 0; r0 < CO; r0 += 4) {
    const int64_t nr = std::min<int64_t>(4, CO - r0);
    std::fill(acc.begin(), acc.begin() + static_cast<size_t>(nr * P), 0.0);
    if (nr == 4) {
      double* a0 = acc.data();
      double* a1 = a0 + P;
      double* a2 = a1 + P;
      double* a3 = a2 + P;
      for (int64_t k = 0; k < K; ++k) {
        const double w0 = static_cast<double>(a[(r0 + 0) * K + k]);
        const double w1 = static_cast<double>(a[(r0 + 1) * K + k]);
        const double w2 = static_cast<double>(a[(r0 + 2) * K + k]);
        const double w3 = static_cast<double>(a[(r0 + 3) * K + k]);
        if (w0 == 0.0 && w1 == 0.0 && w2 == 0.0 && w3 == 0.0) continue;
        const T* br = b + k * P;
        for (int64_t p = 0; p < P; ++p) {
          const double bv = static_cast<double>(br[p]);
          a0[p] += w0 * bv;
          a1[p] += w1 * bv;
          a2[p] += w2 * bv;
          a3[p] += w3 * bv;
        }
      }
    } else {
      for (int64_t j = 0; j < nr; ++j) {
        double* aj = acc.data() + j * P;
        for (int64_t k = 0; k < K; ++k) {
          const double wv = static_cast<double>(a[(r0 + j) * K + k]);
          if (wv == 0.0) continue;
          const T* br = b + k * P;
          for (int64_t p = 0; p < P; ++p) aj[p] += wv * static_cast<double>(br[p]);
        }
      }
    }
    for (int64_t j = 0; j < nr; ++j) {
      T* orow = out + (r0 + j) * P;
      const double* aj = acc.data() + j * P;
      if (accumulate) {
        for (int64_t p = 0; p < P; ++p) orow[p] += static_cast<T>(aj[p]);
      } else {
        const double bv = bias ? static_cast<double>(bias[r0 + j]) : 0.0;
        for (int64_t p = 0; p < P; ++p) orow[p] = static_cast<T>(aj[p] + bv);
      }
    }
  }
}

// Blocked dot product: eight independent double chains keep the loop
// pipelined without reassociating a single serial sum.
template <typename T>
double dot_blocked(const T* a, const T* b, int64_t n) {
  double s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j)
      s[j] += static_cast<double>(a[i + j]) * static_cast<double>(b[i + j]);
  double tail = 0;
  for (; i < n; ++i) tail += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return (((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]))) + tail;
}

template <typename T>
bool conv_is_pointwise(const ConvSpec& sp) {
  return sp.kh == 1 && sp.kw == 1 && sp.stride == 1 && sp.padding == 0;
}

template <typename T>
void conv2d_forward_kernel(const T* x, const T* w, const T* b, T* out, int64_t N, int64_t C,
                           int64_t H, int64_t W, const ConvSpec& sp, int64_t OH, int64_t OW) {
  if (sp.groups != 1) {
    conv2d_forward_grouped(x, w, b, out, N, C, H, W, sp, OH, OW);
    return;
  }
  const int64_t CK = C * sp.kh * sp.kw;
  const int64_t P = OH * OW;
  const bool pointwise = conv_is_pointwise<T>(sp);
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    const T* xn = x + n * C * H * W;
    T* on = out + n * sp.out_channels * P;
    if (pointwise) {
      gemm_rows(w, xn, b, on, sp.out_channels, CK, P, false);
    } else {
      std::vector<T> cols(static_cast<size_t>(CK * P));
      im2col(xn, cols.data(), C, H, W, sp, OH, OW);
      gemm_rows(w, cols.data(), b, on, sp.out_channels, CK, P, false);
    }
  }
}

template <typename T>
void conv2d_backward_input_kernel(const T* gout, const T* w, T* gx, int64_t N, int64_t C,
                                  int64_t H, int64_t W, const ConvSpec& sp, int64_t OH,
                                  int64_t OW) {
  if (sp.groups != 1) {
    conv2d_backward_input_grouped(gout, w, gx, N, C, H, W, sp, OH, OW);
    return;
  }
  const int64_t CK = C * sp.kh * sp.kw;
  const int64_t CO = sp.out_channels;
  const int64_t P = OH * OW;
  const bool pointwise = conv_is_pointwise<T>(sp);
  std::vector<T> wt(static_cast<size_t>(CK * CO));
  for (int64_t co = 0; co < CO; ++co)
    for (int64_t ck = 0; ck < CK; ++ck) wt[ck * CO + co] = w[co * CK + ck];
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    const T* gyn = gout + n * CO * P;
    T* gxn = gx + n * C * H * W;
    if (pointwise) {
      gemm_rows(wt.data(), gyn, static_cast<const T*>(nullptr), gxn, CK, CO, P, true);
    } else {
      std::vector<T> dcols(static_cast<size_t>(CK * P));
      gemm_rows(wt.data(), gyn, static_cast<const T*>(nullptr), dcols.data(), CK, CO, P, false);
      col2im_add(dcols.data(), gxn, C, H, W, sp, OH, OW);
    }
  }
}

template <typename T>
void conv2d_backward_weight_kernel(const T* gout, const T* x, T* gw, int64_t N, int64_t C,
                                   int64_t H, int64_t W, const ConvSpec& sp, int64_t OH,
                                   int64_t OW) {
  if (sp.groups != 1) {
    conv2d_backward_weight_grouped(gout, x, gw, N, C, H, W, sp, OH, OW);
    return;
  }
  const int64_t CK = C * sp.kh * sp.kw;
  const int64_t CO = sp.out_channels;
  const int64_t P = OH * OW;
  const bool pointwise = conv_is_pointwise<T>(sp);
  std::vector<T> scratch;
  if (!pointwise) scratch.resize(static_cast<size_t>(CK * P));
  for (int64_t n = 0; n < N; ++n) {  // serial: every image accumulates into gw
    const T* xn = x + n * C * H * W;
    const T* cols = xn;
    if (!pointwise) {
      im2col(xn, scratch.data(), C, H, W, sp, OH, OW);
      cols = scratch.data();
    }
    const T* gyn = gout + n * CO * P;
#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < CO; ++co) {
      const T* gr = gyn + co * P;
      T* gwr = gw + co * CK;
      for (int64_t ck = 0; ck < CK; ++ck)
        gwr[ck] += static_cast<T>(dot_blocked(gr, cols + ck * P, P));
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias,
                 const ConvSpec& spec) {
  spec.validate();
  SFA_CHECK(x.rank() == 4) << "conv2d input must be NCHW, got " << shape_str(x.shape());
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  SFA_CHECK(C == spec.in_channels) << "conv2d: input has " << C << " channels, spec expects "
                                   << spec.in_channels;
  const Shape wshape{spec.out_channels, spec.in_channels / spec.groups, spec.kh, spec.kw};
  SFA_CHECK(weights.shape() == wshape)
      << "conv2d: weight shape " << shape_str(weights.shape()) << " != " << shape_str(wshape);
  if (spec.has_bias) {
    SFA_CHECK(bias.defined() && bias.numel() == spec.out_channels) << "conv2d: bad bias";
  }
  const int64_t OH = spec.out_extent(H, spec.kh);
  const int64_t OW = spec.out_extent(W, spec.kw);
  SFA_CHECK(OH >= 1 && OW >= 1) << "conv2d: output extent < 1 for input " << H << "x" << W;

  Tensor<T> out = Tensor<T>::zeros({N, spec.out_channels, OH, OW});
  detail::conv2d_forward_kernel(x.data(), weights.data(),
                                spec.has_bias ? bias.data() : nullptr, out.data(), N, C, H, W,
                                spec, OH, OW);

  const bool rec = spec.has_bias ? detail::any_needs_grad<T>({&x, &weights, &bias})
                                 : detail::any_needs_grad<T>({&x, &weights});
  if (rec) {
    auto xi = x.impl();
    auto wi = weights.impl();
    auto bi = spec.has_bias ? bias.impl() : nullptr;
    auto bwd = [xi, wi, bi, spec, N, C, H, W, OH, OW](const TensorData<T>& o) {
      const T* go = o.grad.data();
      if (xi->requires_grad) {
        xi->ensure_grad();
        detail::conv2d_backward_input_kernel(go, wi->data.data(), xi->grad.data(), N, C, H, W,
                                             spec, OH, OW);
      }
      if (wi->requires_grad) {
        wi->ensure_grad();
        detail::conv2d_backward_weight_kernel(go, xi->data.data(), wi->grad.data(), N, C, H, W,
                                              spec, OH, OW);
      }
      if (bi && bi->requires_grad) {
        bi->ensure_grad();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t co = 0; co < spec.out_channels; ++co) {
            const T* g = go + (n * spec.out_channels + co) * OH * OW;
            T acc = 0;
            for (int64_t i = 0; i < OH * OW; ++i) acc += g[i];
            bi->grad[co] += acc;
          }
      }
    };
    if (spec.has_bias)
      detail::record("conv2d", out, {&x, &weights, &bias}, std::move(bwd));
    else
      detail::record("conv2d", out, {&x, &weights}, std::move(bwd));
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weights, const ConvSpec& spec) {
  return conv2d(x, weights, Tensor<T>(), spec);
}

// Depthwise 3x3 conv (groups == channels) followed by a 1x1 pointwise conv.
// Padding equals the dilation, so spatial extents are preserved.
template <typename T>
Tensor<T> depthwise_separable_conv(const Tensor<T>& x, const Tensor<T>& dw_weights,
                                   const Tensor<T>& pw_weights, int64_t dilation) {
  SFA_CHECK(dilation >= 1) << "depthwise_separable_conv: dilation " << dilation << " < 1";
  const int64_t C = x.dim(1);
  const int64_t cout = pw_weights.dim(0);
  ConvSpec dw{C, C, dw_weights.dim(2), dw_weights.dim(3), 1, dilation, dilation, C, false};
  ConvSpec pw{C, cout, 1, 1, 1, 0, 1, 1, false};
  return conv2d(conv2d(x, dw_weights, dw), pw_weights, pw);
}

// 1-D convolution along the channel axis of an (N,C,1,1) tensor with a single
// shared kernel, zero padded so the channel count is preserved. No bias.
template <typename T>
Tensor<T> conv1d_channels(const Tensor<T>& u, const Tensor<T>& weights) {
  SFA_CHECK(u.rank() == 4 && u.dim(2) == 1 && u.dim(3) == 1)
      << "conv1d_channels expects (N,C,1,1), got " << shape_str(u.shape());
  const int64_t k = weights.numel();
  SFA_CHECK(k % 2 == 1) << "conv1d_channels: kernel size " << k << " must be odd";
  const int64_t N = u.dim(0), C = u.dim(1);
  const int64_t half = k / 2;

  Tensor<T> out = Tensor<T>::zeros(u.shape());
  const T* up = u.data();
  const T* wp = weights.data();
  T* op = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      T acc = 0;
      for (int64_t j = 0; j < k; ++j) {
        int64_t src = c + j - half;
        if (src >= 0 && src < C) acc += wp[j] * up[n * C + src];
      }
      op[n * C + c] = acc;
    }

  if (detail::any_needs_grad<T>({&u, &weights})) {
    auto ui = u.impl();
    auto wi = weights.impl();
    detail::record("conv1d_channels", out, {&u, &weights},
                   [ui, wi, N, C, k, half](const TensorData<T>& o) {
                     const T* g = o.grad.data();
                     if (ui->requires_grad) {
                       ui->ensure_grad();
                       for (int64_t n = 0; n < N; ++n)
                         for (int64_t c = 0; c < C; ++c)
                           for (int64_t j = 0; j < k; ++j) {
                             int64_t src = c + j - half;
                             if (src >= 0 && src < C)
                               ui->grad[n * C + src] += wi->data[j] * g[n * C + c];
                           }
                     }
                     if (wi->requires_grad) {
                       wi->ensure_grad();
                       for (int64_t j = 0; j < k; ++j) {
                         T acc = 0;
                         for (int64_t n = 0; n < N; ++n)
                           for (int64_t c = 0; c < C; ++c) {
                             int64_t src = c + j - half;
                             if (src >= 0 && src < C) acc += ui->data[n * C + src] * g[n * C + c];
                           }
                         wi->grad[j] += acc;
                       }
                     }
                   });
  }
  return out;
}

}  // namespace sfanet

#endif
