#ifndef SFANET_RESAMPLE_HPP
#define SFANET_RESAMPLE_HPP

#include <limits>

#include "sfanet/tensor.hpp"

namespace sfanet {

namespace detail {

// Half-pixel source coordinate mapping (align_corners = false). Taps that
// fall outside the input are clamped to the border before weighting.
template <typename T>
void bilinear_axis(int64_t in, int64_t out, std::vector<int64_t>& lo, std::vector<int64_t>& hi,
                   std::vector<T>& frac) {
  lo.resize(out);
  hi.resize(out);
  frac.resize(out);
  const T s = T(in) / T(out);
  for (int64_t d = 0; d < out; ++d) {
    const T src = (T(d) + T(0.5)) * s - T(0.5);
    const T fl = std::floor(src);
    const int64_t i0 = static_cast<int64_t>(fl);
    lo[d] = std::clamp<int64_t>(i0, 0, in - 1);
    hi[d] = std::clamp<int64_t>(i0 + 1, 0, in - 1);
    frac[d] = src - fl;
  }
}

}  // namespace detail

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
  SFA_CHECK(x.rank() == 4) << "bilinear_resize expects NCHW";
  SFA_CHECK(out_h > 0 && out_w > 0) << "bilinear_resize: bad target " << out_h << "x" << out_w;
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (out_h == H && out_w == W) {  // degenerate resize is an exact copy
    Tensor<T> out = Tensor<T>::from_data(x.shape(), x.vec());
    if (detail::any_needs_grad<T>({&x})) {
      auto xi = x.impl();
      const int64_t total = x.numel();
      detail::record("bilinear_resize", out, {&x}, [xi, total](const TensorData<T>& o) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (int64_t i = 0; i < total; ++i) xi->grad[i] += o.grad[i];
      });
    }
    return out;
  }
  std::vector<int64_t> y0(out_h), y1(out_h), x0(out_w), x1(out_w);
  std::vector<T> fy(out_h), fx(out_w);
  detail::bilinear_axis<T>(H, out_h, y0, y1, fy);
  detail::bilinear_axis<T>(W, out_w, x0, x1, fx);

  Tensor<T> out = Tensor<T>::zeros({N, C, out_h, out_w});
  const T* xp = x.data();
  T* op = out.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* src = xp + (n * C + c) * H * W;
      T* dst = op + (n * C + c) * out_h * out_w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        const T* r0 = src + y0[oy] * W;
        const T* r1 = src + y1[oy] * W;
        const T wy = fy[oy];
        for (int64_t ox = 0; ox < out_w; ++ox) {
          const T wx = fx[ox];
          const T top = r0[x0[ox]] * (T(1) - wx) + r0[x1[ox]] * wx;
          const T bot = r1[x0[ox]] * (T(1) - wx) + r1[x1[ox]] * wx;
          dst[oy * out_w + ox] = top * (T(1) - wy) + bot * wy;
        }
      }
    }

  if (detail::any_needs_grad<T>({&x})) {
    auto xi = x.impl();
    detail::record("bilinear_resize", out, {&x},
                   [xi, y0, y1, x0, x1, fy, fx, N, C, H, W, out_h, out_w](const TensorData<T>& o) {
                     if (!xi->requires_grad) return;
                     xi->ensure_grad();
                     const T* g = o.grad.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                     for (int64_t n = 0; n < N; ++n)
                       for (int64_t c = 0; c < C; ++c) {
                         T* dx = xi->grad.data() + (n * C + c) * H * W;
                         const T* go = g + (n * C + c) * out_h * out_w;
                         for (int64_t oy = 0; oy < out_h; ++oy) {
                           const T wy = fy[oy];
                           for (int64_t ox = 0; ox < out_w; ++ox) {
                             const T wx = fx[ox];
                             const T gv = go[oy * out_w + ox];
                             dx[y0[oy] * W + x0[ox]] += gv * (T(1) - wy) * (T(1) - wx);
                             dx[y0[oy] * W + x1[ox]] += gv * (T(1) - wy) * wx;
                             dx[y1[oy] * W + x0[ox]] += gv * wy * (T(1) - wx);
                             dx[y1[oy] * W + x1[ox]] += gv * wy * wx;
                           }
                         }
                       }
                   });
  }
  return out;
}

// Warp x by a per-pixel flow field (N,2,H,W): channel 0 is the x offset,
// channel 1 the y offset, both in output-pixel units. out(p) samples x at
// p + flow(p) bilinearly with border clamping. Zero flow copies x exactly.
template <typename T>
Tensor<T> grid_sample_warp(const Tensor<T>& x, const Tensor<T>& flow) {
  SFA_CHECK(x.rank() == 4 && flow.rank() == 4) << "grid_sample_warp expects NCHW";
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  SFA_CHECK((flow.shape() == Shape{N, 2, H, W}))
      << "grid_sample_warp: flow shape " << shape_str(flow.shape()) << " for input "
      << shape_str(x.shape());

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const int64_t HW = H * W;
  const T* xp = x.data();
  const T* fp = flow.data();
  T* op = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t n = 0; n < N; ++n) {
    const T* fxp = fp + n * 2 * HW;
    const T* fyp = fxp + HW;
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        const int64_t p = h * W + w;
        const T sx = T(w) + fxp[p];
        const T sy = T(h) + fyp[p];
        if (fxp[p] == T(0) && fyp[p] == T(0)) {
          for (int64_t c = 0; c < C; ++c) op[(n * C + c) * HW + p] = xp[(n * C + c) * HW + p];
          continue;
        }
        const T flx = std::floor(sx), fly = std::floor(sy);
        const T ax = sx - flx, ay = sy - fly;
        const int64_t cx0 = std::clamp<int64_t>(static_cast<int64_t>(flx), 0, W - 1);
        const int64_t cx1 = std::clamp<int64_t>(static_cast<int64_t>(flx) + 1, 0, W - 1);
        const int64_t cy0 = std::clamp<int64_t>(static_cast<int64_t>(fly), 0, H - 1);
        const int64_t cy1 = std::clamp<int64_t>(static_cast<int64_t>(fly) + 1, 0, H - 1);
        for (int64_t c = 0; c < C; ++c) {
          const T* src = xp + (n * C + c) * HW;
          const T v00 = src[cy0 * W + cx0], v01 = src[cy0 * W + cx1];
          const T v10 = src[cy1 * W + cx0], v11 = src[cy1 * W + cx1];
          op[(n * C + c) * HW + p] = (T(1) - ay) * ((T(1) - ax) * v00 + ax * v01) +
                                     ay * ((T(1) - ax) * v10 + ax * v11);
        }
      }
  }

  if (detail::any_needs_grad<T>({&x, &flow})) {
    auto xi = x.impl();
    auto fi = flow.impl();
    detail::record(
        "grid_sample_warp", out, {&x, &flow}, [xi, fi, N, C, H, W, HW](const TensorData<T>& o) {
          const T* g = o.grad.data();
          if (xi->requires_grad) xi->ensure_grad();
          if (fi->requires_grad) fi->ensure_grad();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
          for (int64_t n = 0; n < N; ++n) {
            const T* fxp = fi->data.data() + n * 2 * HW;
            const T* fyp = fxp + HW;
            for (int64_t h = 0; h < H; ++h)
              for (int64_t w = 0; w < W; ++w) {
                const int64_t p = h * W + w;
                const T sx = T(w) + fxp[p];
                const T sy = T(h) + fyp[p];
                const T flx = std::floor(sx), fly = std::floor(sy);
                const T ax = sx - flx, ay = sy - fly;
                const int64_t cx0 = std::clamp<int64_t>(static_cast<int64_t>(flx), 0, W - 1);
                const int64_t cx1 = std::clamp<int64_t>(static_cast<int64_t>(flx) + 1, 0, W - 1);
                const int64_t cy0 = std::clamp<int64_t>(static_cast<int64_t>(fly), 0, H - 1);
                const int64_t cy1 = std::clamp<int64_t>(static_cast<int64_t>(fly) + 1, 0, H - 1);
                T dfx = 0, dfy = 0;
                for (int64_t c = 0; c < C; ++c) {
                  const T gv = g[(n * C + c) * HW + p];
                  if (gv == T(0) && !fi->requires_grad) continue;
                  const T* src = xi->data.data() + (n * C + c) * HW;
                  const T v00 = src[cy0 * W + cx0], v01 = src[cy0 * W + cx1];
                  const T v10 = src[cy1 * W + cx0], v11 = src[cy1 * W + cx1];
                  if (xi->requires_grad) {
                    T* dx = xi->grad.data() + (n * C + c) * HW;
                    dx[cy0 * W + cx0] += gv * (T(1) - ay) * (T(1) - ax);
                    dx[cy0 * W + cx1] += gv * (T(1) - ay) * ax;
                    dx[cy1 * W + cx0] += gv * ay * (T(1) - ax);
                    dx[cy1 * W + cx1] += gv * ay * ax;
                  }
                  dfx += gv * ((T(1) - ay) * (v01 - v00) + ay * (v11 - v10));
                  dfy += gv * ((T(1) - ax) * (v10 - v00) + ax * (v11 - v01));
                }
                if (fi->requires_grad) {
                  fi->grad[n * 2 * HW + p] += dfx;
                  fi->grad[n * 2 * HW + HW + p] += dfy;
                }
              }
          }
        });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  SFA_CHECK(x.rank() == 4) << "global_avg_pool expects NCHW";
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({N, C, 1, 1});
  const T* xp = x.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    T acc = 0;
    const T* p = xp + nc * HW;
    for (int64_t i = 0; i < HW; ++i) acc += p[i];
    out.data()[nc] = acc / T(HW);
  }
  if (detail::any_needs_grad<T>({&x})) {
    auto xi = x.impl();
    detail::record("global_avg_pool", out, {&x}, [xi, N, C, HW](const TensorData<T>& o) {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const T g = o.grad[nc] / T(HW);
        T* dx = xi->grad.data() + nc * HW;
        for (int64_t i = 0; i < HW; ++i) dx[i] += g;
      }
    });
  }
  return out;
}

// Max pooling with implicit -inf padding. Ties take the first window element
// in row-major window order; backward routes the gradient to that element.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int64_t kernel, int64_t stride, int64_t padding) {
  SFA_CHECK(x.rank() == 4) << "max_pool2d expects NCHW";
  SFA_CHECK(kernel > 0 && stride > 0 && padding >= 0 && padding < kernel)
      << "max_pool2d: bad geometry k=" << kernel << " s=" << stride << " p=" << padding;
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OH = (H + 2 * padding - kernel) / stride + 1;
  const int64_t OW = (W + 2 * padding - kernel) / stride + 1;
  SFA_CHECK(OH > 0 && OW > 0) << "max_pool2d: empty output for input " << shape_str(x.shape());

  Tensor<T> out = Tensor<T>::zeros({N, C, OH, OW});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C * OH * OW));
  const T* xp = x.data();
  T* op = out.data();
  int64_t* am = argmax->data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* src = xp + (n * C + c) * H * W;
      T* dst = op + (n * C + c) * OH * OW;
      int64_t* adst = am + (n * C + c) * OH * OW;
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t best_idx = -1;
          for (int64_t ky = 0; ky < kernel; ++ky) {
            const int64_t iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= H) continue;
            for (int64_t kx = 0; kx < kernel; ++kx) {
              const int64_t ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= W) continue;
              const T v = src[iy * W + ix];
              if (v > best) {
                best = v;
                best_idx = iy * W + ix;
              }
            }
          }
          SFA_CHECK(best_idx >= 0) << "max_pool2d: window with no valid taps";
          dst[oy * OW + ox] = best;
          adst[oy * OW + ox] = best_idx;
        }
    }

  if (detail::any_needs_grad<T>({&x})) {
    auto xi = x.impl();
    detail::record("max_pool2d", out, {&x},
                   [xi, argmax, N, C, H, W, OH, OW](const TensorData<T>& o) {
                     if (!xi->requires_grad) return;
                     xi->ensure_grad();
                     const T* g = o.grad.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                     for (int64_t n = 0; n < N; ++n)
                       for (int64_t c = 0; c < C; ++c) {
                         T* dx = xi->grad.data() + (n * C + c) * H * W;
                         const T* go = g + (n * C + c) * OH * OW;
                         const int64_t* a = argmax->data() + (n * C + c) * OH * OW;
                         for (int64_t i = 0; i < OH * OW; ++i) dx[a[i]] += go[i];
                       }
                   });
  }
  return out;
}

}  // namespace sfanet

#endif
