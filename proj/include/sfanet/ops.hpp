#ifndef SFANET_OPS_HPP
#define SFANET_OPS_HPP

#include "sfanet/tensor.hpp"

namespace sfanet {

enum class Mode { kTrain, kInfer };

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  T* op = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) op[i] = xp[i] > T(0) ? xp[i] : T(0);
  if (detail::any_needs_grad<T>({&x})) {
    auto xi = x.impl();
    detail::record("relu", out, {&x}, [xi, n](const TensorData<T>& o) {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        if (xi->data[i] > T(0)) xi->grad[i] += o.grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  T* op = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) op[i] = T(1) / (T(1) + std::exp(-xp[i]));
  if (detail::any_needs_grad<T>({&x})) {
    auto xi = x.impl();
    detail::record("sigmoid", out, {&x}, [xi, n](const TensorData<T>& o) {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const T y = o.data[i];
        xi->grad[i] += o.grad[i] * y * (T(1) - y);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  SFA_CHECK(a.shape() == b.shape()) << "add: shape mismatch " << shape_str(a.shape()) << " vs "
                                    << shape_str(b.shape());
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
  for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
  if (detail::any_needs_grad<T>({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    detail::record("add", out, {&a, &b}, [ai, bi, n](const TensorData<T>& o) {
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (int64_t i = 0; i < n; ++i) ai->grad[i] += o.grad[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int64_t i = 0; i < n; ++i) bi->grad[i] += o.grad[i];
      }
    });
  }
  return out;
}

// Multiply by a constant (not a learnable tensor), e.g. a loss balance weight.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * factor;
  if (detail::any_needs_grad<T>({&x})) {
    auto xi = x.impl();
    detail::record("scale", out, {&x}, [xi, factor, n](const TensorData<T>& o) {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (int64_t i = 0; i < n; ++i) xi->grad[i] += o.grad[i] * factor;
    });
  }
  return out;
}

// x * factor where factor broadcasts: same shape, (N,C,1,1) per-channel gate,
// (N,1,H,W) per-pixel gate, or a single scalar tensor.
template <typename T>
Tensor<T> mul_broadcast(const Tensor<T>& x, const Tensor<T>& factor) {
  SFA_CHECK(x.rank() == 4) << "mul_broadcast expects NCHW input";
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t HW = H * W;
  enum { kSame, kChannel, kPixel, kScalar } kind;
  if (factor.numel() == 1)
    kind = kScalar;
  else if (factor.shape() == x.shape())
    kind = kSame;
  else if (factor.shape() == Shape{N, C, 1, 1})
    kind = kChannel;
  else if (factor.shape() == Shape{N, 1, H, W})
    kind = kPixel;
  else
    SFA_CHECK(false) << "mul_broadcast: factor shape " << shape_str(factor.shape())
                     << " not broadcastable to " << shape_str(x.shape());

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  const T* fp = factor.data();
  T* op = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const int64_t base = (n * C + c) * HW;
      switch (kind) {
        case kSame:
          for (int64_t i = 0; i < HW; ++i) op[base + i] = xp[base + i] * fp[base + i];
          break;
        case kChannel: {
          const T f = fp[n * C + c];
          for (int64_t i = 0; i < HW; ++i) op[base + i] = xp[base + i] * f;
          break;
        }
        case kPixel:
          for (int64_t i = 0; i < HW; ++i) op[base + i] = xp[base + i] * fp[n * HW + i];
          break;
        case kScalar:
          for (int64_t i = 0; i < HW; ++i) op[base + i] = xp[base + i] * fp[0];
          break;
      }
    }

  if (detail::any_needs_grad<T>({&x, &factor})) {
    auto xi = x.impl();
    auto fi = factor.impl();
    detail::record("mul_broadcast", out, {&x, &factor},
                   [xi, fi, kind, N, C, HW](const TensorData<T>& o) {
                     const T* g = o.grad.data();
                     if (xi->requires_grad) xi->ensure_grad();
                     if (fi->requires_grad) fi->ensure_grad();
                     for (int64_t n = 0; n < N; ++n)
                       for (int64_t c = 0; c < C; ++c) {
                         const int64_t base = (n * C + c) * HW;
                         for (int64_t i = 0; i < HW; ++i) {
                           int64_t fidx;
                           switch (kind) {
                             case kSame: fidx = base + i; break;
                             case kChannel: fidx = n * C + c; break;
                             case kPixel: fidx = n * HW + i; break;
                             default: fidx = 0; break;
                           }
                           if (xi->requires_grad) xi->grad[base + i] += g[base + i] * fi->data[fidx];
                           if (fi->requires_grad) fi->grad[fidx] += g[base + i] * xi->data[base + i];
                         }
                       }
                   });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  SFA_CHECK(a.rank() == 4 && b.rank() == 4) << "concat_channels expects NCHW";
  SFA_CHECK(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3))
      << "concat_channels: non-channel extents differ, " << shape_str(a.shape()) << " vs "
      << shape_str(b.shape());
  const int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  Tensor<T> out = Tensor<T>::zeros({N, Ca + Cb, a.dim(2), a.dim(3)});
  T* op = out.data();
  for (int64_t n = 0; n < N; ++n) {
    std::copy_n(a.data() + n * Ca * HW, Ca * HW, op + n * (Ca + Cb) * HW);
    std::copy_n(b.data() + n * Cb * HW, Cb * HW, op + n * (Ca + Cb) * HW + Ca * HW);
  }
  if (detail::any_needs_grad<T>({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    detail::record("concat_channels", out, {&a, &b},
                   [ai, bi, N, Ca, Cb, HW](const TensorData<T>& o) {
                     const T* g = o.grad.data();
                     for (int64_t n = 0; n < N; ++n) {
                       if (ai->requires_grad) {
                         ai->ensure_grad();
                         const T* gs = g + n * (Ca + Cb) * HW;
                         T* ga = ai->grad.data() + n * Ca * HW;
                         for (int64_t i = 0; i < Ca * HW; ++i) ga[i] += gs[i];
                       }
                       if (bi->requires_grad) {
                         bi->ensure_grad();
                         const T* gs = g + n * (Ca + Cb) * HW + Ca * HW;
                         T* gb = bi->grad.data() + n * Cb * HW;
                         for (int64_t i = 0; i < Cb * HW; ++i) gb[i] += gs[i];
                       }
                     }
                   });
  }
  return out;
}

// Softmax across the channel axis; per-pixel channel sums equal 1.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  SFA_CHECK(x.rank() == 4) << "softmax_channels expects NCHW";
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  T* op = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      const int64_t base = n * C * HW + i;
      T mx = xp[base];
      for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xp[base + c * HW]);
      T sum = 0;
      for (int64_t c = 0; c < C; ++c) {
        const T e = std::exp(xp[base + c * HW] - mx);
        op[base + c * HW] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int64_t c = 0; c < C; ++c) op[base + c * HW] *= inv;
    }
  if (detail::any_needs_grad<T>({&x})) {
    auto xi = x.impl();
    detail::record("softmax_channels", out, {&x}, [xi, N, C, HW](const TensorData<T>& o) {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      const T* g = o.grad.data();
      const T* y = o.data.data();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < HW; ++i) {
          const int64_t base = n * C * HW + i;
          T dot = 0;
          for (int64_t c = 0; c < C; ++c) dot += g[base + c * HW] * y[base + c * HW];
          for (int64_t c = 0; c < C; ++c)
            xi->grad[base + c * HW] += y[base + c * HW] * (g[base + c * HW] - dot);
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros({1});
  T acc = 0;
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += x.data()[i];
  out.data()[0] = acc;
  if (detail::any_needs_grad<T>({&x})) {
    auto xi = x.impl();
    detail::record("sum_all", out, {&x}, [xi, n](const TensorData<T>& o) {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      const T g = o.grad[0];
      for (int64_t i = 0; i < n; ++i) xi->grad[i] += g;
    });
  }
  return out;
}

// Per-channel batch normalization state. gamma/beta are trainable; running
// stats are plain buffers updated by momentum in train mode.
template <typename T>
struct BatchNormState {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);
  Mode mode = Mode::kTrain;
  bool folded = false;

  static BatchNormState make(int64_t channels) {
    BatchNormState s;
    s.gamma = Tensor<T>::filled({channels}, T(1)).set_requires_grad(true);
    s.beta = Tensor<T>::zeros({channels}).set_requires_grad(true);
    s.running_mean = Tensor<T>::zeros({channels});
    s.running_var = Tensor<T>::filled({channels}, T(1));
    return s;
  }
  int64_t channels() const { return gamma.numel(); }
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormState<T>& state) {
  SFA_CHECK(!state.folded) << "batch_norm on a folded state";
  SFA_CHECK(x.rank() == 4) << "batch_norm expects NCHW";
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  SFA_CHECK(C == state.channels()) << "batch_norm: channel mismatch " << C << " vs "
                                   << state.channels();
  const int64_t count = N * HW;
  SFA_CHECK(count > 0) << "batch_norm: empty batch in train mode";

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> mean(C), invstd(C);
  const T* xp = x.data();

  if (state.mode == Mode::kTrain) {
    for (int64_t c = 0; c < C; ++c) {
      T m = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* p = xp + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) m += p[i];
      }
      m /= T(count);
      T v = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* p = xp + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          const T d = p[i] - m;
          v += d * d;
        }
      }
      v /= T(count);
      mean[c] = m;
      invstd[c] = T(1) / std::sqrt(v + state.eps);
      const T unbiased = count > 1 ? v * T(count) / T(count - 1) : v;
      state.running_mean.data()[c] =
          (T(1) - state.momentum) * state.running_mean.data()[c] + state.momentum * m;
      state.running_var.data()[c] =
          (T(1) - state.momentum) * state.running_var.data()[c] + state.momentum * unbiased;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean.data()[c];
      invstd[c] = T(1) / std::sqrt(state.running_var.data()[c] + state.eps);
    }
  }

  T* op = out.data();
  const T* gp = state.gamma.data();
  const T* bp = state.beta.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* p = xp + (n * C + c) * HW;
      T* o = op + (n * C + c) * HW;
      const T sc = gp[c] * invstd[c];
      const T sh = bp[c] - mean[c] * sc;
      for (int64_t i = 0; i < HW; ++i) o[i] = p[i] * sc + sh;
    }

  if (detail::any_needs_grad<T>({&x, &state.gamma, &state.beta})) {
    auto xi = x.impl();
    auto gi = state.gamma.impl();
    auto bi = state.beta.impl();
    const bool train = state.mode == Mode::kTrain;
    detail::record(
        "batch_norm", out, {&x, &state.gamma, &state.beta},
        [xi, gi, bi, mean, invstd, train, N, C, HW, count](const TensorData<T>& o) {
          const T* g = o.grad.data();
          for (int64_t c = 0; c < C; ++c) {
            T gsum = 0, gxhat = 0;
            for (int64_t n = 0; n < N; ++n) {
              const T* gr = g + (n * C + c) * HW;
              const T* xr = xi->data.data() + (n * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) {
                gsum += gr[i];
                gxhat += gr[i] * (xr[i] - mean[c]) * invstd[c];
              }
            }
            if (gi->requires_grad) {
              gi->ensure_grad();
              gi->grad[c] += gxhat;
            }
            if (bi->requires_grad) {
              bi->ensure_grad();
              bi->grad[c] += gsum;
            }
            if (xi->requires_grad) {
              xi->ensure_grad();
              const T gam = gi->data[c];
              if (train) {
                const T mg = gsum / T(count);
                const T mgx = gxhat / T(count);
                for (int64_t n = 0; n < N; ++n) {
                  const T* gr = g + (n * C + c) * HW;
                  const T* xr = xi->data.data() + (n * C + c) * HW;
                  T* dx = xi->grad.data() + (n * C + c) * HW;
                  for (int64_t i = 0; i < HW; ++i) {
                    const T xhat = (xr[i] - mean[c]) * invstd[c];
                    dx[i] += gam * invstd[c] * (gr[i] - mg - xhat * mgx);
                  }
                }
              } else {
                const T sc = gam * invstd[c];
                for (int64_t n = 0; n < N; ++n) {
                  const T* gr = g + (n * C + c) * HW;
                  T* dx = xi->grad.data() + (n * C + c) * HW;
                  for (int64_t i = 0; i < HW; ++i) dx[i] += gr[i] * sc;
                }
              }
            }
          }
        });
  }
  return out;
}

}  // namespace sfanet

#endif
