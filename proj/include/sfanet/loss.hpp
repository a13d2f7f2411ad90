#ifndef SFANET_LOSS_HPP
#define SFANET_LOSS_HPP

#include "sfanet/labels.hpp"
#include "sfanet/tensor.hpp"

namespace sfanet {

// Probability assigned to the true class per pixel (no autograd involvement);
// ignored pixels get -1. Used to rank pixels by difficulty.
template <typename T>
std::vector<T> true_class_probs(const Tensor<T>& logits, const LabelBatch& labels,
                                int ignore_label = kIgnoreLabel) {
  SFA_CHECK(logits.rank() == 4) << "true_class_probs expects NCHW logits";
  const int64_t N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  SFA_CHECK(N == labels.n && H == labels.h && W == labels.w)
      << "true_class_probs: logits " << shape_str(logits.shape()) << " vs labels " << labels.n
      << "x" << labels.h << "x" << labels.w;
  const int64_t HW = H * W;
  std::vector<T> probs(static_cast<size_t>(N * HW), T(-1));
  const T* xp = logits.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      const int lab = labels.labels[static_cast<size_t>(n * HW + i)];
      if (lab == ignore_label) continue;
      SFA_CHECK(lab >= 0 && lab < C) << "label " << lab << " out of range for " << C << " classes";
      const int64_t base = n * C * HW + i;
      T mx = xp[base];
      for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xp[base + c * HW]);
      T sum = 0;
      for (int64_t c = 0; c < C; ++c) sum += std::exp(xp[base + c * HW] - mx);
      probs[static_cast<size_t>(n * HW + i)] = std::exp(xp[base + lab * HW] - mx) / sum;
    }
  return probs;
}

// Mean softmax cross-entropy over pixels that are valid (label != ignore) and,
// if a keep mask is given, selected by it. Fused softmax+NLL for stability.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const LabelBatch& labels,
                                int ignore_label = kIgnoreLabel,
                                const std::vector<uint8_t>* keep = nullptr) {
  SFA_CHECK(logits.rank() == 4) << "softmax_cross_entropy expects NCHW logits";
  const int64_t N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  SFA_CHECK(N == labels.n && H == labels.h && W == labels.w)
      << "softmax_cross_entropy: logits " << shape_str(logits.shape()) << " vs labels " << labels.n
      << "x" << labels.h << "x" << labels.w;
  const int64_t HW = H * W;
  if (keep)
    SFA_CHECK(static_cast<int64_t>(keep->size()) == N * HW)
        << "keep mask size " << keep->size() << " != " << N * HW;

  const T* xp = logits.data();
  double total = 0;  // accumulate in double; per-pixel terms stay in T
  int64_t count = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      const int lab = labels.labels[static_cast<size_t>(n * HW + i)];
      if (lab == ignore_label) continue;
      SFA_CHECK(lab >= 0 && lab < C) << "label " << lab << " out of range for " << C << " classes";
      if (keep && !(*keep)[static_cast<size_t>(n * HW + i)]) continue;
      const int64_t base = n * C * HW + i;
      T mx = xp[base];
      for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xp[base + c * HW]);
      T sum = 0;
      for (int64_t c = 0; c < C; ++c) sum += std::exp(xp[base + c * HW] - mx);
      total += static_cast<double>(std::log(sum) - (xp[base + lab * HW] - mx));
      ++count;
    }
  SFA_CHECK(count > 0) << "softmax_cross_entropy: no contributing pixels";

  Tensor<T> out = Tensor<T>::zeros({1});
  out.data()[0] = static_cast<T>(total / static_cast<double>(count));

  if (detail::any_needs_grad<T>({&logits})) {
    auto xi = logits.impl();
    auto labs = labels.labels;  // copy; small relative to activations
    std::vector<uint8_t> keep_copy;
    if (keep) keep_copy = *keep;
    const bool has_keep = keep != nullptr;
    detail::record("softmax_cross_entropy", out, {&logits},
                   [xi, labs = std::move(labs), keep_copy = std::move(keep_copy), has_keep,
                    ignore_label, N, C, HW, count](const TensorData<T>& o) {
                     if (!xi->requires_grad) return;
                     xi->ensure_grad();
                     const T g = o.grad[0] / T(count);
                     const T* xp = xi->data.data();
                     for (int64_t n = 0; n < N; ++n)
                       for (int64_t i = 0; i < HW; ++i) {
                         const int lab = labs[static_cast<size_t>(n * HW + i)];
                         if (lab == ignore_label) continue;
                         if (has_keep && !keep_copy[static_cast<size_t>(n * HW + i)]) continue;
                         const int64_t base = n * C * HW + i;
                         T mx = xp[base];
                         for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xp[base + c * HW]);
                         T sum = 0;
                         for (int64_t c = 0; c < C; ++c) sum += std::exp(xp[base + c * HW] - mx);
                         const T inv = T(1) / sum;
                         for (int64_t c = 0; c < C; ++c) {
                           T p = std::exp(xp[base + c * HW] - mx) * inv;
                           if (c == lab) p -= T(1);
                           xi->grad[base + c * HW] += g * p;
                         }
                       }
                   });
  }
  return out;
}

}  // namespace sfanet

#endif
