#ifndef SFANET_TRAIN_HPP
#define SFANET_TRAIN_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sfanet/labels.hpp"
#include "sfanet/loss.hpp"
#include "sfanet/metrics.hpp"
#include "sfanet/model.hpp"
#include "sfanet/netpbm.hpp"
#include "sfanet/resample.hpp"

namespace sfanet {

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

struct PolySchedule {
  double base_lr = 0.01;
  int64_t total_iters = 1;
  double power = 0.9;
  int64_t current_iter = 0;

  double lr_at(int64_t iter) const {
    SFA_CHECK(total_iters > 0) << "poly schedule needs total_iters > 0";
    SFA_CHECK(iter >= 0 && iter <= total_iters)
        << "poly lr iter " << iter << " outside [0," << total_iters << "]";
    const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(total_iters);
    return base_lr * std::pow(frac, power);
  }
};

inline double poly_lr(const PolySchedule& s, int64_t iter) { return s.lr_at(iter); }

// ---------------------------------------------------------------------------
// SGD with momentum and decoupled-per-parameter weight decay flags
// ---------------------------------------------------------------------------

// v <- mu*v + (g + wd*p); p <- p - lr*v. Decay applies only to parameters
// whose ParamInfo.decay flag is set (conv weights). Empty grads count as zero.
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(ParamList<T> params, double momentum = 0.9, double weight_decay = 5e-4)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (auto& p : params_) velocity_.push_back(Tensor<T>::zeros(p.tensor.shape()));
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step(double lr) {
    NoGradGuard ng;
    const T mu = static_cast<T>(momentum_);
    const T wd = static_cast<T>(weight_decay_);
    const T tlr = static_cast<T>(lr);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& info = params_[i];
      auto& p = info.tensor.vec();
      auto& v = velocity_[i].vec();
      const bool decays = info.decay && weight_decay_ != 0.0;
      if (!info.tensor.has_grad()) {
        if (!decays) {
          // No gradient and no decay: v <- mu*v, p unchanged by g.
          for (size_t j = 0; j < v.size(); ++j) {
            v[j] = mu * v[j];
            p[j] -= tlr * v[j];
          }
          continue;
        }
        for (size_t j = 0; j < v.size(); ++j) {
          v[j] = mu * v[j] + wd * p[j];
          p[j] -= tlr * v[j];
        }
        continue;
      }
      const auto& g = info.tensor.grad_vec();
      for (size_t j = 0; j < g.size(); ++j) {
        SFA_CHECK(std::isfinite(static_cast<double>(g[j])))
            << "non-finite gradient in " << info.name << " at index " << j;
        T eff = g[j];
        if (decays) eff += wd * p[j];
        v[j] = mu * v[j] + eff;
        p[j] -= tlr * v[j];
      }
    }
  }

  const ParamList<T>& params() const { return params_; }
  ParamList<T>& params() { return params_; }
  std::vector<Tensor<T>>& velocities() { return velocity_; }
  const std::vector<Tensor<T>>& velocities() const { return velocity_; }
  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }

 private:
  ParamList<T> params_;
  std::vector<Tensor<T>> velocity_;
  double momentum_;
  double weight_decay_;
};

// ---------------------------------------------------------------------------
// OHEM cross-entropy
// ---------------------------------------------------------------------------

struct OhemConfig {
  double theta = 0.7;    // true-class probability threshold
  int64_t min_kept = 1;  // floor on the kept-pixel count (capped at valid count)
};

// Keep mask over the flattened n*h*w pixels: pixels with true-class softmax
// probability < theta are kept; if fewer than min_kept qualify, the hardest
// valid pixels (lowest probability, index as tie-break) fill the quota.
// theta >= 1 keeps every valid pixel, which makes the theta=1 case equal plain
// mean cross-entropy identically rather than up to float rounding.
template <typename T>
std::vector<uint8_t> ohem_keep_mask(const Tensor<T>& logits, const LabelBatch& labels,
                                    const OhemConfig& cfg) {
  NoGradGuard ng;
  const std::vector<T> probs = true_class_probs(logits, labels);
  const int64_t total = labels.numel();
  std::vector<uint8_t> keep(static_cast<size_t>(total), 0);
  int64_t valid = 0, below = 0;
  for (int64_t i = 0; i < total; ++i) {
    const T p = probs[static_cast<size_t>(i)];
    if (p < T(0)) continue;  // ignored pixel
    SFA_CHECK(std::isfinite(static_cast<double>(p)))
        << "ohem: non-finite class probability at pixel " << i << " (diverged forward pass?)";
    ++valid;
    if (static_cast<double>(p) < cfg.theta) ++below;
  }
  SFA_CHECK(valid > 0) << "ohem: no valid pixels";
  if (cfg.theta >= 1.0 || below >= std::max<int64_t>(cfg.min_kept, 1)) {
    if (cfg.theta >= 1.0) {
      for (int64_t i = 0; i < total; ++i)
        if (probs[static_cast<size_t>(i)] >= T(0)) keep[static_cast<size_t>(i)] = 1;
    } else {
      for (int64_t i = 0; i < total; ++i)
        if (probs[static_cast<size_t>(i)] >= T(0) &&
            static_cast<double>(probs[static_cast<size_t>(i)]) < cfg.theta)
          keep[static_cast<size_t>(i)] = 1;
    }
    return keep;
  }
  // Fallback: keep the min_kept hardest valid pixels.
  std::vector<int64_t> order;
  order.reserve(static_cast<size_t>(valid));
  for (int64_t i = 0; i < total; ++i)
    if (probs[static_cast<size_t>(i)] >= T(0)) order.push_back(i);
  const int64_t want = std::min<int64_t>(std::max<int64_t>(cfg.min_kept, 1), valid);
  std::nth_element(order.begin(), order.begin() + (want - 1), order.end(),
                   [&](int64_t a, int64_t b) {
                     const T pa = probs[static_cast<size_t>(a)], pb = probs[static_cast<size_t>(b)];
                     if (pa != pb) return pa < pb;
                     return a < b;
                   });
  for (int64_t k = 0; k < want; ++k) keep[static_cast<size_t>(order[static_cast<size_t>(k)])] = 1;
  return keep;
}

template <typename T>
Tensor<T> ohem_cross_entropy(const Tensor<T>& logits, const LabelBatch& labels,
                             const OhemConfig& cfg) {
  const std::vector<uint8_t> keep = ohem_keep_mask(logits, labels, cfg);
  return softmax_cross_entropy(logits, labels, kIgnoreLabel, &keep);
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentationConfig {
  double flip_prob = 0.5;
  double scale_min = 0.5;
  double scale_max = 2.0;
  int64_t crop_h = 64;
  int64_t crop_w = 64;
  std::array<float, 3> mean = {0.f, 0.f, 0.f};  // per-channel, [0,1] units
};

// The resolved random draw, separated from sampling so tests can pin it.
struct AugmentDraw {
  bool flip = false;
  double scale = 1.0;
  int64_t off_y = 0;  // crop origin in the scaled image (may be negative: padding)
  int64_t off_x = 0;
};

inline int64_t scaled_extent(int64_t extent, double scale) {
  return std::max<int64_t>(1, std::llround(static_cast<double>(extent) * scale));
}

inline AugmentDraw sample_augment(const AugmentationConfig& cfg, int64_t h, int64_t w,
                                  std::mt19937_64& rng) {
  AugmentDraw d;
  d.flip = draw_unit(rng) < cfg.flip_prob;
  d.scale = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * draw_unit(rng);
  const int64_t sh = scaled_extent(h, d.scale);
  const int64_t sw = scaled_extent(w, d.scale);
  // When the scaled image is smaller than the crop, negative offsets slide the
  // content inside the padded window; the image always stays fully visible.
  d.off_y = draw_int(rng, std::min<int64_t>(0, sh - cfg.crop_h),
                     std::max<int64_t>(0, sh - cfg.crop_h));
  d.off_x = draw_int(rng, std::min<int64_t>(0, sw - cfg.crop_w),
                     std::max<int64_t>(0, sw - cfg.crop_w));
  return d;
}

namespace detail {

// Nearest-neighbor label resize with the same half-pixel source mapping as the
// bilinear image path: src index = floor((d+0.5)*in/out), clamped.
inline LabelMap nearest_resize_labels(const LabelMap& in, int64_t out_h, int64_t out_w) {
  if (in.h == out_h && in.w == out_w) return in;
  LabelMap out(out_h, out_w);
  const double ry = static_cast<double>(in.h) / static_cast<double>(out_h);
  const double rx = static_cast<double>(in.w) / static_cast<double>(out_w);
  for (int64_t y = 0; y < out_h; ++y) {
    const int64_t sy =
        std::min<int64_t>(in.h - 1, static_cast<int64_t>((static_cast<double>(y) + 0.5) * ry));
    for (int64_t x = 0; x < out_w; ++x) {
      const int64_t sx =
          std::min<int64_t>(in.w - 1, static_cast<int64_t>((static_cast<double>(x) + 0.5) * rx));
      out.at(y, x) = in.at(sy, sx);
    }
  }
  return out;
}

}  // namespace detail

// Mean subtraction, then flip / bilinear scale / crop with the given draw.
// image is (3,H,W) in [0,1]; out-of-image crop regions become 0 for the image
// (the mean, in pre-subtraction units) and the ignore label for the mask.
template <typename T>
std::pair<Tensor<T>, LabelMap> augment(const Tensor<T>& image, const LabelMap& labels,
                                       const AugmentationConfig& cfg, const AugmentDraw& draw) {
  NoGradGuard ng;
  SFA_CHECK(image.rank() == 3 && image.dim(0) == 3)
      << "augment expects a (3,H,W) image, got " << shape_str(image.shape());
  const int64_t h = image.dim(1), w = image.dim(2);
  SFA_CHECK(h == labels.h && w == labels.w)
      << "augment: image " << h << "x" << w << " vs labels " << labels.h << "x" << labels.w;
  SFA_CHECK(cfg.crop_h > 0 && cfg.crop_w > 0)
      << "augment: bad crop " << cfg.crop_h << "x" << cfg.crop_w;

  Tensor<T> work = Tensor<T>::zeros({1, 3, h, w});
  {
    const T* src = image.data();
    T* dst = work.data();
    for (int c = 0; c < 3; ++c) {
      const T m = static_cast<T>(cfg.mean[static_cast<size_t>(c)]);
      const int64_t base = c * h * w;
      if (draw.flip) {
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x)
            dst[base + y * w + x] = src[base + y * w + (w - 1 - x)] - m;
      } else {
        for (int64_t i = 0; i < h * w; ++i) dst[base + i] = src[base + i] - m;
      }
    }
  }
  LabelMap lab = labels;
  if (draw.flip) {
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w / 2; ++x) std::swap(lab.at(y, x), lab.at(y, w - 1 - x));
  }

  const int64_t sh = scaled_extent(h, draw.scale);
  const int64_t sw = scaled_extent(w, draw.scale);
  Tensor<T> scaled = bilinear_resize(work, sh, sw);
  lab = detail::nearest_resize_labels(lab, sh, sw);

  Tensor<T> out_img = Tensor<T>::zeros({3, cfg.crop_h, cfg.crop_w});
  LabelMap out_lab(cfg.crop_h, cfg.crop_w);
  std::fill(out_lab.labels.begin(), out_lab.labels.end(),
            static_cast<uint8_t>(kIgnoreLabel));
  const int64_t y_lo = std::max<int64_t>(0, -draw.off_y);
  const int64_t y_hi = std::min<int64_t>(cfg.crop_h, sh - draw.off_y);
  const int64_t x_lo = std::max<int64_t>(0, -draw.off_x);
  const int64_t x_hi = std::min<int64_t>(cfg.crop_w, sw - draw.off_x);
  const T* sp = scaled.data();
  T* op = out_img.data();
  for (int c = 0; c < 3; ++c) {
    for (int64_t y = y_lo; y < y_hi; ++y) {
      const T* srow = sp + (c * sh + (y + draw.off_y)) * sw + (x_lo + draw.off_x);
      T* orow = op + (c * cfg.crop_h + y) * cfg.crop_w + x_lo;
      std::copy(srow, srow + (x_hi - x_lo), orow);
    }
  }
  for (int64_t y = y_lo; y < y_hi; ++y)
    for (int64_t x = x_lo; x < x_hi; ++x)
      out_lab.at(y, x) = lab.at(y + draw.off_y, x + draw.off_x);
  return {std::move(out_img), std::move(out_lab)};
}

template <typename T>
std::pair<Tensor<T>, LabelMap> augment(const Tensor<T>& image, const LabelMap& labels,
                                       const AugmentationConfig& cfg, std::mt19937_64& rng) {
  return augment(image, labels, cfg, sample_augment(cfg, image.dim(1), image.dim(2), rng));
}

// ---------------------------------------------------------------------------
// Data plumbing
// ---------------------------------------------------------------------------

// Planar (3,H,W) tensor in [0,1] from an interleaved 8-bit image.
template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img) {
  SFA_CHECK(img.channels == 3) << "image_to_tensor expects RGB, got " << img.channels
                               << " channels";
  Tensor<T> out = Tensor<T>::zeros({3, img.h, img.w});
  T* dst = out.data();
  const int64_t plane = img.h * img.w;
  for (int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      dst[c * plane + i] = static_cast<T>(img.pixels[static_cast<size_t>(i * 3 + c)]) / T(255);
  return out;
}

template <typename T>
void subtract_mean(Tensor<T>& chw, const std::array<float, 3>& mean) {
  SFA_CHECK(chw.rank() == 3 && chw.dim(0) == 3)
      << "subtract_mean expects (3,H,W), got " << shape_str(chw.shape());
  const int64_t plane = chw.dim(1) * chw.dim(2);
  T* p = chw.data();
  for (int c = 0; c < 3; ++c) {
    const T m = static_cast<T>(mean[static_cast<size_t>(c)]);
    for (int64_t i = 0; i < plane; ++i) p[c * plane + i] -= m;
  }
}

// Per-pixel argmax over channel logits; ties go to the lowest class index.
template <typename T>
LabelBatch argmax_labels(const Tensor<T>& logits) {
  SFA_CHECK(logits.rank() == 4) << "argmax_labels expects NCHW logits";
  const int64_t n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  LabelBatch out(n, h, w);
  const T* p = logits.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const int64_t base = ((i * c) * h + y) * w + x;
        int best = 0;
        T best_v = p[base];
        for (int64_t k = 1; k < c; ++k) {
          const T v = p[base + k * h * w];
          if (v > best_v) {
            best_v = v;
            best = static_cast<int>(k);
          }
        }
        out.at(i, y, x) = static_cast<uint8_t>(best);
      }
  return out;
}

// One training/validation sample: planar [0,1] image plus its label mask.
struct Sample {
  TensorF image;  // (3,H,W)
  LabelMap labels;
};
using SampleSet = std::vector<Sample>;

// Held-out evaluation: infer-mode forward, argmax, confusion over the set.
// Restores the model's mode before returning.
inline double evaluate_miou(Sfanet<float>& model, const SampleSet& data,
                            const std::array<float, 3>& mean) {
  SFA_CHECK(!data.empty()) << "evaluate_miou: empty sample set";
  const Mode prev = model.mode();
  if (!model.folded()) model.set_mode(Mode::kInfer);
  ConfusionMatrix cm(static_cast<int>(model.config().num_classes));
  {
    NoGradGuard ng;
    for (const Sample& s : data) {
      TensorF x = s.image.clone();
      subtract_mean(x, mean);
      TensorF batch = Tensor<float>::zeros({1, 3, x.dim(1), x.dim(2)});
      std::copy(x.data(), x.data() + x.numel(), batch.data());
      SegOutput<float> out = model.forward(batch);
      LabelBatch pred = argmax_labels(out.principal);
      cm.add(s.labels.labels.data(), pred.labels.data(), pred.numel());
    }
  }
  if (!model.folded()) model.set_mode(prev);
  return cm.miou();
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  PolySchedule schedule;
  int64_t batch_size = 8;
  OhemConfig ohem;
  AugmentationConfig aug;
  uint64_t seed = 1;
  int64_t start_iter = 0;   // resume point; schedule continues from here
  int64_t val_every = 0;    // 0 = no periodic validation
  int64_t checkpoint_every = 0;  // 0 = max(1, total_iters/20)
};

struct TrainRecord {
  int64_t iter = 0;
  double lr = 0;
  double total = 0;  // exact sum of the parts below
  double principal = 0;
  std::array<double, 4> aux = {0, 0, 0, 0};
};

struct TrainState {
  std::vector<TrainRecord> history;
  std::vector<std::pair<int64_t, double>> val_miou;
};

struct TrainHooks {
  std::function<void(const std::string&)> log_line;    // every emitted log line
  std::function<void(int64_t)> checkpoint;             // called at cadence and at the end
};

inline std::string format_train_record(const TrainRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "step iter=%lld lr=%.12g total=%.12g principal=%.12g "
                "aux1=%.12g aux2=%.12g aux3=%.12g aux4=%.12g",
                static_cast<long long>(r.iter), r.lr, r.total, r.principal, r.aux[0], r.aux[1],
                r.aux[2], r.aux[3]);
  return buf;
}

// Per iteration: sample a batch, augment, forward in train mode, OHEM loss on
// the principal head plus plain CE on the auxiliary heads, backward, SGD step
// at the poly rate. All random draws come from one seeded stream, so a fixed
// seed reproduces the loss trajectory bit-for-bit.
inline TrainState train_loop(Sfanet<float>& model, SgdOptimizer<float>& opt,
                             const SampleSet& train_data, const SampleSet& val_data,
                             const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  SFA_CHECK(!train_data.empty()) << "train_loop: empty training set";
  SFA_CHECK(cfg.batch_size > 0) << "train_loop: batch_size must be positive";
  SFA_CHECK(cfg.schedule.total_iters > cfg.start_iter)
      << "train_loop: start iter " << cfg.start_iter << " >= total "
      << cfg.schedule.total_iters;
  model.set_mode(Mode::kTrain);

  const std::array<double, 4>& lambda = model.config().lambda;
  const int64_t ckpt_every =
      cfg.checkpoint_every > 0 ? cfg.checkpoint_every
                               : std::max<int64_t>(1, cfg.schedule.total_iters / 20);
  std::mt19937_64 rng(splitmix64(cfg.seed));

  TrainState state;
  state.history.reserve(static_cast<size_t>(cfg.schedule.total_iters - cfg.start_iter));
  const int64_t ch = cfg.aug.crop_h, cw = cfg.aug.crop_w;

  for (int64_t iter = cfg.start_iter; iter < cfg.schedule.total_iters; ++iter) {
    TensorF batch = Tensor<float>::zeros({cfg.batch_size, 3, ch, cw});
    LabelBatch labels(cfg.batch_size, ch, cw);
    for (int64_t b = 0; b < cfg.batch_size; ++b) {
      const int64_t idx = draw_int(rng, 0, static_cast<int64_t>(train_data.size()) - 1);
      const Sample& s = train_data[static_cast<size_t>(idx)];
      auto [img, lab] = augment(s.image, s.labels, cfg.aug, rng);
      std::copy(img.data(), img.data() + img.numel(), batch.data() + b * 3 * ch * cw);
      std::copy(lab.labels.begin(), lab.labels.end(),
                labels.labels.begin() + static_cast<size_t>(b * ch * cw));
    }

    SegOutput<float> out = model.forward(batch);
    const std::vector<uint8_t> keep = ohem_keep_mask(out.principal, labels, cfg.ohem);
    LossBundle<float> loss = total_loss(out, labels, lambda, &keep);

    TrainRecord rec;
    rec.iter = iter;
    rec.lr = cfg.schedule.lr_at(iter);
    rec.total = loss.exact_total;
    rec.principal = static_cast<double>(loss.principal.item());
    for (size_t i = 0; i < loss.aux.size() && i < 4; ++i)
      rec.aux[i] = static_cast<double>(loss.aux[i].item());

    if (!std::isfinite(rec.total)) {
      throw Error("training diverged at iter " + std::to_string(iter) + ": " +
                  format_train_record(rec));
    }

    opt.zero_grad();
    loss.total.backward();
    opt.step(rec.lr);

    state.history.push_back(rec);
    if (hooks.log_line) hooks.log_line(format_train_record(rec));

    const int64_t done = iter + 1;
    if (cfg.val_every > 0 && !val_data.empty() &&
        (done % cfg.val_every == 0 || done == cfg.schedule.total_iters)) {
      const double miou = evaluate_miou(model, val_data, cfg.aug.mean);
      state.val_miou.emplace_back(done, miou);
      model.set_mode(Mode::kTrain);
      if (hooks.log_line) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "val iter=%lld miou=%.6f", static_cast<long long>(done),
                      miou);
        hooks.log_line(buf);
      }
    }
    if (hooks.checkpoint && (done % ckpt_every == 0 || done == cfg.schedule.total_iters)) {
      hooks.checkpoint(done);
    }
  }
  return state;
}

}  // namespace sfanet

#endif
