#ifndef SFANET_BLOCKS_HPP
#define SFANET_BLOCKS_HPP

#include <optional>
#include <string>

#include "sfanet/conv.hpp"
#include "sfanet/ops.hpp"
#include "sfanet/resample.hpp"

namespace sfanet {

template <typename T>
struct ParamInfo {
  std::string name;
  Tensor<T> tensor;
  bool decay = false;  // weight decay applies to conv weights only
};

template <typename T>
using ParamList = std::vector<ParamInfo<T>>;

template <typename T>
using BnList = std::vector<BatchNormState<T>*>;

namespace detail {

template <typename T>
void collect_bn_state(BatchNormState<T>& bn, const std::string& prefix, ParamList<T>* params,
                      ParamList<T>* buffers, BnList<T>* bns) {
  if (params && !bn.folded) {
    params->push_back({prefix + ".gamma", bn.gamma, false});
    params->push_back({prefix + ".beta", bn.beta, false});
  }
  if (buffers && !bn.folded) {
    buffers->push_back({prefix + ".running_mean", bn.running_mean, false});
    buffers->push_back({prefix + ".running_var", bn.running_var, false});
  }
  if (bns) bns->push_back(&bn);
}

}  // namespace detail

// Convolution with owned parameters. He-normal weight init (zero_init makes
// the layer start as a no-op producer, used for the FAA flow predictor).
template <typename T>
struct Conv2dLayer {
  ConvSpec spec;
  Tensor<T> weight;
  Tensor<T> bias;

  static Conv2dLayer make(ConvSpec sp, std::mt19937_64& rng, bool zero_init = false) {
    sp.validate();
    Conv2dLayer layer;
    layer.spec = sp;
    layer.weight = Tensor<T>::zeros({sp.out_channels, sp.in_channels / sp.groups, sp.kh, sp.kw});
    if (!zero_init) {
      const double fan_in =
          static_cast<double>(sp.in_channels / sp.groups) * static_cast<double>(sp.kh * sp.kw);
      fill_normal(layer.weight, std::sqrt(2.0 / fan_in), rng);
    }
    layer.weight.set_requires_grad(true);
    if (sp.has_bias) layer.bias = Tensor<T>::zeros({sp.out_channels}).set_requires_grad(true);
    return layer;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return spec.has_bias ? conv2d(x, weight, bias, spec) : conv2d(x, weight, spec);
  }

  void collect(const std::string& prefix, ParamList<T>* params, ParamList<T>*, BnList<T>*) {
    if (!params) return;
    params->push_back({prefix + ".weight", weight, true});
    if (spec.has_bias) params->push_back({prefix + ".bias", bias, false});
  }

  // Absorbs an inference-mode BN affine into this conv; grows a bias if absent.
  void fold_bn(BatchNormState<T>& bn) {
    SFA_CHECK(!bn.folded) << "BN state already folded";
    SFA_CHECK(bn.channels() == spec.out_channels) << "fold_bn: channel mismatch";
    if (!spec.has_bias) {
      spec.has_bias = true;
      bias = Tensor<T>::zeros({spec.out_channels}).set_requires_grad(true);
    }
    // constants are formed in double so each folded weight carries a single
    // rounding, keeping the folded network close to the original
    const int64_t per_out = weight.numel() / spec.out_channels;
    for (int64_t co = 0; co < spec.out_channels; ++co) {
      const double scale = static_cast<double>(bn.gamma.data()[co]) /
                           std::sqrt(static_cast<double>(bn.running_var.data()[co]) +
                                     static_cast<double>(bn.eps));
      T* w = weight.data() + co * per_out;
      for (int64_t i = 0; i < per_out; ++i)
        w[i] = static_cast<T>(static_cast<double>(w[i]) * scale);
      bias.data()[co] = static_cast<T>(
          static_cast<double>(bn.beta.data()[co]) +
          (static_cast<double>(bias.data()[co]) -
           static_cast<double>(bn.running_mean.data()[co])) *
              scale);
    }
    bn.folded = true;
  }
};

// conv3x3 -> BN -> ReLU. Stride 2 gives the encoder stem its downsample.
template <typename T>
struct CbrBlock {
  Conv2dLayer<T> conv;
  BatchNormState<T> bn;

  static CbrBlock make(int64_t in_c, int64_t out_c, std::mt19937_64& rng, int64_t stride = 1,
                       int64_t kernel = 3) {
    CbrBlock b;
    b.conv = Conv2dLayer<T>::make(
        ConvSpec{in_c, out_c, kernel, kernel, stride, (kernel - 1) / 2, 1, 1, false}, rng);
    b.bn = BatchNormState<T>::make(out_c);
    return b;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> y = conv.forward(x);
    if (!bn.folded) y = batch_norm(y, bn);
    return relu(y);
  }

  void collect(const std::string& prefix, ParamList<T>* params, ParamList<T>* buffers,
               BnList<T>* bns) {
    conv.collect(prefix + ".conv", params, buffers, bns);
    detail::collect_bn_state(bn, prefix + ".bn", params, buffers, bns);
  }

  void fold() { conv.fold_bn(bn); }
};

// Adaptive ECA kernel extent: nearest odd integer to log2(C)/2 + 1/2
// (ties round up), never below 1.
inline int64_t eca_kernel_size(int64_t channels) {
  SFA_CHECK(channels >= 1) << "eca_kernel_size: bad channel count " << channels;
  const double t = std::log2(static_cast<double>(channels)) / 2.0 + 0.5;
  int64_t k = static_cast<int64_t>(std::floor(t));
  if (k < 1) k = 1;
  return k % 2 == 1 ? k : k + 1;
}

// Spatial-channel attention: x is rescaled per channel by a sigmoid gate from
// GAP + 1-D channel conv, and per pixel by a sigmoid gate from a 1x1 conv;
// the two rescaled copies are summed. All-zero gate parameters make both
// gates 0.5 and the block an identity.
template <typename T>
struct ScaBlock {
  int64_t channels = 0;
  Tensor<T> channel_kernel;     // 1-D, odd extent, no bias
  Conv2dLayer<T> spatial_conv;  // 1x1, C -> 1, with bias

  static ScaBlock make(int64_t channels, std::mt19937_64& rng) {
    ScaBlock b;
    b.channels = channels;
    const int64_t k = eca_kernel_size(channels);
    b.channel_kernel = Tensor<T>::zeros({k});
    fill_normal(b.channel_kernel, 1.0 / std::sqrt(static_cast<double>(k)), rng);
    b.channel_kernel.set_requires_grad(true);
    b.spatial_conv =
        Conv2dLayer<T>::make(ConvSpec{channels, 1, 1, 1, 1, 0, 1, 1, true}, rng);
    return b;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    SFA_CHECK(x.dim(1) == channels) << "sca: input has " << x.dim(1) << " channels, block owns "
                                    << channels;
    Tensor<T> ch_gate = sigmoid(conv1d_channels(global_avg_pool(x), channel_kernel));
    Tensor<T> sp_gate = sigmoid(spatial_conv.forward(x));
    return add(mul_broadcast(x, ch_gate), mul_broadcast(x, sp_gate));
  }

  void collect(const std::string& prefix, ParamList<T>* params, ParamList<T>* buffers,
               BnList<T>* bns) {
    if (params) params->push_back({prefix + ".channel_kernel", channel_kernel, false});
    spatial_conv.collect(prefix + ".spatial", params, buffers, bns);
  }
};

// Stage-specific residual enhancement. Kinds 3 and 4 run two depthwise
// separable convs (dilations (1,1) and (2,5) respectively), concatenate the
// first conv's pre-BN output with the second's, fuse with a 1x1 conv + BN,
// and re-enter the residual. Kind 2 is two plain 3x3 convs with BNs and no
// activation in between.
template <typename T>
struct FebBlock {
  int kind = 0;  // 2, 3, or 4
  // kinds 3/4
  Conv2dLayer<T> dw1, pw1, dw2, pw2, fuse;
  BatchNormState<T> bn_mid, bn_out;
  // kind 2
  Conv2dLayer<T> conv1, conv2;
  BatchNormState<T> bn1, bn2;

  static FebBlock make(int kind, int64_t channels, std::mt19937_64& rng) {
    SFA_CHECK(kind >= 2 && kind <= 4) << "feb kind " << kind << " not in {2,3,4}";
    FebBlock b;
    b.kind = kind;
    if (kind == 2) {
      b.conv1 = Conv2dLayer<T>::make(ConvSpec{channels, channels, 3, 3, 1, 1, 1, 1, false}, rng);
      b.conv2 = Conv2dLayer<T>::make(ConvSpec{channels, channels, 3, 3, 1, 1, 1, 1, false}, rng);
      b.bn1 = BatchNormState<T>::make(channels);
      b.bn2 = BatchNormState<T>::make(channels);
    } else {
      const int64_t d1 = kind == 4 ? 2 : 1;
      const int64_t d2 = kind == 4 ? 5 : 1;
      b.dw1 = Conv2dLayer<T>::make(
          ConvSpec{channels, channels, 3, 3, 1, d1, d1, channels, false}, rng);
      b.pw1 = Conv2dLayer<T>::make(ConvSpec{channels, channels, 1, 1, 1, 0, 1, 1, false}, rng);
      b.dw2 = Conv2dLayer<T>::make(
          ConvSpec{channels, channels, 3, 3, 1, d2, d2, channels, false}, rng);
      b.pw2 = Conv2dLayer<T>::make(ConvSpec{channels, channels, 1, 1, 1, 0, 1, 1, false}, rng);
      b.fuse =
          Conv2dLayer<T>::make(ConvSpec{2 * channels, channels, 1, 1, 1, 0, 1, 1, false}, rng);
      b.bn_mid = BatchNormState<T>::make(channels);
      b.bn_out = BatchNormState<T>::make(channels);
    }
    return b;
  }

  std::pair<int64_t, int64_t> dilations() const {
    if (kind == 4) return {2, 5};
    if (kind == 3) return {1, 1};
    return {1, 1};  // kind 2 uses standard convs
  }

  Tensor<T> forward(const Tensor<T>& x) {
    if (kind == 2) {
      Tensor<T> t = conv1.forward(x);
      if (!bn1.folded) t = batch_norm(t, bn1);
      t = conv2.forward(t);  // no activation between the two convs
      if (!bn2.folded) t = batch_norm(t, bn2);
      return relu(add(x, t));
    }
    Tensor<T> first = pw1.forward(dw1.forward(x));  // pre-BN branch kept for the concat
    Tensor<T> mid = bn_mid.folded ? first : batch_norm(first, bn_mid);
    Tensor<T> second = pw2.forward(dw2.forward(mid));
    Tensor<T> fused = fuse.forward(concat_channels(first, second));
    if (!bn_out.folded) fused = batch_norm(fused, bn_out);
    return relu(add(x, fused));
  }

  void collect(const std::string& prefix, ParamList<T>* params, ParamList<T>* buffers,
               BnList<T>* bns) {
    if (kind == 2) {
      conv1.collect(prefix + ".conv1", params, buffers, bns);
      detail::collect_bn_state(bn1, prefix + ".bn1", params, buffers, bns);
      conv2.collect(prefix + ".conv2", params, buffers, bns);
      detail::collect_bn_state(bn2, prefix + ".bn2", params, buffers, bns);
    } else {
      dw1.collect(prefix + ".dw1", params, buffers, bns);
      pw1.collect(prefix + ".pw1", params, buffers, bns);
      detail::collect_bn_state(bn_mid, prefix + ".bn_mid", params, buffers, bns);
      dw2.collect(prefix + ".dw2", params, buffers, bns);
      pw2.collect(prefix + ".pw2", params, buffers, bns);
      fuse.collect(prefix + ".fuse", params, buffers, bns);
      detail::collect_bn_state(bn_out, prefix + ".bn_out", params, buffers, bns);
    }
  }

  void fold() {
    if (kind == 2) {
      conv1.fold_bn(bn1);
      conv2.fold_bn(bn2);
      return;
    }
    // Folding bn_mid into pw1 changes what the concat tap sees (it used to
    // receive the pre-BN branch), so the fusion conv is rewritten to undo the
    // affine on its first input half: x = (a*x + b - b) / a.
    const int64_t c = pw1.spec.out_channels;
    std::vector<double> a(c), b(c);
    for (int64_t i = 0; i < c; ++i) {
      a[i] = static_cast<double>(bn_mid.gamma.data()[i]) /
             std::sqrt(static_cast<double>(bn_mid.running_var.data()[i]) +
                       static_cast<double>(bn_mid.eps));
      SFA_CHECK(a[i] != 0.0) << "fold: degenerate bn scale on channel " << i;
      b[i] = static_cast<double>(bn_mid.beta.data()[i]) -
             static_cast<double>(bn_mid.running_mean.data()[i]) * a[i];
    }
    pw1.fold_bn(bn_mid);
    fuse.fold_bn(bn_out);
    for (int64_t o = 0; o < fuse.spec.out_channels; ++o) {
      T* w = fuse.weight.data() + o * fuse.spec.in_channels;  // 1x1 kernel
      double adjust = 0.0;
      for (int64_t i = 0; i < c; ++i) {
        const double wi = static_cast<double>(w[i]) / a[i];
        w[i] = static_cast<T>(wi);
        adjust += wi * b[i];
      }
      fuse.bias.data()[o] = static_cast<T>(static_cast<double>(fuse.bias.data()[o]) - adjust);
    }
  }

  bool has_live_bn() const {
    if (kind == 2) return !bn1.folded || !bn2.folded;
    return !bn_mid.folded || !bn_out.folded;
  }
};

// Feature alignment and aggregation: a zero-initialized 3x3 conv on the
// concatenated pair predicts a 2-channel flow (so training starts at the
// no-warp identity), the low-res path is warped by it, summed with the high
// path, and the sum is refined by SCA.
template <typename T>
struct FaaBlock {
  int64_t channels = 0;
  Conv2dLayer<T> flow_conv;  // 2C -> 2, zero-initialized, with bias
  ScaBlock<T> sca;

  static FaaBlock make(int64_t channels, std::mt19937_64& rng) {
    FaaBlock b;
    b.channels = channels;
    b.flow_conv = Conv2dLayer<T>::make(
        ConvSpec{2 * channels, 2, 3, 3, 1, 1, 1, 1, true}, rng, /*zero_init=*/true);
    b.sca = ScaBlock<T>::make(channels, rng);
    return b;
  }

  Tensor<T> forward(const Tensor<T>& high, const Tensor<T>& low_resized) const {
    SFA_CHECK(high.shape() == low_resized.shape())
        << "faa: high " << shape_str(high.shape()) << " vs low " << shape_str(low_resized.shape());
    Tensor<T> flow = flow_conv.forward(concat_channels(high, low_resized));
    Tensor<T> warped = grid_sample_warp(low_resized, flow);
    return sca.forward(add(high, warped));
  }

  void collect(const std::string& prefix, ParamList<T>* params, ParamList<T>* buffers,
               BnList<T>* bns) {
    flow_conv.collect(prefix + ".flow", params, buffers, bns);
    sca.collect(prefix + ".sca", params, buffers, bns);
  }
};

// One decoder stage: enhance the high-resolution path (stage-specific FEB,
// absent for stage 1, then SCA), adapt the low-resolution path (CBR to the
// high channel count, bilinear resize to the high extents), then FAA.
template <typename T>
struct SfaStage {
  int index = 0;
  std::optional<FebBlock<T>> feb;
  ScaBlock<T> high_sca;
  CbrBlock<T> low_cbr;
  FaaBlock<T> faa;

  static SfaStage make(int index, int64_t high_channels, int64_t low_channels,
                       std::mt19937_64& rng) {
    SFA_CHECK(index >= 1 && index <= 4) << "sfa stage index " << index << " not in 1..4";
    SfaStage s;
    s.index = index;
    if (index >= 2) s.feb = FebBlock<T>::make(index, high_channels, rng);
    s.high_sca = ScaBlock<T>::make(high_channels, rng);
    s.low_cbr = CbrBlock<T>::make(low_channels, high_channels, rng);
    s.faa = FaaBlock<T>::make(high_channels, rng);
    return s;
  }

  Tensor<T> forward(const Tensor<T>& high, const Tensor<T>& low) {
    Tensor<T> h = feb ? feb->forward(high) : high;
    h = high_sca.forward(h);
    Tensor<T> l = low_cbr.forward(low);
    l = bilinear_resize(l, high.dim(2), high.dim(3));
    return faa.forward(h, l);
  }

  void collect(const std::string& prefix, ParamList<T>* params, ParamList<T>* buffers,
               BnList<T>* bns) {
    if (feb) feb->collect(prefix + ".feb", params, buffers, bns);
    high_sca.collect(prefix + ".sca", params, buffers, bns);
    low_cbr.collect(prefix + ".low_cbr", params, buffers, bns);
    faa.collect(prefix + ".faa", params, buffers, bns);
  }

  void fold() {
    if (feb) feb->fold();
    low_cbr.fold();
  }
};

// CBR down to the head width, 3x3 classifier to N channels, bilinear resize
// to the requested output extents. Emits raw logits.
template <typename T>
struct SegHead {
  static constexpr int64_t kHeadChannels = 64;
  CbrBlock<T> cbr;
  Conv2dLayer<T> classifier;

  static SegHead make(int64_t in_channels, int64_t num_classes, std::mt19937_64& rng) {
    SegHead h;
    h.cbr = CbrBlock<T>::make(in_channels, kHeadChannels, rng);
    h.classifier = Conv2dLayer<T>::make(
        ConvSpec{kHeadChannels, num_classes, 3, 3, 1, 1, 1, 1, true}, rng);
    return h;
  }

  Tensor<T> forward(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
    SFA_CHECK(out_h >= 1 && out_w >= 1) << "seg head: bad target extents " << out_h << "x"
                                        << out_w;
    return bilinear_resize(classifier.forward(cbr.forward(x)), out_h, out_w);
  }

  void collect(const std::string& prefix, ParamList<T>* params, ParamList<T>* buffers,
               BnList<T>* bns) {
    cbr.collect(prefix + ".cbr", params, buffers, bns);
    classifier.collect(prefix + ".classifier", params, buffers, bns);
  }

  void fold() { cbr.fold(); }
};

template <typename T>
int64_t param_count(const ParamList<T>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

}  // namespace sfanet

#endif
