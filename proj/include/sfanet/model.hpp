#ifndef SFANET_MODEL_HPP
#define SFANET_MODEL_HPP

#include <array>
#include <chrono>
#include <numeric>

#include "sfanet/blocks.hpp"
#include "sfanet/loss.hpp"
#include "sfanet/weights_io.hpp"

namespace sfanet {

struct SfanetConfig {
  int64_t num_classes = 19;
  double width = 1.0;
  std::array<double, 4> lambda = {0.0, 0.0, 1.0, 1.0};  // aux weights, stages 1..4

  void validate() const {
    SFA_CHECK(num_classes >= 2) << "need at least 2 classes, got " << num_classes;
    SFA_CHECK(width > 0.0) << "width multiplier must be positive";
    SFA_CHECK(std::llround(64.0 * width) >= 1) << "width " << width << " scales away all channels";
    for (double l : lambda) SFA_CHECK(l >= 0.0) << "negative aux weight";
  }
};

// Two 3x3 convs with BNs and a residual shortcut; a strided or
// channel-changing block projects the shortcut with a 1x1 conv + BN.
template <typename T>
struct BasicBlock {
  Conv2dLayer<T> conv1, conv2;
  BatchNormState<T> bn1, bn2;
  bool has_proj = false;
  Conv2dLayer<T> proj;
  BatchNormState<T> proj_bn;

  static BasicBlock make(int64_t in_c, int64_t out_c, int64_t stride, std::mt19937_64& rng) {
    BasicBlock b;
    b.conv1 = Conv2dLayer<T>::make(ConvSpec{in_c, out_c, 3, 3, stride, 1, 1, 1, false}, rng);
    b.bn1 = BatchNormState<T>::make(out_c);
    b.conv2 = Conv2dLayer<T>::make(ConvSpec{out_c, out_c, 3, 3, 1, 1, 1, 1, false}, rng);
    b.bn2 = BatchNormState<T>::make(out_c);
    b.has_proj = stride != 1 || in_c != out_c;
    if (b.has_proj) {
      b.proj = Conv2dLayer<T>::make(ConvSpec{in_c, out_c, 1, 1, stride, 0, 1, 1, false}, rng);
      b.proj_bn = BatchNormState<T>::make(out_c);
    }
    return b;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> t = conv1.forward(x);
    if (!bn1.folded) t = batch_norm(t, bn1);
    t = conv2.forward(relu(t));
    if (!bn2.folded) t = batch_norm(t, bn2);
    Tensor<T> shortcut = x;
    if (has_proj) {
      shortcut = proj.forward(x);
      if (!proj_bn.folded) shortcut = batch_norm(shortcut, proj_bn);
    }
    return relu(add(t, shortcut));
  }

  void collect(const std::string& prefix, ParamList<T>* params, ParamList<T>* buffers,
               BnList<T>* bns) {
    conv1.collect(prefix + ".conv1", params, buffers, bns);
    detail::collect_bn_state(bn1, prefix + ".bn1", params, buffers, bns);
    conv2.collect(prefix + ".conv2", params, buffers, bns);
    detail::collect_bn_state(bn2, prefix + ".bn2", params, buffers, bns);
    if (has_proj) {
      proj.collect(prefix + ".proj", params, buffers, bns);
      detail::collect_bn_state(proj_bn, prefix + ".proj_bn", params, buffers, bns);
    }
  }

  void fold() {
    conv1.fold_bn(bn1);
    conv2.fold_bn(bn2);
    if (has_proj) proj.fold_bn(proj_bn);
  }
};

// One encoder resolution stage: two BasicBlocks, with SCA between them on the
// stages that downsample (2..4).
template <typename T>
struct EncoderStage {
  BasicBlock<T> block1, block2;
  std::optional<ScaBlock<T>> mid_sca;

  static EncoderStage make(int64_t in_c, int64_t out_c, int64_t stride, bool with_sca,
                           std::mt19937_64& rng) {
    EncoderStage s;
    s.block1 = BasicBlock<T>::make(in_c, out_c, stride, rng);
    if (with_sca) s.mid_sca = ScaBlock<T>::make(out_c, rng);
    s.block2 = BasicBlock<T>::make(out_c, out_c, 1, rng);
    return s;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> t = block1.forward(x);
    if (mid_sca) t = mid_sca->forward(t);
    return block2.forward(t);
  }

  void collect(const std::string& prefix, ParamList<T>* params, ParamList<T>* buffers,
               BnList<T>* bns) {
    block1.collect(prefix + ".block1", params, buffers, bns);
    if (mid_sca) mid_sca->collect(prefix + ".sca", params, buffers, bns);
    block2.collect(prefix + ".block2", params, buffers, bns);
  }

  void fold() {
    block1.fold();
    block2.fold();
  }
};

template <typename T>
struct EncoderFeatures {
  Tensor<T> r1, r2, r3, r4;  // 1/4, 1/8, 1/16, 1/32 of the input extents
};

template <typename T>
struct SegOutput {
  Tensor<T> principal;             // N x classes x H x W logits
  std::vector<Tensor<T>> aux;      // stage 1..4 logits; empty outside training
};

template <typename T>
class Sfanet {
 public:
  static Sfanet make(const SfanetConfig& cfg, uint64_t seed) {
    cfg.validate();
    Sfanet m;
    m.cfg_ = cfg;
    const int64_t c1 = std::llround(64.0 * cfg.width);
    const int64_t c2 = 2 * c1, c3 = 4 * c1, c4 = 8 * c1;
    m.channels_ = {c1, c2, c3, c4};
    std::mt19937_64 rng(seed);
    // construction order is fixed: it defines the init stream
    m.stem_ = CbrBlock<T>::make(3, c1, rng, /*stride=*/2);
    m.res_[0] = EncoderStage<T>::make(c1, c1, 1, /*with_sca=*/false, rng);
    m.res_[1] = EncoderStage<T>::make(c1, c2, 2, true, rng);
    m.res_[2] = EncoderStage<T>::make(c2, c3, 2, true, rng);
    m.res_[3] = EncoderStage<T>::make(c3, c4, 2, true, rng);
    m.halve_[0] = CbrBlock<T>::make(c2, c2 / 2, rng);
    m.halve_[1] = CbrBlock<T>::make(c3, c3 / 2, rng);
    m.halve_[2] = CbrBlock<T>::make(c4, c4 / 2, rng);
    m.sfa_[3] = SfaStage<T>::make(4, c4 / 2, c4, rng);
    m.sfa_[2] = SfaStage<T>::make(3, c3 / 2, c4 / 2, rng);
    m.sfa_[1] = SfaStage<T>::make(2, c2 / 2, c3 / 2, rng);
    m.sfa_[0] = SfaStage<T>::make(1, c1, c2 / 2, rng);
    m.head_ = SegHead<T>::make(2 * c1, cfg.num_classes, rng);
    const std::array<int64_t, 4> aux_c = {c1, c2 / 2, c3 / 2, c4 / 2};
    for (int i = 0; i < 4; ++i) m.aux_[i] = SegHead<T>::make(aux_c[i], cfg.num_classes, rng);
    return m;
  }

  const SfanetConfig& config() const { return cfg_; }
  const std::array<int64_t, 4>& stage_channels() const { return channels_; }
  Mode mode() const { return mode_; }
  bool folded() const { return folded_; }

  void set_mode(Mode m) {
    SFA_CHECK(!folded_ || m == Mode::kInfer) << "folded model cannot re-enter training";
    mode_ = m;
    BnList<T> bns;
    collect(nullptr, nullptr, &bns);
    for (BatchNormState<T>* bn : bns) bn->mode = m;
  }

  EncoderFeatures<T> encode(const Tensor<T>& x) {
    check_input(x);
    EncoderFeatures<T> f;
    Tensor<T> t = max_pool2d(stem_.forward(x), 3, 2, 1);
    f.r1 = res_[0].forward(t);
    f.r2 = res_[1].forward(f.r1);
    f.r3 = res_[2].forward(f.r2);
    f.r4 = res_[3].forward(f.r3);
    return f;
  }

  SegOutput<T> forward(const Tensor<T>& x) {
    check_input(x);
    const int64_t out_h = x.dim(2), out_w = x.dim(3);
    EncoderFeatures<T> f = encode(x);
    Tensor<T> y4 = sfa_[3].forward(halve_[2].forward(f.r4), global_avg_pool(f.r4));
    Tensor<T> y3 = sfa_[2].forward(halve_[1].forward(f.r3), y4);
    Tensor<T> y2 = sfa_[1].forward(halve_[0].forward(f.r2), y3);
    Tensor<T> y1 = sfa_[0].forward(f.r1, y2);
    SegOutput<T> out;
    out.principal = head_.forward(concat_channels(y1, f.r1), out_h, out_w);
    if (mode_ == Mode::kTrain) {
      std::array<Tensor<T>, 4> ys = {y1, y2, y3, y4};
      for (int i = 0; i < 4; ++i) out.aux.push_back(aux_[i].forward(ys[i], out_h, out_w));
    }
    return out;
  }

  void collect(ParamList<T>* params, ParamList<T>* buffers, BnList<T>* bns) {
    stem_.collect("stem", params, buffers, bns);
    for (int i = 0; i < 4; ++i)
      res_[i].collect("res" + std::to_string(i + 1), params, buffers, bns);
    for (int i = 0; i < 3; ++i)
      halve_[i].collect("halve" + std::to_string(i + 2), params, buffers, bns);
    for (int i = 0; i < 4; ++i)
      sfa_[i].collect("sfa" + std::to_string(i + 1), params, buffers, bns);
    head_.collect("head", params, buffers, bns);
    for (int i = 0; i < 4; ++i)
      aux_[i].collect("aux" + std::to_string(i + 1), params, buffers, bns);
  }

  void fold_batch_norm() {
    SFA_CHECK(mode_ == Mode::kInfer) << "fold_batch_norm requires inference mode";
    SFA_CHECK(!folded_) << "model already folded";
    stem_.fold();
    for (auto& r : res_) r.fold();
    for (auto& h : halve_) h.fold();
    for (auto& s : sfa_) s.fold();
    head_.fold();
    for (auto& a : aux_) a.fold();
    folded_ = true;
  }

  // structural access for audits and tests
  CbrBlock<T>& stem() { return stem_; }
  EncoderStage<T>& res(int i) { return res_.at(i - 1); }
  CbrBlock<T>& halve(int i) { return halve_.at(i - 2); }
  SfaStage<T>& sfa(int i) { return sfa_.at(i - 1); }
  SegHead<T>& head() { return head_; }
  SegHead<T>& aux_head(int i) { return aux_.at(i - 1); }

 private:
  void check_input(const Tensor<T>& x) const {
    SFA_CHECK(x.rank() == 4 && x.dim(1) == 3)
        << "expected N x 3 x H x W input, got " << shape_str(x.shape());
    SFA_CHECK(x.dim(2) % 32 == 0 && x.dim(3) % 32 == 0)
        << "input extents " << x.dim(2) << "x" << x.dim(3) << " must be divisible by 32";
  }

  SfanetConfig cfg_;
  std::array<int64_t, 4> channels_ = {};
  Mode mode_ = Mode::kTrain;
  bool folded_ = false;
  CbrBlock<T> stem_;
  std::array<EncoderStage<T>, 4> res_;
  std::array<CbrBlock<T>, 3> halve_;
  std::array<SfaStage<T>, 4> sfa_;
  SegHead<T> head_;
  std::array<SegHead<T>, 4> aux_;
};

// Scalar combination sum_i w_i * t_i accumulated in double so the logged
// value is the round-to-nearest of the exact weighted sum.
template <typename T>
Tensor<T> weighted_scalar_sum(const std::vector<Tensor<T>>& terms,
                              const std::vector<double>& weights) {
  SFA_CHECK(terms.size() == weights.size() && !terms.empty()) << "weighted sum arity mismatch";
  double acc = 0.0;
  for (size_t i = 0; i < terms.size(); ++i) {
    SFA_CHECK(terms[i].numel() == 1) << "weighted_scalar_sum needs scalar terms";
    acc += weights[i] * static_cast<double>(terms[i].item());
  }
  Tensor<T> out = Tensor<T>::from_data({1}, {static_cast<T>(acc)});
  bool needs = GradMode::enabled();
  if (needs) {
    needs = false;
    for (const auto& t : terms) needs = needs || t.requires_grad();
  }
  if (needs) {
    auto node = std::make_shared<GradNode<T>>();
    node->op = "weighted_scalar_sum";
    for (const auto& t : terms) node->inputs.push_back(t.impl());
    node->output = out.impl();
    std::vector<double> w = weights;
    node->backward_fn = [w](const TensorData<T>& o) {
      auto self = o.node;
      for (size_t i = 0; i < self->inputs.size(); ++i) {
        auto& in = self->inputs[i];
        if (!in->requires_grad) continue;
        in->ensure_grad();
        in->grad[0] += static_cast<T>(w[i]) * o.grad[0];
      }
    };
    out.impl()->node = std::move(node);
    out.impl()->requires_grad = true;
  }
  return out;
}

template <typename T>
struct LossBundle {
  Tensor<T> total;                 // scalar: principal + sum_i lambda_i * aux_i
  Tensor<T> principal;             // scalar
  std::vector<Tensor<T>> aux;      // four scalars, stages 1..4
  double exact_total = 0.0;        // the weighted sum before rounding to T
};

// Assembles the training objective. The principal term takes an optional
// pixel keep-mask (hard-example mining); aux terms are plain CE.
template <typename T>
LossBundle<T> total_loss(const SegOutput<T>& out, const LabelBatch& labels,
                         const std::array<double, 4>& lambda,
                         const std::vector<uint8_t>* principal_keep = nullptr) {
  SFA_CHECK(out.aux.size() == 4) << "total_loss needs the four aux outputs (training mode)";
  LossBundle<T> b;
  b.principal = softmax_cross_entropy(out.principal, labels, kIgnoreLabel, principal_keep);
  std::vector<Tensor<T>> terms = {b.principal};
  std::vector<double> weights = {1.0};
  for (int i = 0; i < 4; ++i) {
    b.aux.push_back(softmax_cross_entropy(out.aux[i], labels, kIgnoreLabel));
    terms.push_back(b.aux.back());
    weights.push_back(lambda[i]);
  }
  b.total = weighted_scalar_sum(terms, weights);
  for (size_t i = 0; i < terms.size(); ++i)
    b.exact_total += weights[i] * static_cast<double>(terms[i].item());
  return b;
}

struct BenchReport {
  int64_t iters = 0;
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double fps = 0.0;
  bool folded = false;
};

// Wall-clock single-image forward timing. Only meaningful (and only allowed)
// on a folded inference model.
template <typename T>
BenchReport bench_fps(Sfanet<T>& model, const Tensor<T>& input, int64_t iters) {
  SFA_CHECK(iters > 0) << "bench needs a positive iteration count";
  SFA_CHECK(model.folded()) << "bench requires a folded model (fold batch norm first)";
  SFA_CHECK(input.dim(0) == 1) << "bench times single-image forwards";
  NoGradGuard ng;
  std::vector<double> ms(static_cast<size_t>(iters));
  for (int64_t i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    SegOutput<T> out = model.forward(input);
    const auto t1 = std::chrono::steady_clock::now();
    SFA_CHECK(out.principal.all_finite()) << "non-finite logits during bench";
    ms[static_cast<size_t>(i)] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  BenchReport r;
  r.iters = iters;
  r.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(iters);
  std::sort(ms.begin(), ms.end());
  r.median_ms = iters % 2 == 1 ? ms[static_cast<size_t>(iters / 2)]
                               : 0.5 * (ms[static_cast<size_t>(iters / 2 - 1)] +
                                        ms[static_cast<size_t>(iters / 2)]);
  r.fps = r.mean_ms > 0.0 ? 1000.0 / r.mean_ms : 0.0;
  r.folded = model.folded();
  return r;
}

template <typename T>
int64_t count_parameters(Sfanet<T>& model) {
  ParamList<T> params;
  model.collect(&params, nullptr, nullptr);
  return param_count(params);
}

// Snapshot every parameter and BN buffer into a named record map.
template <typename T>
WeightsMap model_weights(Sfanet<T>& model) {
  ParamList<T> params, buffers;
  model.collect(&params, &buffers, nullptr);
  WeightsMap map;
  auto put = [&](const ParamInfo<T>& p) {
    TensorBlob blob;
    blob.shape = p.tensor.shape();
    if constexpr (std::is_same_v<T, float>) {
      blob.tag = DtypeTag::kF32;
      blob.f32 = p.tensor.vec();
    } else {
      blob.tag = DtypeTag::kF64;
      blob.f64.assign(p.tensor.vec().begin(), p.tensor.vec().end());
    }
    map.emplace_back(p.name, std::move(blob));
  };
  for (const auto& p : params) put(p);
  for (const auto& p : buffers) put(p);
  return map;
}

// Loads parameters and buffers by name with strict shape checks. Records the
// model does not own (optimizer state, metadata) are ignored.
template <typename T>
void load_model_weights(Sfanet<T>& model, const WeightsMap& map) {
  ParamList<T> params, buffers;
  model.collect(&params, &buffers, nullptr);
  ParamList<T> all = params;
  all.insert(all.end(), buffers.begin(), buffers.end());
  for (auto& p : all) {
    const TensorBlob* blob = find_weight(map, p.name);
    SFA_CHECK(blob != nullptr) << "checkpoint is missing tensor '" << p.name << "'";
    SFA_CHECK(blob->shape == p.tensor.shape())
        << "checkpoint tensor '" << p.name << "' has shape " << shape_str(blob->shape)
        << ", model expects " << shape_str(p.tensor.shape());
    T* dst = p.tensor.data();
    if (blob->tag == DtypeTag::kF32) {
      for (int64_t i = 0; i < p.tensor.numel(); ++i)
        dst[i] = static_cast<T>(blob->f32[static_cast<size_t>(i)]);
    } else {
      for (int64_t i = 0; i < p.tensor.numel(); ++i)
        dst[i] = static_cast<T>(blob->f64[static_cast<size_t>(i)]);
    }
  }
}

}  // namespace sfanet

#endif
