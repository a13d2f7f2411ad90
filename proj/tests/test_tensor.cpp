#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "sfanet/conv.hpp"
#include "sfanet/gradcheck.hpp"
#include "sfanet/loss.hpp"
#include "sfanet/ops.hpp"
#include "sfanet/resample.hpp"
#include "test_util.hpp"

using namespace sfanet;
using sfanet::test::naive_conv2d;
using sfanet::test::rand_tensor;

// absolute-tolerance compare with visible operands on failure
#define CHECK_NEAR(a, b, tol)                                        \
  do {                                                               \
    const double got_ = static_cast<double>(a);                     \
    const double want_ = static_cast<double>(b);                    \
    CAPTURE(got_);                                                   \
    CAPTURE(want_);                                                  \
    CHECK(std::abs(got_ - want_) <= (tol));                          \
  } while (0)

namespace {

template <typename T>
void check_close(const std::vector<T>& got, const std::vector<T>& want, double tol) {
  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); ++i) {
    CAPTURE(i);
    CHECK_NEAR(got[i], want[i], tol);
  }
}

// Wraps a single-tensor op into the gradcheck harness with loss = sum(op(x)).
template <typename T, typename Fn>
double op_gradcheck(Tensor<T> x, Fn&& op, T eps = T(1e-5)) {
  x.set_requires_grad(true);
  auto report = finite_difference_check<T>(
      {{"x", x}}, [&] { return sum_all(op(x)); }, eps);
  return report.max_rel_err;
}

}  // namespace

TEST_CASE("tensor basics and invariants") {
  TensorF t = TensorF::zeros({2, 3, 4, 5});
  CHECK(t.numel() == 120);
  CHECK(t.rank() == 4);
  CHECK(t.dim(1) == 3);
  CHECK(t.all_finite());
  CHECK_THROWS_AS(TensorF::zeros({2, 0, 3}), Error);
  CHECK_THROWS_AS(TensorF::from_data({2, 2}, {1.f, 2.f, 3.f}), Error);
  t.data()[0] = std::numeric_limits<float>::infinity();
  CHECK(!t.all_finite());

  TensorF a = TensorF::from_data({2}, {1.f, 2.f});
  TensorF alias = a;  // shares payload
  TensorF deep = a.clone();
  alias.data()[0] = 7.f;
  CHECK(a.data()[0] == 7.f);
  CHECK(deep.data()[0] == 1.f);
}

TEST_CASE("backward basics: sum, square, fan-out accumulation") {
  // L = sum(x) -> grad all ones
  TensorD x = TensorD::from_data({2, 2}, {1, 2, 3, 4}).set_requires_grad(true);
  sum_all(x).backward();
  check_close(x.grad_vec(), {1, 1, 1, 1}, 0.0);

  // L = sum(x*x) -> grad 2x (elementwise product via mul_broadcast same-shape)
  TensorD y = TensorD::from_data({1, 1, 2, 2}, {1, -2, 3, 0.5}).set_requires_grad(true);
  sum_all(mul_broadcast(y, y)).backward();
  check_close(y.grad_vec(), {2, -4, 6, 1}, 1e-12);

  // fan-out: z used twice, grads accumulate additively
  TensorD w = TensorD::from_data({1, 1, 1, 3}, {1, 2, 3}).set_requires_grad(true);
  TensorD z = relu(w);
  add(sum_all(z), sum_all(z)).backward();
  check_close(w.grad_vec(), {2, 2, 2}, 0.0);

  CHECK_THROWS_AS(TensorD::from_data({2}, {1, 2}).set_requires_grad(true).backward(), Error);
}

TEST_CASE("conv2d output extents match the documented formula") {
  ConvSpec sp{1, 1, 3, 3, 2, 1, 1, 1, false};
  CHECK(sp.out_extent(9, 3) == 5);  // H=9,k=3,s=2,p=1 -> 5
  ConvSpec dil{1, 1, 3, 3, 1, 5, 5, 1, false};
  CHECK(dil.out_extent(16, 3) == 16);  // dilated shape-preserving conv
}

TEST_CASE("conv2d identity kernel and naive-oracle agreement") {
  std::mt19937_64 rng(42);
  // 1x1 depthwise identity: output == input
  TensorF x = rand_tensor<float>({2, 3, 5, 4}, rng);
  ConvSpec ident{3, 3, 1, 1, 1, 0, 1, 3, false};
  TensorF w = TensorF::filled({3, 1, 1, 1}, 1.f);
  TensorF out = conv2d(x, w, ident);
  CHECK(std::memcmp(out.data(), x.data(), sizeof(float) * x.numel()) == 0);

  // random geometries vs the straight-line reference
  struct Geo {
    int64_t cin, cout, k, stride, pad, dil, groups;
    bool bias;
  };
  for (const Geo g : {Geo{3, 4, 3, 1, 1, 1, 1, true}, Geo{4, 4, 3, 2, 1, 1, 2, false},
                      Geo{2, 2, 3, 1, 5, 5, 1, true}, Geo{4, 4, 3, 1, 2, 2, 4, false},
                      Geo{3, 5, 1, 1, 0, 1, 1, true}, Geo{2, 3, 3, 2, 0, 1, 1, false}}) {
    ConvSpec sp{g.cin, g.cout, g.k, g.k, g.stride, g.pad, g.dil, g.groups, g.bias};
    TensorF xi = rand_tensor<float>({2, g.cin, 9, 7}, rng);
    TensorF wi = rand_tensor<float>({g.cout, g.cin / g.groups, g.k, g.k}, rng);
    TensorF bi = rand_tensor<float>({g.cout}, rng);
    TensorF got = g.bias ? conv2d(xi, wi, bi, sp) : conv2d(xi, wi, sp);
    std::vector<float> bias_vec = bi.vec();
    auto want = naive_conv2d(xi.vec(), wi.vec(), g.bias ? &bias_vec : nullptr, 2, g.cin, 9, 7, sp);
    check_close(got.vec(), want, 1e-4);
  }

  // shape errors
  ConvSpec bad{3, 4, 3, 3, 1, 1, 1, 1, false};
  CHECK_THROWS_AS(
      conv2d(rand_tensor<float>({1, 2, 5, 5}, rng), rand_tensor<float>({4, 3, 3, 3}, rng), bad),
      Error);
  ConvSpec shrink{1, 1, 3, 3, 1, 0, 1, 1, false};
  CHECK_THROWS_AS(conv2d(rand_tensor<float>({1, 1, 2, 2}, rng),
                         rand_tensor<float>({1, 1, 3, 3}, rng), shrink),
                  Error);
}

TEST_CASE("conv2d gradients pass fp64 finite differences") {
  std::mt19937_64 rng(7);
  TensorD x = rand_tensor<double>({1, 2, 5, 5}, rng).set_requires_grad(true);
  TensorD w = rand_tensor<double>({3, 2, 3, 3}, rng).set_requires_grad(true);
  TensorD b = rand_tensor<double>({3}, rng).set_requires_grad(true);
  ConvSpec sp{2, 3, 3, 3, 2, 1, 1, 1, true};
  auto report = finite_difference_check<double>(
      {{"x", x}, {"w", w}, {"b", b}}, [&] { return sum_all(conv2d(x, w, b, sp)); }, 1e-5);
  CHECK(report.max_rel_err < 1e-4);

  // grouped + dilated variant
  TensorD xg = rand_tensor<double>({2, 4, 6, 5}, rng).set_requires_grad(true);
  TensorD wg = rand_tensor<double>({4, 2, 3, 3}, rng).set_requires_grad(true);
  ConvSpec spg{4, 4, 3, 3, 1, 2, 2, 2, false};
  auto rg = finite_difference_check<double>(
      {{"x", xg}, {"w", wg}}, [&] { return sum_all(conv2d(xg, wg, spg)); }, 1e-5);
  CHECK(rg.max_rel_err < 1e-4);
}

TEST_CASE("depthwise separable conv composes and matches delta identity") {
  std::mt19937_64 rng(3);
  // centered delta depthwise + identity pointwise -> identity
  const int64_t C = 3;
  TensorF x = rand_tensor<float>({1, C, 6, 6}, rng);
  TensorF dw = TensorF::zeros({C, 1, 3, 3});
  for (int64_t c = 0; c < C; ++c) dw.data()[c * 9 + 4] = 1.f;
  TensorF pw = TensorF::zeros({C, C, 1, 1});
  for (int64_t c = 0; c < C; ++c) pw.data()[c * C + c] = 1.f;
  TensorF out = depthwise_separable_conv(x, dw, pw, 1);
  check_close(out.vec(), x.vec(), 1e-6);

  // equals composing the two conv2d calls at dilation 2
  TensorF x2 = rand_tensor<float>({1, 4, 8, 8}, rng);
  TensorF dw2 = rand_tensor<float>({4, 1, 3, 3}, rng);
  TensorF pw2 = rand_tensor<float>({6, 4, 1, 1}, rng);
  ConvSpec dspec{4, 4, 3, 3, 1, 2, 2, 4, false};
  ConvSpec pspec{4, 6, 1, 1, 1, 0, 1, 1, false};
  TensorF want = conv2d(conv2d(x2, dw2, dspec), pw2, pspec);
  TensorF got = depthwise_separable_conv(x2, dw2, pw2, 2);
  CHECK(got.dim(2) == 8);  // padding = dilation preserves extents
  check_close(got.vec(), want.vec(), 1e-6);
  CHECK_THROWS_AS(depthwise_separable_conv(x2, dw2, pw2, 0), Error);

  // depthwise conv equals independent per-channel convs
  ConvSpec one{1, 1, 3, 3, 1, 2, 2, 1, false};
  TensorF dwfull = conv2d(x2, dw2, dspec);
  for (int64_t c = 0; c < 4; ++c) {
    TensorF xc = TensorF::from_data(
        {1, 1, 8, 8}, std::vector<float>(x2.data() + c * 64, x2.data() + (c + 1) * 64));
    TensorF wc = TensorF::from_data(
        {1, 1, 3, 3}, std::vector<float>(dw2.data() + c * 9, dw2.data() + (c + 1) * 9));
    TensorF oc = conv2d(xc, wc, one);
    for (int64_t i = 0; i < 64; ++i) CHECK_NEAR(oc.data()[i], dwfull.data()[c * 64 + i], 1e-6);
  }
}

TEST_CASE("conv1d_channels oracle and gradients") {
  TensorF u = TensorF::from_data({1, 4, 1, 1}, {1, 2, 3, 4});
  TensorF delta = TensorF::from_data({3}, {0, 1, 0});
  check_close(conv1d_channels(u, delta).vec(), {1, 2, 3, 4}, 0.0);

  TensorF box = TensorF::from_data({3}, {0.5f, 0.5f, 0.5f});
  check_close(conv1d_channels(u, box).vec(), {1.5f, 3.f, 4.5f, 3.5f}, 1e-6);

  check_close(conv1d_channels(u, TensorF::zeros({3})).vec(), {0, 0, 0, 0}, 0.0);
  CHECK_THROWS_AS(conv1d_channels(u, TensorF::zeros({4})), Error);

  std::mt19937_64 rng(5);
  TensorD ud = rand_tensor<double>({2, 6, 1, 1}, rng).set_requires_grad(true);
  TensorD wd = rand_tensor<double>({5}, rng).set_requires_grad(true);
  auto report = finite_difference_check<double>(
      {{"u", ud}, {"w", wd}}, [&] { return sum_all(conv1d_channels(ud, wd)); }, 1e-6);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("batch_norm train/infer semantics") {
  // infer oracle: x=2, mean=1, var=3, gamma=1, beta=0 -> 1/sqrt(3+1e-5)
  auto st = BatchNormState<double>::make(1);
  st.mode = Mode::kInfer;
  st.running_mean.data()[0] = 1.0;
  st.running_var.data()[0] = 3.0;
  TensorD x = TensorD::filled({1, 1, 1, 1}, 2.0);
  CHECK_NEAR(batch_norm(x, st).item(), 0.57734930694, 1e-9);

  // train: constant input -> output all beta
  auto st2 = BatchNormState<float>::make(2);
  st2.beta.data()[0] = 0.25f;
  st2.beta.data()[1] = -1.5f;
  TensorF c = TensorF::filled({2, 2, 3, 3}, 4.f);
  TensorF out = batch_norm(c, st2);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t ch = 0; ch < 2; ++ch)
      for (int64_t i = 0; i < 9; ++i)
        CHECK_NEAR(out.data()[(n * 2 + ch) * 9 + i], st2.beta.data()[ch], 1e-6);
  // running stats moved toward batch stats (mean 4, biased var 0)
  CHECK_NEAR(st2.running_mean.data()[0], 0.4f, 1e-6);
  CHECK_NEAR(st2.running_var.data()[0], 0.9f, 1e-6);

  // infer with gamma=sqrt(var+eps), beta=mean -> identity
  std::mt19937_64 rng(11);
  auto st3 = BatchNormState<float>::make(3);
  st3.mode = Mode::kInfer;
  fill_uniform(st3.running_mean, -1.0, 1.0, rng);
  fill_uniform(st3.running_var, 0.5, 2.0, rng);
  for (int64_t ch = 0; ch < 3; ++ch) {
    st3.gamma.data()[ch] = std::sqrt(st3.running_var.data()[ch] + st3.eps);
    st3.beta.data()[ch] = st3.running_mean.data()[ch];
  }
  TensorF xr = rand_tensor<float>({2, 3, 4, 4}, rng);
  check_close(batch_norm(xr, st3).vec(), xr.vec(), 1e-5);
}

TEST_CASE("batch_norm gradients pass fp64 finite differences") {
  std::mt19937_64 rng(13);
  for (Mode mode : {Mode::kTrain, Mode::kInfer}) {
    auto st = BatchNormState<double>::make(3);
    st.mode = mode;
    fill_uniform(st.running_mean, -0.5, 0.5, rng);
    fill_uniform(st.running_var, 0.5, 1.5, rng);
    fill_uniform(st.gamma, 0.5, 1.5, rng);
    fill_uniform(st.beta, -0.5, 0.5, rng);
    TensorD x = rand_tensor<double>({2, 3, 4, 3}, rng).set_requires_grad(true);
    auto report = finite_difference_check<double>(
        {{"x", x}, {"gamma", st.gamma}, {"beta", st.beta}},
        [&] { return sum_all(mul_broadcast(batch_norm(x, st), x)); }, 1e-6);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("elementwise ops and softmax") {
  TensorF x = TensorF::from_data({1, 1, 1, 3}, {-3.f, 0.f, 3.f});
  check_close(relu(x).vec(), {0.f, 0.f, 3.f}, 0.0);
  CHECK_NEAR(sigmoid(TensorF::zeros({1})).item(), 0.5, 1e-7);

  std::mt19937_64 rng(17);
  TensorF eq = TensorF::filled({1, 19, 2, 2}, 0.7f);
  TensorF sm = softmax_channels(eq);
  for (int64_t i = 0; i < sm.numel(); ++i) CHECK_NEAR(sm.data()[i], 1.0 / 19, 1e-7);

  TensorF r = rand_tensor<float>({2, 7, 3, 2}, rng);
  TensorF smr = softmax_channels(r);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t i = 0; i < 6; ++i) {
      double s = 0;
      for (int64_t c = 0; c < 7; ++c) s += smr.data()[(n * 7 + c) * 6 + i];
      CHECK_NEAR(s, 1.0, 1e-6);
    }

  TensorF a = rand_tensor<float>({2, 3, 2, 2}, rng);
  check_close(add(a, TensorF::zeros({2, 3, 2, 2})).vec(), a.vec(), 0.0);
  CHECK_THROWS_AS(add(a, TensorF::zeros({2, 3, 2, 3})), Error);

  check_close(mul_broadcast(a, TensorF::filled({2, 3, 1, 1}, 1.f)).vec(), a.vec(), 0.0);
  CHECK_THROWS_AS(mul_broadcast(a, TensorF::zeros({2, 2, 1, 1})), Error);

  TensorF cat = concat_channels(rand_tensor<float>({2, 4, 3, 3}, rng),
                                rand_tensor<float>({2, 4, 3, 3}, rng));
  CHECK(cat.shape() == Shape{2, 8, 3, 3});
  CHECK_THROWS_AS(concat_channels(a, TensorF::zeros({2, 3, 2, 3})), Error);
}

TEST_CASE("elementwise gradients pass fp64 finite differences") {
  std::mt19937_64 rng(19);
  // relu probed away from the kink
  TensorD xr = rand_tensor<double>({1, 2, 3, 3}, rng);
  for (auto& v : xr.vec())
    if (std::abs(v) < 0.1) v = v < 0 ? v - 0.2 : v + 0.2;
  CHECK(op_gradcheck<double>(xr, [](const TensorD& t) { return relu(t); }) < 1e-4);
  CHECK(op_gradcheck<double>(rand_tensor<double>({1, 2, 3, 3}, rng),
                             [](const TensorD& t) { return sigmoid(t); }) < 1e-4);
  CHECK(op_gradcheck<double>(rand_tensor<double>({1, 5, 2, 2}, rng), [](const TensorD& t) {
          return mul_broadcast(softmax_channels(t), t);
        }) < 1e-4);
  CHECK(op_gradcheck<double>(rand_tensor<double>({1, 2, 2, 2}, rng),
                             [](const TensorD& t) { return scale(t, 1.7); }) < 1e-4);

  // broadcast multiply: gradients for both operands in all three layouts
  for (Shape fshape : {Shape{2, 3, 1, 1}, Shape{2, 1, 4, 3}, Shape{1}}) {
    TensorD x = rand_tensor<double>({2, 3, 4, 3}, rng).set_requires_grad(true);
    TensorD f = rand_tensor<double>(fshape, rng).set_requires_grad(true);
    auto report = finite_difference_check<double>(
        {{"x", x}, {"f", f}}, [&] { return sum_all(mul_broadcast(x, f)); }, 1e-6);
    CHECK(report.max_rel_err < 1e-4);
  }

  TensorD ca = rand_tensor<double>({1, 2, 3, 2}, rng).set_requires_grad(true);
  TensorD cb = rand_tensor<double>({1, 3, 3, 2}, rng).set_requires_grad(true);
  auto report = finite_difference_check<double>(
      {{"a", ca}, {"b", cb}},
      [&] { return sum_all(mul_broadcast(concat_channels(ca, cb), concat_channels(ca, cb))); },
      1e-6);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("bilinear_resize oracle values") {
  // identity resize is an exact copy
  std::mt19937_64 rng(23);
  TensorF x = rand_tensor<float>({1, 2, 3, 4}, rng);
  TensorF same = bilinear_resize(x, 3, 4);
  CHECK(std::memcmp(same.data(), x.data(), sizeof(float) * x.numel()) == 0);

  // [0,1] widened to 4 -> [0, 0.25, 0.75, 1] under align-corners=false
  TensorF row = TensorF::from_data({1, 1, 1, 2}, {0.f, 1.f});
  check_close(bilinear_resize(row, 1, 4).vec(), {0.f, 0.25f, 0.75f, 1.f}, 1e-6);

  // 2x2 -> 4x4 corner stays at the corner value
  TensorF q = TensorF::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  TensorF up = bilinear_resize(q, 4, 4);
  CHECK_NEAR(up.data()[0], 1.f, 1e-6);
  CHECK_NEAR(up.data()[15], 4.f, 1e-6);

  // downscale averages: [0,1,2,3] -> 2 wide gives midpoints 0.5, 2.5
  TensorF wide = TensorF::from_data({1, 1, 1, 4}, {0, 1, 2, 3});
  check_close(bilinear_resize(wide, 1, 2).vec(), {0.5f, 2.5f}, 1e-6);

  CHECK_THROWS_AS(bilinear_resize(q, 0, 4), Error);

  TensorD xd = rand_tensor<double>({1, 2, 3, 4}, rng);
  CHECK(op_gradcheck<double>(xd, [](const TensorD& t) { return bilinear_resize(t, 5, 7); }) <
        1e-4);
  CHECK(op_gradcheck<double>(xd, [](const TensorD& t) { return bilinear_resize(t, 2, 2); }) <
        1e-4);
}

TEST_CASE("grid_sample_warp oracle values and gradients") {
  TensorF row = TensorF::from_data({1, 1, 1, 4}, {0, 1, 2, 3});

  // zero flow is bit-identical
  TensorF zf = TensorF::zeros({1, 2, 1, 4});
  TensorF out0 = grid_sample_warp(row, zf);
  CHECK(std::memcmp(out0.data(), row.data(), sizeof(float) * 4) == 0);

  // +0.5 px shift with border clamp
  TensorF half = TensorF::zeros({1, 2, 1, 4});
  for (int i = 0; i < 4; ++i) half.data()[i] = 0.5f;
  check_close(grid_sample_warp(row, half).vec(), {0.5f, 1.5f, 2.5f, 3.f}, 1e-6);

  // integer +1 px shift
  TensorF one = TensorF::zeros({1, 2, 1, 4});
  for (int i = 0; i < 4; ++i) one.data()[i] = 1.f;
  check_close(grid_sample_warp(row, one).vec(), {1.f, 2.f, 3.f, 3.f}, 1e-6);

  CHECK_THROWS_AS(grid_sample_warp(row, TensorF::zeros({1, 1, 1, 4})), Error);

  // gradients w.r.t. both input and flow, probed away from integer offsets
  std::mt19937_64 rng(29);
  TensorD x = rand_tensor<double>({1, 3, 4, 5}, rng).set_requires_grad(true);
  TensorD flow = rand_tensor<double>({1, 2, 4, 5}, rng, 0.3);
  for (auto& v : flow.vec()) v += v >= 0 ? 0.13 : -0.13;
  flow.set_requires_grad(true);
  auto report = finite_difference_check<double>(
      {{"x", x}, {"flow", flow}}, [&] { return sum_all(grid_sample_warp(x, flow)); }, 1e-6);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("pooling oracles and gradients") {
  // constant map -> its value under GAP; [[1,2],[3,4]] -> 2.5
  TensorF c = TensorF::filled({1, 2, 3, 3}, 1.25f);
  check_close(global_avg_pool(c).vec(), {1.25f, 1.25f}, 0.0);
  TensorF q = TensorF::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK_NEAR(global_avg_pool(q).item(), 2.5, 1e-7);

  TensorD gd = TensorD::from_data({1, 1, 2, 2}, {1, 2, 3, 4}).set_requires_grad(true);
  sum_all(global_avg_pool(gd)).backward();
  check_close(gd.grad_vec(), {0.25, 0.25, 0.25, 0.25}, 1e-12);

  // max pool: 4x4 ramp, k3 s2 p1 -> [5,7,13,15]
  std::vector<float> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[static_cast<size_t>(i)] = static_cast<float>(i);
  TensorF rampt = TensorF::from_data({1, 1, 4, 4}, ramp);
  check_close(max_pool2d(rampt, 3, 2, 1).vec(), {5, 7, 13, 15}, 0.0);

  TensorF cm = TensorF::filled({1, 1, 5, 5}, 3.f);
  TensorF cmp = max_pool2d(cm, 3, 2, 1);
  for (float v : cmp.vec()) CHECK(v == 3.f);

  // gradient routes to the argmax only; ties take the first window element
  TensorD mp = TensorD::from_data({1, 1, 2, 2}, {1, 1, 1, 1}).set_requires_grad(true);
  sum_all(max_pool2d(mp, 2, 2, 0)).backward();
  check_close(mp.grad_vec(), {1, 0, 0, 0}, 0.0);

  std::mt19937_64 rng(31);
  TensorD xm = rand_tensor<double>({1, 2, 6, 5}, rng);  // distinct values w.p. 1
  CHECK(op_gradcheck<double>(
            xm, [](const TensorD& t) { return max_pool2d(t, 3, 2, 1); }, 1e-7) < 1e-4);
  CHECK(op_gradcheck<double>(rand_tensor<double>({2, 3, 4, 4}, rng),
                             [](const TensorD& t) { return global_avg_pool(t); }) < 1e-4);
}

TEST_CASE("softmax cross-entropy: uniform, ignore, keep mask, gradients") {
  // zero logits over N classes -> ln N
  for (int nc : {4, 19}) {
    TensorF logits = TensorF::zeros({1, nc, 2, 2});
    LabelBatch labels(1, 2, 2);
    for (auto& l : labels.labels) l = 1;
    CHECK_NEAR(softmax_cross_entropy(logits, labels).item(),
               std::log(static_cast<double>(nc)), 1e-6);
  }

  // near-one-hot logits -> loss near zero
  TensorF hot = TensorF::zeros({1, 3, 1, 2});
  LabelBatch lab2(1, 1, 2);
  lab2.labels = {0, 2};
  hot.data()[0] = 50.f;  // pixel 0, class 0
  hot.data()[5] = 50.f;  // pixel 1, class 2
  CHECK_NEAR(softmax_cross_entropy(hot, lab2).item(), 0.0, 1e-6);

  // ignore label excluded from mean; all-ignored errors out
  TensorF lg = TensorF::zeros({1, 2, 1, 2});
  lg.data()[0] = 1.f;
  LabelBatch ign(1, 1, 2);
  ign.labels = {0, kIgnoreLabel};
  const double expect = std::log(1.0 + std::exp(-1.0));  // CE of the single valid pixel
  CHECK_NEAR(softmax_cross_entropy(lg, ign).item(), expect, 1e-6);
  LabelBatch allign(1, 1, 2);
  allign.labels = {kIgnoreLabel, kIgnoreLabel};
  CHECK_THROWS_AS(softmax_cross_entropy(lg, allign), Error);

  LabelBatch oob(1, 1, 2);
  oob.labels = {0, 7};
  CHECK_THROWS_AS(softmax_cross_entropy(lg, oob), Error);

  // keep mask restricts the mean to the kept pixels
  TensorF lk = TensorF::from_data({1, 2, 1, 2}, {2.f, 0.f, 0.f, 1.f});
  LabelBatch labk(1, 1, 2);
  labk.labels = {0, 0};
  std::vector<uint8_t> keep = {0, 1};
  const double pix1 = std::log(1.0 + std::exp(1.0));  // -log softmax(0 vs 1) for class 0
  CHECK_NEAR(softmax_cross_entropy(lk, labk, kIgnoreLabel, &keep).item(), pix1, 1e-6);

  // true_class_probs marks ignored pixels with -1
  auto probs = true_class_probs(lk, labk);
  CHECK_NEAR(probs[0], 1.0 / (1.0 + std::exp(-2.0)), 1e-6);
  LabelBatch pign(1, 1, 2);
  pign.labels = {kIgnoreLabel, 0};
  CHECK(true_class_probs(lk, pign)[0] == -1.f);

  // gradcheck with ignore pixels and a keep mask in play
  std::mt19937_64 rng(37);
  TensorD ld = rand_tensor<double>({2, 4, 3, 3}, rng).set_requires_grad(true);
  LabelBatch lbd(2, 3, 3);
  for (size_t i = 0; i < lbd.labels.size(); ++i)
    lbd.labels[i] = i % 5 == 4 ? kIgnoreLabel : static_cast<uint8_t>(i % 4);
  std::vector<uint8_t> keepd(lbd.labels.size(), 1);
  keepd[0] = 0;
  keepd[7] = 0;
  auto report = finite_difference_check<double>(
      {{"logits", ld}},
      [&] { return softmax_cross_entropy(ld, lbd, kIgnoreLabel, &keepd); }, 1e-6);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("finite_difference_check sanity: linear op at machine precision") {
  std::mt19937_64 rng(41);
  TensorD x = rand_tensor<double>({1, 2, 3, 3}, rng).set_requires_grad(true);
  auto report = finite_difference_check<double>(
      {{"x", x}}, [&] { return sum_all(scale(x, 3.0)); }, 1e-6);
  CHECK(report.max_rel_err < 1e-9);
  CHECK(report.probes == x.numel());

  // sampling caps the probe count deterministically
  auto sampled = finite_difference_check<double>(
      {{"x", x}}, [&] { return sum_all(scale(x, 3.0)); }, 1e-6, 5);
  CHECK(sampled.probes == 5);
}

TEST_CASE("no-grad mode skips the tape") {
  TensorF x = TensorF::filled({2, 2}, 1.f).set_requires_grad(true);
  NoGradGuard guard;
  TensorF s = sum_all(x);
  CHECK(s.impl()->node == nullptr);
  CHECK_THROWS_AS(s.backward(), Error);
}

TEST_CASE("forward determinism: same seed, bit-identical results") {
  auto run = [] {
    std::mt19937_64 rng(99);
    TensorF x = rand_tensor<float>({2, 3, 8, 8}, rng);
    TensorF w = rand_tensor<float>({4, 3, 3, 3}, rng);
    ConvSpec sp{3, 4, 3, 3, 1, 1, 1, 1, false};
    auto st = BatchNormState<float>::make(4);
    return relu(batch_norm(conv2d(x, w, sp), st));
  };
  auto a = run().vec();
  auto b = run().vec();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}
