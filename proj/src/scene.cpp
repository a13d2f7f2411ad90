#include "sfanet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace sfanet {

namespace {

constexpr std::array<std::array<uint8_t, 3>, 20> kPalette = {{
    {90, 95, 105},    // 0 background
    {200, 60, 50},    // 1
    {60, 170, 80},    // 2
    {60, 90, 200},    // 3
    {230, 200, 60},   // 4
    {160, 70, 190},   // 5
    {70, 200, 200},   // 6
    {240, 140, 40},   // 7
    {120, 80, 40},    // 8
    {230, 120, 180},  // 9
    {40, 120, 120},   // 10
    {170, 170, 90},   // 11
    {100, 40, 100},   // 12
    {40, 60, 40},     // 13
    {210, 210, 210},  // 14
    {20, 20, 80},     // 15
    {140, 200, 60},   // 16
    {200, 100, 100},  // 17
    {80, 140, 230},   // 18
    {30, 30, 30},     // 19
}};

void paint(ImageU8& img, LabelMap& labels, int64_t y, int64_t x, int cls) {
  labels.at(y, x) = static_cast<uint8_t>(cls);
  const auto color = class_color(cls);
  for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[static_cast<size_t>(c)];
}

}  // namespace

ShapeKind SceneSpec::shape_for_class(int cls) const {
  if (!class_shapes.empty()) return class_shapes[static_cast<size_t>(cls)];
  return static_cast<ShapeKind>((cls - 1) % 3);
}

void SceneSpec::validate() const {
  SFA_CHECK(num_classes >= 1) << "scene spec needs at least one class";
  SFA_CHECK(num_classes <= static_cast<int>(kPalette.size()))
      << "scene spec supports at most " << kPalette.size() << " classes";
  SFA_CHECK(height > 0 && width > 0) << "scene spec: bad extents " << height << "x" << width;
  SFA_CHECK(shapes_per_image >= 0) << "scene spec: negative shape count";
  SFA_CHECK(min_scale > 0 && min_scale <= max_scale) << "scene spec: bad scale range";
  SFA_CHECK(noise >= 0 && noise <= 1) << "scene spec: bad noise fraction";
  if (!class_shapes.empty())
    SFA_CHECK(static_cast<int>(class_shapes.size()) == num_classes)
        << "scene spec: class_shapes has " << class_shapes.size() << " entries for "
        << num_classes << " classes";
}

std::array<uint8_t, 3> class_color(int cls) {
  SFA_CHECK(cls >= 0 && cls < static_cast<int>(kPalette.size()))
      << "no palette color for class " << cls;
  return kPalette[static_cast<size_t>(cls)];
}

std::pair<ImageU8, LabelMap> generate_scene(const SceneSpec& spec, int64_t index) {
  spec.validate();
  SFA_CHECK(index >= 0) << "generate_scene: negative index " << index;
  const int64_t H = spec.height, W = spec.width;
  ImageU8 img(H, W, 3);
  LabelMap labels(H, W);
  std::mt19937_64 rng(splitmix64(spec.seed ^ splitmix64(static_cast<uint64_t>(index))));

  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) paint(img, labels, y, x, 0);

  const int64_t base = std::min(H, W);
  const int shape_classes = spec.num_classes - 1;
  for (int s = 0; s < spec.shapes_per_image && shape_classes > 0; ++s) {
    const int cls = static_cast<int>(draw_int(rng, 1, shape_classes));
    const double scale =
        spec.min_scale + (spec.max_scale - spec.min_scale) * draw_unit(rng);
    const int64_t cy = draw_int(rng, 0, H - 1);
    const int64_t cx = draw_int(rng, 0, W - 1);
    const double half = 0.5 * scale * static_cast<double>(base);
    switch (spec.shape_for_class(cls)) {
      case ShapeKind::kRectangle: {
        const double hw = half * (0.6 + 0.4 * draw_unit(rng));
        const double hh = half * (0.6 + 0.4 * draw_unit(rng));
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(cy - hh)));
        const int64_t y1 = std::min<int64_t>(H - 1, static_cast<int64_t>(std::floor(cy + hh)));
        const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(cx - hw)));
        const int64_t x1 = std::min<int64_t>(W - 1, static_cast<int64_t>(std::floor(cx + hw)));
        for (int64_t y = y0; y <= y1; ++y)
          for (int64_t x = x0; x <= x1; ++x) paint(img, labels, y, x, cls);
        break;
      }
      case ShapeKind::kDisk: {
        const double r2 = half * half;
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cy - half)));
        const int64_t y1 = std::min<int64_t>(H - 1, static_cast<int64_t>(std::ceil(cy + half)));
        const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cx - half)));
        const int64_t x1 = std::min<int64_t>(W - 1, static_cast<int64_t>(std::ceil(cx + half)));
        for (int64_t y = y0; y <= y1; ++y)
          for (int64_t x = x0; x <= x1; ++x) {
            const double dy = static_cast<double>(y - cy), dx = static_cast<double>(x - cx);
            if (dy * dy + dx * dx <= r2) paint(img, labels, y, x, cls);
          }
        break;
      }
      case ShapeKind::kTriangle: {  // axis-aligned isosceles, apex up or down
        const bool up = draw_int(rng, 0, 1) == 0;
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(cy - half)));
        const int64_t y1 = std::min<int64_t>(H - 1, static_cast<int64_t>(std::floor(cy + half)));
        for (int64_t y = y0; y <= y1; ++y) {
          // width grows linearly from the apex row to the base row
          const double t = up ? (static_cast<double>(y) - (cy - half)) / (2 * half)
                              : ((cy + half) - static_cast<double>(y)) / (2 * half);
          const double hw = half * std::clamp(t, 0.0, 1.0);
          const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(cx - hw)));
          const int64_t x1 = std::min<int64_t>(W - 1, static_cast<int64_t>(std::floor(cx + hw)));
          for (int64_t x = x0; x <= x1; ++x) paint(img, labels, y, x, cls);
        }
        break;
      }
    }
  }

  if (spec.noise > 0) {
    const int64_t amp = static_cast<int64_t>(std::lround(spec.noise * 255.0));
    for (auto& px : img.pixels) {
      const int64_t v = static_cast<int64_t>(px) + draw_int(rng, -amp, amp);
      px = static_cast<uint8_t>(std::clamp<int64_t>(v, 0, 255));
    }
  }
  return {std::move(img), std::move(labels)};
}

std::array<double, 3> dataset_mean(const SceneSpec& spec, int64_t first, int64_t count) {
  SFA_CHECK(count > 0) << "dataset_mean over zero images";
  std::array<double, 3> sum{0, 0, 0};
  for (int64_t i = 0; i < count; ++i) {
    const auto [img, labels] = generate_scene(spec, first + i);
    (void)labels;
    for (int64_t p = 0; p < img.h * img.w; ++p)
      for (int c = 0; c < 3; ++c) sum[static_cast<size_t>(c)] += img.pixels[p * 3 + c];
  }
  const double denom = 255.0 * static_cast<double>(count) * spec.height * spec.width;
  for (double& v : sum) v /= denom;
  return sum;
}

}  // namespace sfanet
