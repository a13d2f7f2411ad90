#ifndef SFANET_SCENE_HPP
#define SFANET_SCENE_HPP

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "sfanet/netpbm.hpp"

namespace sfanet {

enum class ShapeKind : uint8_t { kRectangle = 0, kDisk = 1, kTriangle = 2 };

// Synthetic scene recipe. Class 0 is the background; classes 1..num_classes-1
// are shape classes. Scales are fractions of min(height, width), spanning
// small and large objects. Generation is a pure function of (spec, index).
struct SceneSpec {
  int64_t height = 64;
  int64_t width = 64;
  int num_classes = 4;
  std::vector<ShapeKind> class_shapes;  // per class; empty = cycle rect/disk/triangle
  double min_scale = 0.2;
  double max_scale = 0.9;
  int shapes_per_image = 5;
  double noise = 0.1;  // per-pixel uniform color noise, fraction of full range
  uint64_t seed = 1;

  ShapeKind shape_for_class(int cls) const;
  void validate() const;
};

// Base palette color for a class id (up to 20 classes supported).
std::array<uint8_t, 3> class_color(int cls);

// Draws shapes back-to-front with occlusion; every pixel gets the topmost
// shape's class, else background. Colors are the class base color plus
// per-pixel uniform noise.
std::pair<ImageU8, LabelMap> generate_scene(const SceneSpec& spec, int64_t index);

// Per-channel mean of the images at the given indices, in [0,1].
std::array<double, 3> dataset_mean(const SceneSpec& spec, int64_t first, int64_t count);

}  // namespace sfanet

#endif
