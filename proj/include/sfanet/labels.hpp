#ifndef SFANET_LABELS_HPP
#define SFANET_LABELS_HPP

#include <cstdint>
#include <vector>

#include "sfanet/common.hpp"

namespace sfanet {

inline constexpr int kIgnoreLabel = 255;

// Dense class-id raster, one byte per pixel, row-major.
struct LabelMap {
  int64_t h = 0, w = 0;
  std::vector<uint8_t> labels;

  LabelMap() = default;
  LabelMap(int64_t h_, int64_t w_) : h(h_), w(w_), labels(static_cast<size_t>(h_ * w_), 0) {}
  uint8_t& at(int64_t y, int64_t x) { return labels[static_cast<size_t>(y * w + x)]; }
  uint8_t at(int64_t y, int64_t x) const { return labels[static_cast<size_t>(y * w + x)]; }
};

struct LabelBatch {
  int64_t n = 0, h = 0, w = 0;
  std::vector<uint8_t> labels;  // n*h*w

  LabelBatch() = default;
  LabelBatch(int64_t n_, int64_t h_, int64_t w_)
      : n(n_), h(h_), w(w_), labels(static_cast<size_t>(n_ * h_ * w_), 0) {}
  int64_t numel() const { return n * h * w; }
  uint8_t& at(int64_t i, int64_t y, int64_t x) {
    return labels[static_cast<size_t>((i * h + y) * w + x)];
  }
  uint8_t at(int64_t i, int64_t y, int64_t x) const {
    return labels[static_cast<size_t>((i * h + y) * w + x)];
  }
};

}  // namespace sfanet

#endif
