#ifndef SFANET_NETPBM_HPP
#define SFANET_NETPBM_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "sfanet/labels.hpp"

namespace sfanet {

// Interleaved 8-bit raster, row-major. channels is 3 (RGB) or 1 (gray).
struct ImageU8 {
  int64_t h = 0, w = 0;
  int channels = 3;
  std::vector<uint8_t> pixels;

  ImageU8() = default;
  ImageU8(int64_t h_, int64_t w_, int channels_)
      : h(h_), w(w_), channels(channels_),
        pixels(static_cast<size_t>(h_ * w_ * channels_), 0) {}
  uint8_t& at(int64_t y, int64_t x, int c) {
    return pixels[static_cast<size_t>((y * w + x) * channels + c)];
  }
  uint8_t at(int64_t y, int64_t x, int c) const {
    return pixels[static_cast<size_t>((y * w + x) * channels + c)];
  }
};

// Binary netpbm with maxval 255: P6 for RGB images, P5 for label masks.
// Readers accept arbitrary whitespace and '#' comments in the header and
// throw Error on bad magic, malformed fields, or truncated payloads.
void write_ppm(const std::string& path, const ImageU8& img);
ImageU8 read_ppm(const std::string& path);
void write_pgm(const std::string& path, const LabelMap& mask);
LabelMap read_pgm(const std::string& path);

}  // namespace sfanet

#endif
