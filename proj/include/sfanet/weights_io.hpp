#ifndef SFANET_WEIGHTS_IO_HPP
#define SFANET_WEIGHTS_IO_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sfanet/common.hpp"

namespace sfanet {

enum class DtypeTag : uint8_t { kF32 = 0, kF64 = 1 };

struct TensorBlob {
  DtypeTag tag = DtypeTag::kF32;
  Shape shape;
  std::vector<float> f32;   // valid when tag == kF32
  std::vector<double> f64;  // valid when tag == kF64

  static TensorBlob of(Shape s, std::vector<float> v) {
    return TensorBlob{DtypeTag::kF32, std::move(s), std::move(v), {}};
  }
  static TensorBlob scalar(double v) { return TensorBlob{DtypeTag::kF64, {1}, {}, {v}}; }
  int64_t numel() const { return numel_of(shape); }
};

// Ordered name -> tensor listing, preserved verbatim through save/load.
using WeightsMap = std::vector<std::pair<std::string, TensorBlob>>;

// Binary container: magic "SFAW", u32 format version, u32 record count, then
// per record: u32 name length, UTF-8 name, u8 dtype tag, u8 rank, u32 extents,
// little-endian payload. A CRC32 of the whole record region trails the file;
// load verifies it before parsing, so a corrupt file yields no partial data.
void save_weights(const std::string& path, const WeightsMap& entries);
WeightsMap load_weights(const std::string& path);

const TensorBlob* find_weight(const WeightsMap& entries, const std::string& name);

}  // namespace sfanet

#endif
