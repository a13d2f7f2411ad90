#include "sfanet/weights_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace sfanet {

namespace {

constexpr char kMagic[4] = {'S', 'F', 'A', 'W'};
constexpr uint32_t kVersion = 1;

void put_u32(std::vector<uint8_t>& buf, uint32_t v) {
  buf.push_back(static_cast<uint8_t>(v));
  buf.push_back(static_cast<uint8_t>(v >> 8));
  buf.push_back(static_cast<uint8_t>(v >> 16));
  buf.push_back(static_cast<uint8_t>(v >> 24));
}

uint32_t get_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

template <typename T>
void put_scalars(std::vector<uint8_t>& buf, const std::vector<T>& vals) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  for (T v : vals) {
    uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof(T));
    for (size_t b = 0; b < sizeof(T); ++b) buf.push_back(static_cast<uint8_t>(bits >> (8 * b)));
  }
}

template <typename T>
std::vector<T> get_scalars(const uint8_t* p, int64_t count) {
  std::vector<T> vals(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    uint64_t bits = 0;
    for (size_t b = 0; b < sizeof(T); ++b)
      bits |= static_cast<uint64_t>(p[i * sizeof(T) + b]) << (8 * b);
    std::memcpy(&vals[static_cast<size_t>(i)], &bits, sizeof(T));
  }
  return vals;
}

}  // namespace

void save_weights(const std::string& path, const WeightsMap& entries) {
  std::vector<uint8_t> region;
  for (const auto& [name, blob] : entries) {
    SFA_CHECK(!name.empty()) << "weights record with empty name";
    SFA_CHECK(!blob.shape.empty() && blob.shape.size() <= 255)
        << "weights record '" << name << "' has bad rank " << blob.shape.size();
    const int64_t n = blob.numel();
    put_u32(region, static_cast<uint32_t>(name.size()));
    region.insert(region.end(), name.begin(), name.end());
    region.push_back(static_cast<uint8_t>(blob.tag));
    region.push_back(static_cast<uint8_t>(blob.shape.size()));
    for (int64_t e : blob.shape) {
      SFA_CHECK(e > 0 && e <= UINT32_MAX) << "weights record '" << name << "' has bad extent";
      put_u32(region, static_cast<uint32_t>(e));
    }
    if (blob.tag == DtypeTag::kF32) {
      SFA_CHECK(static_cast<int64_t>(blob.f32.size()) == n)
          << "weights record '" << name << "': " << blob.f32.size() << " values for shape "
          << shape_str(blob.shape);
      put_scalars(region, blob.f32);
    } else {
      SFA_CHECK(static_cast<int64_t>(blob.f64.size()) == n)
          << "weights record '" << name << "': " << blob.f64.size() << " values for shape "
          << shape_str(blob.shape);
      put_scalars(region, blob.f64);
    }
  }
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, region.empty() ? Z_NULL : region.data(), static_cast<uInt>(region.size())));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  SFA_CHECK(out.good()) << "cannot open " << path << " for writing";
  std::vector<uint8_t> head;
  head.insert(head.end(), kMagic, kMagic + 4);
  put_u32(head, kVersion);
  put_u32(head, static_cast<uint32_t>(entries.size()));
  out.write(reinterpret_cast<const char*>(head.data()), static_cast<std::streamsize>(head.size()));
  out.write(reinterpret_cast<const char*>(region.data()),
            static_cast<std::streamsize>(region.size()));
  std::vector<uint8_t> tail;
  put_u32(tail, crc);
  out.write(reinterpret_cast<const char*>(tail.data()), 4);
  out.flush();
  SFA_CHECK(out.good()) << "write failed for " << path;
}

WeightsMap load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  SFA_CHECK(in.good()) << "cannot open weights file " << path;
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  SFA_CHECK(bytes.size() >= 16) << path << ": too short for a weights file";
  SFA_CHECK(std::memcmp(bytes.data(), kMagic, 4) == 0) << path << ": bad magic";
  SFA_CHECK(get_u32(bytes.data() + 4) == kVersion)
      << path << ": unsupported format version " << get_u32(bytes.data() + 4);
  const uint32_t count = get_u32(bytes.data() + 8);

  const uint8_t* region = bytes.data() + 12;
  const size_t region_size = bytes.size() - 16;
  const uint32_t stored_crc = get_u32(bytes.data() + bytes.size() - 4);
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, region_size == 0 ? Z_NULL : region, static_cast<uInt>(region_size)));
  SFA_CHECK(crc == stored_crc) << path << ": CRC mismatch, file is corrupt";

  WeightsMap entries;
  entries.reserve(count);
  size_t pos = 0;
  auto need = [&](size_t n) {
    SFA_CHECK(pos + n <= region_size) << path << ": truncated record region";
  };
  for (uint32_t r = 0; r < count; ++r) {
    need(4);
    const uint32_t name_len = get_u32(region + pos);
    pos += 4;
    need(name_len);
    std::string name(reinterpret_cast<const char*>(region + pos), name_len);
    pos += name_len;
    need(2);
    const uint8_t tag = region[pos];
    const uint8_t rank = region[pos + 1];
    pos += 2;
    SFA_CHECK(tag <= 1) << path << ": record '" << name << "' has unknown dtype tag "
                        << static_cast<int>(tag);
    SFA_CHECK(rank >= 1) << path << ": record '" << name << "' has rank 0";
    TensorBlob blob;
    blob.tag = static_cast<DtypeTag>(tag);
    need(4u * rank);
    for (int d = 0; d < rank; ++d) {
      const uint32_t e = get_u32(region + pos);
      pos += 4;
      SFA_CHECK(e > 0) << path << ": record '" << name << "' has zero extent";
      blob.shape.push_back(e);
    }
    const int64_t n = blob.numel();
    const size_t scalar = blob.tag == DtypeTag::kF32 ? 4 : 8;
    need(static_cast<size_t>(n) * scalar);
    if (blob.tag == DtypeTag::kF32)
      blob.f32 = get_scalars<float>(region + pos, n);
    else
      blob.f64 = get_scalars<double>(region + pos, n);
    pos += static_cast<size_t>(n) * scalar;
    entries.emplace_back(std::move(name), std::move(blob));
  }
  SFA_CHECK(pos == region_size) << path << ": " << region_size - pos
                                << " trailing bytes after last record";
  return entries;
}

const TensorBlob* find_weight(const WeightsMap& entries, const std::string& name) {
  for (const auto& [n, blob] : entries)
    if (n == name) return &blob;
  return nullptr;
}

}  // namespace sfanet
