#ifndef SFANET_COMMON_HPP
#define SFANET_COMMON_HPP

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sfanet {

using Shape = std::vector<int64_t>;

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// SFA_CHECK(cond) << "message" << value;
namespace detail {
class CheckStream {
 public:
  explicit CheckStream(const char* expr, const char* file, int line) {
    ss_ << file << ":" << line << ": check failed (" << expr << ") ";
  }
  [[noreturn]] ~CheckStream() noexcept(false) { throw Error(ss_.str()); }
  template <typename V>
  CheckStream& operator<<(const V& v) {
    ss_ << v;
    return *this;
  }

 private:
  std::ostringstream ss_;
};
}  // namespace detail

#define SFA_CHECK(cond) \
  if (cond) {           \
  } else                \
    ::sfanet::detail::CheckStream(#cond, __FILE__, __LINE__)

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// splitmix64, used to derive independent per-index RNG streams from a master seed.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Bounded draws via modular arithmetic on the raw engine output; the tiny
// modulo bias is irrelevant here and keeps results stable across toolchains
// (std::uniform_int_distribution is not specified bit-for-bit).
inline int64_t draw_int(std::mt19937_64& rng, int64_t lo, int64_t hi) {  // inclusive range
  return lo + static_cast<int64_t>(rng() % static_cast<uint64_t>(hi - lo + 1));
}

inline double draw_unit(std::mt19937_64& rng) {
  return (rng() >> 11) * (1.0 / 9007199254740992.0);
}

}  // namespace sfanet

#endif
