#include "sfanet/netpbm.hpp"

#include <cctype>
#include <fstream>

namespace sfanet {

namespace {

// Reads one header token, skipping whitespace and '#' comment lines.
std::string next_token(std::istream& in, const std::string& path) {
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  SFA_CHECK(c != EOF) << path << ": truncated netpbm header";
  std::string tok;
  while (c != EOF && !std::isspace(c) && c != '#') {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  // Leave the terminating byte in the stream: the byte after the last header
  // token is the payload separator and must not be swallowed here.
  if (c != EOF) in.unget();
  return tok;
}

int64_t header_int(std::istream& in, const std::string& path, const char* what) {
  const std::string tok = next_token(in, path);
  int64_t v = 0;
  for (char ch : tok) {
    SFA_CHECK(ch >= '0' && ch <= '9') << path << ": bad " << what << " '" << tok << "'";
    v = v * 10 + (ch - '0');
    SFA_CHECK(v < (int64_t{1} << 30)) << path << ": " << what << " out of range";
  }
  SFA_CHECK(!tok.empty()) << path << ": missing " << what;
  return v;
}

std::vector<uint8_t> read_binary(const std::string& path, const char* magic, int64_t& h,
                                 int64_t& w, int values_per_pixel) {
  std::ifstream in(path, std::ios::binary);
  SFA_CHECK(in.good()) << "cannot open " << path;
  SFA_CHECK(next_token(in, path) == magic) << path << ": expected " << magic << " magic";
  w = header_int(in, path, "width");
  h = header_int(in, path, "height");
  const int64_t maxval = header_int(in, path, "maxval");
  SFA_CHECK(w > 0 && h > 0) << path << ": non-positive extents " << w << "x" << h;
  SFA_CHECK(maxval == 255) << path << ": unsupported maxval " << maxval;
  const int c = in.get();  // exactly one whitespace byte separates header and payload
  SFA_CHECK(c != EOF && std::isspace(c)) << path << ": missing header terminator";
  std::vector<uint8_t> payload(static_cast<size_t>(h * w * values_per_pixel));
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  SFA_CHECK(in.gcount() == static_cast<std::streamsize>(payload.size()))
      << path << ": truncated payload, expected " << payload.size() << " bytes";
  return payload;
}

void write_binary(const std::string& path, const char* magic, int64_t h, int64_t w,
                  const std::vector<uint8_t>& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  SFA_CHECK(out.good()) << "cannot open " << path << " for writing";
  out << magic << "\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  out.flush();
  SFA_CHECK(out.good()) << "write failed for " << path;
}

}  // namespace

void write_ppm(const std::string& path, const ImageU8& img) {
  SFA_CHECK(img.channels == 3) << "write_ppm requires an RGB image, got " << img.channels
                               << " channels";
  SFA_CHECK(static_cast<int64_t>(img.pixels.size()) == img.h * img.w * 3)
      << "write_ppm: pixel buffer size mismatch";
  write_binary(path, "P6", img.h, img.w, img.pixels);
}

ImageU8 read_ppm(const std::string& path) {
  ImageU8 img;
  img.channels = 3;
  img.pixels = read_binary(path, "P6", img.h, img.w, 3);
  return img;
}

void write_pgm(const std::string& path, const LabelMap& mask) {
  SFA_CHECK(static_cast<int64_t>(mask.labels.size()) == mask.h * mask.w)
      << "write_pgm: label buffer size mismatch";
  write_binary(path, "P5", mask.h, mask.w, mask.labels);
}

LabelMap read_pgm(const std::string& path) {
  LabelMap mask;
  mask.labels = read_binary(path, "P5", mask.h, mask.w, 1);
  return mask;
}

}  // namespace sfanet
