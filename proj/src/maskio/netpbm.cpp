#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "rdc/errors.hpp"
#include "rdc/maskio.hpp"

namespace rdc::masks {
namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

// Cursor over a netpbm-style header: whitespace-separated tokens with '#'
// comments, then exactly one whitespace byte before the raster.
class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, const std::filesystem::path& path)
      : bytes_(bytes), path_(path) {}

  std::string token() {
    skip_space_and_comments();
    const std::size_t start = pos_;
    while (pos_ < bytes_.size() && !std::isspace(uchar(bytes_[pos_]))) ++pos_;
    if (start == pos_) fail("truncated header");
    return bytes_.substr(start, pos_ - start);
  }

  std::size_t positive_int() {
    const std::string t = token();
    std::size_t v = 0;
    for (char c : t) {
      if (!std::isdigit(uchar(c))) fail("bad header field '" + t + "'");
      v = v * 10 + static_cast<std::size_t>(c - '0');
      if (v > (std::size_t{1} << 31)) fail("header field too large");
    }
    if (v == 0) fail("zero header field");
    return v;
  }

  // Consumes the single whitespace byte that ends the header.
  std::size_t raster_offset() {
    if (pos_ >= bytes_.size() || !std::isspace(uchar(bytes_[pos_])))
      fail("missing whitespace before raster");
    return pos_ + 1;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(path_.string() + ": " + what);
  }

 private:
  static unsigned char uchar(char c) { return static_cast<unsigned char>(c); }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(uchar(bytes_[pos_]))) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& bytes_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 0;
};

void expect_magic(HeaderReader& h, const char* magic) {
  const std::string m = h.token();
  if (m != magic) h.fail(std::string("expected ") + magic + ", found '" + m + "'");
}

std::uint32_t read_u32_le(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 |
         std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

void append_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

Tensor load_pfm(const std::filesystem::path& path, std::size_t channels) {
  const std::string bytes = read_file(path);
  HeaderReader h(bytes, path);
  expect_magic(h, channels == 1 ? "Pf" : "PF");
  const std::size_t w = h.positive_int();
  const std::size_t ht = h.positive_int();
  const std::string scale_tok = h.token();
  double scale = 0.0;
  try {
    scale = std::stod(scale_tok);
  } catch (const std::exception&) {
    h.fail("bad scale field '" + scale_tok + "'");
  }
  if (!(scale < 0.0)) h.fail("only little-endian PFM (negative scale) is supported");
  const std::size_t off = h.raster_offset();
  const std::size_t need = w * ht * channels * 4;
  if (bytes.size() - off < need) h.fail("truncated payload");

  Tensor t({channels, ht, w});
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + off);
  for (std::size_t row = 0; row < ht; ++row) {
    const std::size_t y = ht - 1 - row;  // bottom-to-top
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const float f = std::bit_cast<float>(read_u32_le(p));
        p += 4;
        t.values[(c * ht + y) * w + x] = static_cast<double>(f);
      }
  }
  return t;
}

void store_pfm(const Tensor& t, const std::filesystem::path& path,
               std::size_t channels) {
  if (t.rank() != 3 || t.dim(0) != channels)
    throw ShapeError("store_pfm: expected [" + std::to_string(channels) +
                     " x H x W], got " + shape_string(t.shape));
  const std::size_t ht = t.dim(1), w = t.dim(2);
  std::string out = std::string(channels == 1 ? "Pf" : "PF") + "\n" +
                    std::to_string(w) + " " + std::to_string(ht) + "\n-1.0\n";
  out.reserve(out.size() + w * ht * channels * 4);
  for (std::size_t row = 0; row < ht; ++row) {
    const std::size_t y = ht - 1 - row;
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        append_u32_le(out, std::bit_cast<std::uint32_t>(
                               static_cast<float>(t.values[(c * ht + y) * w + x])));
  }
  write_file(path, out);
}

}  // namespace

GrayImage load_pgm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  HeaderReader h(bytes, path);
  expect_magic(h, "P5");
  GrayImage img;
  img.width = h.positive_int();
  img.height = h.positive_int();
  const std::size_t maxval = h.positive_int();
  if (maxval > 65535) h.fail("maxval above 65535");
  img.maxval = static_cast<std::uint32_t>(maxval);
  const std::size_t off = h.raster_offset();
  const std::size_t bps = maxval > 255 ? 2 : 1;
  const std::size_t n = img.width * img.height;
  if (bytes.size() - off < n * bps) h.fail("truncated payload");
  img.pixels.resize(n);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + off);
  for (std::size_t i = 0; i < n; ++i)
    img.pixels[i] = bps == 2 ? (std::uint32_t(p[2 * i]) << 8 | p[2 * i + 1]) : p[i];
  return img;
}

void store_pgm(const GrayImage& img, const std::filesystem::path& path) {
  if (img.pixels.size() != img.width * img.height)
    throw ShapeError("store_pgm: pixel count does not match extents");
  if (img.maxval == 0 || img.maxval > 65535)
    throw DomainError("store_pgm: maxval out of range");
  std::string out = "P5\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n" +
                    std::to_string(img.maxval) + "\n";
  const bool wide = img.maxval > 255;
  for (std::uint32_t v : img.pixels) {
    if (v > img.maxval) throw DomainError("store_pgm: sample above maxval");
    if (wide) out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v & 0xff));
  }
  write_file(path, out);
}

Tensor load_image_ppm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  HeaderReader h(bytes, path);
  expect_magic(h, "P6");
  const std::size_t w = h.positive_int();
  const std::size_t ht = h.positive_int();
  const std::size_t maxval = h.positive_int();
  if (maxval != 255) h.fail("only 8-bit PPM (maxval 255) is supported");
  const std::size_t off = h.raster_offset();
  if (bytes.size() - off < w * ht * 3) h.fail("truncated payload");
  Tensor t({3, ht, w});
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + off);
  for (std::size_t i = 0; i < w * ht; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      t.values[c * w * ht + i] = p[3 * i + c] / 255.0;
  return t;
}

void store_image_ppm(const Tensor& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("store_image_ppm: expected [3 x H x W], got " +
                     shape_string(image.shape));
  const std::size_t ht = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(ht) + "\n255\n";
  for (std::size_t i = 0; i < w * ht; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(image.values[c * w * ht + i], 0.0, 1.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  write_file(path, out);
}

Tensor load_scalar_pfm(const std::filesystem::path& path) { return load_pfm(path, 1); }
void store_scalar_pfm(const Tensor& map, const std::filesystem::path& path) {
  store_pfm(map, path, 1);
}
Tensor load_vec3_pfm(const std::filesystem::path& path) { return load_pfm(path, 3); }
void store_vec3_pfm(const Tensor& map, const std::filesystem::path& path) {
  store_pfm(map, path, 3);
}

}  // namespace rdc::masks
