#include "card/pnm.hpp"

#include <cctype>
#include <fstream>
#include <string>

#include "card/error.hpp"

namespace card {

namespace {

void write_pnm(const std::filesystem::path& path, const char* magic, std::size_t w, std::size_t h,
               const std::vector<std::uint8_t>& pixels, std::size_t channels) {
  if (pixels.size() != w * h * channels) throw ShapeError("image buffer size does not match extents");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << magic << '\n' << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!os) throw ConfigError("failed writing " + path.string());
}

std::size_t read_header_int(std::istream& is, const std::filesystem::path& path) {
  int ch = is.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = is.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = is.get();
  }
  if (ch == EOF || !std::isdigit(ch)) throw ConfigError("malformed PNM header in " + path.string());
  std::size_t v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + static_cast<std::size_t>(ch - '0');
    ch = is.get();
  }
  // exactly one whitespace byte separates the header from the raster
  return v;
}

std::vector<std::uint8_t> read_pnm(const std::filesystem::path& path, const char* magic, std::size_t channels,
                                   std::size_t& w, std::size_t& h) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path.string());
  char m[2];
  if (!is.read(m, 2) || m[0] != magic[0] || m[1] != magic[1]) {
    throw ConfigError(path.string() + " is not a binary " + magic + " file");
  }
  w = read_header_int(is, path);
  h = read_header_int(is, path);
  const std::size_t maxval = read_header_int(is, path);
  if (maxval != 255) throw ConfigError("only maxval 255 is supported in " + path.string());
  std::vector<std::uint8_t> pixels(w * h * channels);
  if (!is.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()))) {
    throw ConfigError("truncated raster in " + path.string());
  }
  return pixels;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  write_pnm(path, "P6", img.width, img.height, img.pixels, 3);
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  write_pnm(path, "P5", img.width, img.height, img.pixels, 1);
}

RgbImage read_ppm(const std::filesystem::path& path) {
  RgbImage img;
  img.pixels = read_pnm(path, "P6", 3, img.width, img.height);
  return img;
}

GrayImage read_pgm(const std::filesystem::path& path) {
  GrayImage img;
  img.pixels = read_pnm(path, "P5", 1, img.width, img.height);
  return img;
}

}  // namespace card
