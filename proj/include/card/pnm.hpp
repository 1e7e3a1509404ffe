#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace card {

// 8-bit images; RGB interleaved for colour.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

// Binary P6 / P5 with maxval 255. Readers accept '#' comments in the header.
void write_ppm(const std::filesystem::path& path, const RgbImage& img);
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
RgbImage read_ppm(const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);

}  // namespace card
