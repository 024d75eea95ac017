#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace mareid {

// Interleaved H×W×C image, values nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  bool empty() const { return data.empty(); }
  bool operator==(const Image&) const = default;
};

// Single-channel 0/1 mask.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}
  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
  bool operator==(const Mask&) const = default;
};

// Lossless 8-bit PNG. Values are clamped to [0,1] and rounded.
void write_png(const std::filesystem::path& path, const Image& img);
void write_png(const std::filesystem::path& path, const Mask& mask);
// Label map (one byte per pixel, values kept as-is).
void write_label_png(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& labels);
std::vector<std::uint8_t> read_label_png(const std::filesystem::path& path, int& height, int& width);
Image read_png(const std::filesystem::path& path);
Mask read_png_mask(const std::filesystem::path& path);

// Image quantised exactly as a PNG round trip would leave it.
Image quantize8(const Image& img);

}  // namespace mareid
