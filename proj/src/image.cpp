#include "mareid/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace mareid {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_raw(const std::filesystem::path& path, int h, int w, int channels, const std::vector<std::uint8_t>& px) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = channels == 1 ? PNG_FORMAT_GRAY : (channels == 4 ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB);
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, px.data(), 0, nullptr))
    throw std::runtime_error("cannot write PNG " + path.string() + ": " + image.message);
}

std::vector<std::uint8_t> read_raw(const std::filesystem::path& path, png_uint_32 format, int& h, int& w) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw std::runtime_error("cannot read PNG " + path.string() + ": " + image.message);
  image.format = format;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr))
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " + image.message);
  h = static_cast<int>(image.height);
  w = static_cast<int>(image.width);
  return px;
}

}  // namespace

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3 && img.channels != 4)
    throw std::invalid_argument("write_png: unsupported channel count " + std::to_string(img.channels));
  std::vector<std::uint8_t> px(img.data.size());
  std::transform(img.data.begin(), img.data.end(), px.begin(), to_byte);
  write_raw(path, img.height, img.width, img.channels, px);
}

void write_png(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> px(mask.data.size());
  std::transform(mask.data.begin(), mask.data.end(), px.begin(), [](std::uint8_t v) { return v ? 255 : 0; });
  write_raw(path, mask.height, mask.width, 1, px);
}

void write_label_png(const std::filesystem::path& path, int height, int width,
                     const std::vector<std::uint8_t>& labels) {
  if (labels.size() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("label map size mismatch");
  write_raw(path, height, width, 1, labels);
}

std::vector<std::uint8_t> read_label_png(const std::filesystem::path& path, int& height, int& width) {
  return read_raw(path, PNG_FORMAT_GRAY, height, width);
}

Image read_png(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto px = read_raw(path, PNG_FORMAT_RGB, h, w);
  Image img(h, w, 3);
  for (std::size_t i = 0; i < px.size(); ++i) img.data[i] = px[i] / 255.0;
  return img;
}

Mask read_png_mask(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto px = read_raw(path, PNG_FORMAT_GRAY, h, w);
  Mask m(h, w);
  for (std::size_t i = 0; i < px.size(); ++i) m.data[i] = px[i] >= 128 ? 1 : 0;
  return m;
}

Image quantize8(const Image& img) {
  Image out = img;
  for (double& v : out.data) v = to_byte(v) / 255.0;
  return out;
}

}  // namespace mareid
