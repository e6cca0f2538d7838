#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace oslo {

// Interleaved H x W x C intensities in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> pixels;
  std::string domain_tag;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0) : height(h), width(w), channels(c), pixels(static_cast<size_t>(h * w * c), fill) {}

  double& at(int y, int x, int c) { return pixels[static_cast<size_t>((y * width + x) * channels + c)]; }
  double at(int y, int x, int c) const { return pixels[static_cast<size_t>((y * width + x) * channels + c)]; }

  bool same_shape(const Image& o) const { return height == o.height && width == o.width && channels == o.channels; }
};

// Throws InputError when dimensions are non-positive, the buffer size is
// wrong, or any intensity lies outside [0, 1].
void validate(const Image& image);

// Rec. 601 luma for RGB, the channel itself for single-channel images.
double luminance(const Image& image, int y, int x);

// Round-trips intensities through 8-bit storage, matching what save_png
// writes to disk.
Image quantize_8bit(Image image);
// Grey images are replicated to three channels, alpha is dropped.
Image to_rgb(Image image);

// Loads any format OpenCV can decode; channels are returned in RGB order.
Image load_image(const std::filesystem::path& path);
Image decode_image(std::span<const unsigned char> bytes);
// Writes a lossless PNG. Intensities are quantized to 8 bits.
void save_png(const Image& image, const std::filesystem::path& path);

// Shorter side resized to `size` with area interpolation, then center crop to
// size x size. Images already at size x size pass through untouched.
Image resize_center_crop(const Image& image, int size);

}  // namespace oslo
