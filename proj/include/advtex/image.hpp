#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advtex/geometry.hpp"

namespace advtex {

/// Real-valued image, row-major HWC, values nominally in [0,1].
/// Quantization to 8 bit happens only at file I/O.
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels, double fill = 0.0)
      : height_(height), width_(width), channels_(channels),
        data_(static_cast<size_t>(height) * width * channels, fill) {}

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int y, int x, int c) {
    return data_[(static_cast<size_t>(y) * width_ + x) * channels_ + c];
  }
  double at(int y, int x, int c) const {
    return data_[(static_cast<size_t>(y) * width_ + x) * channels_ + c];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  void clamp01();
  bool same_shape(const Image& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

/// Round-half-even quantization of a unit-range value to 8 bit.
uint8_t quantize8(double v);
inline double dequantize8(uint8_t v) { return v / 255.0; }

// Netpbm I/O: 3-channel images as binary PPM (P6), 1-channel as PGM (P5).
void save_netpbm(const Image& img, const std::filesystem::path& path);
Image load_netpbm(const std::filesystem::path& path);

/// Bilinear sample of channel c at (x, y); taps outside the image contribute zero.
double bilinear_sample(const Image& img, double x, double y, int c);

/// Bilinear resize with half-pixel center alignment.
Image resize_bilinear(const Image& img, int out_height, int out_width);

/// Mean over channels at one pixel.
inline double pixel_intensity(const Image& img, int y, int x) {
  double s = 0.0;
  for (int c = 0; c < img.channels(); ++c) s += img.at(y, x, c);
  return s / img.channels();
}

/// Draw a one-pixel rectangle outline, clipped to the image.
void draw_rect(Image& img, const Rect& r, double red, double green, double blue);

}  // namespace advtex
