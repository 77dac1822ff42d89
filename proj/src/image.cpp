#include "advtex/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace advtex {

void Image::clamp01() {
  for (double& v : data_) v = std::clamp(v, 0.0, 1.0);
}

uint8_t quantize8(double v) {
  v = std::clamp(v, 0.0, 1.0) * 255.0;
  // rint under the default rounding mode gives round-half-even.
  return static_cast<uint8_t>(std::rint(v));
}

void save_netpbm(const Image& img, const std::filesystem::path& path) {
  if (img.channels() != 1 && img.channels() != 3)
    throw std::runtime_error("save_netpbm: unsupported channel count for " + path.string());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_netpbm: cannot open " + path.string());
  f << (img.channels() == 3 ? "P6" : "P5") << "\n" << img.width() << " " << img.height() << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(img.width()) * img.channels());
  for (int y = 0; y < img.height(); ++y) {
    size_t k = 0;
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < img.channels(); ++c) row[k++] = quantize8(img.at(y, x, c));
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw std::runtime_error("save_netpbm: write failed for " + path.string());
}

namespace {

int read_pnm_token(std::istream& f, const std::string& path) {
  // Skips whitespace and '#' comments, then reads one non-negative integer.
  int ch = f.get();
  while (ch != EOF && (std::isspace(ch) || ch == '#')) {
    if (ch == '#')
      while (ch != EOF && ch != '\n') ch = f.get();
    ch = f.get();
  }
  int value = 0;
  bool any = false;
  while (ch != EOF && std::isdigit(ch)) {
    value = value * 10 + (ch - '0');
    any = true;
    ch = f.get();
  }
  if (!any) throw std::runtime_error("load_netpbm: malformed header in " + path);
  return value;
}

}  // namespace

Image load_netpbm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_netpbm: cannot open " + path.string());
  char magic[2];
  f.read(magic, 2);
  if (!f || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw std::runtime_error("load_netpbm: not a binary PGM/PPM file: " + path.string());
  const int channels = magic[1] == '6' ? 3 : 1;
  const int width = read_pnm_token(f, path.string());
  const int height = read_pnm_token(f, path.string());
  const int maxval = read_pnm_token(f, path.string());
  if (maxval != 255) throw std::runtime_error("load_netpbm: only maxval 255 supported: " + path.string());
  Image img(height, width, channels);
  std::vector<uint8_t> row(static_cast<size_t>(width) * channels);
  for (int y = 0; y < height; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!f) throw std::runtime_error("load_netpbm: truncated pixel data in " + path.string());
    size_t k = 0;
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c) img.at(y, x, c) = dequantize8(row[k++]);
  }
  return img;
}

double bilinear_sample(const Image& img, double x, double y, int c) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  auto tap = [&](int yy, int xx) -> double {
    if (xx < 0 || xx >= img.width() || yy < 0 || yy >= img.height()) return 0.0;
    return img.at(yy, xx, c);
  };
  return tap(y0, x0) * (1 - fx) * (1 - fy) + tap(y0, x0 + 1) * fx * (1 - fy) +
         tap(y0 + 1, x0) * (1 - fx) * fy + tap(y0 + 1, x0 + 1) * fx * fy;
}

Image resize_bilinear(const Image& img, int out_height, int out_width) {
  if (out_height < 1 || out_width < 1) throw std::runtime_error("resize_bilinear: bad output shape");
  Image out(out_height, out_width, img.channels());
  const double sy = static_cast<double>(img.height()) / out_height;
  const double sx = static_cast<double>(img.width()) / out_width;
  for (int y = 0; y < out_height; ++y) {
    // Half-pixel centers, clamped so edge samples replicate the border.
    double src_y = (y + 0.5) * sy - 0.5;
    src_y = std::clamp(src_y, 0.0, static_cast<double>(img.height() - 1));
    for (int x = 0; x < out_width; ++x) {
      double src_x = (x + 0.5) * sx - 0.5;
      src_x = std::clamp(src_x, 0.0, static_cast<double>(img.width() - 1));
      for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = bilinear_sample(img, src_x, src_y, c);
    }
  }
  return out;
}

void draw_rect(Image& img, const Rect& r, double red, double green, double blue) {
  if (img.channels() != 3) return;
  const int x0 = std::clamp(static_cast<int>(std::lround(r.x_min)), 0, img.width() - 1);
  const int x1 = std::clamp(static_cast<int>(std::lround(r.x_max)), 0, img.width() - 1);
  const int y0 = std::clamp(static_cast<int>(std::lround(r.y_min)), 0, img.height() - 1);
  const int y1 = std::clamp(static_cast<int>(std::lround(r.y_max)), 0, img.height() - 1);
  auto put = [&](int y, int x) {
    img.at(y, x, 0) = red;
    img.at(y, x, 1) = green;
    img.at(y, x, 2) = blue;
  };
  for (int x = x0; x <= x1; ++x) {
    put(y0, x);
    put(y1, x);
  }
  for (int y = y0; y <= y1; ++y) {
    put(y, x0);
    put(y, x1);
  }
}

}  // namespace advtex
