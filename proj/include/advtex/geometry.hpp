#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace advtex {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }

/// Row-major 3x3 matrix acting on homogeneous 2D points.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }
  static Mat3 scale(double sx, double sy) {
    Mat3 r;
    r(0, 0) = sx;
    r(1, 1) = sy;
    return r;
  }
  static Mat3 translation(double tx, double ty) {
    Mat3 r;
    r(0, 2) = tx;
    r(1, 2) = ty;
    return r;
  }
  static Mat3 rotation(double radians) {
    Mat3 r;
    const double c = std::cos(radians), s = std::sin(radians);
    r(0, 0) = c;
    r(0, 1) = -s;
    r(1, 0) = s;
    r(1, 1) = c;
    return r;
  }

  double& operator()(int r, int c) { return m[static_cast<size_t>(3 * r + c)]; }
  double operator()(int r, int c) const { return m[static_cast<size_t>(3 * r + c)]; }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) acc += (*this)(i, k) * o(k, j);
        r(i, j) = acc;
      }
    return r;
  }

  /// Projective transform of a point. Throws if the point maps to infinity.
  Vec2 apply(Vec2 p) const {
    const double w = m[6] * p.x + m[7] * p.y + m[8];
    if (std::abs(w) < 1e-14) throw std::runtime_error("Mat3::apply: point maps to infinity");
    const double inv = 1.0 / w;
    return {(m[0] * p.x + m[1] * p.y + m[2]) * inv, (m[3] * p.x + m[4] * p.y + m[5]) * inv};
  }

  double determinant() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  /// Inverse via the adjugate. Throws on a singular matrix.
  Mat3 inverse() const {
    const double det = determinant();
    if (std::abs(det) < 1e-14) throw std::runtime_error("Mat3::inverse: singular matrix");
    const double inv = 1.0 / det;
    Mat3 r;
    r(0, 0) = (m[4] * m[8] - m[5] * m[7]) * inv;
    r(0, 1) = (m[2] * m[7] - m[1] * m[8]) * inv;
    r(0, 2) = (m[1] * m[5] - m[2] * m[4]) * inv;
    r(1, 0) = (m[5] * m[6] - m[3] * m[8]) * inv;
    r(1, 1) = (m[0] * m[8] - m[2] * m[6]) * inv;
    r(1, 2) = (m[2] * m[3] - m[0] * m[5]) * inv;
    r(2, 0) = (m[3] * m[7] - m[4] * m[6]) * inv;
    r(2, 1) = (m[1] * m[6] - m[0] * m[7]) * inv;
    r(2, 2) = (m[0] * m[4] - m[1] * m[3]) * inv;
    return r;
  }

  /// Canonical projective scaling: bottom-right entry forced to 1.
  Mat3 canonical() const {
    if (std::abs(m[8]) < 1e-14) throw std::runtime_error("Mat3::canonical: bottom-right entry is zero");
    Mat3 r = *this;
    const double inv = 1.0 / m[8];
    for (double& v : r.m) v *= inv;
    return r;
  }
};

/// Axis-aligned bounding box of a vertex list.
struct Rect {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
};

inline Rect bounding_box(const std::vector<Vec2>& pts) {
  if (pts.empty()) throw std::runtime_error("bounding_box: empty vertex list");
  Rect r{pts[0].x, pts[0].y, pts[0].x, pts[0].y};
  for (const Vec2& p : pts) {
    r.x_min = std::min(r.x_min, p.x);
    r.y_min = std::min(r.y_min, p.y);
    r.x_max = std::max(r.x_max, p.x);
    r.y_max = std::max(r.y_max, p.y);
  }
  return r;
}

inline double iou(const Rect& a, const Rect& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Even-odd point-in-polygon test for a simple polygon.
inline bool point_in_polygon(Vec2 p, const std::vector<Vec2>& poly) {
  bool inside = false;
  const size_t n = poly.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2 a = poly[i], b = poly[j];
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x_cross = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
      if (p.x < x_cross) inside = !inside;
    }
  }
  return inside;
}

}  // namespace advtex
