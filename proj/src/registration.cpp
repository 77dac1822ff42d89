#include "advtex/registration.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace advtex {

size_t TextureMap::mask_count() const {
  size_t n = 0;
  for (uint8_t m : mask) n += m != 0;
  return n;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::string to_string(DistanceTag d) {
  switch (d) {
    case DistanceTag::far: return "far";
    case DistanceTag::medium: return "medium";
    case DistanceTag::near: return "near";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::runtime_error("unknown split tag: " + s);
}

DistanceTag distance_from_string(const std::string& s) {
  if (s == "far") return DistanceTag::far;
  if (s == "medium") return DistanceTag::medium;
  if (s == "near") return DistanceTag::near;
  throw std::runtime_error("unknown distance tag: " + s);
}

namespace {

// Hartley normalization: translate centroid to origin, scale mean distance to sqrt(2).
Mat3 normalizing_transform(const std::vector<Vec2>& pts) {
  double cx = 0, cy = 0;
  for (const Vec2& p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  double mean_dist = 0;
  for (const Vec2& p : pts) mean_dist += std::hypot(p.x - cx, p.y - cy);
  mean_dist /= static_cast<double>(pts.size());
  const double s = mean_dist > 1e-12 ? std::sqrt(2.0) / mean_dist : 1.0;
  Mat3 t;
  t(0, 0) = s;
  t(0, 2) = -s * cx;
  t(1, 1) = s;
  t(1, 2) = -s * cy;
  return t;
}

}  // namespace

Mat3 estimate_homography(const PlanarCorrespondenceSet& corr) {
  const size_t n = corr.size();
  if (n < 4 || corr.frame_points.size() != n)
    throw std::runtime_error("estimate_homography: need at least 4 correspondence pairs");
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      const Vec2 d = corr.root_points[i] - corr.root_points[j];
      if (std::hypot(d.x, d.y) < 1e-9)
        throw std::runtime_error("estimate_homography: coincident root points");
    }

  const Mat3 t_root = normalizing_transform(corr.root_points);
  const Mat3 t_frame = normalizing_transform(corr.frame_points);

  Eigen::MatrixXd a(2 * n, 9);
  for (size_t i = 0; i < n; ++i) {
    const Vec2 p = t_root.apply(corr.root_points[i]);
    const Vec2 q = t_frame.apply(corr.frame_points[i]);
    a.row(2 * i) << -p.x, -p.y, -1, 0, 0, 0, q.x * p.x, q.x * p.y, q.x;
    a.row(2 * i + 1) << 0, 0, 0, -p.x, -p.y, -1, q.y * p.x, q.y * p.y, q.y;
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // An exact homography leaves exactly one vanishing singular value; a second
  // small one means the configuration does not determine the map.
  if (sv(7) < 1e-9 * std::max(sv(0), 1e-300))
    throw std::runtime_error("estimate_homography: degenerate correspondences");
  const Eigen::VectorXd h = svd.matrixV().col(8);

  Mat3 hn;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) hn(r, c) = h(3 * r + c);
  const Mat3 result = t_frame.inverse() * hn * t_root;
  if (std::abs(result.determinant()) < 1e-12)
    throw std::runtime_error("estimate_homography: degenerate correspondences");
  return result.canonical();
}

double estimate_illumination(const Frame& frame) {
  if (frame.object_polygon.size() < 3)
    throw std::runtime_error("estimate_illumination: polygon needs at least 3 vertices");
  std::vector<Vec2> poly = frame.object_polygon;
  for (Vec2& p : poly) {
    p.x = std::clamp(p.x, 0.0, static_cast<double>(frame.image.width() - 1));
    p.y = std::clamp(p.y, 0.0, static_cast<double>(frame.image.height() - 1));
  }
  const Rect bb = bounding_box(poly);
  const int y0 = std::max(0, static_cast<int>(std::floor(bb.y_min)));
  const int y1 = std::min(frame.image.height() - 1, static_cast<int>(std::ceil(bb.y_max)));
  const int x0 = std::max(0, static_cast<int>(std::floor(bb.x_min)));
  const int x1 = std::min(frame.image.width() - 1, static_cast<int>(std::ceil(bb.x_max)));

  double sum = 0.0;
  size_t count = 0;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (point_in_polygon({static_cast<double>(x), static_cast<double>(y)}, poly)) {
        sum += pixel_intensity(frame.image, y, x);
        ++count;
      }
  if (count == 0) throw std::runtime_error("estimate_illumination: polygon has zero pixel area");
  return sum / static_cast<double>(count);
}

namespace {

struct WarpDomain {
  Mat3 inv;           // frame -> root
  int y0, y1, x0, x1; // frame-space half-open pixel bounds to visit
};

// Frame pixels that can possibly see the texture: bounding box of the warped
// texture corners, padded by one pixel and clipped to the frame.
WarpDomain warp_domain(const Image& frame, const TextureMap& texture, const ViewMap& view) {
  if (std::abs(view.homography.determinant()) < 1e-12)
    throw std::runtime_error("composite: view homography is not invertible");
  const double w = texture.width() - 1.0;
  const double h = texture.height() - 1.0;
  const std::vector<Vec2> corners{{0, 0}, {w, 0}, {w, h}, {0, h}};
  std::vector<Vec2> mapped;
  mapped.reserve(4);
  for (const Vec2& c : corners) mapped.push_back(view.homography.apply(c));
  const Rect bb = bounding_box(mapped);
  WarpDomain d;
  d.inv = view.homography.inverse();
  d.y0 = std::max(0, static_cast<int>(std::floor(bb.y_min)) - 1);
  d.y1 = std::min(frame.height(), static_cast<int>(std::ceil(bb.y_max)) + 2);
  d.x0 = std::max(0, static_cast<int>(std::floor(bb.x_min)) - 1);
  d.x1 = std::min(frame.width(), static_cast<int>(std::ceil(bb.x_max)) + 2);
  return d;
}

// Mask membership of a root point: nearest texel inside bounds and set.
bool on_mask(const TextureMap& texture, Vec2 p) {
  const int xi = static_cast<int>(std::lround(p.x));
  const int yi = static_cast<int>(std::lround(p.y));
  if (xi < 0 || xi >= texture.width() || yi < 0 || yi >= texture.height()) return false;
  return texture.in_mask(yi, xi);
}

}  // namespace

Image composite(const Image& frame, const TextureMap& texture, const TextureMap& base,
                const ViewMap& view, double delta_scale) {
  if (!texture.pixels.same_shape(base.pixels))
    throw std::runtime_error("composite: texture and base shapes differ");
  if (frame.channels() != texture.pixels.channels())
    throw std::runtime_error("composite: channel mismatch between frame and texture");
  Image out = frame;
  const WarpDomain d = warp_domain(frame, texture, view);
  const int channels = frame.channels();
  for (int y = d.y0; y < d.y1; ++y)
    for (int x = d.x0; x < d.x1; ++x) {
      const Vec2 p = d.inv.apply({static_cast<double>(x), static_cast<double>(y)});
      if (!on_mask(texture, p)) continue;
      for (int c = 0; c < channels; ++c) {
        const double b = bilinear_sample(base.pixels, p.x, p.y, c);
        const double t = bilinear_sample(texture.pixels, p.x, p.y, c);
        out.at(y, x, c) = std::clamp(b * view.illumination + (t - b) * delta_scale, 0.0, 1.0);
      }
    }
  return out;
}

Image composite(const Image& frame, const TextureMap& texture, const ViewMap& view) {
  return composite(frame, texture, texture, view, view.illumination);
}

Image backproject_gradient(const Image& frame_gradient, const ViewMap& view,
                           const TextureMap& texture, double delta_scale) {
  Image grad(texture.height(), texture.width(), frame_gradient.channels());
  const WarpDomain d = warp_domain(frame_gradient, texture, view);
  const int channels = frame_gradient.channels();
  const int tw = texture.width();
  const int th = texture.height();
  for (int y = d.y0; y < d.y1; ++y)
    for (int x = d.x0; x < d.x1; ++x) {
      const Vec2 p = d.inv.apply({static_cast<double>(x), static_cast<double>(y)});
      if (!on_mask(texture, p)) continue;
      const int x0 = static_cast<int>(std::floor(p.x));
      const int y0 = static_cast<int>(std::floor(p.y));
      const double fx = p.x - x0;
      const double fy = p.y - y0;
      const double wgt[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (int k = 0; k < 4; ++k) {
        if (xs[k] < 0 || xs[k] >= tw || ys[k] < 0 || ys[k] >= th) continue;
        for (int c = 0; c < channels; ++c)
          grad.at(ys[k], xs[k], c) += wgt[k] * delta_scale * frame_gradient.at(y, x, c);
      }
    }
  // Crop to the extent of the texture: zero everything off the mask.
  for (int y = 0; y < th; ++y)
    for (int x = 0; x < tw; ++x)
      if (!texture.in_mask(y, x))
        for (int c = 0; c < channels; ++c) grad.at(y, x, c) = 0.0;
  return grad;
}

Image merge_gradients(const std::vector<Image>& per_frame_grads) {
  if (per_frame_grads.empty()) throw std::runtime_error("merge_gradients: empty gradient list");
  Image mean = per_frame_grads[0];
  for (size_t i = 1; i < per_frame_grads.size(); ++i) {
    if (!per_frame_grads[i].same_shape(mean))
      throw std::runtime_error("merge_gradients: gradient shapes differ");
    for (size_t k = 0; k < mean.size(); ++k) mean.raw()[k] += per_frame_grads[i].raw()[k];
  }
  const double inv = 1.0 / static_cast<double>(per_frame_grads.size());
  for (double& v : mean.raw()) v *= inv;
  return mean;
}

ViewMap estimate_view(const Frame& frame, const TextureMap& base,
                      const std::vector<Vec2>& root_vertices) {
  if (frame.object_polygon.size() != root_vertices.size())
    throw std::runtime_error("estimate_view: vertex count mismatch");
  PlanarCorrespondenceSet corr{root_vertices, frame.object_polygon};
  ViewMap view;
  view.homography = estimate_homography(corr);
  view.illumination = 1.0;

  // Relative intensity against the unit-lit texture rendered through the same
  // map, averaged over exactly the pixels the compositor writes. On frames the
  // pipeline rendered itself this recovers the generator's factor to machine
  // precision; polygon-based estimate_illumination would leak edge pixels in.
  const Image unit = composite(Image(frame.image.height(), frame.image.width(),
                                     frame.image.channels()),
                               base, view);
  const WarpDomain d = warp_domain(frame.image, base, view);
  double frame_sum = 0.0, unit_sum = 0.0;
  for (int y = d.y0; y < d.y1; ++y)
    for (int x = d.x0; x < d.x1; ++x) {
      const Vec2 p = d.inv.apply({static_cast<double>(x), static_cast<double>(y)});
      if (!on_mask(base, p)) continue;
      frame_sum += pixel_intensity(frame.image, y, x);
      unit_sum += pixel_intensity(unit, y, x);
    }
  if (unit_sum < 1e-9) throw std::runtime_error("estimate_view: reference render has zero intensity");
  view.illumination = frame_sum / unit_sum;
  return view;
}

}  // namespace advtex
