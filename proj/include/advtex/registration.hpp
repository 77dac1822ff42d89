#pragma once

#include <optional>
#include <string>
#include <vector>

#include "advtex/geometry.hpp"
#include "advtex/image.hpp"

namespace advtex {

/// Point pairs linking texture (root) coordinates to frame coordinates.
struct PlanarCorrespondenceSet {
  std::vector<Vec2> root_points;
  std::vector<Vec2> frame_points;

  size_t size() const { return root_points.size(); }
};

/// Per-frame viewing map: root->frame homography plus the frame's
/// illumination factor relative to the unit-lit texture.
struct ViewMap {
  Mat3 homography;          // canonical form, bottom-right entry 1
  double illumination = 1.0;

  Mat3 inverse() const { return homography.inverse(); }
};

/// The optimizable pattern in root coordinates plus its valid-region mask.
struct TextureMap {
  Image pixels;                 // H x W x C in [0,1]
  std::vector<uint8_t> mask;    // H x W, 1 inside the object region

  int height() const { return pixels.height(); }
  int width() const { return pixels.width(); }
  bool in_mask(int y, int x) const { return mask[static_cast<size_t>(y) * width() + x] != 0; }
  size_t mask_count() const;
};

enum class Split { train, val, test };
enum class DistanceTag { far, medium, near };

std::string to_string(Split s);
std::string to_string(DistanceTag d);
Split split_from_string(const std::string& s);
DistanceTag distance_from_string(const std::string& s);

struct FrameMeta {
  std::string sequence_id;
  Split split = Split::train;
  DistanceTag distance = DistanceTag::medium;
  std::string condition;        // background class, e.g. "tree" / "sky"
  std::string image_path;
};

/// One annotated video frame.
struct Frame {
  Image image;                     // h x w x C in [0,1]
  std::vector<Vec2> object_polygon;  // ordered vertices in frame coordinates
  FrameMeta meta;
};

/// Normalized DLT homography from >= 4 correspondences.
/// Throws "degenerate correspondences" when the design matrix is rank deficient.
Mat3 estimate_homography(const PlanarCorrespondenceSet& corr);

/// Mean channel-averaged intensity over pixels strictly inside the object polygon.
/// Vertices are clamped to the image bounds before rasterization.
double estimate_illumination(const Frame& frame);

/// Composite a texture into a frame through a view map.
///
/// Output pixels whose inverse-mapped centers land on the texture mask become
///   clamp01( warp(base)(p) * view.illumination + warp(texture - base)(p) * delta_scale ),
/// all other pixels are copied from the frame. With base == texture this is a
/// plain replacement render of the texture at the view's illumination.
Image composite(const Image& frame, const TextureMap& texture, const TextureMap& base,
                const ViewMap& view, double delta_scale);

/// Replacement composite: the whole texture rendered at the view's illumination.
Image composite(const Image& frame, const TextureMap& texture, const ViewMap& view);

/// Adjoint of the perturbation warp: maps a frame-space gradient back to root
/// coordinates (including the delta_scale factor) and crops it to the texture mask.
Image backproject_gradient(const Image& frame_gradient, const ViewMap& view,
                           const TextureMap& texture, double delta_scale);

/// Elementwise arithmetic mean of per-frame texture gradients. Throws on an empty list.
Image merge_gradients(const std::vector<Image>& per_frame_grads);

/// View estimation for an annotated frame: homography from the eight vertex
/// correspondences, illumination from the frame intensity over the polygon
/// relative to the unit-lit base texture rendered through the same homography.
ViewMap estimate_view(const Frame& frame, const TextureMap& base,
                      const std::vector<Vec2>& root_vertices);

}  // namespace advtex
