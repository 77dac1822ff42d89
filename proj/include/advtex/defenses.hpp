#pragma once

#include <optional>
#include <string>

#include "advtex/image.hpp"

namespace advtex {

enum class DefenseKind { none, down_up, tv };

struct DefenseSpec {
  DefenseKind kind = DefenseKind::none;
  double tv_weight = 0.1;

  static DefenseSpec parse(const std::string& name);  // "none" | "down_up" | "tv[:weight]"
  std::string name() const;
};

/// Bilinear downsample to half resolution (ceil), then bilinear upsample back.
Image down_up_sample(const Image& image);

/// Isotropic TV denoising: argmin_u 1/2 ||u - image||^2 + weight * TV(u),
/// solved per channel by Chambolle's dual projection to a fixed tolerance.
/// Throws when the solver fails to converge within its iteration budget.
Image tv_denoise(const Image& image, double weight);

/// Value of the TV objective 1/2 ||u - f||^2 + weight * TV(u).
double tv_objective(const Image& u, const Image& reference, double weight);

Image apply_defense(const Image& image, const DefenseSpec& spec);

}  // namespace advtex
