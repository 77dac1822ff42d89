#include "advtex/defenses.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <vector>

namespace advtex {

DefenseSpec DefenseSpec::parse(const std::string& name) {
  DefenseSpec spec;
  if (name == "none") {
    spec.kind = DefenseKind::none;
  } else if (name == "down_up") {
    spec.kind = DefenseKind::down_up;
  } else if (name.rfind("tv", 0) == 0) {
    spec.kind = DefenseKind::tv;
    if (name.size() > 3 && name[2] == ':') spec.tv_weight = std::stod(name.substr(3));
    if (spec.tv_weight <= 0) throw std::runtime_error("DefenseSpec: tv weight must be positive");
  } else {
    throw std::runtime_error("DefenseSpec: unknown defense " + name);
  }
  return spec;
}

std::string DefenseSpec::name() const {
  switch (kind) {
    case DefenseKind::none: return "none";
    case DefenseKind::down_up: return "down_up";
    case DefenseKind::tv: {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "tv:%g", tv_weight);
      return buf;
    }
  }
  return "?";
}

Image down_up_sample(const Image& image) {
  if (image.height() < 2 || image.width() < 2)
    throw std::runtime_error("down_up_sample: image must be at least 2x2");
  const int half_h = (image.height() + 1) / 2;
  const int half_w = (image.width() + 1) / 2;
  Image out = resize_bilinear(resize_bilinear(image, half_h, half_w), image.height(), image.width());
  out.clamp01();
  return out;
}

double tv_objective(const Image& u, const Image& reference, double weight) {
  if (!u.same_shape(reference)) throw std::runtime_error("tv_objective: shape mismatch");
  const int h = u.height(), w = u.width();
  double fidelity = 0.0, tv = 0.0;
  for (size_t i = 0; i < u.size(); ++i) {
    const double d = u.raw()[i] - reference.raw()[i];
    fidelity += d * d;
  }
  for (int c = 0; c < u.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double gx = x + 1 < w ? u.at(y, x + 1, c) - u.at(y, x, c) : 0.0;
        const double gy = y + 1 < h ? u.at(y + 1, x, c) - u.at(y, x, c) : 0.0;
        tv += std::sqrt(gx * gx + gy * gy);
      }
  return 0.5 * fidelity + weight * tv;
}

Image tv_denoise(const Image& image, double weight) {
  if (weight <= 0) throw std::runtime_error("tv_denoise: weight must be positive");
  const int h = image.height(), w = image.width();
  const size_t plane = static_cast<size_t>(h) * w;
  Image out = image;

  // Chambolle's dual projection, one channel at a time:
  //   u = f - weight * div p,   p <- (p + tau * grad v) / (1 + tau * |grad v|)
  // with v = div p - f / weight, forward-difference gradient, Neumann boundary.
  const double tau = 0.248;
  const int max_iters = 6000;
  const double tol = 5e-5;  // well under an 8-bit quantum

  std::vector<double> f(plane), px(plane), py(plane), div(plane), v(plane), u(plane);
  for (int c = 0; c < image.channels(); ++c) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) f[static_cast<size_t>(y) * w + x] = image.at(y, x, c);
    std::fill(px.begin(), px.end(), 0.0);
    std::fill(py.begin(), py.end(), 0.0);
    for (size_t i = 0; i < plane; ++i) u[i] = f[i];

    bool converged = false;
    double change = 0.0;
    for (int it = 0; it < max_iters && !converged; ++it) {
      // div p with the backward differences adjoint to the forward gradient.
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const size_t i = static_cast<size_t>(y) * w + x;
          double d = 0.0;
          if (x < w - 1) d += px[i];
          if (x > 0) d -= px[i - 1];
          if (y < h - 1) d += py[i];
          if (y > 0) d -= py[i - static_cast<size_t>(w)];
          div[i] = d;
        }
      for (size_t i = 0; i < plane; ++i) v[i] = div[i] - f[i] / weight;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const size_t i = static_cast<size_t>(y) * w + x;
          const double gx = x + 1 < w ? v[i + 1] - v[i] : 0.0;
          const double gy = y + 1 < h ? v[i + static_cast<size_t>(w)] - v[i] : 0.0;
          const double denom = 1.0 + tau * std::sqrt(gx * gx + gy * gy);
          px[i] = (px[i] + tau * gx) / denom;
          py[i] = (py[i] + tau * gy) / denom;
        }
      change = 0.0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const size_t i = static_cast<size_t>(y) * w + x;
          double d = 0.0;
          if (x < w - 1) d += px[i];
          if (x > 0) d -= px[i - 1];
          if (y < h - 1) d += py[i];
          if (y > 0) d -= py[i - static_cast<size_t>(w)];
          const double u_new = f[i] - weight * d;
          change = std::max(change, std::abs(u_new - u[i]));
          u[i] = u_new;
        }
      converged = change < tol;
    }
    if (!converged) {
      char msg[128];
      std::snprintf(msg, sizeof(msg),
                    "tv_denoise: no convergence after %d iterations (residual %.3g, tol %.3g)",
                    max_iters, change, tol);
      throw std::runtime_error(msg);
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(y, x, c) = u[static_cast<size_t>(y) * w + x];
  }
  out.clamp01();
  return out;
}

Image apply_defense(const Image& image, const DefenseSpec& spec) {
  switch (spec.kind) {
    case DefenseKind::none: return image;
    case DefenseKind::down_up: return down_up_sample(image);
    case DefenseKind::tv: return tv_denoise(image, spec.tv_weight);
  }
  return image;
}

}  // namespace advtex
