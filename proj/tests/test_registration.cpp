#include <doctest.h>

#include <cmath>
#include <random>

#include "advtex/data.hpp"
#include "advtex/nn.hpp"
#include "advtex/registration.hpp"

using namespace advtex;

namespace {

std::vector<Vec2> unit_square() {
  return {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
}

Mat3 random_view_homography(std::mt19937_64& rng, int tex_size, double diameter) {
  const double scale = diameter / (tex_size - 4);
  const double rot = (nn::uniform(rng) * 2 - 1) * 0.25;
  Mat3 persp;
  persp(2, 0) = (nn::uniform(rng) * 2 - 1) * 8e-4;
  persp(2, 1) = (nn::uniform(rng) * 2 - 1) * 8e-4;
  const double c = (tex_size - 1) / 2.0;
  return (Mat3::translation(90 + nn::uniform(rng) * 60, 80 + nn::uniform(rng) * 40) * persp *
          Mat3::rotation(rot) * Mat3::scale(scale, scale) * Mat3::translation(-c, -c))
      .canonical();
}

// Winding-number rasterization: independent of the library's even-odd test.
bool winding_inside(Vec2 p, const std::vector<Vec2>& poly) {
  double angle = 0.0;
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec2 a = poly[i] - p;
    const Vec2 b = poly[(i + 1) % n] - p;
    angle += std::atan2(a.x * b.y - a.y * b.x, a.x * b.x + a.y * b.y);
  }
  return std::abs(angle) > M_PI;
}

double max_abs_h_diff(const Mat3& a, const Mat3& b) {
  double m = 0;
  for (int i = 0; i < 9; ++i)
    m = std::max(m, std::abs(a.m[static_cast<size_t>(i)] - b.m[static_cast<size_t>(i)]));
  return m;
}

}  // namespace

TEST_CASE("homography: identity from the unit square") {
  PlanarCorrespondenceSet corr{unit_square(), unit_square()};
  const Mat3 h = estimate_homography(corr);
  CHECK(max_abs_h_diff(h, Mat3::identity()) < 1e-9);
}

TEST_CASE("homography: pure scaling is diag(2,2,1) in canonical form") {
  std::vector<Vec2> frame;
  for (Vec2 p : unit_square()) frame.push_back({2 * p.x, 2 * p.y});
  PlanarCorrespondenceSet corr{unit_square(), frame};
  const Mat3 h = estimate_homography(corr);
  CHECK(max_abs_h_diff(h, Mat3::scale(2, 2)) < 1e-9);
}

TEST_CASE("homography: recovers a random generator from 8 octagon points") {
  std::mt19937_64 rng(7);
  const std::vector<Vec2> root = octagon_vertices(128);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat3 truth = random_view_homography(rng, 128, 40 + nn::uniform(rng) * 80);
    std::vector<Vec2> frame;
    for (const Vec2& p : root) frame.push_back(truth.apply(p));
    const Mat3 est = estimate_homography({root, frame});
    CHECK(max_abs_h_diff(est, truth) < 1e-6);
    // Reprojection of exact correspondences is sub-1e-6 pixel.
    double reproj = 0;
    for (size_t i = 0; i < root.size(); ++i) {
      const Vec2 q = est.apply(root[i]);
      reproj = std::max({reproj, std::abs(q.x - frame[i].x), std::abs(q.y - frame[i].y)});
    }
    CHECK(reproj < 1e-6);
  }
}

TEST_CASE("homography: canonicalization kills projective scale") {
  std::mt19937_64 rng(11);
  const std::vector<Vec2> root = octagon_vertices(64);
  const Mat3 truth = random_view_homography(rng, 64, 50);
  Mat3 scaled = truth;
  for (double& v : scaled.m) v *= -3.7;
  std::vector<Vec2> frame_a, frame_b;
  for (const Vec2& p : root) {
    frame_a.push_back(truth.apply(p));
    frame_b.push_back(scaled.apply(p));
  }
  const Mat3 ha = estimate_homography({root, frame_a});
  const Mat3 hb = estimate_homography({root, frame_b});
  CHECK(max_abs_h_diff(ha, hb) < 1e-9);
}

TEST_CASE("homography: degenerate configurations are rejected") {
  // all 8 root points on a line
  std::vector<Vec2> root, frame;
  for (int i = 0; i < 8; ++i) {
    root.push_back({static_cast<double>(i), 2.0 * i});
    frame.push_back({static_cast<double>(i), 2.0 * i + 1});
  }
  CHECK_THROWS_WITH_AS(estimate_homography({root, frame}) /**/,
                       doctest::Contains("degenerate correspondences"), std::runtime_error);
  // coincident root points
  std::vector<Vec2> sq = unit_square();
  sq[3] = sq[0];
  CHECK_THROWS_AS(estimate_homography({sq, unit_square()}), std::runtime_error);
  // fewer than 4 pairs
  CHECK_THROWS_AS(estimate_homography({{{0, 0}, {1, 0}, {0, 1}}, {{0, 0}, {1, 0}, {0, 1}}}),
                  std::runtime_error);
}

TEST_CASE("illumination: uniform and split-interior polygons") {
  Frame frame;
  frame.image = Image(40, 40, 3, 0.5);
  frame.object_polygon = {{5, 5}, {30, 5}, {30, 30}, {5, 30}};
  CHECK(estimate_illumination(frame) == doctest::Approx(0.5).epsilon(1e-12));

  // left half 0.2, right half 0.8 by pixel count
  Frame split;
  split.image = Image(21, 40, 3);
  split.object_polygon = {{1.5, 0.5}, {37.5, 0.5}, {37.5, 19.5}, {1.5, 19.5}};
  for (int y = 0; y < 21; ++y)
    for (int x = 0; x < 40; ++x)
      for (int c = 0; c < 3; ++c) split.image.at(y, x, c) = x < 20 ? 0.2 : 0.8;
  CHECK(estimate_illumination(split) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("illumination: equals the rasterization oracle on random frames") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    Frame frame;
    frame.image = Image(60, 80, 3);
    for (double& v : frame.image.raw()) v = nn::uniform(rng);
    frame.object_polygon.clear();
    const double cx = 30 + nn::uniform(rng) * 20, cy = 25 + nn::uniform(rng) * 10;
    for (int k = 0; k < 8; ++k) {
      const double a = M_PI / 8 + k * M_PI / 4;
      const double r = 12 + nn::uniform(rng) * 8;
      frame.object_polygon.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
    }
    double sum = 0;
    size_t count = 0;
    for (int y = 0; y < 60; ++y)
      for (int x = 0; x < 80; ++x)
        if (winding_inside({static_cast<double>(x), static_cast<double>(y)},
                           frame.object_polygon)) {
          sum += pixel_intensity(frame.image, y, x);
          ++count;
        }
    REQUIRE(count > 0);
    CHECK(estimate_illumination(frame) == doctest::Approx(sum / count).epsilon(1e-12));
  }
}

TEST_CASE("illumination: zero-area polygon is an error") {
  Frame frame;
  frame.image = Image(10, 10, 3, 0.5);
  frame.object_polygon = {{2.2, 2.2}, {2.4, 2.2}, {2.3, 2.4}};
  CHECK_THROWS_AS(estimate_illumination(frame), std::runtime_error);
}

TEST_CASE("composite: re-rendering the frame's own pattern reproduces it") {
  std::mt19937_64 rng(5);
  const TextureMap tex = make_sign_texture(64);
  const Mat3 h = random_view_homography(rng, 64, 70);
  const ViewMap view{h, 1.0};
  const Image blank(160, 240, 3, 0.3);
  const Image frame = composite(blank, tex, view);
  // Same texture, same view: the render is deterministic, difference is zero;
  // the spec tolerance covers independently produced frame content.
  const Image again = composite(frame, tex, view);
  double max_diff = 0;
  for (size_t i = 0; i < frame.size(); ++i)
    max_diff = std::max(max_diff, std::abs(again.raw()[i] - frame.raw()[i]));
  CHECK(max_diff < 2e-2);
}

TEST_CASE("composite: all-black texture blanks the mapped region only") {
  TextureMap black;
  black.pixels = Image(32, 32, 3, 0.0);
  black.mask.assign(32 * 32, 1);
  Image frame(64, 64, 3, 0.77);
  const ViewMap view{Mat3::identity(), 1.0};
  const Image out = composite(frame, black, view);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      for (int c = 0; c < 3; ++c) {
        // mask test is nearest-texel: pixels within [0,31]^2 round onto the mask
        const bool inside = x <= 31 && y <= 31;
        if (inside)
          CHECK(out.at(y, x, c) == 0.0);
        else
          CHECK(out.at(y, x, c) == 0.77);
      }
}

TEST_CASE("composite: matches a scalar reference warper") {
  std::mt19937_64 rng(31);
  TextureMap tex;
  tex.pixels = Image(48, 48, 3);
  for (double& v : tex.pixels.raw()) v = 0.2 + 0.6 * nn::uniform(rng);
  tex.mask = octagon_mask(48);
  const Mat3 h = random_view_homography(rng, 48, 60);
  const ViewMap view{h, 0.85};
  Image frame(160, 240, 3);
  for (double& v : frame.raw()) v = nn::uniform(rng);

  const Image out = composite(frame, tex, view);

  // Scalar oracle: inverse-map every output pixel, hand-rolled bilinear taps.
  const Mat3 inv = h.inverse();
  for (int y = 0; y < frame.height(); ++y)
    for (int x = 0; x < frame.width(); ++x) {
      const Vec2 p = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      const int xi = static_cast<int>(std::lround(p.x));
      const int yi = static_cast<int>(std::lround(p.y));
      const bool inside = xi >= 0 && xi < 48 && yi >= 0 && yi < 48 && tex.in_mask(yi, xi);
      for (int c = 0; c < 3; ++c) {
        double expected;
        if (!inside) {
          expected = frame.at(y, x, c);
        } else {
          const int x0 = static_cast<int>(std::floor(p.x));
          const int y0 = static_cast<int>(std::floor(p.y));
          const double fx = p.x - x0, fy = p.y - y0;
          auto tap = [&](int yy, int xx) {
            return xx < 0 || xx >= 48 || yy < 0 || yy >= 48 ? 0.0 : tex.pixels.at(yy, xx, c);
          };
          const double s = tap(y0, x0) * (1 - fx) * (1 - fy) + tap(y0, x0 + 1) * fx * (1 - fy) +
                           tap(y0 + 1, x0) * (1 - fx) * fy + tap(y0 + 1, x0 + 1) * fx * fy;
          expected = std::clamp(s * view.illumination, 0.0, 1.0);
        }
        CHECK(out.at(y, x, c) == doctest::Approx(expected).epsilon(1e-12));
      }
    }
}

TEST_CASE("composite: output in range, out-of-mask pixels bit-identical") {
  std::mt19937_64 rng(67);
  const TextureMap tex = make_sign_texture(64);
  TextureMap bright = tex;
  for (double& v : bright.pixels.raw()) v = std::min(1.0, v + 0.4);
  const Mat3 h = random_view_homography(rng, 64, 80);
  const ViewMap view{h, 1.6};  // drives values into the clamp
  Image frame(160, 240, 3);
  for (double& v : frame.raw()) v = nn::uniform(rng);
  const Image out = composite(frame, bright, tex, view, 1.2);
  const Mat3 inv = h.inverse();
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) {
      const Vec2 p = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      const int xi = static_cast<int>(std::lround(p.x));
      const int yi = static_cast<int>(std::lround(p.y));
      const bool inside = xi >= 0 && xi < 64 && yi >= 0 && yi < 64 && tex.in_mask(yi, xi);
      for (int c = 0; c < 3; ++c) {
        CHECK(out.at(y, x, c) >= 0.0);
        CHECK(out.at(y, x, c) <= 1.0);
        if (!inside) CHECK(out.at(y, x, c) == frame.at(y, x, c));
      }
    }
}

TEST_CASE("backproject: zero gradient maps to zero") {
  const TextureMap tex = make_sign_texture(32);
  const ViewMap view{Mat3::identity(), 1.0};
  const Image zero(60, 60, 3, 0.0);
  const Image g = backproject_gradient(zero, view, tex, 1.0);
  for (double v : g.raw()) CHECK(v == 0.0);
}

TEST_CASE("backproject: identity adjoint of bilinear sampling at one pixel") {
  TextureMap tex;
  tex.pixels = Image(32, 32, 3, 0.5);
  tex.mask.assign(32 * 32, 1);
  // Shift by half a pixel so each output pixel has four equal taps.
  const ViewMap view{Mat3::translation(0.5, 0.5), 1.0};
  Image g(40, 40, 3, 0.0);
  g.at(16, 16, 1) = 1.0;
  const Image back = backproject_gradient(g, view, tex, 1.0);
  double total = 0.0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) total += back.at(y, x, 1);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(back.at(15, 15, 1) == doctest::Approx(0.25));
  CHECK(back.at(15, 16, 1) == doctest::Approx(0.25));
  CHECK(back.at(16, 15, 1) == doctest::Approx(0.25));
  CHECK(back.at(16, 16, 1) == doctest::Approx(0.25));
}

TEST_CASE("backproject: finite-difference oracle over 100 texels") {
  std::mt19937_64 rng(97);
  TextureMap tex;
  tex.pixels = Image(48, 48, 3);
  for (double& v : tex.pixels.raw()) v = 0.3 + 0.4 * nn::uniform(rng);
  tex.mask = octagon_mask(48);
  const Mat3 h = random_view_homography(rng, 48, 55);
  const double delta_scale = 0.9;
  const ViewMap view{h, 0.8};
  Image frame(120, 160, 3);
  for (double& v : frame.raw()) v = 0.25 + 0.5 * nn::uniform(rng);

  // Scalar loss: inner product of the composited image with a fixed co-vector.
  Image covec(120, 160, 3);
  for (double& v : covec.raw()) v = nn::uniform(rng) * 2 - 1;
  auto loss = [&](const TextureMap& t) {
    const Image out = composite(frame, t, tex, view, delta_scale);
    double acc = 0;
    for (size_t i = 0; i < out.size(); ++i) acc += out.raw()[i] * covec.raw()[i];
    return acc;
  };

  const Image analytic = backproject_gradient(covec, view, tex, delta_scale);

  int tested = 0;
  const double step = 1e-5;
  while (tested < 100) {
    const int x = static_cast<int>(rng() % 48);
    const int y = static_cast<int>(rng() % 48);
    const int c = static_cast<int>(rng() % 3);
    if (!tex.in_mask(y, x)) continue;
    TextureMap plus = tex, minus = tex;
    plus.pixels.at(y, x, c) += step;
    minus.pixels.at(y, x, c) -= step;
    const double fd = (loss(plus) - loss(minus)) / (2 * step);
    const double an = analytic.at(y, x, c);
    if (std::abs(fd) < 1e-9 && std::abs(an) < 1e-9) {
      ++tested;
      continue;
    }
    CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-9}) < 1e-3);
    ++tested;
  }
}

TEST_CASE("merge_gradients: mean identities and a scalar-loop oracle") {
  std::mt19937_64 rng(3);
  Image g(8, 9, 3);
  for (double& v : g.raw()) v = nn::uniform(rng) * 2 - 1;
  const Image mean_same = merge_gradients({g, g});
  for (size_t i = 0; i < g.size(); ++i) CHECK(mean_same.raw()[i] == doctest::Approx(g.raw()[i]));

  Image neg = g;
  for (double& v : neg.raw()) v = -v;
  const Image zero = merge_gradients({g, neg});
  for (double v : zero.raw()) CHECK(v == doctest::Approx(0.0));

  std::vector<Image> many;
  for (int i = 0; i < 5; ++i) {
    Image r(8, 9, 3);
    for (double& v : r.raw()) v = nn::uniform(rng) * 2 - 1;
    many.push_back(std::move(r));
  }
  const Image mean = merge_gradients(many);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 9; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (const Image& m : many) acc += m.at(y, x, c);
        CHECK(mean.at(y, x, c) == doctest::Approx(acc / 5).epsilon(1e-12));
      }

  CHECK_THROWS_AS(merge_gradients({}), std::runtime_error);
}

TEST_CASE("warp round trip reproduces a band-limited texture") {
  std::mt19937_64 rng(13);
  // Band-limited pattern: a few low-frequency sinusoids.
  TextureMap tex;
  tex.pixels = Image(64, 64, 3);
  tex.mask = octagon_mask(64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      for (int c = 0; c < 3; ++c)
        tex.pixels.at(y, x, c) =
            0.5 + 0.2 * std::sin(2 * M_PI * (x + 7 * c) / 32.0) * std::cos(2 * M_PI * y / 24.0);

  const Mat3 h = random_view_homography(rng, 64, 110);
  const ViewMap view{h, 1.0};
  const Image rendered = composite(Image(160, 240, 3, 0.0), tex, view);

  // Treat the rendered frame as a texture and composite back with the inverse.
  TextureMap frame_tex;
  frame_tex.pixels = rendered;
  frame_tex.mask.assign(static_cast<size_t>(160) * 240, 1);
  const ViewMap inv_view{h.inverse().canonical(), 1.0};
  const Image round = composite(Image(64, 64, 3, 0.0), frame_tex, inv_view);

  // Compare strictly inside the doubly-mapped mask (3-texel erosion).
  double max_err = 0;
  for (int y = 3; y < 61; ++y)
    for (int x = 3; x < 61; ++x) {
      bool all_in = true;
      for (int dy = -3; dy <= 3 && all_in; ++dy)
        for (int dx = -3; dx <= 3 && all_in; ++dx)
          if (!tex.in_mask(y + dy, x + dx)) all_in = false;
      if (!all_in) continue;
      for (int c = 0; c < 3; ++c)
        max_err = std::max(max_err, std::abs(round.at(y, x, c) - tex.pixels.at(y, x, c)));
    }
  CHECK(max_err < 5e-2);
}

TEST_CASE("estimate_view recovers the generator's illumination and homography") {
  std::mt19937_64 rng(77);
  const TextureMap tex = make_sign_texture(64);
  const std::vector<Vec2> root = octagon_vertices(64);
  for (int trial = 0; trial < 4; ++trial) {
    const Mat3 h = random_view_homography(rng, 64, 60 + nn::uniform(rng) * 40);
    const double illum = 0.6 + nn::uniform(rng) * 0.45;
    const ViewMap truth{h, illum};
    Frame frame;
    frame.image = composite(Image(160, 240, 3, 0.2), tex, truth);
    for (const Vec2& p : root) frame.object_polygon.push_back(h.apply(p));
    const ViewMap est = estimate_view(frame, tex, root);
    CHECK(max_abs_h_diff(est.homography, h) < 1e-6);
    CHECK(est.illumination == doctest::Approx(illum).epsilon(1e-9));
    frame.object_polygon.clear();
  }
}
