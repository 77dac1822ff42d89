#include <doctest.h>

#include <cmath>
#include <random>

#include "advtex/defenses.hpp"
#include "advtex/nn.hpp"

using namespace advtex;

namespace {

// Direct 2D DFT magnitude energy above the half-Nyquist band (test oracle).
double high_band_energy(const Image& img) {
  const int h = img.height(), w = img.width();
  double energy = 0;
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const double fu = std::min(u, w - u) / static_cast<double>(w);
      const double fv = std::min(v, h - v) / static_cast<double>(h);
      if (fu < 0.25 && fv < 0.25) continue;  // keep only above half Nyquist
      double re = 0, im = 0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double phase = -2 * M_PI * (static_cast<double>(u) * x / w +
                                            static_cast<double>(v) * y / h);
          re += img.at(y, x, 0) * std::cos(phase);
          im += img.at(y, x, 0) * std::sin(phase);
        }
      energy += re * re + im * im;
    }
  return energy;
}

}  // namespace

TEST_CASE("down_up: constants and shapes are preserved, range holds") {
  Image img(21, 33, 3, 0.42);
  const Image out = down_up_sample(img);
  CHECK(out.height() == 21);
  CHECK(out.width() == 33);
  for (double v : out.raw()) CHECK(v == doctest::Approx(0.42).epsilon(1e-12));

  std::mt19937_64 rng(3);
  Image noisy(24, 18, 3);
  for (double& v : noisy.raw()) v = nn::uniform(rng);
  const Image out2 = down_up_sample(noisy);
  CHECK(out2.height() == 24);
  CHECK(out2.width() == 18);
  for (double v : out2.raw()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(down_up_sample(Image(1, 5, 3, 0.0)), std::runtime_error);
}

TEST_CASE("down_up: a one-pixel checkerboard loses high-band energy") {
  Image checker(16, 16, 1);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) checker.at(y, x, 0) = (x + y) % 2 ? 1.0 : 0.0;
  const Image smoothed = down_up_sample(checker);
  const double before = high_band_energy(checker);
  const double after = high_band_energy(smoothed);
  CHECK(after < 0.2 * before);
}

TEST_CASE("down_up is idempotent in the low-pass sense") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 3; ++trial) {
    Image img(20, 28, 3);
    for (double& v : img.raw()) v = nn::uniform(rng);
    const Image once = down_up_sample(img);
    const Image twice = down_up_sample(once);
    double d_once = 0, d_twice = 0;
    for (size_t i = 0; i < img.size(); ++i) {
      d_once += std::abs(once.raw()[i] - img.raw()[i]);
      d_twice += std::abs(twice.raw()[i] - once.raw()[i]);
    }
    CHECK(d_twice < d_once);
  }
}

TEST_CASE("tv_denoise: constant image is already optimal") {
  Image img(12, 15, 3, 0.6);
  const Image out = tv_denoise(img, 0.1);
  for (double v : out.raw()) CHECK(v == doctest::Approx(0.6).epsilon(1e-9));
}

TEST_CASE("tv_denoise: weight -> 0 recovers the input") {
  std::mt19937_64 rng(11);
  Image img(16, 16, 3);
  for (double& v : img.raw()) v = nn::uniform(rng);
  const Image out = tv_denoise(img, 1e-6);
  double max_diff = 0;
  for (size_t i = 0; i < img.size(); ++i)
    max_diff = std::max(max_diff, std::abs(out.raw()[i] - img.raw()[i]));
  CHECK(max_diff < 1e-3);
}

TEST_CASE("tv_denoise: lowers the TV objective on a noisy step edge") {
  std::mt19937_64 rng(13);
  Image img(24, 24, 1);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 24; ++x)
      img.at(y, x, 0) =
          std::clamp((x < 12 ? 0.2 : 0.8) + 0.15 * (nn::uniform(rng) * 2 - 1), 0.0, 1.0);
  const double weight = 0.1;
  const Image out = tv_denoise(img, weight);
  CHECK(tv_objective(out, img, weight) <= tv_objective(img, img, weight));
  for (double v : out.raw()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("tv_denoise: descent certificate holds on random images") {
  std::mt19937_64 rng(17);
  for (double weight : {0.05, 0.1, 0.2}) {
    Image img(20, 20, 3);
    for (double& v : img.raw()) v = nn::uniform(rng);
    const Image out = tv_denoise(img, weight);
    CHECK(tv_objective(out, img, weight) <= tv_objective(img, img, weight) + 1e-9);
  }
}

TEST_CASE("defense spec parsing") {
  CHECK(DefenseSpec::parse("none").kind == DefenseKind::none);
  CHECK(DefenseSpec::parse("down_up").kind == DefenseKind::down_up);
  const DefenseSpec tv = DefenseSpec::parse("tv:0.05");
  CHECK(tv.kind == DefenseKind::tv);
  CHECK(tv.tv_weight == doctest::Approx(0.05));
  CHECK(DefenseSpec::parse("tv").tv_weight == doctest::Approx(0.1));
  CHECK_THROWS_AS(DefenseSpec::parse("median"), std::runtime_error);
  CHECK(tv.name() == "tv:0.05");
}
