#include <doctest.h>

#include <filesystem>
#include <random>

#include "advtex/image.hpp"
#include "advtex/nn.hpp"

using namespace advtex;

TEST_CASE("quantization is round-half-even at the tie points") {
  // 0.5/255 is exactly representable in the test sense: v*255 = 0.5 -> rounds to 0
  CHECK(quantize8(0.5 / 255.0) == 0);
  CHECK(quantize8(1.5 / 255.0) == 2);
  CHECK(quantize8(2.5 / 255.0) == 2);
  CHECK(quantize8(0.0) == 0);
  CHECK(quantize8(1.0) == 255);
  CHECK(quantize8(-3.0) == 0);
  CHECK(quantize8(7.0) == 255);
}

TEST_CASE("netpbm round trip is exact for quantized values") {
  std::mt19937_64 rng(42);
  Image img(13, 17, 3);
  for (double& v : img.raw()) v = nn::uniform(rng);
  const auto path = std::filesystem::temp_directory_path() / "advtex_img_roundtrip.ppm";
  save_netpbm(img, path);
  const Image back = load_netpbm(path);
  REQUIRE(back.same_shape(img));
  for (size_t i = 0; i < img.size(); ++i)
    CHECK(back.raw()[i] == dequantize8(quantize8(img.raw()[i])));
  // A second save of the loaded image is bit-identical (8-bit fixed point).
  const auto path2 = std::filesystem::temp_directory_path() / "advtex_img_roundtrip2.ppm";
  save_netpbm(back, path2);
  const Image back2 = load_netpbm(path2);
  for (size_t i = 0; i < img.size(); ++i) CHECK(back2.raw()[i] == back.raw()[i]);
}

TEST_CASE("grayscale images use PGM") {
  Image gray(4, 5, 1, 0.25);
  const auto path = std::filesystem::temp_directory_path() / "advtex_img_gray.pgm";
  save_netpbm(gray, path);
  const Image back = load_netpbm(path);
  CHECK(back.channels() == 1);
  CHECK(back.at(2, 2, 0) == doctest::Approx(0.25).epsilon(0.01));
}

TEST_CASE("bilinear sample interpolates and vanishes off the support") {
  Image img(2, 2, 1);
  img.at(0, 0, 0) = 1.0;
  img.at(0, 1, 0) = 2.0;
  img.at(1, 0, 0) = 3.0;
  img.at(1, 1, 0) = 4.0;
  CHECK(bilinear_sample(img, 0.0, 0.0, 0) == doctest::Approx(1.0));
  CHECK(bilinear_sample(img, 0.5, 0.5, 0) == doctest::Approx(2.5));
  CHECK(bilinear_sample(img, 1.0, 0.0, 0) == doctest::Approx(2.0));
  CHECK(bilinear_sample(img, -2.0, 0.0, 0) == doctest::Approx(0.0));
  CHECK(bilinear_sample(img, 0.0, 5.0, 0) == doctest::Approx(0.0));
}

TEST_CASE("resize preserves constants and shapes") {
  Image img(10, 14, 3, 0.37);
  const Image out = resize_bilinear(img, 7, 21);
  CHECK(out.height() == 7);
  CHECK(out.width() == 21);
  for (double v : out.raw()) CHECK(v == doctest::Approx(0.37));
}
