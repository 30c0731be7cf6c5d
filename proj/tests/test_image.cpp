#include <cmath>

#include "doctest.h"
#include "glimpse/image.hpp"
#include "glimpse/rng.hpp"
#include "oracles.hpp"

using namespace glimpse;

namespace {

Image random_image(int side, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Image img(side, side);
  for (auto& v : img.data) v = rng.next_double();
  return img;
}

// dyadic pixel values keep block means exactly representable
Image dyadic_image(int side, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Image img(side, side);
  for (auto& v : img.data) v = static_cast<double>(rng.next_below(65)) / 64.0;
  return img;
}

}  // namespace

TEST_CASE("box_downsample keeps constant images constant") {
  Image img(8, 8);
  for (auto& v : img.data) v = 0.37;
  for (int f : {1, 2, 4, 8}) {
    const Image out = box_downsample(img, f);
    CHECK(out.width == 8 / f);
    for (double v : out.data) CHECK(v == doctest::Approx(0.37).epsilon(1e-15));
  }
}

TEST_CASE("box_downsample of a 2x2 checkerboard is its mean") {
  Image img(2, 2);
  img.at(0, 0) = 0.0;
  img.at(0, 1) = 1.0;
  img.at(1, 0) = 1.0;
  img.at(1, 1) = 0.0;
  const Image out = box_downsample(img, 2);
  CHECK(out.width == 1);
  CHECK(out.height == 1);
  CHECK(out.at(0, 0) == 0.5);
}

TEST_CASE("box_downsample matches the quadruple-loop oracle exactly") {
  const Image img = random_image(48, 100);
  const Image got = box_downsample(img, 4);
  const Image expect = oracle::box_downsample(img, 4);
  CHECK(got.data == expect.data);
}

TEST_CASE("box_downsample composes: factors a then b equal a*b on dyadic images") {
  const Image img = dyadic_image(24, 101);
  const Image two_step = box_downsample(box_downsample(img, 2), 3);
  const Image one_step = box_downsample(img, 6);
  CHECK(two_step.data == one_step.data);
}

TEST_CASE("box_downsample rejects non-divisible dimensions") {
  Image img(10, 10);
  CHECK_THROWS_AS(box_downsample(img, 3), std::invalid_argument);
}

TEST_CASE("to_pixel_center corners and midpoint") {
  CHECK(to_pixel_center({0.0, 0.0}, 48).row == 0);
  CHECK(to_pixel_center({0.0, 0.0}, 48).col == 0);
  CHECK(to_pixel_center({1.0, 1.0}, 48).row == 47);
  CHECK(to_pixel_center({1.0, 1.0}, 48).col == 47);
  // 0.5 * 47 = 23.5 rounds half up
  CHECK(to_pixel_center({0.5, 0.5}, 48).row == 24);
  CHECK(to_pixel_center({0.5, 0.5}, 48).col == 24);
}

TEST_CASE("to_pixel_center is monotone in each coordinate") {
  SplitMix64 rng(55);
  for (int trial = 0; trial < 200; ++trial) {
    const double a = rng.next_double(), b = rng.next_double();
    const double lo = std::min(a, b), hi = std::max(a, b);
    CHECK(to_pixel_center({lo, 0.3}, 29).col <= to_pixel_center({hi, 0.3}, 29).col);
    CHECK(to_pixel_center({0.3, lo}, 29).row <= to_pixel_center({0.3, hi}, 29).row);
  }
}

TEST_CASE("crop_clamped keeps interior windows centered") {
  const Image img = random_image(48, 7);
  const Image out = crop_clamped(img, {20, 30}, 12);
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 12; ++c) CHECK(out.at(r, c) == img.at(20 - 6 + r, 30 - 6 + c));
}

TEST_CASE("crop_clamped slides the window inside at corners") {
  const Image img = random_image(48, 8);
  const Image out = crop_clamped(img, {0, 0}, 12);
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 12; ++c) CHECK(out.at(r, c) == img.at(r, c));
}

TEST_CASE("crop_clamped matches the index-arithmetic oracle") {
  const Image img = random_image(30, 9);
  SplitMix64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const int row = static_cast<int>(rng.next_below(30));
    const int col = static_cast<int>(rng.next_below(30));
    const Image got = crop_clamped(img, {row, col}, 7);
    const Image expect = oracle::crop(img, row, col, 7);
    CHECK(got.data == expect.data);
  }
}

TEST_CASE("crop_clamped is translation equivariant away from borders") {
  const Image img = random_image(40, 11);
  Image shifted(40, 40);
  for (int r = 0; r < 37; ++r)
    for (int c = 0; c < 37; ++c) shifted.at(r + 3, c + 3) = img.at(r, c);
  const Image a = crop_clamped(img, {15, 18}, 9);
  const Image b = crop_clamped(shifted, {18, 21}, 9);
  CHECK(a.data == b.data);
}

TEST_CASE("crop_clamped rejects oversized windows") {
  Image img(8, 8);
  CHECK_THROWS_AS(crop_clamped(img, {4, 4}, 9), std::invalid_argument);
}

TEST_CASE("foveal_extract with one scale is a plain crop") {
  const Image img = random_image(48, 12);
  const NormLoc l{0.41, 0.77};
  const FovealStack stack = foveal_extract(img, l, 12, 1);
  REQUIRE(stack.patches.size() == 1);
  const PixelRC c = to_pixel_center(l, 48);
  CHECK(stack.patches[0].data == crop_clamped(img, c, 12).data);
}

TEST_CASE("foveal_extract keeps constants constant at every scale") {
  Image img(48, 48);
  for (auto& v : img.data) v = 0.625;
  const FovealStack stack = foveal_extract(img, {0.2, 0.9}, 12, 2);
  REQUIRE(stack.patches.size() == 2);
  for (const auto& p : stack.patches) {
    CHECK(p.width == 12);
    for (double v : p.data) CHECK(v == 0.625);
  }
}

TEST_CASE("foveal_extract matches the composed crop-then-average oracle") {
  const Image img = random_image(48, 13);
  SplitMix64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const NormLoc l{rng.next_double(), rng.next_double()};
    const Vec got = foveal_extract(img, l, 12, 2).flatten();
    const Vec expect = oracle::foveal_input(img, l, 12, 2);
    CHECK(got == expect);
  }
}

TEST_CASE("foveal_extract at the center of a centrally symmetric image is symmetric") {
  Image img(48, 48);
  SplitMix64 rng(15);
  for (int r = 0; r < 48; ++r)
    for (int c = 0; c < 48; ++c) {
      if (r * 48 + c <= (47 - r) * 48 + (47 - c)) {
        const double v = rng.next_double();
        img.at(r, c) = v;
        img.at(47 - r, 47 - c) = v;
      }
    }
  const FovealStack stack = foveal_extract(img, {0.5, 0.5}, 12, 2);
  for (const auto& p : stack.patches) {
    const int n = p.width;
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c)
        CHECK(p.at(r, c) == doctest::Approx(p.at(n - 1 - r, n - 1 - c)).epsilon(1e-15));
  }
}

TEST_CASE("foveal_extract rejects stacks wider than the image") {
  Image img(16, 16);
  CHECK_THROWS_AS(foveal_extract(img, {0.5, 0.5}, 12, 2), std::invalid_argument);
}
