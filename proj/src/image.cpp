#include "glimpse/image.hpp"

#include <algorithm>
#include <cmath>

namespace glimpse {

Vec FovealStack::flatten() const {
  Vec out;
  std::size_t n = 0;
  for (const auto& p : patches) n += p.data.size();
  out.reserve(n);
  for (const auto& p : patches) out.insert(out.end(), p.data.begin(), p.data.end());
  return out;
}

Image box_downsample(const Image& img, int factor) {
  GLIMPSE_REQUIRE(factor >= 1, "box_downsample: factor must be >= 1");
  GLIMPSE_REQUIRE(img.width % factor == 0 && img.height % factor == 0,
                  "box_downsample: image dims not divisible by factor");
  if (factor == 1) return img;
  Image out(img.width / factor, img.height / factor);
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      double s = 0.0;
      for (int dr = 0; dr < factor; ++dr)
        for (int dc = 0; dc < factor; ++dc)
          s += img.at(r * factor + dr, c * factor + dc);
      out.at(r, c) = s * inv;
    }
  }
  return out;
}

static int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

PixelRC to_pixel_center(NormLoc l, int side) {
  GLIMPSE_REQUIRE(side >= 1, "to_pixel_center: side must be >= 1");
  PixelRC p;
  p.row = std::clamp(round_half_up(l.y * (side - 1)), 0, side - 1);
  p.col = std::clamp(round_half_up(l.x * (side - 1)), 0, side - 1);
  return p;
}

NormLoc to_norm(PixelRC p, int side) {
  GLIMPSE_REQUIRE(side >= 2, "to_norm: side must be >= 2");
  return NormLoc{static_cast<double>(p.col) / (side - 1),
                 static_cast<double>(p.row) / (side - 1)};
}

Image crop_clamped(const Image& img, PixelRC center, int size) {
  GLIMPSE_REQUIRE(size >= 1 && size <= img.width && size <= img.height,
                  "crop_clamped: size larger than image");
  int top = center.row - size / 2;
  int left = center.col - size / 2;
  top = std::clamp(top, 0, img.height - size);
  left = std::clamp(left, 0, img.width - size);
  Image out(size, size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) out.at(r, c) = img.at(top + r, left + c);
  return out;
}

FovealStack foveal_extract(const Image& img, NormLoc l, int patch_side, int scales) {
  GLIMPSE_REQUIRE(scales >= 1, "foveal_extract: scales must be >= 1");
  const int widest = patch_side << (scales - 1);
  GLIMPSE_REQUIRE(widest <= img.width && widest <= img.height,
                  "foveal_extract: widest scale exceeds image");
  const PixelRC center{to_pixel_center(l, img.height).row,
                       to_pixel_center(l, img.width).col};
  FovealStack stack;
  stack.source_loc = l;
  stack.patches.reserve(scales);
  for (int s = 0; s < scales; ++s) {
    // coarse scales crop at full resolution, then average down
    Image patch = crop_clamped(img, center, patch_side << s);
    stack.patches.push_back(box_downsample(patch, 1 << s));
  }
  return stack;
}

}  // namespace glimpse
