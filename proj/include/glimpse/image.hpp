#pragma once
#include <vector>

#include "glimpse/nn.hpp"

namespace glimpse {

// Grayscale raster, row-major, values in [0,1].
struct Image {
  int width = 0, height = 0;
  Vec data;

  Image() = default;
  Image(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0.0) {}

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * width + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * width + c]; }
};

// Location in normalized [0,1]^2 coordinates; x is the column axis, y the row axis.
struct NormLoc {
  double x = 0.0;
  double y = 0.0;
};

struct PixelRC {
  int row = 0;
  int col = 0;
};

// Multi-scale patch stack extracted around one location, finest scale first.
struct FovealStack {
  std::vector<Image> patches;
  NormLoc source_loc;

  // network input: patch 0 row-major, then patch 1 row-major, ...
  Vec flatten() const;
};

// Block-mean downsampling; width and height must be divisible by factor.
Image box_downsample(const Image& img, int factor);

// row = round(y*(side-1)), col = round(x*(side-1)), round half up.
PixelRC to_pixel_center(NormLoc l, int side);

// Inverse mapping used by the grid search: pixel/(side-1).
NormLoc to_norm(PixelRC p, int side);

// size x size window centered at the given pixel, translated as needed so it
// lies entirely inside the image; contents copied verbatim.
Image crop_clamped(const Image& img, PixelRC center, int size);

// Patch s is a crop of side patch_side*2^s around l, box-downsampled back to
// patch_side x patch_side. Requires patch_side*2^(scales-1) <= min(w,h).
FovealStack foveal_extract(const Image& img, NormLoc l, int patch_side, int scales);

}  // namespace glimpse
