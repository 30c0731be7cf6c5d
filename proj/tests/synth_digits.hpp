// Deterministic stroke-rendered digit corpus for self-contained end-to-end
// runs. Shapes are polyline skeletons per class, randomized in position,
// scale, stroke width and intensity, with additive clutter so that the
// aggressively downsampled view stays genuinely ambiguous.
#pragma once
#include <cstdint>

#include "glimpse/dataset.hpp"

namespace synth {

// n_per_class images per digit class on a side x side canvas.
glimpse::LabeledSet make_digits(int n_per_class, int side, std::uint64_t seed);

}  // namespace synth
