#pragma once

// Synthetic segmentation task: colored rectangles and ellipses on gray noise.

#include "cgrseg/rng.hpp"
#include "cgrseg/tensor.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <vector>

namespace cgr {

/// Per-pixel class ids, (H, W) row-major.
using LabelMap = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ToySample {
  Tensor image;    // (1, 3, H, W) in [0, 1]
  LabelMap mask;   // values in [0, classes)
};

/// Dominant RGB color of foreground class `cls` (>= 1). Colors are
/// saturated, so they never coincide with the gray background.
std::array<double, 3> class_color(Index cls);

/// Gray uniform-noise background with 1 to min(3, classes - 1) non-overlapping
/// axis-aligned rectangles or ellipses. Shapes carry distinct class ids >= 1
/// and are painted in their class color plus per-channel noise. Layouts are
/// redrawn until the foreground fraction lies in (0.05, 0.6).
/// Throws Error if classes < 2 or h, w are not positive multiples of 64.
ToySample gen_toy_sample(Rng& rng, Index h, Index w, Index classes);

/// Fraction of pixels with a nonzero label.
double foreground_fraction(const LabelMap& mask);

/// Held-out sample i, drawn from a stream disjoint from training seeds.
ToySample heldout_sample(Index i, Index h, Index w, Index classes);

}  // namespace cgr
