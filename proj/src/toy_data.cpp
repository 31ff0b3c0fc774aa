#include "cgrseg/toy_data.hpp"

#include <algorithm>

namespace cgr {

namespace {

constexpr std::array<std::array<double, 3>, 7> kClassColors{{
    {0.90, 0.15, 0.15},
    {0.15, 0.80, 0.20},
    {0.20, 0.25, 0.95},
    {0.95, 0.85, 0.10},
    {0.85, 0.20, 0.85},
    {0.10, 0.85, 0.85},
    {0.95, 0.55, 0.10},
}};

constexpr double kShapeNoise = 0.08;
constexpr std::uint64_t kHeldOutBase = 0xC0FFEE0000000000ULL;

struct Box {
  Index top, left, height, width;
  bool ellipse;

  bool overlaps(const Box& o) const {
    return top < o.top + o.height && o.top < top + height && left < o.left + o.width &&
           o.left < left + width;
  }

  bool contains(Index y, Index x) const {
    if (y < top || y >= top + height || x < left || x >= left + width) return false;
    if (!ellipse) return true;
    const double dy = (static_cast<double>(y - top) + 0.5) / static_cast<double>(height) - 0.5;
    const double dx = (static_cast<double>(x - left) + 0.5) / static_cast<double>(width) - 0.5;
    return dy * dy + dx * dx <= 0.25;
  }
};

}  // namespace

std::array<double, 3> class_color(Index cls) {
  if (cls < 1) throw Error("class_color is defined for foreground classes only");
  return kClassColors[static_cast<std::size_t>(cls - 1) % kClassColors.size()];
}

double foreground_fraction(const LabelMap& mask) {
  if (mask.size() == 0) return 0.0;
  return static_cast<double>((mask.array() != 0).count()) / static_cast<double>(mask.size());
}

ToySample gen_toy_sample(Rng& rng, Index h, Index w, Index classes) {
  if (classes < 2) throw Error("toy data needs at least 2 classes");
  if (h < 64 || w < 64 || h % 64 != 0 || w % 64 != 0) {
    throw Error("toy sample size must be a positive multiple of 64");
  }
  const Index max_shapes = std::min<Index>(3, classes - 1);
  // Side lengths between 28% and 50% of the image (18..32 px at 64x64).
  const Index min_h = h * 28 / 100, max_h = h / 2;
  const Index min_w = w * 28 / 100, max_w = w / 2;

  LabelMap mask(h, w);
  for (;;) {
    const Index count = rng.uniform_int(1, max_shapes);
    std::vector<Index> ids;
    for (Index c = 1; c < classes; ++c) ids.push_back(c);
    std::vector<Box> boxes;
    for (Index s = 0; s < count; ++s) {
      // Partial Fisher-Yates pick of a fresh class id.
      const auto j = static_cast<std::size_t>(rng.uniform_int(s, static_cast<Index>(ids.size()) - 1));
      std::swap(ids[static_cast<std::size_t>(s)], ids[j]);
      for (int attempt = 0; attempt < 50; ++attempt) {
        Box b;
        b.height = rng.uniform_int(min_h, max_h);
        b.width = rng.uniform_int(min_w, max_w);
        b.top = rng.uniform_int(0, h - b.height);
        b.left = rng.uniform_int(0, w - b.width);
        b.ellipse = rng.uniform() < 0.5;
        if (std::none_of(boxes.begin(), boxes.end(), [&](const Box& o) { return o.overlaps(b); })) {
          boxes.push_back(b);
          break;
        }
      }
    }
    mask.setZero();
    for (std::size_t s = 0; s < boxes.size(); ++s) {
      const auto& b = boxes[s];
      for (Index y = b.top; y < b.top + b.height; ++y) {
        for (Index x = b.left; x < b.left + b.width; ++x) {
          if (b.contains(y, x)) mask(y, x) = static_cast<std::int32_t>(ids[s]);
        }
      }
    }
    const double fg = foreground_fraction(mask);
    if (fg > 0.05 && fg < 0.6) break;
  }

  ToySample sample{Tensor(Shape{1, 3, h, w}), mask};
  Tensor& img = sample.image;
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const Index cls = mask(y, x);
      if (cls == 0) {
        const double v = rng.uniform();
        for (Index c = 0; c < 3; ++c) img(0, c, y, x) = v;
      } else {
        const auto color = class_color(cls);
        for (Index c = 0; c < 3; ++c) {
          img(0, c, y, x) = std::clamp(color[static_cast<std::size_t>(c)] + rng.uniform(-kShapeNoise, kShapeNoise), 0.0, 1.0);
        }
      }
    }
  }
  return sample;
}

ToySample heldout_sample(Index i, Index h, Index w, Index classes) {
  Rng rng(kHeldOutBase + static_cast<std::uint64_t>(i));
  return gen_toy_sample(rng, h, w, classes);
}

}  // namespace cgr
