#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "sdtseg/raster.hpp"
#include "sdtseg/rng.hpp"
#include "sdtseg/tensor.hpp"

namespace sdtseg {

// Synthetic stand-in for a labeled segmentation dataset: colored disks and
// rectangles on a flat background, plus Gaussian pixel noise.
struct SynthSpec {
  int image_size = 128;
  int classes = 5;  // background + shape classes
  int min_shapes = 5;
  int max_shapes = 9;
  bool disks = true;
  bool rectangles = true;
  double noise_sigma = 0.25;
  std::uint64_t seed = 1;

  void validate() const {
    if (image_size < 8 || image_size % 2 != 0)
      throw std::invalid_argument("SynthSpec: image_size must be even and >= 8");
    if (classes < 2) throw std::invalid_argument("SynthSpec: classes must be >= 2");
    if (min_shapes < 0 || max_shapes < min_shapes)
      throw std::invalid_argument("SynthSpec: bad shapes-per-image range");
    if (!disks && !rectangles) throw std::invalid_argument("SynthSpec: no shape kinds enabled");
    if (noise_sigma < 0.0) throw std::invalid_argument("SynthSpec: negative noise sigma");
  }
};

struct SynthSample {
  Tensor image;  // 3×H×W
  LabelMask mask;
};

// Fixed zero-centered palette: black background, hue-spaced shape colors.
inline std::array<double, 3> class_color(int cls, int classes) {
  if (cls == 0) return {0.0, 0.0, 0.0};
  const double angle = 2.0 * std::numbers::pi * (cls - 1) / std::max(1, classes - 1);
  constexpr double third = 2.0 * std::numbers::pi / 3.0;
  return {0.4 * std::cos(angle), 0.4 * std::cos(angle - third), 0.4 * std::cos(angle + third)};
}

namespace detail {

inline void render_sample(const SynthSpec& spec, Rng& rng, SynthSample& out) {
  const int n = spec.image_size;
  out.mask = LabelMask(n, n, spec.classes);

  const int shape_span = spec.max_shapes - spec.min_shapes + 1;
  const int count = spec.min_shapes + static_cast<int>(rng.uniform_int(shape_span));
  for (int s = 0; s < count; ++s) {
    const int cls = 1 + static_cast<int>(rng.uniform_int(spec.classes - 1));
    const int cy = static_cast<int>(rng.uniform_int(n));
    const int cx = static_cast<int>(rng.uniform_int(n));
    bool disk = spec.disks;
    if (spec.disks && spec.rectangles) disk = rng.bernoulli(0.5);
    if (disk) {
      const double r = n / 8.0 + rng.uniform() * (n / 3.5 - n / 8.0);
      const int lo_y = std::max(0, cy - static_cast<int>(r) - 1);
      const int hi_y = std::min(n - 1, cy + static_cast<int>(r) + 1);
      const int lo_x = std::max(0, cx - static_cast<int>(r) - 1);
      const int hi_x = std::min(n - 1, cx + static_cast<int>(r) + 1);
      for (int y = lo_y; y <= hi_y; ++y)
        for (int x = lo_x; x <= hi_x; ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
            out.mask.at(y, x) = static_cast<std::uint8_t>(cls);
    } else {
      const int hy = n / 12 + static_cast<int>(rng.uniform_int(n / 6));
      const int hx = n / 12 + static_cast<int>(rng.uniform_int(n / 6));
      const int lo_y = std::max(0, cy - hy), hi_y = std::min(n - 1, cy + hy);
      const int lo_x = std::max(0, cx - hx), hi_x = std::min(n - 1, cx + hx);
      for (int y = lo_y; y <= hi_y; ++y)
        for (int x = lo_x; x <= hi_x; ++x) out.mask.at(y, x) = static_cast<std::uint8_t>(cls);
    }
  }

  out.image = Tensor({3, n, n});
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const auto color = class_color(out.mask.at(y, x), spec.classes);
      for (int ch = 0; ch < 3; ++ch) {
        double v = color[ch];
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
        out.image.at(ch, y, x) = v;
      }
    }
  }
}

}  // namespace detail

// Deterministic given (spec.seed, index): extending the count preserves
// earlier samples.
inline std::vector<SynthSample> generate_synthetic(const SynthSpec& spec, int count) {
  spec.validate();
  std::vector<SynthSample> samples(count);
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(i), 0x73796e74ull));
    detail::render_sample(spec, rng, samples[i]);
  }
  return samples;
}

}  // namespace sdtseg
