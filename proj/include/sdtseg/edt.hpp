#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "sdtseg/common.hpp"
#include "sdtseg/parallel.hpp"
#include "sdtseg/raster.hpp"

namespace sdtseg {

enum class VoidPolicy { background, exclude_from_loss };

struct SdtParams {
  double clip = 32.0;  // truncation radius in pixels, >= 1, global for all classes
  int classes = 0;
  VoidPolicy void_policy = VoidPolicy::exclude_from_loss;

  void validate() const {
    if (clip < 1.0) throw std::invalid_argument("SdtParams: clip must be >= 1");
    if (classes < 2) throw std::invalid_argument("SdtParams: classes must be >= 2");
  }
};

// Sentinel for "no site in this scan line"; beats any in-grid squared distance
// by a margin large enough that lower-envelope arithmetic stays exact.
inline constexpr double kEdtFar = 1e18;

// Distance assigned on degenerate grids (class absent or covering everything);
// saturates to +/-1 after division by any practical clip radius.
inline constexpr double kFarDistance = 1e9;

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

  bool at(int y, int x) const {
    return data[static_cast<std::size_t>(y) * width + x] != 0;
  }
  void set(int y, int x, bool v) {
    data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0;
  }
  std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
};

inline BinaryMask invert(const BinaryMask& m) {
  BinaryMask out = m;
  for (auto& v : out.data) v = v ? 0 : 1;
  return out;
}

inline BinaryMask class_mask(const LabelMask& mask, int cls) {
  // Void pixels belong to no class mask, so they land on the background side.
  BinaryMask out(mask.width, mask.height);
  for (std::size_t i = 0; i < mask.data.size(); ++i)
    out.data[i] = (!mask.is_void(mask.data[i]) && mask.data[i] == cls) ? 1 : 0;
  return out;
}

namespace detail {

struct EdtScratch {
  std::vector<int> hull;        // parabola site indices
  std::vector<double> bounds;   // envelope breakpoints
};

// Lower envelope of parabolas j -> (i-j)^2 + f[j], after Felzenszwalb &
// Huttenlocher, "Distance Transforms of Sampled Functions". Exact for the
// integer-valued f this module produces; O(n).
inline void squared_edt_1d_impl(std::span<const double> f, std::span<double> out,
                                EdtScratch& s) {
  const int n = static_cast<int>(f.size());
  if (n == 0) return;
  if (s.hull.size() < static_cast<std::size_t>(n)) {
    s.hull.resize(n);
    s.bounds.resize(n + 1);
  }
  int* v = s.hull.data();
  double* z = s.bounds.data();

  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s_q;
    for (;;) {
      const int p = v[k];
      s_q = ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) /
            (2.0 * (q - p));
      if (s_q > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s_q;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }

  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double d = q - v[k];
    out[q] = d * d + f[v[k]];
  }
}

}  // namespace detail

// out[i] = min_j (i-j)^2 + f[j]; f entries are 0 at sites and a sentinel
// >= len^2 elsewhere (kEdtFar works for any grid this library handles).
inline void squared_edt_1d(std::span<const double> f, std::span<double> out) {
  detail::EdtScratch scratch;
  detail::squared_edt_1d_impl(f, out, scratch);
}

inline std::vector<double> squared_edt_1d(std::span<const double> f) {
  std::vector<double> out(f.size());
  squared_edt_1d(f, out);
  return out;
}

// Squared Euclidean distance to the nearest true pixel, by a row pass then a
// column pass of the 1-D transform. Returns nullopt when the site set is empty.
inline std::optional<ScalarField> binary_sqdist(const BinaryMask& mask) {
  const int w = mask.width, h = mask.height;
  bool any = false;
  for (std::uint8_t v : mask.data)
    if (v) {
      any = true;
      break;
    }
  if (!any) return std::nullopt;

  ScalarField dist(w, h);

  // Row pass: per-row 1-D transform of 0 / far.
  parallel_for(h, [&](std::int64_t y0, std::int64_t y1) {
    detail::EdtScratch scratch;
    std::vector<double> f(w);
    for (std::int64_t y = y0; y < y1; ++y) {
      const std::uint8_t* src = mask.data.data() + y * w;
      double* dst = dist.data.data() + y * w;
      for (int x = 0; x < w; ++x) f[x] = src[x] ? 0.0 : kEdtFar;
      detail::squared_edt_1d_impl(f, std::span<double>(dst, w), scratch);
    }
  });

  // Column pass over vertical strips; strips are gathered into contiguous
  // buffers so the scan stays cache-friendly on large grids.
  constexpr int kStrip = 64;
  const int strips = (w + kStrip - 1) / kStrip;
  parallel_for(strips, [&](std::int64_t s0, std::int64_t s1) {
    detail::EdtScratch scratch;
    std::vector<double> cols(static_cast<std::size_t>(kStrip) * h);
    std::vector<double> out(h);
    for (std::int64_t s = s0; s < s1; ++s) {
      const int x0 = static_cast<int>(s) * kStrip;
      const int bw = std::min(kStrip, w - x0);
      for (int y = 0; y < h; ++y) {
        const double* row = dist.data.data() + static_cast<std::size_t>(y) * w + x0;
        for (int k = 0; k < bw; ++k) cols[static_cast<std::size_t>(k) * h + y] = row[k];
      }
      for (int k = 0; k < bw; ++k) {
        std::span<const double> col(cols.data() + static_cast<std::size_t>(k) * h, h);
        detail::squared_edt_1d_impl(col, out, scratch);
        std::copy(out.begin(), out.end(), cols.begin() + static_cast<std::ptrdiff_t>(k) * h);
      }
      for (int y = 0; y < h; ++y) {
        double* row = dist.data.data() + static_cast<std::size_t>(y) * w + x0;
        for (int k = 0; k < bw; ++k) row[k] = cols[static_cast<std::size_t>(k) * h + y];
      }
    }
  });

  return dist;
}

// Signed Euclidean distance transform: +distance to the nearest background
// pixel inside the mask, -distance to the nearest foreground pixel outside it.
// Degenerate masks (all true / all false) saturate to +/-kFarDistance.
inline ScalarField signed_dt(const BinaryMask& mask) {
  const auto to_fg = binary_sqdist(mask);
  const auto to_bg = binary_sqdist(invert(mask));

  ScalarField out(mask.width, mask.height);
  if (!to_bg) {  // no background anywhere
    for (auto& v : out.data) v = kFarDistance;
    return out;
  }
  if (!to_fg) {  // class absent
    for (auto& v : out.data) v = -kFarDistance;
    return out;
  }
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = mask.data[i] ? std::sqrt(to_bg->data[i]) : -std::sqrt(to_fg->data[i]);
  return out;
}

// Channel k = hardtanh(signed_dt(mask == k) / clip); outputs in [-1, 1].
inline FieldStack class_sdt_stack(const LabelMask& mask, const SdtParams& params) {
  params.validate();
  mask.validate();
  if (mask.classes != params.classes)
    throw std::invalid_argument("class_sdt_stack: class count mismatch");
  FieldStack stack;
  stack.fields.resize(params.classes);
  parallel_for(params.classes, [&](std::int64_t c0, std::int64_t c1) {
    for (std::int64_t c = c0; c < c1; ++c) {
      ScalarField f = signed_dt(class_mask(mask, static_cast<int>(c)));
      for (auto& v : f.data) v = hardtanh(v / params.clip);
      stack.fields[c] = std::move(f);
    }
  });
  return stack;
}

// Exhaustive O(N^2) signed distance transform; the reference the separable
// implementation is checked against. Shares nothing with signed_dt beyond
// the raster types.
inline ScalarField brute_force_sdt(const BinaryMask& mask) {
  const int w = mask.width, h = mask.height;
  std::vector<std::pair<int, int>> fg, bg;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) (mask.at(y, x) ? fg : bg).emplace_back(y, x);

  ScalarField out(w, h);
  if (bg.empty()) {
    for (auto& v : out.data) v = kFarDistance;
    return out;
  }
  if (fg.empty()) {
    for (auto& v : out.data) v = -kFarDistance;
    return out;
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto& sites = mask.at(y, x) ? bg : fg;
      long best = std::numeric_limits<long>::max();
      for (const auto& [sy, sx] : sites) {
        const long dy = sy - y, dx = sx - x;
        const long d2 = dy * dy + dx * dx;
        if (d2 < best) best = d2;
      }
      out.at(y, x) = mask.at(y, x) ? std::sqrt(static_cast<double>(best))
                                   : -std::sqrt(static_cast<double>(best));
    }
  }
  return out;
}

}  // namespace sdtseg
