#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace sdtseg {

// Dense N-dimensional real array, row-major.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t numel() const { return data.size(); }

  // CHW accessors
  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  double* plane(int c) { return data.data() + static_cast<std::size_t>(c) * shape[1] * shape[2]; }
  const double* plane(int c) const {
    return data.data() + static_cast<std::size_t>(c) * shape[1] * shape[2];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline bool all_finite(const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

// Flips for CHW tensors.
inline Tensor flip_tensor_h(const Tensor& t) {
  Tensor out(t.shape);
  const int c = t.shape[0], h = t.shape[1], w = t.shape[2];
  for (int i = 0; i < c; ++i)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(i, y, x) = t.at(i, y, w - 1 - x);
  return out;
}

inline Tensor flip_tensor_v(const Tensor& t) {
  Tensor out(t.shape);
  const int c = t.shape[0], h = t.shape[1], w = t.shape[2];
  for (int i = 0; i < c; ++i)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(i, y, x) = t.at(i, h - 1 - y, x);
  return out;
}

}  // namespace sdtseg
