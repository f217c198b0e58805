#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sdtseg {

// Thrown on malformed or unreadable files.
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a training step encounters non-finite values.
struct divergence_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown on invalid run configuration documents.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Identity on [-1,1], saturates to +/-1 outside.
inline double hardtanh(double x) {
  return std::clamp(x, -1.0, 1.0);
}

}  // namespace sdtseg
