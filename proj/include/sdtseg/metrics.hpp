#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sdtseg/raster.hpp"

namespace sdtseg {

// counts[t][p] = pixels of true class t predicted as p; void truth excluded.
struct ConfusionMatrix {
  int classes = 0;
  std::vector<std::uint64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int c)
      : classes(c), counts(static_cast<std::size_t>(c) * c, 0) {
    if (c < 2) throw std::invalid_argument("ConfusionMatrix: classes must be >= 2");
  }

  std::uint64_t& at(int truth, int pred) {
    return counts[static_cast<std::size_t>(truth) * classes + pred];
  }
  std::uint64_t at(int truth, int pred) const {
    return counts[static_cast<std::size_t>(truth) * classes + pred];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : counts) t += v;
    return t;
  }

  void accumulate(const LabelMask& truth, const LabelMask& pred) {
    if (truth.width != pred.width || truth.height != pred.height)
      throw std::invalid_argument("ConfusionMatrix: dimension mismatch");
    for (std::size_t i = 0; i < truth.data.size(); ++i) {
      const std::uint8_t t = truth.data[i];
      if (truth.is_void(t)) continue;
      const std::uint8_t p = pred.data[i];
      if (pred.is_void(p) || p >= classes)
        throw std::invalid_argument("ConfusionMatrix: prediction contains void or out-of-range class");
      if (t >= classes) throw std::invalid_argument("ConfusionMatrix: truth class out of range");
      at(t, p) += 1;
    }
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.classes != classes) throw std::invalid_argument("ConfusionMatrix: class count mismatch");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }
};

inline double overall_accuracy(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw std::invalid_argument("overall_accuracy: empty confusion matrix");
  std::uint64_t trace = 0;
  for (int c = 0; c < cm.classes; ++c) trace += cm.at(c, c);
  return static_cast<double>(trace) / static_cast<double>(total);
}

namespace detail {

struct ClassTally {
  std::uint64_t tp = 0, fp = 0, fn = 0;
};

inline ClassTally tally(const ConfusionMatrix& cm, int c) {
  ClassTally t;
  t.tp = cm.at(c, c);
  for (int o = 0; o < cm.classes; ++o) {
    if (o == c) continue;
    t.fp += cm.at(o, c);
    t.fn += cm.at(c, o);
  }
  return t;
}

}  // namespace detail

// f1[c] = 2 TP / (2 TP + FP + FN), 0 when the denominator is 0.
inline std::vector<double> f1_per_class(const ConfusionMatrix& cm) {
  std::vector<double> f1(cm.classes, 0.0);
  for (int c = 0; c < cm.classes; ++c) {
    const auto t = detail::tally(cm, c);
    const std::uint64_t denom = 2 * t.tp + t.fp + t.fn;
    f1[c] = denom == 0 ? 0.0 : 2.0 * static_cast<double>(t.tp) / static_cast<double>(denom);
  }
  return f1;
}

struct IouResult {
  std::vector<double> per_class;
  double mean = 0.0;  // over classes with non-empty union
};

inline IouResult iou(const ConfusionMatrix& cm) {
  IouResult r;
  r.per_class.assign(cm.classes, 0.0);
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < cm.classes; ++c) {
    const auto t = detail::tally(cm, c);
    const std::uint64_t uni = t.tp + t.fp + t.fn;
    if (uni == 0) continue;
    r.per_class[c] = static_cast<double>(t.tp) / static_cast<double>(uni);
    sum += r.per_class[c];
    ++present;
  }
  r.mean = present == 0 ? 0.0 : sum / present;
  return r;
}

}  // namespace sdtseg
