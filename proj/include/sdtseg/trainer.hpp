#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <span>
#include <vector>

#include "sdtseg/edt.hpp"
#include "sdtseg/metrics.hpp"
#include "sdtseg/network.hpp"
#include "sdtseg/rng.hpp"
#include "sdtseg/synth.hpp"

namespace sdtseg {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 10;
  double lr = 0.01;
  std::vector<int> lr_milestones = {25, 45};  // divide lr by 10 at each
  double weight_decay = 5e-4;
  double lambda = 2.0;
  double clip = 32.0;
  int crop = 64;
  std::uint64_t seed = 1;
  bool balance = true;
  int trunk_width = 32;
  VoidPolicy void_policy = VoidPolicy::exclude_from_loss;

  void validate() const {
    if (epochs < 0 || batch_size < 1) throw std::invalid_argument("TrainConfig: bad counts");
    if (crop < 2 || crop % 2 != 0)
      throw std::invalid_argument("TrainConfig: crop must be even and >= 2");
    if (lr <= 0.0 || weight_decay < 0.0 || lambda < 0.0 || clip < 1.0)
      throw std::invalid_argument("TrainConfig: bad hyperparameters");
    if (trunk_width < 4) throw std::invalid_argument("TrainConfig: trunk_width must be >= 4");
  }
};

// weight[c] = median(freq) / freq[c] over non-void pixels of all masks.
// Classes absent everywhere get weight 0 (with a warning); the median is
// taken over the present classes.
inline std::vector<double> median_frequency_weights(std::span<const LabelMask> masks,
                                                    int classes) {
  std::vector<std::uint64_t> counts(classes, 0);
  std::uint64_t total = 0;
  for (const auto& m : masks) {
    for (std::uint8_t v : m.data) {
      if (m.is_void(v)) continue;
      if (v >= classes) throw std::invalid_argument("median_frequency_weights: class out of range");
      ++counts[v];
      ++total;
    }
  }
  if (total == 0) throw std::invalid_argument("median_frequency_weights: all pixels void");

  std::vector<double> present;
  for (int c = 0; c < classes; ++c)
    if (counts[c] > 0) present.push_back(static_cast<double>(counts[c]) / total);
  std::sort(present.begin(), present.end());
  const std::size_t n = present.size();
  const double median =
      n % 2 == 1 ? present[n / 2] : 0.5 * (present[n / 2 - 1] + present[n / 2]);

  std::vector<double> weights(classes, 0.0);
  for (int c = 0; c < classes; ++c) {
    if (counts[c] == 0) {
      std::cerr << "warning: class " << c << " absent from all masks, weight set to 0\n";
      continue;
    }
    weights[c] = median / (static_cast<double>(counts[c]) / total);
  }
  return weights;
}

inline double lr_at(int epoch, const TrainConfig& config) {
  if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
  int hits = 0;
  for (int m : config.lr_milestones)
    if (m <= epoch) ++hits;
  return config.lr * std::pow(10.0, -hits);
}

// Random crop followed by independent horizontal/vertical flips, applied
// identically to image and mask. Distance targets are computed afterwards
// from the cropped mask, never from the full tile.
struct AugmentResult {
  Tensor image;
  LabelMask mask;
};

inline AugmentResult augment(const Tensor& image, const LabelMask& mask, int crop, Rng& rng,
                             double flip_prob = 0.5) {
  const int h = mask.height, w = mask.width;
  if (image.shape[1] != h || image.shape[2] != w)
    throw std::invalid_argument("augment: image/mask dimension mismatch");
  if (crop > h || crop > w) throw std::invalid_argument("augment: crop larger than image");

  const int oy = static_cast<int>(rng.uniform_int(h - crop + 1));
  const int ox = static_cast<int>(rng.uniform_int(w - crop + 1));
  const bool flip_h = rng.bernoulli(flip_prob);
  const bool flip_v = rng.bernoulli(flip_prob);

  AugmentResult out;
  out.image = Tensor({image.shape[0], crop, crop});
  out.mask = LabelMask(crop, crop, mask.classes);
  out.mask.void_index = mask.void_index;
  for (int y = 0; y < crop; ++y) {
    const int sy = flip_v ? oy + crop - 1 - y : oy + y;
    for (int x = 0; x < crop; ++x) {
      const int sx = flip_h ? ox + crop - 1 - x : ox + x;
      out.mask.at(y, x) = mask.at(sy, sx);
      for (int ch = 0; ch < image.shape[0]; ++ch)
        out.image.at(ch, y, x) = image.at(ch, sy, sx);
    }
  }
  return out;
}

// ---- inference ----

inline LabelMask argmax_mask(const Tensor& z_seg) {
  const int c = z_seg.shape[0], h = z_seg.shape[1], w = z_seg.shape[2];
  LabelMask mask(w, h, std::max(2, c));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t p = 0; p < plane; ++p) {
    int best = 0;
    double best_v = z_seg.data[p];
    for (int k = 1; k < c; ++k) {
      const double v = z_seg.data[static_cast<std::size_t>(k) * plane + p];
      if (v > best_v) {  // ties keep the lowest class index
        best_v = v;
        best = k;
      }
    }
    mask.data[p] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

inline int window_stride(int window, double overlap) {
  if (overlap < 0.0 || overlap >= 1.0)
    throw std::invalid_argument("window_stride: overlap must be in [0, 1)");
  return std::max(1, static_cast<int>(std::llround(window * (1.0 - overlap))));
}

// Window start offsets along one axis; the last window clamps to the border.
inline std::vector<int> window_starts(int extent, int window, int stride) {
  std::vector<int> starts;
  for (int s = 0; s + window <= extent; s += stride) starts.push_back(s);
  if (starts.empty() || starts.back() + window < extent) starts.push_back(extent - window);
  return starts;
}

struct InferResult {
  Tensor z_seg_mean;  // per-pixel softmax outputs averaged over covering windows
  LabelMask argmax;
};

inline InferResult sliding_window_infer(const NetworkState& state, const Tensor& image,
                                        int window, double overlap) {
  const int h = image.shape[1], w = image.shape[2];
  if (window > h || window > w)
    throw std::invalid_argument("sliding_window_infer: window larger than image");
  if (window % 2 != 0)
    throw std::invalid_argument("sliding_window_infer: window must be even");
  const int stride = window_stride(window, overlap);

  const auto ys = window_starts(h, window, stride);
  const auto xs = window_starts(w, window, stride);

  Tensor sum({state.classes, h, w});
  ScalarField hits(w, h, 0.0);
  Tensor patch({3, window, window});
  for (int y0 : ys) {
    for (int x0 : xs) {
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < window; ++y)
          for (int x = 0; x < window; ++x) patch.at(ch, y, x) = image.at(ch, y0 + y, x0 + x);
      auto fwd = forward(state, patch);
      for (int k = 0; k < state.classes; ++k)
        for (int y = 0; y < window; ++y)
          for (int x = 0; x < window; ++x)
            sum.at(k, y0 + y, x0 + x) += fwd.z_seg.at(k, y, x);
      for (int y = 0; y < window; ++y)
        for (int x = 0; x < window; ++x) hits.at(y0 + y, x0 + x) += 1.0;
    }
  }
  for (int k = 0; k < state.classes; ++k)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) sum.at(k, y, x) /= hits.at(y, x);

  InferResult r{std::move(sum), {}};
  r.argmax = argmax_mask(r.z_seg_mean);
  r.argmax.classes = state.classes;
  return r;
}

// ---- training ----

struct Dataset {
  std::vector<SynthSample> train;
  std::vector<SynthSample> val;
  int classes = 0;
};

// Fixed 80/20 split of the generated sequence.
inline Dataset make_dataset(const SynthSpec& spec, int total) {
  if (total < 5) throw std::invalid_argument("make_dataset: need at least 5 images");
  auto samples = generate_synthetic(spec, total);
  Dataset ds;
  ds.classes = spec.classes;
  const int val_count = std::max(1, total / 5);
  ds.train.assign(samples.begin(), samples.end() - val_count);
  ds.val.assign(samples.end() - val_count, samples.end());
  return ds;
}

struct EpochLog {
  int epoch = 0;
  std::int64_t step = 0;  // cumulative optimizer steps
  double lr = 0.0;
  double nll = 0.0;
  double l1 = 0.0;
  double total = 0.0;
  double val_oa = 0.0;
};

struct TrainResult {
  NetworkState state;
  std::vector<EpochLog> log;
  bool diverged = false;
};

using EpochCallback = std::function<void(const NetworkState&, const EpochLog&)>;

namespace detail {

inline void add_gradients(Gradients& acc, const Gradients& g) {
  auto add = [](ConvGrads& a, const ConvGrads& b) {
    for (std::size_t i = 0; i < a.w.data.size(); ++i) a.w.data[i] += b.w.data[i];
    for (std::size_t i = 0; i < a.b.data.size(); ++i) a.b.data[i] += b.b.data[i];
  };
  for (std::size_t i = 0; i < acc.trunk.size(); ++i) add(acc.trunk[i], g.trunk[i]);
  add(acc.sdt_head, g.sdt_head);
  add(acc.fusion, g.fusion);
}

inline void scale_gradients(Gradients& g, double s) {
  auto scale = [s](ConvGrads& cg) {
    for (auto& v : cg.w.data) v *= s;
    for (auto& v : cg.b.data) v *= s;
  };
  for (auto& cg : g.trunk) scale(cg);
  scale(g.sdt_head);
  scale(g.fusion);
}

}  // namespace detail

inline double validation_oa(const NetworkState& state, std::span<const SynthSample> val) {
  ConfusionMatrix cm(state.classes);
  for (const auto& sample : val) {
    auto fwd = forward(state, sample.image);
    LabelMask pred = argmax_mask(fwd.z_seg);
    pred.classes = state.classes;
    cm.accumulate(sample.mask, pred);
  }
  return overall_accuracy(cm);
}

inline TrainResult train(const TrainConfig& config, const Dataset& dataset,
                         const EpochCallback& on_epoch = nullptr) {
  config.validate();
  if (dataset.train.empty()) throw std::invalid_argument("train: empty training set");

  const int classes = dataset.classes;
  std::vector<LabelMask> train_masks;
  train_masks.reserve(dataset.train.size());
  for (const auto& s : dataset.train) train_masks.push_back(s.mask);
  const std::vector<double> class_weights =
      config.balance ? median_frequency_weights(train_masks, classes)
                     : std::vector<double>(classes, 1.0);
  const SdtParams sdt{config.clip, classes, config.void_policy};

  NetworkState state = init_network(classes, config.trunk_width, config.seed);
  NetworkState last_good = state;

  TrainResult result;
  std::int64_t global_step = 0;
  const int n_train = static_cast<int>(dataset.train.size());

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(epoch, config);

    std::vector<int> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch), 0x6f726472ull));
    for (int i = n_train - 1; i > 0; --i)
      std::swap(order[i], order[order_rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);

    double ep_nll = 0.0, ep_l1 = 0.0, ep_total = 0.0;
    int batches = 0;
    for (int start = 0; start < n_train; start += config.batch_size) {
      const int n_b = std::min(config.batch_size, n_train - start);
      Gradients batch_grads = zero_gradients(state);
      double b_nll = 0.0, b_l1 = 0.0, b_total = 0.0;
      try {
        for (int j = 0; j < n_b; ++j) {
          const int pos = start + j;
          const auto& sample = dataset.train[order[pos]];
          Rng crop_rng(mix_seed(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)),
                                static_cast<std::uint64_t>(pos), 0x61756721ull));
          AugmentResult aug = augment(sample.image, sample.mask, config.crop, crop_rng);
          const Tensor y_dist = tensor_from_stack(class_sdt_stack(aug.mask, sdt));

          auto fwd = forward(state, aug.image);
          LossInputs li{fwd.z_seg, fwd.z_dist, aug.mask, y_dist, class_weights, config.lambda};
          const LossResult lres = loss(li);
          if (!std::isfinite(lres.total)) throw divergence_error("train: non-finite loss");
          detail::add_gradients(batch_grads, backward(state, fwd.cache, li));
          b_nll += lres.nll;
          b_l1 += lres.l1;
          b_total += lres.total;
        }
        detail::scale_gradients(batch_grads, 1.0 / n_b);
        state = sgd_step(state, batch_grads, lr, config.weight_decay);
      } catch (const divergence_error&) {
        result.state = last_good;
        result.diverged = true;
        return result;
      }
      ep_nll += b_nll / n_b;
      ep_l1 += b_l1 / n_b;
      ep_total += b_total / n_b;
      ++batches;
      ++global_step;
    }

    EpochLog log;
    log.epoch = epoch;
    log.step = global_step;
    log.lr = lr;
    log.nll = ep_nll / std::max(1, batches);
    log.l1 = ep_l1 / std::max(1, batches);
    log.total = ep_total / std::max(1, batches);
    log.val_oa = dataset.val.empty() ? 0.0 : validation_oa(state, dataset.val);
    result.log.push_back(log);
    last_good = state;
    if (on_epoch) on_epoch(state, log);
  }

  result.state = std::move(state);
  return result;
}

}  // namespace sdtseg
