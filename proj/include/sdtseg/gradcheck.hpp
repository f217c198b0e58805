#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sdtseg/network.hpp"
#include "sdtseg/rng.hpp"

namespace sdtseg {

// A random (network, image, targets) instance for gradient verification.
struct GradcheckInstance {
  NetworkState state;
  Tensor image;
  LabelMask y_seg;
  Tensor y_dist;
  std::vector<double> class_weights;
  double lambda = 2.0;
};

namespace detail {

// Smallest margin of any unit to an activation kink (relu at 0, hardtanh at
// +/-1, maxpool near-ties, L1 at z == y). Finite differences straddle kinks,
// so instances with tight margins are redrawn.
inline double kink_margin(const NetworkState& state, const ForwardCache& cache,
                          const Tensor& y_dist) {
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t li = 0; li < state.trunk.size(); ++li) {
    const auto kind = state.trunk[li].kind;
    if (kind == LayerKind::relu) {
      const Tensor& pre = li == 0 ? cache.input : cache.acts[li - 1];
      for (double v : pre.data) margin = std::min(margin, std::abs(v));
    } else if (kind == LayerKind::maxpool2) {
      const Tensor& pre = li == 0 ? cache.input : cache.acts[li - 1];
      const int c = pre.shape[0], h = pre.shape[1], w = pre.shape[2];
      for (int ch = 0; ch < c; ++ch) {
        const double* p = pre.plane(ch);
        for (int y = 0; y < h; y += 2) {
          for (int x = 0; x < w; x += 2) {
            double vals[4] = {p[y * w + x], p[y * w + x + 1], p[(y + 1) * w + x],
                              p[(y + 1) * w + x + 1]};
            std::sort(vals, vals + 4);
            margin = std::min(margin, vals[3] - vals[2]);
          }
        }
      }
    }
  }
  for (double v : cache.pre_dist.data) margin = std::min(margin, std::abs(std::abs(v) - 1.0));
  for (std::size_t i = 0; i < cache.z_dist.data.size(); ++i)
    margin = std::min(margin, std::abs(cache.z_dist.data[i] - y_dist.data[i]));
  return margin;
}

}  // namespace detail

inline GradcheckInstance make_gradcheck_instance(std::uint64_t seed, double lambda,
                                                 int classes = 4, int trunk_width = 8,
                                                 int height = 8, int width = 8) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(mix_seed(seed, attempt, 0x67636b75ull));
    GradcheckInstance inst;
    inst.lambda = lambda;
    inst.state = init_network(classes, trunk_width, mix_seed(seed, attempt));
    inst.image = Tensor({3, height, width});
    for (auto& v : inst.image.data) v = rng.normal();
    inst.y_seg = LabelMask(width, height, classes);
    for (auto& v : inst.y_seg.data) {
      v = static_cast<std::uint8_t>(rng.uniform_int(classes + 1));
      if (v == classes) v = kVoidIndex;  // sprinkle a few void pixels
    }
    inst.y_dist = Tensor({classes, height, width});
    for (auto& v : inst.y_dist.data) v = 2.0 * rng.uniform() - 1.0;
    inst.class_weights.resize(classes);
    for (auto& w : inst.class_weights) w = 0.5 + rng.uniform();

    auto fwd = forward(inst.state, inst.image);
    if (detail::kink_margin(inst.state, fwd.cache, inst.y_dist) > 3e-4) return inst;
  }
}

struct GradcheckReport {
  struct Block {
    std::string name;
    double max_rel_err = 0.0;
  };
  std::vector<Block> blocks;
  double max_rel_err = 0.0;
  bool passed(double tol = 1e-4) const { return max_rel_err < tol; }
};

// Central finite differences over every parameter, h = 1e-5, against
// backward(). Differentiates through forward() + loss() only.
inline GradcheckReport run_gradcheck(GradcheckInstance& inst, double h = 1e-5,
                                     double corruption = 0.0) {
  auto eval_loss = [&]() {
    auto fwd = forward(inst.state, inst.image);
    LossInputs li{fwd.z_seg, fwd.z_dist, inst.y_seg, inst.y_dist, inst.class_weights,
                  inst.lambda};
    return loss(li).total;
  };

  auto fwd = forward(inst.state, inst.image);
  LossInputs li{fwd.z_seg, fwd.z_dist, inst.y_seg, inst.y_dist, inst.class_weights, inst.lambda};
  Gradients grads = backward(inst.state, fwd.cache, li);
  if (corruption != 0.0 && !grads.sdt_head.w.data.empty())
    grads.sdt_head.w.data[0] += corruption;

  GradcheckReport report;
  auto check_tensor = [&](const std::string& name, Tensor& params, const Tensor& analytic) {
    double block_err = 0.0;
    for (std::size_t i = 0; i < params.data.size(); ++i) {
      const double saved = params.data[i];
      params.data[i] = saved + h;
      const double lp = eval_loss();
      params.data[i] = saved - h;
      const double lm = eval_loss();
      params.data[i] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      const double a = analytic.data[i];
      const double err = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      block_err = std::max(block_err, err);
    }
    report.blocks.push_back({name, block_err});
    report.max_rel_err = std::max(report.max_rel_err, block_err);
  };

  for (std::size_t i = 0; i < inst.state.trunk_convs.size(); ++i) {
    const std::string base = "trunk." + std::to_string(i);
    check_tensor(base + ".w", inst.state.trunk_convs[i].w, grads.trunk[i].w);
    check_tensor(base + ".b", inst.state.trunk_convs[i].b, grads.trunk[i].b);
  }
  check_tensor("sdt_head.w", inst.state.sdt_head.w, grads.sdt_head.w);
  check_tensor("sdt_head.b", inst.state.sdt_head.b, grads.sdt_head.b);
  check_tensor("fusion.w", inst.state.fusion.w, grads.fusion.w);
  check_tensor("fusion.b", inst.state.fusion.b, grads.fusion.b);
  return report;
}

}  // namespace sdtseg
