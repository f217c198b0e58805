#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sdtseg/common.hpp"
#include "sdtseg/raster.hpp"
#include "sdtseg/rng.hpp"
#include "sdtseg/tensor.hpp"

namespace sdtseg {

enum class LayerKind { conv, relu, maxpool2, upsample2, hardtanh_act, softmax_channels, concat };

struct ConvSpec {
  int in_ch = 0;
  int out_ch = 0;
  int kh = 1;
  int kw = 1;
  int stride = 1;       // always 1 here; pooling handles downsampling
  int pad = 0;          // kernel//2, shape-preserving
};

struct LayerSpec {
  LayerKind kind;
  ConvSpec conv{};  // meaningful when kind == conv
};

struct ConvLayer {
  ConvSpec spec;
  Tensor w;  // {out_ch, in_ch, kh, kw}
  Tensor b;  // {out_ch}
};

// Trunk features cascade into an SDT regression head (1x1 conv + hardtanh);
// trunk features and predicted distances are then concatenated and fused by a
// final 1x1 conv + softmax into class probabilities.
struct NetworkState {
  int classes = 0;
  int trunk_width = 0;
  std::uint64_t rng_seed = 0;
  std::vector<LayerSpec> trunk;
  std::vector<ConvLayer> trunk_convs;  // one per conv entry of trunk, in order
  ConvLayer sdt_head;  // 1x1: trunk_width -> classes
  ConvLayer fusion;    // 1x1: trunk_width + classes -> classes
};

namespace detail {

inline ConvLayer make_conv(int in_ch, int out_ch, int k, Rng& rng) {
  ConvLayer layer;
  layer.spec = ConvSpec{in_ch, out_ch, k, k, 1, k / 2};
  layer.w = Tensor({out_ch, in_ch, k, k});
  layer.b = Tensor({out_ch});
  const double stddev = std::sqrt(2.0 / (in_ch * k * k));
  for (auto& v : layer.w.data) v = stddev * rng.normal();
  return layer;
}

}  // namespace detail

inline NetworkState init_network(int classes, int trunk_width, std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("init_network: classes must be >= 2");
  if (trunk_width < 4) throw std::invalid_argument("init_network: trunk_width must be >= 4");

  NetworkState s;
  s.classes = classes;
  s.trunk_width = trunk_width;
  s.rng_seed = seed;
  s.trunk = {
      {LayerKind::conv, ConvSpec{3, trunk_width, 3, 3, 1, 1}},
      {LayerKind::relu},
      {LayerKind::maxpool2},
      {LayerKind::conv, ConvSpec{trunk_width, trunk_width, 3, 3, 1, 1}},
      {LayerKind::relu},
      {LayerKind::upsample2},
      {LayerKind::conv, ConvSpec{trunk_width, trunk_width, 3, 3, 1, 1}},
      {LayerKind::relu},
  };

  Rng rng(seed);
  for (const auto& spec : s.trunk)
    if (spec.kind == LayerKind::conv)
      s.trunk_convs.push_back(detail::make_conv(spec.conv.in_ch, spec.conv.out_ch, spec.conv.kh, rng));
  s.sdt_head = detail::make_conv(trunk_width, classes, 1, rng);
  s.fusion = detail::make_conv(trunk_width + classes, classes, 1, rng);
  return s;
}

// ---- layer primitives ----

namespace detail {

// input planes copied into a zero-padded scratch (stride w + 2) so the 3x3
// kernels run border-free single passes
inline std::vector<double> pad_planes(const Tensor& in) {
  const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
  const int pw = w + 2;
  std::vector<double> padded(static_cast<std::size_t>(c) * (h + 2) * pw, 0.0);
  for (int ic = 0; ic < c; ++ic) {
    const double* src = in.plane(ic);
    double* dst = padded.data() + static_cast<std::size_t>(ic) * (h + 2) * pw + pw + 1;
    for (int y = 0; y < h; ++y)
      std::copy_n(src + static_cast<std::size_t>(y) * w, w,
                  dst + static_cast<std::size_t>(y) * pw);
  }
  return padded;
}

inline Tensor conv2d_forward(const ConvLayer& layer, const Tensor& in) {
  const auto& sp = layer.spec;
  if (in.shape.size() != 3 || in.shape[0] != sp.in_ch)
    throw std::invalid_argument("conv2d: input channel mismatch");
  const int h = in.shape[1], w = in.shape[2];
  Tensor out({sp.out_ch, h, w});

  if (sp.kh == 3 && sp.kw == 3 && sp.pad == 1) {
    const std::vector<double> padded = pad_planes(in);
    const int pw = w + 2;
    for (int oc = 0; oc < sp.out_ch; ++oc) {
      double* op = out.plane(oc);
      std::fill(op, op + static_cast<std::size_t>(h) * w, layer.b.data[oc]);
      for (int ic = 0; ic < sp.in_ch; ++ic) {
        const double* wv =
            layer.w.data.data() + (static_cast<std::size_t>(oc) * sp.in_ch + ic) * 9;
        const double* p = padded.data() + static_cast<std::size_t>(ic) * (h + 2) * pw;
        for (int y = 0; y < h; ++y) {
          const double* r0 = p + static_cast<std::size_t>(y) * pw;
          const double* r1 = r0 + pw;
          const double* r2 = r1 + pw;
          double* orow = op + static_cast<std::size_t>(y) * w;
          for (int x = 0; x < w; ++x) {
            orow[x] += wv[0] * r0[x] + wv[1] * r0[x + 1] + wv[2] * r0[x + 2] +
                       wv[3] * r1[x] + wv[4] * r1[x + 1] + wv[5] * r1[x + 2] +
                       wv[6] * r2[x] + wv[7] * r2[x + 1] + wv[8] * r2[x + 2];
          }
        }
      }
    }
    return out;
  }

  for (int oc = 0; oc < sp.out_ch; ++oc) {
    double* op = out.plane(oc);
    const double bias = layer.b.data[oc];
    std::fill(op, op + static_cast<std::size_t>(h) * w, bias);
    for (int ic = 0; ic < sp.in_ch; ++ic) {
      const double* inp = in.plane(ic);
      const double* wbase =
          layer.w.data.data() + ((static_cast<std::size_t>(oc) * sp.in_ch + ic) * sp.kh) * sp.kw;
      for (int ky = 0; ky < sp.kh; ++ky) {
        const int dy = ky - sp.pad;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        for (int kx = 0; kx < sp.kw; ++kx) {
          const double wv = wbase[ky * sp.kw + kx];
          const int dx = kx - sp.pad;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int y = y0; y < y1; ++y) {
            double* orow = op + static_cast<std::size_t>(y) * w;
            const double* irow = inp + static_cast<std::size_t>(y + dy) * w + dx;
            for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
          }
        }
      }
    }
  }
  return out;
}

struct ConvGrads {
  Tensor w, b;
};

// Accumulates dw/db into grads and returns dL/dinput.
inline Tensor conv2d_backward(const ConvLayer& layer, const Tensor& in, const Tensor& dout,
                              ConvGrads& grads) {
  const auto& sp = layer.spec;
  const int h = in.shape[1], w = in.shape[2];
  Tensor din(in.shape);

  if (sp.kh == 3 && sp.kw == 3 && sp.pad == 1) {
    const int pw = w + 2;
    const std::vector<double> in_pad = pad_planes(in);
    const std::vector<double> dout_pad = pad_planes(dout);
    for (int oc = 0; oc < sp.out_ch; ++oc) {
      const double* dop = dout.plane(oc);
      double bsum = 0.0;
      for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) bsum += dop[i];
      grads.b.data[oc] += bsum;
      const double* dpad = dout_pad.data() + static_cast<std::size_t>(oc) * (h + 2) * pw;
      for (int ic = 0; ic < sp.in_ch; ++ic) {
        const std::size_t wofs = (static_cast<std::size_t>(oc) * sp.in_ch + ic) * 9;
        const double* p = in_pad.data() + static_cast<std::size_t>(ic) * (h + 2) * pw;
        double a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0, a7 = 0, a8 = 0;
        for (int y = 0; y < h; ++y) {
          const double* r0 = p + static_cast<std::size_t>(y) * pw;
          const double* r1 = r0 + pw;
          const double* r2 = r1 + pw;
          const double* drow = dop + static_cast<std::size_t>(y) * w;
          for (int x = 0; x < w; ++x) {
            const double d = drow[x];
            a0 += d * r0[x];
            a1 += d * r0[x + 1];
            a2 += d * r0[x + 2];
            a3 += d * r1[x];
            a4 += d * r1[x + 1];
            a5 += d * r1[x + 2];
            a6 += d * r2[x];
            a7 += d * r2[x + 1];
            a8 += d * r2[x + 2];
          }
        }
        double* gw = grads.w.data.data() + wofs;
        gw[0] += a0;
        gw[1] += a1;
        gw[2] += a2;
        gw[3] += a3;
        gw[4] += a4;
        gw[5] += a5;
        gw[6] += a6;
        gw[7] += a7;
        gw[8] += a8;

        const double* wv = layer.w.data.data() + wofs;
        double* dip = din.plane(ic);
        for (int y = 0; y < h; ++y) {
          const double* q0 = dpad + static_cast<std::size_t>(y) * pw;
          const double* q1 = q0 + pw;
          const double* q2 = q1 + pw;
          double* dirow = dip + static_cast<std::size_t>(y) * w;
          for (int x = 0; x < w; ++x) {
            dirow[x] += wv[8] * q0[x] + wv[7] * q0[x + 1] + wv[6] * q0[x + 2] +
                        wv[5] * q1[x] + wv[4] * q1[x + 1] + wv[3] * q1[x + 2] +
                        wv[2] * q2[x] + wv[1] * q2[x + 1] + wv[0] * q2[x + 2];
          }
        }
      }
    }
    return din;
  }

  for (int oc = 0; oc < sp.out_ch; ++oc) {
    const double* dop = dout.plane(oc);
    double bsum = 0.0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) bsum += dop[i];
    grads.b.data[oc] += bsum;
    for (int ic = 0; ic < sp.in_ch; ++ic) {
      const double* inp = in.plane(ic);
      double* dip = din.plane(ic);
      const std::size_t wofs = ((static_cast<std::size_t>(oc) * sp.in_ch + ic) * sp.kh) * sp.kw;
      for (int ky = 0; ky < sp.kh; ++ky) {
        const int dy = ky - sp.pad;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        for (int kx = 0; kx < sp.kw; ++kx) {
          const double wv = layer.w.data[wofs + ky * sp.kw + kx];
          const int dx = kx - sp.pad;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          double acc = 0.0;
          for (int y = y0; y < y1; ++y) {
            const double* dorow = dop + static_cast<std::size_t>(y) * w;
            const double* irow = inp + static_cast<std::size_t>(y + dy) * w + dx;
            double* dirow = dip + static_cast<std::size_t>(y + dy) * w + dx;
            for (int x = x0; x < x1; ++x) {
              acc += dorow[x] * irow[x];
              dirow[x] += wv * dorow[x];
            }
          }
          grads.w.data[wofs + ky * sp.kw + kx] += acc;
        }
      }
    }
  }
  return din;
}

inline Tensor relu_forward(const Tensor& in) {
  Tensor out = in;
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Tensor relu_backward(const Tensor& out, const Tensor& dout) {
  Tensor din = dout;
  for (std::size_t i = 0; i < din.data.size(); ++i)
    if (out.data[i] <= 0.0) din.data[i] = 0.0;
  return din;
}

inline Tensor maxpool2_forward(const Tensor& in, std::vector<std::int32_t>& argmax) {
  const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
  if (h % 2 != 0 || w % 2 != 0) throw std::invalid_argument("maxpool2: odd input dims");
  const int oh = h / 2, ow = w / 2;
  Tensor out({c, oh, ow});
  argmax.assign(out.numel(), 0);
  for (int ch = 0; ch < c; ++ch) {
    const double* ip = in.plane(ch);
    double* op = out.plane(ch);
    std::int32_t* ap = argmax.data() + static_cast<std::size_t>(ch) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        std::int32_t best_idx = (2 * y) * w + 2 * x;
        double best = ip[best_idx];
        const std::int32_t cand[3] = {(2 * y) * w + 2 * x + 1, (2 * y + 1) * w + 2 * x,
                                      (2 * y + 1) * w + 2 * x + 1};
        for (std::int32_t idx : cand) {
          if (ip[idx] > best) {
            best = ip[idx];
            best_idx = idx;
          }
        }
        op[static_cast<std::size_t>(y) * ow + x] = best;
        ap[static_cast<std::size_t>(y) * ow + x] = best_idx;
      }
    }
  }
  return out;
}

inline Tensor maxpool2_backward(const std::vector<int>& in_shape, const Tensor& dout,
                                const std::vector<std::int32_t>& argmax) {
  Tensor din(in_shape);
  const int c = dout.shape[0], oh = dout.shape[1], ow = dout.shape[2];
  for (int ch = 0; ch < c; ++ch) {
    const double* dop = dout.plane(ch);
    double* dip = din.plane(ch);
    const std::int32_t* ap = argmax.data() + static_cast<std::size_t>(ch) * oh * ow;
    for (std::size_t i = 0; i < static_cast<std::size_t>(oh) * ow; ++i) dip[ap[i]] += dop[i];
  }
  return din;
}

inline Tensor upsample2_forward(const Tensor& in) {
  const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
  Tensor out({c, h * 2, w * 2});
  for (int ch = 0; ch < c; ++ch) {
    const double* ip = in.plane(ch);
    double* op = out.plane(ch);
    for (int y = 0; y < 2 * h; ++y) {
      const double* irow = ip + static_cast<std::size_t>(y / 2) * w;
      double* orow = op + static_cast<std::size_t>(y) * 2 * w;
      for (int x = 0; x < 2 * w; ++x) orow[x] = irow[x / 2];
    }
  }
  return out;
}

inline Tensor upsample2_backward(const Tensor& dout) {
  const int c = dout.shape[0], oh = dout.shape[1], ow = dout.shape[2];
  Tensor din({c, oh / 2, ow / 2});
  for (int ch = 0; ch < c; ++ch) {
    const double* dop = dout.plane(ch);
    double* dip = din.plane(ch);
    for (int y = 0; y < oh; ++y) {
      const double* dorow = dop + static_cast<std::size_t>(y) * ow;
      double* dirow = dip + static_cast<std::size_t>(y / 2) * (ow / 2);
      for (int x = 0; x < ow; ++x) dirow[x / 2] += dorow[x];
    }
  }
  return din;
}

inline Tensor softmax_channels(const Tensor& in) {
  const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
  Tensor out(in.shape);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t p = 0; p < plane; ++p) {
    double mx = in.data[p];
    for (int k = 1; k < c; ++k) mx = std::max(mx, in.data[k * plane + p]);
    double sum = 0.0;
    for (int k = 0; k < c; ++k) {
      const double e = std::exp(in.data[k * plane + p] - mx);
      out.data[k * plane + p] = e;
      sum += e;
    }
    for (int k = 0; k < c; ++k) out.data[k * plane + p] /= sum;
  }
  return out;
}

}  // namespace detail

struct ForwardCache {
  Tensor input;
  std::vector<Tensor> acts;                         // per trunk layer output
  std::vector<std::vector<std::int32_t>> pool_idx;  // per maxpool layer
  Tensor pre_dist;   // SDT head conv output, before hardtanh
  Tensor z_dist;
  Tensor concat_in;  // {trunk_width + classes, H, W}
  Tensor z_seg;
};

struct ForwardResult {
  Tensor z_dist;
  Tensor z_seg;
  ForwardCache cache;
};

inline ForwardResult forward(const NetworkState& state, const Tensor& image) {
  if (image.shape.size() != 3 || image.shape[0] != 3)
    throw std::invalid_argument("forward: expected 3xHxW image");
  if (image.shape[1] % 2 != 0 || image.shape[2] % 2 != 0)
    throw std::invalid_argument("forward: H and W must be divisible by 2");

  ForwardCache cache;
  cache.input = image;
  Tensor cur = image;
  std::size_t conv_i = 0;
  for (const auto& spec : state.trunk) {
    switch (spec.kind) {
      case LayerKind::conv:
        cur = detail::conv2d_forward(state.trunk_convs[conv_i++], cur);
        break;
      case LayerKind::relu:
        cur = detail::relu_forward(cur);
        break;
      case LayerKind::maxpool2: {
        cache.pool_idx.emplace_back();
        cur = detail::maxpool2_forward(cur, cache.pool_idx.back());
        break;
      }
      case LayerKind::upsample2:
        cur = detail::upsample2_forward(cur);
        break;
      default:
        throw std::invalid_argument("forward: unsupported trunk layer");
    }
    cache.acts.push_back(cur);
  }

  const Tensor& trunk_out = cache.acts.back();
  cache.pre_dist = detail::conv2d_forward(state.sdt_head, trunk_out);
  cache.z_dist = cache.pre_dist;
  for (auto& v : cache.z_dist.data) v = hardtanh(v);

  const int h = trunk_out.shape[1], w = trunk_out.shape[2];
  cache.concat_in = Tensor({state.trunk_width + state.classes, h, w});
  std::copy(trunk_out.data.begin(), trunk_out.data.end(), cache.concat_in.data.begin());
  std::copy(cache.z_dist.data.begin(), cache.z_dist.data.end(),
            cache.concat_in.data.begin() + static_cast<std::ptrdiff_t>(trunk_out.numel()));

  Tensor logits = detail::conv2d_forward(state.fusion, cache.concat_in);
  cache.z_seg = detail::softmax_channels(logits);

  if (!all_finite(cache.z_seg) || !all_finite(cache.z_dist))
    throw divergence_error("forward: non-finite activations");

  ForwardResult r{cache.z_dist, cache.z_seg, std::move(cache)};
  return r;
}

// ---- loss ----

inline constexpr double kProbClamp = 1e-12;

struct LossInputs {
  const Tensor& z_seg;   // C×H×W, channel-sums 1 per pixel
  const Tensor& z_dist;  // C×H×W in [-1, 1]
  const LabelMask& y_seg;
  const Tensor& y_dist;  // C×H×W targets in [-1, 1]
  std::span<const double> class_weights;
  double lambda = 0.0;
};

struct LossResult {
  double total = 0.0;
  double nll = 0.0;
  double l1 = 0.0;
  std::int64_t valid_pixels = 0;
  std::int64_t clamped = 0;  // pixels whose true-class probability hit the clamp
};

inline LossResult loss(const LossInputs& in) {
  const int c = in.z_seg.shape[0], h = in.z_seg.shape[1], w = in.z_seg.shape[2];
  if (in.y_seg.width != w || in.y_seg.height != h || in.y_seg.classes != c)
    throw std::invalid_argument("loss: shape mismatch between z_seg and y_seg");
  if (!in.z_dist.same_shape(in.y_dist) || in.z_dist.shape != in.z_seg.shape)
    throw std::invalid_argument("loss: shape mismatch between distance tensors");
  if (static_cast<int>(in.class_weights.size()) != c)
    throw std::invalid_argument("loss: class weight count mismatch");
  for (double wgt : in.class_weights)
    if (wgt < 0.0) throw std::invalid_argument("loss: negative class weight");

  const std::size_t plane = static_cast<std::size_t>(h) * w;
  LossResult r;
  double nll_sum = 0.0, l1_sum = 0.0;
  for (std::size_t p = 0; p < plane; ++p) {
    const std::uint8_t t = in.y_seg.data[p];
    if (in.y_seg.is_void(t)) continue;
    ++r.valid_pixels;
    double prob = in.z_seg.data[static_cast<std::size_t>(t) * plane + p];
    if (prob < kProbClamp) {
      prob = kProbClamp;
      ++r.clamped;
    }
    nll_sum -= in.class_weights[t] * std::log(prob);
    for (int k = 0; k < c; ++k) {
      const std::size_t idx = static_cast<std::size_t>(k) * plane + p;
      l1_sum += in.class_weights[k] * std::abs(in.z_dist.data[idx] - in.y_dist.data[idx]);
    }
  }
  if (r.valid_pixels > 0) {
    r.nll = nll_sum / static_cast<double>(r.valid_pixels);
    r.l1 = l1_sum / (static_cast<double>(r.valid_pixels) * c);
  }
  r.total = r.nll + in.lambda * r.l1;
  return r;
}

// ---- backward ----

using detail::ConvGrads;

struct Gradients {
  std::vector<ConvGrads> trunk;
  ConvGrads sdt_head, fusion;
};

namespace detail {

inline ConvGrads zero_grads(const ConvLayer& layer) {
  return ConvGrads{Tensor(layer.w.shape), Tensor(layer.b.shape)};
}

}  // namespace detail

inline Gradients zero_gradients(const NetworkState& state) {
  Gradients g;
  for (const auto& conv : state.trunk_convs) g.trunk.push_back(detail::zero_grads(conv));
  g.sdt_head = detail::zero_grads(state.sdt_head);
  g.fusion = detail::zero_grads(state.fusion);
  return g;
}

// Exact gradients of loss() w.r.t. every weight and bias. The SDT head
// receives gradient both from the L1 term and, through the fusion concat,
// from the classification term.
inline Gradients backward(const NetworkState& state, const ForwardCache& cache,
                          const LossInputs& in) {
  const int c = state.classes;
  const int h = cache.z_seg.shape[1], w = cache.z_seg.shape[2];
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  std::int64_t valid = 0;
  for (std::size_t p = 0; p < plane; ++p)
    if (!in.y_seg.is_void(in.y_seg.data[p])) ++valid;

  Gradients grads = zero_gradients(state);
  if (valid == 0) return grads;
  const double inv_n = 1.0 / static_cast<double>(valid);

  // d total / d logits, through softmax + clamped log
  Tensor dlogits(cache.z_seg.shape);
  for (std::size_t p = 0; p < plane; ++p) {
    const std::uint8_t t = in.y_seg.data[p];
    if (in.y_seg.is_void(t)) continue;
    const double pt = cache.z_seg.data[static_cast<std::size_t>(t) * plane + p];
    if (pt < kProbClamp) continue;  // inside the clamp the loss is locally constant
    const double scale = in.class_weights[t] * inv_n;
    for (int k = 0; k < c; ++k) {
      const std::size_t idx = static_cast<std::size_t>(k) * plane + p;
      dlogits.data[idx] = scale * (cache.z_seg.data[idx] - (k == t ? 1.0 : 0.0));
    }
  }

  Tensor dconcat = detail::conv2d_backward(state.fusion, cache.concat_in, dlogits, grads.fusion);

  // split concat gradient into trunk-feature and distance-prediction parts
  const std::size_t trunk_elems = static_cast<std::size_t>(state.trunk_width) * plane;
  Tensor dtrunk_out({state.trunk_width, h, w});
  std::copy_n(dconcat.data.begin(), trunk_elems, dtrunk_out.data.begin());
  Tensor dz_dist({c, h, w});
  std::copy_n(dconcat.data.begin() + static_cast<std::ptrdiff_t>(trunk_elems), dz_dist.numel(),
              dz_dist.data.begin());

  // L1 term
  const double l1_scale = in.lambda * inv_n / static_cast<double>(c);
  for (std::size_t p = 0; p < plane; ++p) {
    if (in.y_seg.is_void(in.y_seg.data[p])) continue;
    for (int k = 0; k < c; ++k) {
      const std::size_t idx = static_cast<std::size_t>(k) * plane + p;
      const double diff = cache.z_dist.data[idx] - in.y_dist.data[idx];
      if (diff > 0.0)
        dz_dist.data[idx] += l1_scale * in.class_weights[k];
      else if (diff < 0.0)
        dz_dist.data[idx] -= l1_scale * in.class_weights[k];
    }
  }

  // hardtanh gate
  Tensor dpre_dist = dz_dist;
  for (std::size_t i = 0; i < dpre_dist.data.size(); ++i)
    if (std::abs(cache.pre_dist.data[i]) >= 1.0) dpre_dist.data[i] = 0.0;

  const Tensor& trunk_out = cache.acts.back();
  Tensor dtrunk_from_head =
      detail::conv2d_backward(state.sdt_head, trunk_out, dpre_dist, grads.sdt_head);
  for (std::size_t i = 0; i < dtrunk_out.data.size(); ++i)
    dtrunk_out.data[i] += dtrunk_from_head.data[i];

  // walk the trunk backwards
  Tensor dcur = std::move(dtrunk_out);
  int conv_i = static_cast<int>(state.trunk_convs.size());
  int pool_i = static_cast<int>(cache.pool_idx.size());
  for (int li = static_cast<int>(state.trunk.size()) - 1; li >= 0; --li) {
    const Tensor& layer_in = li == 0 ? cache.input : cache.acts[li - 1];
    switch (state.trunk[li].kind) {
      case LayerKind::conv:
        --conv_i;
        dcur = detail::conv2d_backward(state.trunk_convs[conv_i], layer_in, dcur,
                                       grads.trunk[conv_i]);
        break;
      case LayerKind::relu:
        dcur = detail::relu_backward(cache.acts[li], dcur);
        break;
      case LayerKind::maxpool2:
        --pool_i;
        dcur = detail::maxpool2_backward(layer_in.shape, dcur, cache.pool_idx[pool_i]);
        break;
      case LayerKind::upsample2:
        dcur = detail::upsample2_backward(dcur);
        break;
      default:
        throw std::invalid_argument("backward: unsupported trunk layer");
    }
  }
  return grads;
}

// w <- w - lr (g + wd w); biases exempt from decay.
inline NetworkState sgd_step(const NetworkState& state, const Gradients& grads, double lr,
                             double weight_decay) {
  auto check = [](const Tensor& t) {
    if (!all_finite(t)) throw divergence_error("sgd_step: non-finite gradient");
  };
  auto apply = [&](ConvLayer& layer, const ConvGrads& g) {
    check(g.w);
    check(g.b);
    for (std::size_t i = 0; i < layer.w.data.size(); ++i)
      layer.w.data[i] -= lr * (g.w.data[i] + weight_decay * layer.w.data[i]);
    for (std::size_t i = 0; i < layer.b.data.size(); ++i) layer.b.data[i] -= lr * g.b.data[i];
  };

  NetworkState next = state;
  for (std::size_t i = 0; i < next.trunk_convs.size(); ++i)
    apply(next.trunk_convs[i], grads.trunk[i]);
  apply(next.sdt_head, grads.sdt_head);
  apply(next.fusion, grads.fusion);
  return next;
}

// ---- FieldStack <-> Tensor bridges ----

inline Tensor tensor_from_stack(const FieldStack& stack) {
  stack.validate();
  Tensor t({stack.channels(), stack.height(), stack.width()});
  std::size_t ofs = 0;
  for (const auto& f : stack.fields) {
    std::copy(f.data.begin(), f.data.end(), t.data.begin() + static_cast<std::ptrdiff_t>(ofs));
    ofs += f.data.size();
  }
  return t;
}

inline FieldStack stack_from_tensor(const Tensor& t) {
  if (t.shape.size() != 3) throw std::invalid_argument("stack_from_tensor: expected CHW tensor");
  FieldStack s;
  for (int c = 0; c < t.shape[0]; ++c) {
    ScalarField f(t.shape[2], t.shape[1]);
    std::copy_n(t.plane(c), f.data.size(), f.data.begin());
    s.fields.push_back(std::move(f));
  }
  return s;
}

// ---- weight serialization (SDTW container) ----

namespace detail {

inline NamedArray to_array(const std::string& name, const Tensor& t) {
  NamedArray a;
  a.name = name;
  for (int d : t.shape) a.dims.push_back(static_cast<std::uint32_t>(d));
  a.values = t.data;
  return a;
}

inline Tensor from_array(const NamedArray& a) {
  Tensor t;
  for (std::uint32_t d : a.dims) t.shape.push_back(static_cast<int>(d));
  t.data = a.values;
  if (t.data.size() != Tensor::numel_of(t.shape))
    throw io_error("SDTW: tensor payload size mismatch for " + a.name);
  return t;
}

}  // namespace detail

inline void save_network(const NetworkState& state, const std::filesystem::path& path) {
  std::vector<NamedArray> arrays;
  for (std::size_t i = 0; i < state.trunk_convs.size(); ++i) {
    const std::string base = "trunk." + std::to_string(i);
    arrays.push_back(detail::to_array(base + ".w", state.trunk_convs[i].w));
    arrays.push_back(detail::to_array(base + ".b", state.trunk_convs[i].b));
  }
  arrays.push_back(detail::to_array("sdt_head.w", state.sdt_head.w));
  arrays.push_back(detail::to_array("sdt_head.b", state.sdt_head.b));
  arrays.push_back(detail::to_array("fusion.w", state.fusion.w));
  arrays.push_back(detail::to_array("fusion.b", state.fusion.b));
  write_weights(arrays, path);
}

inline NetworkState load_network(const std::filesystem::path& path) {
  const auto arrays = read_weights(path);
  auto find = [&](const std::string& name) -> const NamedArray& {
    for (const auto& a : arrays)
      if (a.name == name) return a;
    throw io_error("SDTW: missing tensor '" + name + "'");
  };

  const Tensor head_w = detail::from_array(find("sdt_head.w"));
  if (head_w.shape.size() != 4) throw io_error("SDTW: sdt_head.w must be 4-D");
  const int classes = head_w.shape[0];
  const int trunk_width = head_w.shape[1];

  NetworkState s = init_network(classes, std::max(trunk_width, 4), 0);
  if (s.trunk_width != trunk_width) throw io_error("SDTW: unsupported trunk width");
  for (std::size_t i = 0; i < s.trunk_convs.size(); ++i) {
    const std::string base = "trunk." + std::to_string(i);
    Tensor w = detail::from_array(find(base + ".w"));
    Tensor b = detail::from_array(find(base + ".b"));
    if (w.shape != s.trunk_convs[i].w.shape || b.shape != s.trunk_convs[i].b.shape)
      throw io_error("SDTW: shape mismatch for " + base);
    s.trunk_convs[i].w = std::move(w);
    s.trunk_convs[i].b = std::move(b);
  }
  s.sdt_head.w = head_w;
  s.sdt_head.b = detail::from_array(find("sdt_head.b"));
  Tensor fw = detail::from_array(find("fusion.w"));
  if (fw.shape != s.fusion.w.shape) throw io_error("SDTW: fusion shape mismatch");
  s.fusion.w = std::move(fw);
  s.fusion.b = detail::from_array(find("fusion.b"));
  return s;
}

}  // namespace sdtseg
