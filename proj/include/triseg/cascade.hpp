#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "triseg/net.hpp"
#include "triseg/regions.hpp"
#include "triseg/views.hpp"
#include "triseg/volume.hpp"

namespace triseg {

/// Geometry and fusion settings for cascaded inference. Windows and
/// overlaps are in the frame of the view a network runs in (last axis is
/// the slice axis).
struct CascadeParams {
  std::array<std::array<int64_t, 3>, 3> windows{{{48, 48, 11}, {32, 32, 11}, {24, 24, 11}}};
  std::array<int64_t, 3> overlap{16, 16, 8};
  std::array<int64_t, 3> margin{5, 5, 3};
  std::array<double, 3> view_weights{1.0 / 3, 1.0 / 3, 1.0 / 3};
  double threshold = 0.5;
  int threads = 1;
};

inline void validate_cascade_params(const CascadeParams& p) {
  for (const auto& w : p.windows)
    for (int64_t e : w)
      if (e < 1) throw std::invalid_argument("cascade: window extents must be positive");
  for (int a = 0; a < 3; ++a) {
    if (p.overlap[a] < 0) throw std::invalid_argument("cascade: overlap must be non-negative");
    if (p.margin[a] < 0) throw std::invalid_argument("cascade: margin must be non-negative");
  }
  double wsum = 0;
  for (double w : p.view_weights) {
    if (w < 0) throw std::invalid_argument("cascade: view weights must be non-negative");
    wsum += w;
  }
  if (std::fabs(wsum - 1.0) > 1e-6)
    throw std::invalid_argument("cascade: view weights must sum to 1");
  if (!(p.threshold > 0 && p.threshold < 1))
    throw std::invalid_argument("cascade: threshold must lie in (0,1)");
  if (p.threads < 1) throw std::invalid_argument("cascade: threads must be >= 1");
}

/// The nine trained networks of one model set, per stage and view.
/// Non-owning; all entries must be populated before run_cascade.
struct CascadeModels {
  std::array<Network*, 3> wnet{nullptr, nullptr, nullptr};  // indexed by ViewId
  std::array<Network*, 3> tnet{nullptr, nullptr, nullptr};
  std::array<Network*, 3> enet{nullptr, nullptr, nullptr};

  const std::array<Network*, 3>& stage(int s) const {
    switch (s) {
      case 0: return wnet;
      case 1: return tnet;
      case 2: return enet;
    }
    throw std::invalid_argument("cascade: bad stage index");
  }
  std::array<Network*, 3>& stage(int s) {
    return const_cast<std::array<Network*, 3>&>(std::as_const(*this).stage(s));
  }
};

namespace detail {

// Window start positions along one axis: stride apart from 0, with the
// last window snapped to the far edge so every voxel is covered.
inline std::vector<int64_t> window_starts(int64_t extent, int64_t window, int64_t stride) {
  std::vector<int64_t> starts;
  for (int64_t p = 0;; p += stride) {
    if (p + window >= extent) {
      starts.push_back(std::max<int64_t>(0, extent - window));
      break;
    }
    starts.push_back(p);
  }
  return starts;
}

}  // namespace detail

/// Applies the network to every window position and averages the softmax
/// outputs over all windows covering each voxel. Volumes smaller than the
/// window are zero-padded for the forward pass and cropped back. Window
/// positions are distributed round-robin over the worker threads and the
/// per-thread partial sums are combined in thread order, so the result is
/// deterministic for a fixed thread count.
inline FloatVolume sliding_window_infer(Network& net, const FloatVolume& vol,
                                        std::array<int64_t, 3> window,
                                        std::array<int64_t, 3> stride, int threads = 1) {
  if (vol.channels != net.config().input_channels)
    throw std::invalid_argument("sliding_window_infer: volume has " +
                                std::to_string(vol.channels) + " channels, network expects " +
                                std::to_string(net.config().input_channels));
  for (int a = 0; a < 3; ++a) {
    if (window[a] < 1) throw std::invalid_argument("sliding_window_infer: bad window");
    if (stride[a] < 1) throw std::invalid_argument("sliding_window_infer: stride must be >= 1");
  }
  if (threads < 1) throw std::invalid_argument("sliding_window_infer: threads must be >= 1");

  // pad up to the window so one placement always exists
  std::array<int64_t, 3> pe;
  for (int a = 0; a < 3; ++a) pe[a] = std::max(vol.extents[a], window[a]);
  const FloatVolume* work = &vol;
  FloatVolume padded;
  if (pe != vol.extents) {
    padded = FloatVolume(vol.channels, pe, vol.spacing);
    for (int64_t c = 0; c < vol.channels; ++c)
      for (int64_t x = 0; x < vol.extents[0]; ++x)
        for (int64_t y = 0; y < vol.extents[1]; ++y)
          for (int64_t z = 0; z < vol.extents[2]; ++z)
            padded.at(c, x, y, z) = vol.at(c, x, y, z);
    work = &padded;
  }

  std::vector<std::array<int64_t, 3>> offsets;
  for (int64_t sx : detail::window_starts(pe[0], window[0], stride[0]))
    for (int64_t sy : detail::window_starts(pe[1], window[1], stride[1]))
      for (int64_t sz : detail::window_starts(pe[2], window[2], stride[2]))
        offsets.push_back({sx, sy, sz});

  const int64_t C = net.config().class_count;
  const int64_t Ci = vol.channels;
  const int64_t pvox = pe[0] * pe[1] * pe[2];
  const int64_t wvox = window[0] * window[1] * window[2];

  auto process = [&](const std::array<int64_t, 3>& off, double* sum, double* count) {
    std::vector<float> patch(Ci * wvox);
    for (int64_t c = 0; c < Ci; ++c)
      for (int64_t x = 0; x < window[0]; ++x)
        for (int64_t y = 0; y < window[1]; ++y) {
          const float* src = work->data.data() +
                             ((c * pe[0] + off[0] + x) * pe[1] + off[1] + y) * pe[2] + off[2];
          float* dst = patch.data() + ((c * window[0] + x) * window[1] + y) * window[2];
          std::copy(src, src + window[2], dst);
        }
    NoGradGuard ng;
    Tensor<float> in = Tensor<float>::from_data({1, Ci, window[0], window[1], window[2]},
                                                std::move(patch));
    Tensor<float> prob = softmax_channels(net.forward(in, BnMode::kInfer));
    const float* pv = prob.values().data();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t x = 0; x < window[0]; ++x)
        for (int64_t y = 0; y < window[1]; ++y) {
          const int64_t dst0 =
              (c * pe[0] + off[0] + x) * pe[1] * pe[2] + (off[1] + y) * pe[2] + off[2];
          const float* src = pv + ((c * window[0] + x) * window[1] + y) * window[2];
          for (int64_t z = 0; z < window[2]; ++z) sum[dst0 + z] += src[z];
        }
    for (int64_t x = 0; x < window[0]; ++x)
      for (int64_t y = 0; y < window[1]; ++y) {
        double* cnt = count + ((off[0] + x) * pe[1] + off[1] + y) * pe[2] + off[2];
        for (int64_t z = 0; z < window[2]; ++z) cnt[z] += 1.0;
      }
  };

  std::vector<double> sum(C * pvox, 0.0), count(pvox, 0.0);
  if (threads == 1) {
    for (const auto& off : offsets) process(off, sum.data(), count.data());
  } else {
    const int t_used = static_cast<int>(std::min<size_t>(threads, offsets.size()));
    std::vector<std::vector<double>> tsum(t_used), tcount(t_used);
    std::vector<std::exception_ptr> errors(t_used);
    std::vector<std::thread> pool;
    for (int t = 0; t < t_used; ++t) {
      tsum[t].assign(C * pvox, 0.0);
      tcount[t].assign(pvox, 0.0);
      pool.emplace_back([&, t] {
        try {
          for (size_t i = t; i < offsets.size(); i += t_used)
            process(offsets[i], tsum[t].data(), tcount[t].data());
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
    for (int t = 0; t < t_used; ++t) {
      for (int64_t i = 0; i < C * pvox; ++i) sum[i] += tsum[t][i];
      for (int64_t i = 0; i < pvox; ++i) count[i] += tcount[t][i];
    }
  }

  FloatVolume out(C, vol.extents, vol.spacing);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t x = 0; x < vol.extents[0]; ++x)
      for (int64_t y = 0; y < vol.extents[1]; ++y)
        for (int64_t z = 0; z < vol.extents[2]; ++z) {
          const int64_t pi = (x * pe[1] + y) * pe[2] + z;
          out.at(c, x, y, z) = static_cast<float>(sum[c * pvox + pi] / count[pi]);
        }
  return out;
}

/// Voxelwise weighted average of per-view probability maps, all already in
/// canonical orientation. Weights ≥ 0 summing to 1 keep the channel
/// simplex intact.
inline FloatVolume multi_view_fuse(const std::array<FloatVolume, 3>& maps,
                                   std::array<double, 3> weights) {
  double wsum = 0;
  for (double w : weights) {
    if (w < 0) throw std::invalid_argument("multi_view_fuse: weights must be non-negative");
    wsum += w;
  }
  if (std::fabs(wsum - 1.0) > 1e-6)
    throw std::invalid_argument("multi_view_fuse: weights must sum to 1");
  for (int v = 1; v < 3; ++v)
    if (maps[v].extents != maps[0].extents || maps[v].channels != maps[0].channels)
      throw std::invalid_argument("multi_view_fuse: maps disagree on extents or channels");
  FloatVolume out(maps[0].channels, maps[0].extents, maps[0].spacing);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<float>(weights[0] * maps[0].data[i] + weights[1] * maps[1].data[i] +
                                     weights[2] * maps[2].data[i]);
  return out;
}

/// Foreground mask at a probability threshold; channel 1 is foreground.
inline BinaryMask threshold_mask(const FloatVolume& prob, double threshold) {
  if (prob.channels < 2)
    throw std::invalid_argument("threshold_mask: need a background and a foreground channel");
  BinaryMask mask(prob.extents, prob.spacing);
  const float* fg = prob.data.data() + prob.voxels();
  for (int64_t i = 0; i < prob.voxels(); ++i) mask.voxels[i] = fg[i] > threshold;
  return mask;
}

namespace detail {

// One cascade stage: per-view sliding-window inference in the view frame,
// inverse permutation, weighted fusion. Views with weight zero contribute
// nothing and are not inferred.
inline FloatVolume fused_stage_prob(const std::array<Network*, 3>& nets, const FloatVolume& vol,
                                    std::array<int64_t, 3> window, const CascadeParams& p) {
  std::array<int64_t, 3> stride;
  for (int a = 0; a < 3; ++a) stride[a] = std::max<int64_t>(1, window[a] - p.overlap[a]);
  const int64_t classes = nets[0]->config().class_count;
  std::array<FloatVolume, 3> maps;
  for (int v = 0; v < 3; ++v) {
    if (p.view_weights[v] == 0.0) {
      maps[v] = FloatVolume(classes, vol.extents, vol.spacing);
      continue;
    }
    const ViewId view = kAllViews[v];
    FloatVolume tv = to_view(vol, view);
    maps[v] = to_canonical(sliding_window_infer(*nets[v], tv, window, stride, p.threads), view);
  }
  return multi_view_fuse(maps, p.view_weights);
}

}  // namespace detail

/// Intermediate cascade products, captured on request: fused probability
/// maps per stage (tc/en in their crop frames) and the crop boxes.
struct CascadeTrace {
  FloatVolume wt_prob, tc_prob, en_prob;
  std::optional<BoundingBox> wt_box, tc_box;
};

/// Hierarchical segmentation: fused WNet probabilities thresholded to the
/// whole-tumor mask; TNet runs on the whole-tumor bounding box (plus
/// margin) and is constrained to WT; ENet likewise within TC. Labels:
/// WT\TC → 2, TC\EN → 1, EN → 4. The input must already be normalized
/// with the statistics the models were trained with.
inline LabelMap run_cascade(const CascadeModels& models, const VolumeSet& input,
                            const CascadeParams& params, CascadeTrace* trace = nullptr) {
  validate_cascade_params(params);
  for (int s = 0; s < 3; ++s)
    for (int v = 0; v < 3; ++v)
      if (models.stage(s)[v] == nullptr)
        throw std::invalid_argument("run_cascade: missing model for stage " + std::to_string(s) +
                                    ", view " + std::string(view_name(kAllViews[v])));

  LabelMap out(input.extents, input.spacing);
  const FloatVolume wt_prob =
      detail::fused_stage_prob(models.wnet, input, params.windows[0], params);
  if (trace) trace->wt_prob = wt_prob;
  const BinaryMask wt = threshold_mask(wt_prob, params.threshold);
  if (wt.empty()) return out;

  const BoundingBox box_wt = *bbox_of_mask(wt, params.margin);
  if (trace) trace->wt_box = box_wt;
  const FloatVolume crop_wt = crop_volume(input, box_wt);
  const FloatVolume tc_prob =
      detail::fused_stage_prob(models.tnet, crop_wt, params.windows[1], params);
  if (trace) trace->tc_prob = tc_prob;
  BinaryMask tc = apply_crisp_mask(
      uncrop_mask(threshold_mask(tc_prob, params.threshold), box_wt, input.extents), wt);

  BinaryMask en(input.extents, input.spacing);
  if (!tc.empty()) {
    const BoundingBox box_tc = *bbox_of_mask(tc, params.margin);
    if (trace) trace->tc_box = box_tc;
    const FloatVolume crop_tc = crop_volume(input, box_tc);
    const FloatVolume en_prob =
        detail::fused_stage_prob(models.enet, crop_tc, params.windows[2], params);
    if (trace) trace->en_prob = en_prob;
    en = apply_crisp_mask(
        uncrop_mask(threshold_mask(en_prob, params.threshold), box_tc, input.extents), tc);
  }

  for (int64_t i = 0; i < out.voxels(); ++i) {
    if (en.voxels[i]) out.labels[i] = 4;
    else if (tc.voxels[i]) out.labels[i] = 1;
    else if (wt.voxels[i]) out.labels[i] = 2;
  }
  return out;
}

}  // namespace triseg
