#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "triseg/adam.hpp"
#include "triseg/metrics.hpp"
#include "triseg/net.hpp"
#include "triseg/regions.hpp"
#include "triseg/rng.hpp"
#include "triseg/sampling.hpp"
#include "triseg/views.hpp"
#include "triseg/volume.hpp"

namespace triseg {

struct TrainConfig {
  std::string stage = "wnet";  // wnet | tnet | enet
  std::string view = "axial";
  int64_t base_channels = 8;
  std::array<int64_t, 3> patch{48, 48, 11};
  int64_t batch = 5;
  int64_t iterations = 2000;
  AdamConfig adam;
  uint64_t seed = 1;
  int64_t log_every = 10;
  std::array<int64_t, 3> margin{5, 5, 3};  // stage-input crop margin (tnet/enet)
};

inline void validate_train_config(const TrainConfig& c) {
  if (c.stage != "wnet" && c.stage != "tnet" && c.stage != "enet")
    throw std::invalid_argument("train config: stage must be wnet, tnet or enet");
  parse_view(c.view);
  if (c.base_channels < 1) throw std::invalid_argument("train config: base_channels must be >= 1");
  for (int64_t p : c.patch)
    if (p < 1) throw std::invalid_argument("train config: patch extents must be positive");
  if (c.batch < 1) throw std::invalid_argument("train config: batch must be >= 1");
  if (c.iterations < 1) throw std::invalid_argument("train config: iterations must be >= 1");
  if (c.log_every < 1) throw std::invalid_argument("train config: log_every must be >= 1");
  for (int64_t m : c.margin)
    if (m < 0) throw std::invalid_argument("train config: margin must be non-negative");
  validate_adam_config(c.adam);
}

/// The region a stage learns to segment.
inline RegionId stage_region(const std::string& stage) {
  if (stage == "wnet") return RegionId::kWholeTumor;
  if (stage == "tnet") return RegionId::kTumorCore;
  if (stage == "enet") return RegionId::kEnhancing;
  throw std::invalid_argument("unknown stage '" + stage + "'");
}

/// The parent region whose ground-truth bounding box crops the stage's
/// input; the first stage sees the whole volume.
inline std::optional<RegionId> stage_parent(const std::string& stage) {
  if (stage == "wnet") return std::nullopt;
  if (stage == "tnet") return RegionId::kWholeTumor;
  if (stage == "enet") return RegionId::kTumorCore;
  throw std::invalid_argument("unknown stage '" + stage + "'");
}

/// Per-stage patch extents of the desk-scale profile (the in-plane extent
/// shrinks with the crop, the slice extent stays at 11).
inline std::array<int64_t, 3> default_patch(const std::string& stage) {
  if (stage == "wnet") return {48, 48, 11};
  if (stage == "tnet") return {32, 32, 11};
  if (stage == "enet") return {24, 24, 11};
  throw std::invalid_argument("unknown stage '" + stage + "'");
}

/// One case made ready for patch sampling: normalized, cropped to the
/// stage's parent-region box, rotated into the training view; the target
/// is the stage's region binarized on the same grid.
struct PreparedCase {
  FloatVolume image;
  std::vector<uint8_t> target;
};

inline PreparedCase prepare_case(const VolumeSet& normalized, const LabelMap& labels,
                                 const std::string& stage, ViewId view,
                                 std::array<int64_t, 3> margin) {
  if (normalized.extents != labels.extents)
    throw std::invalid_argument("prepare_case: volume and labels disagree on extents");
  FloatVolume img = normalized;
  LabelMap lab = labels;
  if (auto parent = stage_parent(stage)) {
    auto box = bbox_of_mask(binarize_region(labels, *parent), margin);
    if (!box)
      throw std::invalid_argument("prepare_case: case has an empty " +
                                  std::string(region_name(*parent)) + " region, cannot crop for " +
                                  stage);
    img = crop_volume(img, *box);
    lab = crop_labels(lab, *box);
  }
  img = to_view(img, view);
  lab = to_view(lab, view);
  BinaryMask target = binarize_region(lab, stage_region(stage));
  return {std::move(img), std::move(target.voxels)};
}

struct TrainResult {
  std::vector<double> losses;  // one entry per iteration
  int64_t rejected_steps = 0;  // non-finite gradient batches skipped
};

/// The optimization loop: sample a batch of patches, forward in train
/// mode, softmax + Dice loss, backward, Adam step. Deterministic for a
/// fixed seed. A non-finite loss aborts (the model has diverged);
/// non-finite gradients only skip the step. The caller persists the
/// checkpoint afterwards.
inline TrainResult train_network(Network& net, AdamT<float>& adam,
                                 const std::vector<PreparedCase>& cases, const TrainConfig& cfg,
                                 std::ostream* loss_csv = nullptr) {
  validate_train_config(cfg);
  if (cases.empty()) throw std::invalid_argument("train: no cases");
  if (net.config().input_channels != 4)
    throw std::invalid_argument("train: network must take 4 modality channels");

  std::vector<PatchSampler> samplers;
  samplers.reserve(cases.size());
  for (const PreparedCase& c : cases) samplers.emplace_back(&c.image, &c.target);

  net.set_requires_grad(true);
  Rng rng = Rng(cfg.seed).fork(0x747261696e);  // batch-sampling stream

  const int64_t pvox = cfg.patch[0] * cfg.patch[1] * cfg.patch[2];
  const Shape in_shape{cfg.batch, 4, cfg.patch[0], cfg.patch[1], cfg.patch[2]};
  const Shape tgt_shape{cfg.batch, cfg.patch[0], cfg.patch[1], cfg.patch[2]};

  TrainResult result;
  result.losses.reserve(cfg.iterations);
  if (loss_csv) *loss_csv << "iteration,loss,wall_ms\n";
  const auto t0 = std::chrono::steady_clock::now();

  for (int64_t it = 1; it <= cfg.iterations; ++it) {
    std::vector<float> img(cfg.batch * 4 * pvox);
    std::vector<float> tgt(cfg.batch * pvox);
    for (int64_t b = 0; b < cfg.batch; ++b) {
      const size_t ci = static_cast<size_t>(rng.below(samplers.size()));
      samplers[ci].sample(rng, cfg.patch, img.data() + b * 4 * pvox, tgt.data() + b * pvox);
    }
    Tensor<float> input = Tensor<float>::from_data(in_shape, std::move(img));
    Tensor<float> target = Tensor<float>::from_data(tgt_shape, std::move(tgt));

    Tensor<float> prob = softmax_channels(net.forward(input, BnMode::kTrain));
    Tensor<float> loss = dice_loss(prob, target);
    const double loss_v = loss.values()[0];
    if (!std::isfinite(loss_v))
      throw std::runtime_error("train: non-finite loss at iteration " + std::to_string(it));

    adam.zero_grad();
    loss.backward();
    if (!adam.step()) ++result.rejected_steps;

    result.losses.push_back(loss_v);
    if (loss_csv && (it % cfg.log_every == 0 || it == cfg.iterations)) {
      const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
      *loss_csv << it << "," << loss_v << "," << ms << "\n";
    }
  }
  return result;
}

}  // namespace triseg
