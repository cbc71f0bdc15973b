#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "triseg/metrics.hpp"
#include "triseg/volume.hpp"

namespace triseg {

/// The nested tumor regions. Each stage of the cascade segments one of
/// them: EN ⊆ TC ⊆ WT.
enum class RegionId { kWholeTumor, kTumorCore, kEnhancing };

inline constexpr std::array<RegionId, 3> kAllRegions{RegionId::kWholeTumor, RegionId::kTumorCore,
                                                     RegionId::kEnhancing};

inline const char* region_name(RegionId r) {
  switch (r) {
    case RegionId::kWholeTumor: return "WT";
    case RegionId::kTumorCore: return "TC";
    case RegionId::kEnhancing: return "EN";
  }
  throw std::invalid_argument("region_name: bad region id");
}

inline RegionId parse_region(const std::string& s) {
  if (s == "WT") return RegionId::kWholeTumor;
  if (s == "TC") return RegionId::kTumorCore;
  if (s == "EN") return RegionId::kEnhancing;
  throw std::invalid_argument("unknown region '" + s + "' (expected WT, TC or EN)");
}

/// WT = labels {1,2,4}, TC = {1,4}, EN = {4}.
inline BinaryMask binarize_region(const LabelMap& labels, RegionId region) {
  BinaryMask mask(labels.extents, labels.spacing);
  for (int64_t i = 0; i < labels.voxels(); ++i) {
    const uint8_t v = labels.labels[i];
    if (!valid_label(v))
      throw std::invalid_argument("binarize_region: label value " + std::to_string(v) +
                                  " outside {0,1,2,4}");
    switch (region) {
      case RegionId::kWholeTumor: mask.voxels[i] = v != 0; break;
      case RegionId::kTumorCore: mask.voxels[i] = v == 1 || v == 4; break;
      case RegionId::kEnhancing: mask.voxels[i] = v == 4; break;
    }
  }
  return mask;
}

/// Axis-aligned voxel box, both bounds inclusive.
struct BoundingBox {
  std::array<int64_t, 3> lo{0, 0, 0};
  std::array<int64_t, 3> hi{0, 0, 0};

  int64_t width(int axis) const { return hi[axis] - lo[axis] + 1; }
  std::array<int64_t, 3> extents() const { return {width(0), width(1), width(2)}; }
};

inline void validate_box(const BoundingBox& box, std::array<int64_t, 3> extents) {
  for (int a = 0; a < 3; ++a)
    if (box.lo[a] < 0 || box.hi[a] < box.lo[a] || box.hi[a] >= extents[a])
      throw std::invalid_argument("bounding box exceeds volume extents");
}

/// Tight box around the positives, expanded by margin per axis and clipped
/// to the volume. An empty mask has no box (the cascade short-circuits on
/// that).
inline std::optional<BoundingBox> bbox_of_mask(const BinaryMask& mask,
                                               std::array<int64_t, 3> margin = {0, 0, 0}) {
  BoundingBox box{{mask.extents[0], mask.extents[1], mask.extents[2]}, {-1, -1, -1}};
  for (int64_t x = 0; x < mask.extents[0]; ++x)
    for (int64_t y = 0; y < mask.extents[1]; ++y)
      for (int64_t z = 0; z < mask.extents[2]; ++z) {
        if (!mask.at(x, y, z)) continue;
        const std::array<int64_t, 3> p{x, y, z};
        for (int a = 0; a < 3; ++a) {
          box.lo[a] = std::min(box.lo[a], p[a]);
          box.hi[a] = std::max(box.hi[a], p[a]);
        }
      }
  if (box.hi[0] < 0) return std::nullopt;
  for (int a = 0; a < 3; ++a) {
    box.lo[a] = std::max<int64_t>(0, box.lo[a] - margin[a]);
    box.hi[a] = std::min(mask.extents[a] - 1, box.hi[a] + margin[a]);
  }
  return box;
}

inline FloatVolume crop_volume(const FloatVolume& v, const BoundingBox& box) {
  validate_box(box, v.extents);
  FloatVolume out(v.channels, box.extents(), v.spacing);
  for (int64_t c = 0; c < v.channels; ++c)
    for (int64_t x = 0; x < out.extents[0]; ++x)
      for (int64_t y = 0; y < out.extents[1]; ++y)
        for (int64_t z = 0; z < out.extents[2]; ++z)
          out.at(c, x, y, z) = v.at(c, box.lo[0] + x, box.lo[1] + y, box.lo[2] + z);
  return out;
}

inline BinaryMask crop_mask(const BinaryMask& m, const BoundingBox& box) {
  validate_box(box, m.extents);
  BinaryMask out(box.extents(), m.spacing);
  for (int64_t x = 0; x < out.extents[0]; ++x)
    for (int64_t y = 0; y < out.extents[1]; ++y)
      for (int64_t z = 0; z < out.extents[2]; ++z)
        out.at(x, y, z) = m.at(box.lo[0] + x, box.lo[1] + y, box.lo[2] + z);
  return out;
}

inline LabelMap crop_labels(const LabelMap& m, const BoundingBox& box) {
  validate_box(box, m.extents);
  LabelMap out(box.extents(), m.spacing);
  for (int64_t x = 0; x < out.extents[0]; ++x)
    for (int64_t y = 0; y < out.extents[1]; ++y)
      for (int64_t z = 0; z < out.extents[2]; ++z)
        out.at(x, y, z) = m.at(box.lo[0] + x, box.lo[1] + y, box.lo[2] + z);
  return out;
}

/// Re-embeds a cropped mask into the full grid; voxels outside the box are
/// background.
inline BinaryMask uncrop_mask(const BinaryMask& sub, const BoundingBox& box,
                              std::array<int64_t, 3> full_extents) {
  validate_box(box, full_extents);
  if (sub.extents != box.extents())
    throw std::invalid_argument("uncrop_mask: data extents do not match the box");
  BinaryMask out(full_extents, sub.spacing);
  for (int64_t x = 0; x < sub.extents[0]; ++x)
    for (int64_t y = 0; y < sub.extents[1]; ++y)
      for (int64_t z = 0; z < sub.extents[2]; ++z)
        out.at(box.lo[0] + x, box.lo[1] + y, box.lo[2] + z) = sub.at(x, y, z);
  return out;
}

/// Voxelwise AND: constrains a stage's output to its parent region.
inline BinaryMask apply_crisp_mask(const BinaryMask& inner, const BinaryMask& outer) {
  require_same_shape(inner, outer);
  BinaryMask out(inner.extents, inner.spacing);
  for (int64_t i = 0; i < inner.numel(); ++i)
    out.voxels[i] = inner.voxels[i] && outer.voxels[i];
  return out;
}

}  // namespace triseg
