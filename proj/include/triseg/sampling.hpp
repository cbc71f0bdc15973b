#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "triseg/regions.hpp"
#include "triseg/rng.hpp"
#include "triseg/volume.hpp"

namespace triseg {

/// Draws fixed-size training patches from one prepared case. Half the
/// draws center the patch on a uniformly chosen foreground voxel (when
/// the case has any), the other half place it uniformly; starts are
/// clamped to the grid, and when the patch exceeds the grid the overhang
/// reads as zero. The sampler keeps pointers only, so the image and
/// target must outlive it.
class PatchSampler {
 public:
  PatchSampler(const FloatVolume* image, const std::vector<uint8_t>* target)
      : image_(image), target_(target) {
    if (image == nullptr || target == nullptr)
      throw std::invalid_argument("PatchSampler: null case data");
    if (static_cast<int64_t>(target->size()) != image->voxels())
      throw std::invalid_argument("PatchSampler: target size does not match image grid");
    for (int64_t i = 0; i < image->voxels(); ++i)
      if ((*target)[i]) positives_.push_back(i);
  }

  int64_t positive_count() const { return static_cast<int64_t>(positives_.size()); }

  /// Writes channels*px*py*pz floats to img_out and px*py*pz to tgt_out
  /// (target voxels are 0 or 1). Layout matches FloatVolume: channel
  /// outermost, z fastest.
  void sample(Rng& rng, std::array<int64_t, 3> patch, float* img_out, float* tgt_out) const {
    for (int64_t p : patch)
      if (p < 1) throw std::invalid_argument("PatchSampler: patch extents must be positive");
    const auto& ext = image_->extents;

    std::array<int64_t, 3> start{};
    const bool centered = !positives_.empty() && rng.coin(0.5);
    if (centered) {
      int64_t idx = positives_[static_cast<size_t>(rng.below(positives_.size()))];
      std::array<int64_t, 3> center;
      center[2] = idx % ext[2];
      idx /= ext[2];
      center[1] = idx % ext[1];
      center[0] = idx / ext[1];
      for (int a = 0; a < 3; ++a) {
        start[a] = center[a] - patch[a] / 2;
        start[a] = std::max<int64_t>(0, std::min(start[a], ext[a] - patch[a]));
        if (patch[a] >= ext[a]) start[a] = 0;
      }
    } else {
      for (int a = 0; a < 3; ++a)
        start[a] = patch[a] >= ext[a] ? 0
                                      : static_cast<int64_t>(rng.below(
                                            static_cast<uint64_t>(ext[a] - patch[a] + 1)));
    }

    const int64_t C = image_->channels;
    for (int64_t c = 0; c < C; ++c)
      for (int64_t x = 0; x < patch[0]; ++x)
        for (int64_t y = 0; y < patch[1]; ++y)
          for (int64_t z = 0; z < patch[2]; ++z) {
            const int64_t sx = start[0] + x, sy = start[1] + y, sz = start[2] + z;
            const bool inside = sx < ext[0] && sy < ext[1] && sz < ext[2];
            const int64_t o = ((c * patch[0] + x) * patch[1] + y) * patch[2] + z;
            img_out[o] = inside ? image_->at(c, sx, sy, sz) : 0.0f;
            if (c == 0) {
              const int64_t t = (x * patch[1] + y) * patch[2] + z;
              tgt_out[t] =
                  inside ? ((*target_)[(sx * ext[1] + sy) * ext[2] + sz] ? 1.0f : 0.0f) : 0.0f;
            }
          }
  }

 private:
  const FloatVolume* image_;
  const std::vector<uint8_t>* target_;
  std::vector<int64_t> positives_;
};

/// Draws count patches with targets binarized for one region. Convenience
/// wrapper over PatchSampler for callers that want materialized patches.
inline std::vector<std::pair<FloatVolume, BinaryMask>> sample_patches(
    const VolumeSet& volume, const LabelMap& labels, std::array<int64_t, 3> patch, int64_t count,
    RegionId region, uint64_t seed) {
  if (count <= 0) throw std::invalid_argument("sample_patches: count must be positive");
  if (volume.extents != labels.extents)
    throw std::invalid_argument("sample_patches: volume and labels disagree on extents");
  const BinaryMask target = binarize_region(labels, region);
  const PatchSampler sampler(&volume, &target.voxels);

  Rng rng(seed);
  std::vector<std::pair<FloatVolume, BinaryMask>> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    FloatVolume img(volume.channels, patch, volume.spacing);
    BinaryMask tgt(patch, volume.spacing);
    std::vector<float> tgtf(tgt.voxels.size());
    sampler.sample(rng, patch, img.data.data(), tgtf.data());
    for (size_t j = 0; j < tgtf.size(); ++j) tgt.voxels[j] = tgtf[j] != 0.0f;
    out.emplace_back(std::move(img), std::move(tgt));
  }
  return out;
}

}  // namespace triseg
