#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "triseg/rng.hpp"
#include "triseg/volume.hpp"

namespace triseg {

/// Inclusive radius range in voxels for one nested tumor region.
struct RadiusRange {
  double min = 0, max = 0;
};

/// Parameters for the synthetic cases: a brain-like ellipsoid carrying a
/// three-level nested tumor, rendered into four pseudo-modality channels
/// with per-region contrasts, additive noise and a smooth multiplicative
/// bias field. The seed fully determines the output bytes.
struct PhantomParams {
  std::array<int64_t, 3> extents{64, 64, 64};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  RadiusRange wt{9.0, 14.0};
  RadiusRange tc{5.0, 8.0};
  RadiusRange en{2.5, 4.5};
  double min_wt_fraction = 0.01;  // of total volume
  double max_wt_fraction = 0.10;
  // rows follow kModalities (t1, t1c, t2, flair); columns are
  // {brain, edema, core, enhancing} intensity relative to brain tissue
  std::array<std::array<double, 4>, 4> contrast{{{1.00, 0.80, 0.65, 0.75},
                                                 {1.00, 0.85, 0.75, 1.90},
                                                 {1.00, 1.70, 1.25, 1.05},
                                                 {1.00, 1.80, 1.55, 1.35}}};
  double noise_std = 0.04;
  double bias_strength = 0.10;
  uint64_t seed = 1;
};

inline void validate_phantom_params(const PhantomParams& p) {
  for (int64_t e : p.extents)
    if (e < 16) throw std::invalid_argument("phantom: extents must be at least 16 voxels");
  for (double s : p.spacing)
    if (s <= 0) throw std::invalid_argument("phantom: spacing must be positive");
  auto check_range = [](const RadiusRange& r, const char* name) {
    if (!(r.min > 0) || !(r.max >= r.min))
      throw std::invalid_argument(std::string("phantom: bad radius range for ") + name);
  };
  check_range(p.wt, "wt");
  check_range(p.tc, "tc");
  check_range(p.en, "en");
  if (!(p.en.max < p.tc.min) || !(p.tc.max < p.wt.min))
    throw std::invalid_argument("phantom: region radii must nest strictly (en < tc < wt)");
  if (!(p.min_wt_fraction > 0) || !(p.max_wt_fraction > p.min_wt_fraction) ||
      p.max_wt_fraction >= 1.0)
    throw std::invalid_argument("phantom: bad volume-fraction bounds");
  if (p.noise_std < 0 || p.bias_strength < 0)
    throw std::invalid_argument("phantom: noise and bias strengths must be non-negative");
}

namespace detail {

struct Ellipsoid {
  std::array<double, 3> center{0, 0, 0};
  std::array<double, 3> radii{1, 1, 1};

  bool contains(double x, double y, double z) const {
    const double u = (x - center[0]) / radii[0];
    const double v = (y - center[1]) / radii[1];
    const double w = (z - center[2]) / radii[2];
    return u * u + v * v + w * w <= 1.0;
  }
};

// Smooth multiplicative field: 1 + strength * (quadratic polynomial in the
// normalized coordinates), clamped below at 0.5.
struct BiasField {
  std::array<double, 10> coeff{};
  double strength = 0;
  std::array<double, 3> half{1, 1, 1};

  static BiasField draw(Rng& rng, double strength, std::array<int64_t, 3> extents) {
    BiasField f;
    f.strength = strength;
    for (auto& c : f.coeff) c = rng.uniform(-1.0, 1.0);
    for (int a = 0; a < 3; ++a) f.half[a] = 0.5 * static_cast<double>(extents[a] - 1);
    return f;
  }

  double at(int64_t x, int64_t y, int64_t z) const {
    const double u = (x - half[0]) / half[0];
    const double v = (y - half[1]) / half[1];
    const double w = (z - half[2]) / half[2];
    const double poly = coeff[0] * u + coeff[1] * v + coeff[2] * w + coeff[3] * u * v +
                        coeff[4] * u * w + coeff[5] * v * w + coeff[6] * u * u +
                        coeff[7] * v * v + coeff[8] * w * w + coeff[9] * u * v * w;
    return std::max(0.5, 1.0 + strength * poly);
  }
};

struct PhantomGeometry {
  Ellipsoid brain, wt, tc, en;
};

inline Ellipsoid draw_region(Rng& rng, std::array<double, 3> center_base, double center_jitter,
                             const RadiusRange& r) {
  Ellipsoid e;
  for (int a = 0; a < 3; ++a) {
    e.center[a] = center_base[a] + rng.uniform(-center_jitter, center_jitter);
    e.radii[a] = rng.uniform(r.min, r.max);
  }
  return e;
}

}  // namespace detail

/// Deterministic synthetic case. The tumor hierarchy is carved by
/// intersection (TC = TC-ellipsoid ∩ WT, EN = EN-ellipsoid ∩ TC), so the
/// label nesting holds by construction; the whole-tumor volume fraction is
/// kept inside the configured band by deterministic re-draws.
inline std::pair<VolumeSet, LabelMap> phantom_generate(const PhantomParams& p) {
  validate_phantom_params(p);
  const int64_t X = p.extents[0], Y = p.extents[1], Z = p.extents[2];
  const int64_t n = X * Y * Z;
  Rng root(p.seed);

  // brain ellipsoid: centered, with mild per-case variation
  Rng brain_rng = root.fork(1);
  detail::Ellipsoid brain;
  for (int a = 0; a < 3; ++a) {
    const double c = 0.5 * static_cast<double>(p.extents[a] - 1);
    brain.center[a] = c + brain_rng.uniform(-0.02, 0.02) * p.extents[a];
    brain.radii[a] = (0.42 + brain_rng.uniform(-0.03, 0.03)) * static_cast<double>(p.extents[a]);
  }

  // tumor geometry, re-drawn from substreams until the WT fraction lands
  // inside the configured band
  detail::PhantomGeometry geo;
  geo.brain = brain;
  LabelMap labels(p.extents, p.spacing);
  bool accepted = false;
  constexpr int kMaxAttempts = 64;
  for (int attempt = 0; attempt < kMaxAttempts && !accepted; ++attempt) {
    Rng draw = root.fork(100 + attempt);
    const double placement = 0.35;  // tumor center offset, fraction of brain radius
    std::array<double, 3> base;
    for (int a = 0; a < 3; ++a)
      base[a] = brain.center[a] + draw.uniform(-placement, placement) * brain.radii[a];
    geo.wt = detail::draw_region(draw, base, 1.5, p.wt);
    geo.tc = detail::draw_region(draw, geo.wt.center, 1.5, p.tc);
    geo.en = detail::draw_region(draw, geo.tc.center, 1.0, p.en);

    int64_t wt_count = 0;
    for (int64_t x = 0; x < X; ++x)
      for (int64_t y = 0; y < Y; ++y)
        for (int64_t z = 0; z < Z; ++z) {
          uint8_t lab = 0;
          const double fx = static_cast<double>(x), fy = static_cast<double>(y),
                       fz = static_cast<double>(z);
          if (brain.contains(fx, fy, fz) && geo.wt.contains(fx, fy, fz)) {
            lab = 2;  // edema shell
            if (geo.tc.contains(fx, fy, fz)) {
              lab = 1;  // non-enhancing core
              if (geo.en.contains(fx, fy, fz)) lab = 4;
            }
            ++wt_count;
          }
          labels.at(x, y, z) = lab;
        }
    const double fraction = static_cast<double>(wt_count) / static_cast<double>(n);
    accepted = fraction >= p.min_wt_fraction && fraction <= p.max_wt_fraction;
  }
  if (!accepted)
    throw std::runtime_error("phantom: no accepted tumor geometry in " +
                             std::to_string(kMaxAttempts) + " attempts (seed " +
                             std::to_string(p.seed) + ")");

  // render modalities: per-region contrast, multiplicative bias, additive
  // noise inside the brain; background stays exactly zero
  VolumeSet vols(4, p.extents, p.spacing);
  for (size_t m = 0; m < 4; ++m) {
    Rng mod_rng = root.fork(200 + static_cast<uint64_t>(m));
    const detail::BiasField bias = detail::BiasField::draw(mod_rng, p.bias_strength, p.extents);
    const std::array<double, 4>& row = p.contrast[m];
    for (int64_t x = 0; x < X; ++x)
      for (int64_t y = 0; y < Y; ++y)
        for (int64_t z = 0; z < Z; ++z) {
          if (!brain.contains(x, y, z)) continue;
          double v = row[0];
          switch (labels.at(x, y, z)) {
            case 2: v = row[1]; break;
            case 1: v = row[2]; break;
            case 4: v = row[3]; break;
            default: break;
          }
          v = v * bias.at(x, y, z) + p.noise_std * mod_rng.gauss();
          vols.at(m, x, y, z) = static_cast<float>(v);
        }
  }
  return {std::move(vols), std::move(labels)};
}

}  // namespace triseg
