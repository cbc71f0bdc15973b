#pragma once

#include <array>
#include <stdexcept>
#include <string>

#include "triseg/volume.hpp"

namespace triseg {

/// Orientation a network is trained in. The in-plane 3x3x1 kernels always
/// see the first two axes, so a view permutes the volume to bring the
/// desired anatomical plane there: sagittal makes (y,z) the plane with x
/// as the slice axis, coronal makes (x,z) the plane with y as the slice
/// axis. Axial is the identity.
enum class ViewId { kAxial, kSagittal, kCoronal };

inline constexpr std::array<ViewId, 3> kAllViews{ViewId::kAxial, ViewId::kSagittal,
                                                 ViewId::kCoronal};

inline const char* view_name(ViewId v) {
  switch (v) {
    case ViewId::kAxial: return "axial";
    case ViewId::kSagittal: return "sagittal";
    case ViewId::kCoronal: return "coronal";
  }
  throw std::invalid_argument("view_name: bad view id");
}

inline ViewId parse_view(const std::string& s) {
  if (s == "axial") return ViewId::kAxial;
  if (s == "sagittal") return ViewId::kSagittal;
  if (s == "coronal") return ViewId::kCoronal;
  throw std::invalid_argument("unknown view '" + s + "' (expected axial, sagittal or coronal)");
}

namespace detail {

// Axis permutation for a view: output axis a reads input axis perm[a].
inline std::array<int, 3> view_perm(ViewId v) {
  switch (v) {
    case ViewId::kAxial: return {0, 1, 2};
    case ViewId::kSagittal: return {1, 2, 0};
    case ViewId::kCoronal: return {0, 2, 1};
  }
  throw std::invalid_argument("view_perm: bad view id");
}

inline std::array<int, 3> invert_perm(std::array<int, 3> p) {
  std::array<int, 3> inv{};
  for (int a = 0; a < 3; ++a) inv[p[a]] = a;
  return inv;
}

// Output position o reads input position src with src[perm[a]] = o[a],
// i.e. output axis a carries what input axis perm[a] carried.
template <class Vol, class Get, class Set>
void permute_axes(const Vol& in, Vol& out, std::array<int, 3> perm, Get get, Set set) {
  std::array<int64_t, 3> o;
  for (o[0] = 0; o[0] < out.extents[0]; ++o[0])
    for (o[1] = 0; o[1] < out.extents[1]; ++o[1])
      for (o[2] = 0; o[2] < out.extents[2]; ++o[2]) {
        std::array<int64_t, 3> src{};
        for (int a = 0; a < 3; ++a) src[perm[a]] = o[a];
        set(out, o, get(in, src));
      }
}

}  // namespace detail

inline FloatVolume to_view(const FloatVolume& in, ViewId v) {
  if (v == ViewId::kAxial) return in;
  const auto perm = detail::view_perm(v);
  FloatVolume out(in.channels,
                  {in.extents[perm[0]], in.extents[perm[1]], in.extents[perm[2]]},
                  {in.spacing[perm[0]], in.spacing[perm[1]], in.spacing[perm[2]]});
  for (int64_t c = 0; c < in.channels; ++c)
    detail::permute_axes(
        in, out, perm,
        [c](const FloatVolume& s, std::array<int64_t, 3> p) { return s.at(c, p[0], p[1], p[2]); },
        [c](FloatVolume& d, std::array<int64_t, 3> p, float val) {
          d.at(c, p[0], p[1], p[2]) = val;
        });
  return out;
}

inline FloatVolume to_canonical(const FloatVolume& in, ViewId v) {
  if (v == ViewId::kAxial) return in;
  const auto perm = detail::invert_perm(detail::view_perm(v));
  FloatVolume out(in.channels,
                  {in.extents[perm[0]], in.extents[perm[1]], in.extents[perm[2]]},
                  {in.spacing[perm[0]], in.spacing[perm[1]], in.spacing[perm[2]]});
  for (int64_t c = 0; c < in.channels; ++c)
    detail::permute_axes(
        in, out, perm,
        [c](const FloatVolume& s, std::array<int64_t, 3> p) { return s.at(c, p[0], p[1], p[2]); },
        [c](FloatVolume& d, std::array<int64_t, 3> p, float val) {
          d.at(c, p[0], p[1], p[2]) = val;
        });
  return out;
}

inline LabelMap to_view(const LabelMap& in, ViewId v) {
  if (v == ViewId::kAxial) return in;
  const auto perm = detail::view_perm(v);
  LabelMap out({in.extents[perm[0]], in.extents[perm[1]], in.extents[perm[2]]},
               {in.spacing[perm[0]], in.spacing[perm[1]], in.spacing[perm[2]]});
  detail::permute_axes(
      in, out, perm,
      [](const LabelMap& s, std::array<int64_t, 3> p) { return s.at(p[0], p[1], p[2]); },
      [](LabelMap& d, std::array<int64_t, 3> p, uint8_t val) { d.at(p[0], p[1], p[2]) = val; });
  return out;
}

inline LabelMap to_canonical(const LabelMap& in, ViewId v) {
  if (v == ViewId::kAxial) return in;
  const auto perm = detail::invert_perm(detail::view_perm(v));
  LabelMap out({in.extents[perm[0]], in.extents[perm[1]], in.extents[perm[2]]},
               {in.spacing[perm[0]], in.spacing[perm[1]], in.spacing[perm[2]]});
  detail::permute_axes(
      in, out, perm,
      [](const LabelMap& s, std::array<int64_t, 3> p) { return s.at(p[0], p[1], p[2]); },
      [](LabelMap& d, std::array<int64_t, 3> p, uint8_t val) { d.at(p[0], p[1], p[2]) = val; });
  return out;
}

}  // namespace triseg
