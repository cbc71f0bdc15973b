#pragma once

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "triseg/volume.hpp"

namespace triseg {

namespace detail {

inline void push_u32_be(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline void push_chunk(std::vector<unsigned char>& out, const char type[4],
                       const std::vector<unsigned char>& data) {
  push_u32_be(out, static_cast<uint32_t>(data.size()));
  const size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uint32_t crc = static_cast<uint32_t>(
      ::crc32(0L, out.data() + crc_start, static_cast<uInt>(4 + data.size())));
  push_u32_be(out, crc);
}

}  // namespace detail

/// Writes an 8-bit RGB PNG. rgb holds rows top to bottom, 3 bytes per
/// pixel. Deterministic: the same pixels always produce the same file.
inline void write_png(const std::filesystem::path& path, int64_t width, int64_t height,
                      const std::vector<unsigned char>& rgb) {
  if (width < 1 || height < 1) throw std::invalid_argument("write_png: empty image");
  if (static_cast<int64_t>(rgb.size()) != width * height * 3)
    throw std::invalid_argument("write_png: pixel buffer length does not match extents");

  // scanlines with a leading filter byte (0 = none)
  std::vector<unsigned char> raw((width * 3 + 1) * height);
  for (int64_t y = 0; y < height; ++y) {
    raw[y * (width * 3 + 1)] = 0;
    std::copy(rgb.begin() + y * width * 3, rgb.begin() + (y + 1) * width * 3,
              raw.begin() + y * (width * 3 + 1) + 1);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> zdata(zlen);
  if (compress2(zdata.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()),
                Z_DEFAULT_COMPRESSION) != Z_OK)
    throw std::runtime_error("write_png: deflate failed");
  zdata.resize(zlen);

  std::vector<unsigned char> file{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<unsigned char> ihdr;
  detail::push_u32_be(ihdr, static_cast<uint32_t>(width));
  detail::push_u32_be(ihdr, static_cast<uint32_t>(height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: truecolor
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter
  ihdr.push_back(0);  // interlace
  detail::push_chunk(file, "IHDR", ihdr);
  detail::push_chunk(file, "IDAT", zdata);
  detail::push_chunk(file, "IEND", {});

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(file.data()), file.size());
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

/// Grayscale slice of one modality channel with the segmentation overlaid
/// at alpha 0.5: label 2 green, 1 red, 4 yellow. axis selects the slicing
/// axis (0=x, 1=y, 2=z); the remaining two axes become image columns and
/// rows in that order.
inline std::vector<unsigned char> render_slice(const FloatVolume& vol, int64_t channel,
                                               const LabelMap& labels, int axis, int64_t slice,
                                               int64_t& width, int64_t& height) {
  if (channel < 0 || channel >= vol.channels)
    throw std::invalid_argument("render_slice: channel out of range");
  if (labels.extents != vol.extents)
    throw std::invalid_argument("render_slice: labels and volume disagree on extents");
  if (axis < 0 || axis > 2) throw std::invalid_argument("render_slice: axis must be 0, 1 or 2");
  if (slice < 0 || slice >= vol.extents[axis])
    throw std::invalid_argument("render_slice: slice " + std::to_string(slice) +
                                " out of range [0," + std::to_string(vol.extents[axis] - 1) + "]");

  const int col_axis = axis == 0 ? 1 : 0;
  const int row_axis = axis == 2 ? 1 : 2;
  width = vol.extents[col_axis];
  height = vol.extents[row_axis];

  auto voxel = [&](int64_t col, int64_t row, auto&& get) {
    std::array<int64_t, 3> p;
    p[axis] = slice;
    p[col_axis] = col;
    p[row_axis] = row;
    return get(p[0], p[1], p[2]);
  };

  float lo = 0, hi = 0;
  bool first = true;
  for (int64_t r = 0; r < height; ++r)
    for (int64_t c = 0; c < width; ++c) {
      const float v =
          voxel(c, r, [&](int64_t x, int64_t y, int64_t z) { return vol.at(channel, x, y, z); });
      if (first || v < lo) lo = v;
      if (first || v > hi) hi = v;
      first = false;
    }
  const float span = hi - lo;

  std::vector<unsigned char> rgb(width * height * 3);
  for (int64_t r = 0; r < height; ++r)
    for (int64_t c = 0; c < width; ++c) {
      const float v =
          voxel(c, r, [&](int64_t x, int64_t y, int64_t z) { return vol.at(channel, x, y, z); });
      const double g = span > 0 ? (v - lo) / span : 0.0;
      const double gray = 255.0 * g;
      double red = gray, green = gray, blue = gray;
      const uint8_t lab =
          voxel(c, r, [&](int64_t x, int64_t y, int64_t z) { return labels.at(x, y, z); });
      if (lab != 0) {
        double cr = 0, cg = 0, cb = 0;
        if (lab == 2) cg = 255;             // edema
        else if (lab == 1) cr = 255;        // non-enhancing core
        else if (lab == 4) cr = cg = 255;   // enhancing core
        red = 0.5 * red + 0.5 * cr;
        green = 0.5 * green + 0.5 * cg;
        blue = 0.5 * blue + 0.5 * cb;
      }
      unsigned char* px = rgb.data() + (r * width + c) * 3;
      px[0] = static_cast<unsigned char>(std::lround(red));
      px[1] = static_cast<unsigned char>(std::lround(green));
      px[2] = static_cast<unsigned char>(std::lround(blue));
    }
  return rgb;
}

}  // namespace triseg
