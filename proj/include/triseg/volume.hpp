#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "triseg/tensor.hpp"

namespace triseg {

static_assert(std::endian::native == std::endian::little,
              "volume container I/O assumes a little-endian host");

/// Multi-channel float volume. In memory channels are outermost and z is
/// the fastest axis; on disk the payload is channel-major then z-major
/// (see write_avol).
struct FloatVolume {
  std::array<int64_t, 3> extents{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  int64_t channels = 1;
  std::vector<float> data;

  FloatVolume() = default;
  FloatVolume(int64_t c, std::array<int64_t, 3> ext, std::array<double, 3> sp = {1.0, 1.0, 1.0})
      : extents(ext), spacing(sp), channels(c), data(c * ext[0] * ext[1] * ext[2], 0.0f) {}

  int64_t voxels() const { return extents[0] * extents[1] * extents[2]; }
  float& at(int64_t c, int64_t x, int64_t y, int64_t z) {
    return data[((c * extents[0] + x) * extents[1] + y) * extents[2] + z];
  }
  float at(int64_t c, int64_t x, int64_t y, int64_t z) const {
    return data[((c * extents[0] + x) * extents[1] + y) * extents[2] + z];
  }
};

/// Segmentation label volume; values restricted to {0,1,2,4}.
struct LabelMap {
  std::array<int64_t, 3> extents{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<uint8_t> labels;

  LabelMap() = default;
  explicit LabelMap(std::array<int64_t, 3> ext, std::array<double, 3> sp = {1.0, 1.0, 1.0})
      : extents(ext), spacing(sp), labels(ext[0] * ext[1] * ext[2], 0) {}

  int64_t voxels() const { return extents[0] * extents[1] * extents[2]; }
  uint8_t& at(int64_t x, int64_t y, int64_t z) {
    return labels[(x * extents[1] + y) * extents[2] + z];
  }
  uint8_t at(int64_t x, int64_t y, int64_t z) const {
    return labels[(x * extents[1] + y) * extents[2] + z];
  }
};

inline bool valid_label(uint8_t v) { return v == 0 || v == 1 || v == 2 || v == 4; }

/// The four pseudo-modality channels, in canonical order.
inline constexpr std::array<const char*, 4> kModalities{"t1", "t1c", "t2", "flair"};

/// A 4-modality input volume; channel order follows kModalities.
using VolumeSet = FloatVolume;

namespace detail {

constexpr char kVolumeMagic[8] = {'A', 'V', 'O', 'L', '0', '0', '0', '1'};

inline std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw std::runtime_error("volume header: number formatting failed");
  return std::string(buf, p);
}

inline double parse_double(std::string_view s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw std::runtime_error("volume header: bad number '" + std::string(s) + "'");
  return v;
}

inline int64_t parse_int(std::string_view s) {
  int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw std::runtime_error("volume header: bad integer '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (start <= s.size()) {
    size_t end = s.find(sep, start);
    if (end == std::string_view::npos) end = s.size();
    if (end > start) out.push_back(s.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

inline std::map<std::string, std::string> parse_header(std::string_view text,
                                                       const std::string& context) {
  std::map<std::string, std::string> kv;
  for (std::string_view line : split(text, '\n')) {
    const size_t eq = line.find('=');
    if (eq == std::string_view::npos)
      throw std::runtime_error(context + ": malformed header line '" + std::string(line) + "'");
    kv[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
  }
  return kv;
}

inline const std::string& header_get(const std::map<std::string, std::string>& kv,
                                     const std::string& key, const std::string& context) {
  auto it = kv.find(key);
  if (it == kv.end()) throw std::runtime_error(context + ": header missing key '" + key + "'");
  return it->second;
}

// Shared framing: magic, u32 little-endian header length, header text,
// raw payload.
inline void write_container(const std::filesystem::path& path, const char* magic,
                            size_t magic_len, const std::string& header, const char* payload,
                            size_t payload_bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(magic, magic_len);
  const uint32_t hlen = static_cast<uint32_t>(header.size());
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header.data(), header.size());
  out.write(payload, payload_bytes);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

struct RawContainer {
  std::map<std::string, std::string> header;
  std::vector<char> payload;
};

inline RawContainer read_container(const std::filesystem::path& path, const char* magic,
                                   size_t magic_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < magic_len + 4)
    throw std::runtime_error(path.string() + ": file too short for magic and header length");
  if (std::memcmp(bytes.data(), magic, magic_len) != 0)
    throw std::runtime_error(path.string() + ": bad magic, expected '" +
                             std::string(magic, magic_len) + "'");
  uint32_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + magic_len, 4);
  if (magic_len + 4 + static_cast<size_t>(hlen) > bytes.size())
    throw std::runtime_error(path.string() + ": header length " + std::to_string(hlen) +
                             " exceeds file size " + std::to_string(bytes.size()));
  RawContainer rc;
  rc.header = parse_header(std::string_view(bytes.data() + magic_len + 4, hlen), path.string());
  rc.payload.assign(bytes.begin() + magic_len + 4 + hlen, bytes.end());
  return rc;
}

}  // namespace detail

inline void write_avol(const std::filesystem::path& path, const FloatVolume& v) {
  if (v.channels < 1 || v.voxels() <= 0)
    throw std::invalid_argument("write_avol: empty volume");
  if (static_cast<int64_t>(v.data.size()) != v.channels * v.voxels())
    throw std::invalid_argument("write_avol: data length does not match extents");
  if (!all_finite<float>(v.data)) throw std::invalid_argument("write_avol: non-finite values");
  std::string header;
  header += "extents=" + std::to_string(v.extents[0]) + " " + std::to_string(v.extents[1]) + " " +
            std::to_string(v.extents[2]) + "\n";
  header += "channels=" + std::to_string(v.channels) + "\n";
  header += "spacing=" + detail::fmt_double(v.spacing[0]) + " " + detail::fmt_double(v.spacing[1]) +
            " " + detail::fmt_double(v.spacing[2]) + "\n";
  header += "dtype=f32\n";
  header += "axis_order=zyx\n";
  const int64_t X = v.extents[0], Y = v.extents[1], Z = v.extents[2];
  std::vector<float> payload(v.data.size());
  int64_t i = 0;
  for (int64_t c = 0; c < v.channels; ++c)
    for (int64_t z = 0; z < Z; ++z)
      for (int64_t y = 0; y < Y; ++y)
        for (int64_t x = 0; x < X; ++x) payload[i++] = v.at(c, x, y, z);
  detail::write_container(path, detail::kVolumeMagic, sizeof(detail::kVolumeMagic), header,
                          reinterpret_cast<const char*>(payload.data()),
                          payload.size() * sizeof(float));
}

inline void write_avol(const std::filesystem::path& path, const LabelMap& m) {
  if (m.voxels() <= 0) throw std::invalid_argument("write_avol: empty label map");
  for (uint8_t v : m.labels)
    if (!valid_label(v))
      throw std::invalid_argument("write_avol: label value " + std::to_string(v) +
                                  " outside {0,1,2,4}");
  std::string header;
  header += "extents=" + std::to_string(m.extents[0]) + " " + std::to_string(m.extents[1]) + " " +
            std::to_string(m.extents[2]) + "\n";
  header += "channels=1\n";
  header += "spacing=" + detail::fmt_double(m.spacing[0]) + " " + detail::fmt_double(m.spacing[1]) +
            " " + detail::fmt_double(m.spacing[2]) + "\n";
  header += "dtype=u8\n";
  header += "axis_order=zyx\n";
  const int64_t X = m.extents[0], Y = m.extents[1], Z = m.extents[2];
  std::vector<uint8_t> payload(m.labels.size());
  int64_t i = 0;
  for (int64_t z = 0; z < Z; ++z)
    for (int64_t y = 0; y < Y; ++y)
      for (int64_t x = 0; x < X; ++x) payload[i++] = m.at(x, y, z);
  detail::write_container(path, detail::kVolumeMagic, sizeof(detail::kVolumeMagic), header,
                          reinterpret_cast<const char*>(payload.data()), payload.size());
}

inline std::variant<FloatVolume, LabelMap> read_avol(const std::filesystem::path& path) {
  auto rc = detail::read_container(path, detail::kVolumeMagic, sizeof(detail::kVolumeMagic));
  const std::string ctx = path.string();
  auto ext = detail::split(detail::header_get(rc.header, "extents", ctx), ' ');
  auto sp = detail::split(detail::header_get(rc.header, "spacing", ctx), ' ');
  if (ext.size() != 3 || sp.size() != 3)
    throw std::runtime_error(ctx + ": extents/spacing must have 3 entries");
  std::array<int64_t, 3> extents{detail::parse_int(ext[0]), detail::parse_int(ext[1]),
                                 detail::parse_int(ext[2])};
  std::array<double, 3> spacing{detail::parse_double(sp[0]), detail::parse_double(sp[1]),
                                detail::parse_double(sp[2])};
  for (int64_t e : extents)
    if (e <= 0) throw std::runtime_error(ctx + ": non-positive extent");
  for (double s : spacing)
    if (s <= 0) throw std::runtime_error(ctx + ": non-positive spacing");
  const int64_t channels = detail::parse_int(detail::header_get(rc.header, "channels", ctx));
  if (channels < 1) throw std::runtime_error(ctx + ": channels must be >= 1");
  if (detail::header_get(rc.header, "axis_order", ctx) != "zyx")
    throw std::runtime_error(ctx + ": unsupported axis_order");
  const std::string& dtype = detail::header_get(rc.header, "dtype", ctx);
  const int64_t n = channels * extents[0] * extents[1] * extents[2];
  const int64_t X = extents[0], Y = extents[1], Z = extents[2];

  if (dtype == "f32") {
    const size_t expect = static_cast<size_t>(n) * sizeof(float);
    if (rc.payload.size() != expect)
      throw std::runtime_error(ctx + ": payload length mismatch, expected " +
                               std::to_string(expect) + " bytes, got " +
                               std::to_string(rc.payload.size()));
    std::vector<float> raw(n);
    std::memcpy(raw.data(), rc.payload.data(), expect);
    if (!all_finite<float>(raw)) throw std::runtime_error(ctx + ": non-finite payload values");
    FloatVolume v(channels, extents, spacing);
    int64_t i = 0;
    for (int64_t c = 0; c < channels; ++c)
      for (int64_t z = 0; z < Z; ++z)
        for (int64_t y = 0; y < Y; ++y)
          for (int64_t x = 0; x < X; ++x) v.at(c, x, y, z) = raw[i++];
    return v;
  }
  if (dtype == "u8") {
    if (channels != 1) throw std::runtime_error(ctx + ": u8 volumes must be single-channel");
    const size_t expect = static_cast<size_t>(n);
    if (rc.payload.size() != expect)
      throw std::runtime_error(ctx + ": payload length mismatch, expected " +
                               std::to_string(expect) + " bytes, got " +
                               std::to_string(rc.payload.size()));
    LabelMap m(extents, spacing);
    int64_t i = 0;
    for (int64_t z = 0; z < Z; ++z)
      for (int64_t y = 0; y < Y; ++y)
        for (int64_t x = 0; x < X; ++x) {
          const uint8_t v = static_cast<uint8_t>(rc.payload[i++]);
          if (!valid_label(v))
            throw std::runtime_error(ctx + ": label value " + std::to_string(v) +
                                     " outside {0,1,2,4}");
          m.at(x, y, z) = v;
        }
    return m;
  }
  throw std::runtime_error(ctx + ": unknown dtype '" + dtype + "'");
}

inline FloatVolume read_float_volume(const std::filesystem::path& path) {
  auto v = read_avol(path);
  if (!std::holds_alternative<FloatVolume>(v))
    throw std::runtime_error(path.string() + ": expected an f32 volume");
  return std::get<FloatVolume>(std::move(v));
}

inline LabelMap read_labels(const std::filesystem::path& path) {
  auto v = read_avol(path);
  if (!std::holds_alternative<LabelMap>(v))
    throw std::runtime_error(path.string() + ": expected a u8 label map");
  return std::get<LabelMap>(std::move(v));
}

/// Case directory layout: <case>/{t1,t1c,t2,flair,labels}.avol, one
/// single-channel file per modality.
inline VolumeSet load_volume_set(const std::filesystem::path& case_dir) {
  VolumeSet set;
  for (size_t m = 0; m < kModalities.size(); ++m) {
    FloatVolume v = read_float_volume(case_dir / (std::string(kModalities[m]) + ".avol"));
    if (v.channels != 1)
      throw std::runtime_error(case_dir.string() + ": modality files must be single-channel");
    if (m == 0) {
      set = VolumeSet(4, v.extents, v.spacing);
    } else if (v.extents != set.extents || v.spacing != set.spacing) {
      throw std::runtime_error(case_dir.string() + ": modalities disagree on extents or spacing");
    }
    std::copy(v.data.begin(), v.data.end(), set.data.begin() + m * set.voxels());
  }
  return set;
}

inline LabelMap load_case_labels(const std::filesystem::path& case_dir) {
  return read_labels(case_dir / "labels.avol");
}

inline void save_case(const std::filesystem::path& case_dir, const VolumeSet& set,
                      const LabelMap& labels) {
  if (set.channels != 4) throw std::invalid_argument("save_case: volume set must have 4 channels");
  if (labels.extents != set.extents)
    throw std::invalid_argument("save_case: labels and volumes disagree on extents");
  std::filesystem::create_directories(case_dir);
  for (size_t m = 0; m < kModalities.size(); ++m) {
    FloatVolume v(1, set.extents, set.spacing);
    std::copy(set.data.begin() + m * set.voxels(), set.data.begin() + (m + 1) * set.voxels(),
              v.data.begin());
    write_avol(case_dir / (std::string(kModalities[m]) + ".avol"), v);
  }
  write_avol(case_dir / "labels.avol", labels);
}

/// Per-modality normalization statistics pooled over a training set.
struct NormStats {
  std::array<double, 4> mean{0, 0, 0, 0};
  std::array<double, 4> stddev{1, 1, 1, 1};
};

constexpr double kDegenerateStd = 1e-6;

/// Mean and population std of the nonzero voxels of each modality, pooled
/// across all given volumes.
inline NormStats compute_norm_stats(const std::vector<const VolumeSet*>& sets) {
  if (sets.empty()) throw std::invalid_argument("compute_norm_stats: no volumes");
  NormStats stats;
  for (size_t m = 0; m < 4; ++m) {
    double sum = 0, sumsq = 0;
    int64_t n = 0;
    for (const VolumeSet* s : sets) {
      if (s->channels != 4) throw std::invalid_argument("compute_norm_stats: need 4 channels");
      const float* ch = s->data.data() + m * s->voxels();
      for (int64_t i = 0; i < s->voxels(); ++i) {
        if (ch[i] == 0.0f) continue;
        sum += ch[i];
        sumsq += static_cast<double>(ch[i]) * ch[i];
        ++n;
      }
    }
    if (n == 0) {
      stats.mean[m] = 0;
      stats.stddev[m] = 0;
      continue;
    }
    stats.mean[m] = sum / n;
    const double var = std::max(0.0, sumsq / n - stats.mean[m] * stats.mean[m]);
    stats.stddev[m] = std::sqrt(var);
  }
  return stats;
}

/// (x − mean)/std per modality, applied to every voxel. Degenerate
/// channels (std below 1e-6) are zeroed.
inline VolumeSet normalize(const VolumeSet& set, const NormStats& stats) {
  if (set.channels != 4) throw std::invalid_argument("normalize: need 4 channels");
  VolumeSet out = set;
  for (size_t m = 0; m < 4; ++m) {
    float* ch = out.data.data() + m * out.voxels();
    if (stats.stddev[m] < kDegenerateStd) {
      std::fill(ch, ch + out.voxels(), 0.0f);
      continue;
    }
    const float mu = static_cast<float>(stats.mean[m]);
    const float inv = static_cast<float>(1.0 / stats.stddev[m]);
    for (int64_t i = 0; i < out.voxels(); ++i) ch[i] = (ch[i] - mu) * inv;
  }
  return out;
}

}  // namespace triseg
