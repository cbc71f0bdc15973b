#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "triseg/adam.hpp"
#include "triseg/net.hpp"
#include "triseg/volume.hpp"

namespace triseg {

namespace detail {

constexpr char kCheckpointMagic[8] = {'A', 'C', 'K', 'P', '0', '0', '0', '1'};

inline std::string shape_token(const Shape& s) {
  std::string t;
  for (size_t i = 0; i < s.size(); ++i) t += (i ? "x" : "") + std::to_string(s[i]);
  return t;
}

inline Shape parse_shape_token(const std::string& t, const std::string& ctx) {
  Shape s;
  for (std::string_view part : split(t, 'x')) s.push_back(parse_int(part));
  if (s.empty()) throw std::runtime_error(ctx + ": empty tensor shape");
  return s;
}

struct TensorEntry {
  std::string name;
  Shape shape;
  int64_t offset = 0;  // bytes from the payload start
};

}  // namespace detail

/// Training context stored beside the weights: where in the run the
/// checkpoint was taken and which input normalization it assumes.
struct CheckpointExtras {
  int64_t iteration = 0;
  bool normalized = false;
  NormStats norm;
};

/// Writes network weights, batch-norm running statistics and (optionally)
/// optimizer state into a single container file. The tensor directory in
/// the header lists every payload tensor in order, so a reload followed by
/// a save reproduces the file byte for byte.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const NetworkT<T>& net,
                     const CheckpointExtras& ex, const AdamT<T>* adam = nullptr) {
  static_assert(sizeof(T) == 4, "checkpoint payload is f32");
  std::vector<detail::TensorEntry> dir;
  std::vector<T> payload;
  auto append = [&](const std::string& name, const Shape& shape, std::span<const T> data) {
    dir.push_back({name, shape, static_cast<int64_t>(payload.size() * sizeof(T))});
    payload.insert(payload.end(), data.begin(), data.end());
  };
  for (const auto& [name, p] : net.params()) append(name, p.shape(), p.values());
  int64_t bn_updates = 0;
  for (const auto& [name, s] : net.bn_states()) {
    const Shape shape{static_cast<int64_t>(s.running_mean.size())};
    append(name + ".running_mean", shape, s.running_mean);
    append(name + ".running_var", shape, s.running_var);
    bn_updates = std::max(bn_updates, s.updates);
  }
  if (adam != nullptr) {
    if (adam->size() != net.params().size())
      throw std::invalid_argument("save_checkpoint: optimizer covers a different parameter list");
    for (size_t i = 0; i < adam->size(); ++i) {
      if (adam->name(i) != net.params()[i].first)
        throw std::invalid_argument("save_checkpoint: optimizer parameter order mismatch at '" +
                                    adam->name(i) + "'");
      const Shape& shape = net.params()[i].second.shape();
      append("adam.m." + adam->name(i), shape, adam->moment1(i));
      append("adam.v." + adam->name(i), shape, adam->moment2(i));
    }
  }

  std::string header = format_config(net.config());
  header += "seed=" + std::to_string(net.seed()) + "\n";
  header += "iteration=" + std::to_string(ex.iteration) + "\n";
  header += "bn_updates=" + std::to_string(bn_updates) + "\n";
  header += std::string("normalized=") + (ex.normalized ? "1" : "0") + "\n";
  header += "norm_mean=" + detail::fmt_double(ex.norm.mean[0]) + " " +
            detail::fmt_double(ex.norm.mean[1]) + " " + detail::fmt_double(ex.norm.mean[2]) + " " +
            detail::fmt_double(ex.norm.mean[3]) + "\n";
  header += "norm_std=" + detail::fmt_double(ex.norm.stddev[0]) + " " +
            detail::fmt_double(ex.norm.stddev[1]) + " " + detail::fmt_double(ex.norm.stddev[2]) +
            " " + detail::fmt_double(ex.norm.stddev[3]) + "\n";
  header += "adam_step=" + std::to_string(adam ? adam->steps() : 0) + "\n";
  for (const auto& e : dir)
    header += "tensor=" + e.name + " f32 " + detail::shape_token(e.shape) + " " +
              std::to_string(e.offset) + "\n";
  detail::write_container(path, detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic), header,
                          reinterpret_cast<const char*>(payload.data()),
                          payload.size() * sizeof(T));
}

/// A reloaded network plus its training context. Optimizer moments are
/// returned aligned with net.params() order when the file carries them.
template <class T>
struct LoadedCheckpointT {
  NetworkT<T> net;
  CheckpointExtras extras;
  int64_t bn_updates = 0;
  int64_t adam_step = 0;
  bool has_adam = false;
  std::vector<std::vector<T>> adam_m, adam_v;
};

using LoadedCheckpoint = LoadedCheckpointT<float>;

template <class T = float>
LoadedCheckpointT<T> load_checkpoint(const std::filesystem::path& path) {
  static_assert(sizeof(T) == 4, "checkpoint payload is f32");
  const std::string ctx = path.string();

  // Reparse the raw header: the shared map-based parser cannot keep the
  // repeated, order-sensitive tensor lines.
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + ctx);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  constexpr size_t magic_len = sizeof(detail::kCheckpointMagic);
  if (bytes.size() < magic_len + 4)
    throw std::runtime_error(ctx + ": file too short for magic and header length");
  if (std::memcmp(bytes.data(), detail::kCheckpointMagic, magic_len) != 0)
    throw std::runtime_error(ctx + ": bad magic, expected '" +
                             std::string(detail::kCheckpointMagic, magic_len) + "'");
  uint32_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + magic_len, 4);
  if (magic_len + 4 + static_cast<size_t>(hlen) > bytes.size())
    throw std::runtime_error(ctx + ": header length " + std::to_string(hlen) +
                             " exceeds file size " + std::to_string(bytes.size()));

  std::map<std::string, std::string> kv;
  std::vector<detail::TensorEntry> dir;
  for (std::string_view line :
       detail::split(std::string_view(bytes.data() + magic_len + 4, hlen), '\n')) {
    const size_t eq = line.find('=');
    if (eq == std::string_view::npos)
      throw std::runtime_error(ctx + ": malformed header line '" + std::string(line) + "'");
    const std::string key(line.substr(0, eq));
    const std::string val(line.substr(eq + 1));
    if (key != "tensor") {
      kv[key] = val;
      continue;
    }
    auto fields = detail::split(val, ' ');
    if (fields.size() != 4 || fields[1] != "f32")
      throw std::runtime_error(ctx + ": malformed tensor line '" + std::string(line) + "'");
    dir.push_back({std::string(fields[0]), detail::parse_shape_token(std::string(fields[2]), ctx),
                   detail::parse_int(fields[3])});
  }

  NetworkConfig config = parse_config(kv);
  const uint64_t seed =
      static_cast<uint64_t>(detail::parse_int(detail::header_get(kv, "seed", ctx)));
  LoadedCheckpointT<T> out{NetworkT<T>(config, seed)};
  out.extras.iteration = detail::parse_int(detail::header_get(kv, "iteration", ctx));
  out.bn_updates = detail::parse_int(detail::header_get(kv, "bn_updates", ctx));
  const std::string& normalized = detail::header_get(kv, "normalized", ctx);
  if (normalized != "0" && normalized != "1")
    throw std::runtime_error(ctx + ": normalized flag must be 0 or 1");
  out.extras.normalized = normalized == "1";
  auto nm = detail::split(detail::header_get(kv, "norm_mean", ctx), ' ');
  auto ns = detail::split(detail::header_get(kv, "norm_std", ctx), ' ');
  if (nm.size() != 4 || ns.size() != 4)
    throw std::runtime_error(ctx + ": norm_mean/norm_std must have 4 entries");
  for (int m = 0; m < 4; ++m) {
    out.extras.norm.mean[m] = detail::parse_double(nm[m]);
    out.extras.norm.stddev[m] = detail::parse_double(ns[m]);
  }
  out.adam_step = detail::parse_int(detail::header_get(kv, "adam_step", ctx));

  // expected directory: parameters, then bn running stats, then optionally
  // paired optimizer moments; names, shapes and offsets must all agree
  std::vector<std::pair<std::string, Shape>> expected;
  for (const auto& [name, p] : out.net.params()) expected.emplace_back(name, p.shape());
  for (const auto& [name, s] : out.net.bn_states()) {
    const Shape shape{static_cast<int64_t>(s.running_mean.size())};
    expected.emplace_back(name + ".running_mean", shape);
    expected.emplace_back(name + ".running_var", shape);
  }
  const size_t base_count = expected.size();
  out.has_adam = dir.size() > base_count;
  if (out.has_adam)
    for (const auto& [name, p] : out.net.params()) {
      expected.emplace_back("adam.m." + name, p.shape());
      expected.emplace_back("adam.v." + name, p.shape());
    }
  if (dir.size() != expected.size())
    throw std::runtime_error(ctx + ": tensor directory holds " + std::to_string(dir.size()) +
                             " entries, expected " + std::to_string(expected.size()));
  int64_t offset = 0;
  for (size_t i = 0; i < dir.size(); ++i) {
    if (dir[i].name != expected[i].first)
      throw std::runtime_error(ctx + ": tensor " + std::to_string(i) + " is '" + dir[i].name +
                               "', expected '" + expected[i].first + "'");
    if (dir[i].shape != expected[i].second)
      throw std::runtime_error(ctx + ": tensor '" + dir[i].name + "' has shape " +
                               detail::shape_token(dir[i].shape) + ", expected " +
                               detail::shape_token(expected[i].second));
    if (dir[i].offset != offset)
      throw std::runtime_error(ctx + ": tensor '" + dir[i].name + "' at byte offset " +
                               std::to_string(dir[i].offset) + ", expected " +
                               std::to_string(offset));
    offset += shape_numel(dir[i].shape) * static_cast<int64_t>(sizeof(T));
  }
  const size_t expect_bytes = static_cast<size_t>(offset);
  const size_t have_bytes = bytes.size() - magic_len - 4 - hlen;
  if (have_bytes != expect_bytes)
    throw std::runtime_error(ctx + ": payload length mismatch, expected " +
                             std::to_string(expect_bytes) + " bytes, got " +
                             std::to_string(have_bytes));

  const char* payload = bytes.data() + magic_len + 4 + hlen;
  auto read_floats = [&](const detail::TensorEntry& e, T* dst) {
    std::memcpy(dst, payload + e.offset, shape_numel(e.shape) * sizeof(T));
  };
  size_t di = 0;
  for (auto& [name, p] : out.net.params()) read_floats(dir[di++], p.values_mut().data());
  for (auto& [name, s] : out.net.bn_states()) {
    read_floats(dir[di++], s.running_mean.data());
    read_floats(dir[di++], s.running_var.data());
    s.updates = out.bn_updates;
  }
  if (out.has_adam) {
    for (auto& [name, p] : out.net.params()) {
      out.adam_m.emplace_back(p.numel());
      read_floats(dir[di++], out.adam_m.back().data());
      out.adam_v.emplace_back(p.numel());
      read_floats(dir[di++], out.adam_v.back().data());
    }
  }
  return out;
}

}  // namespace triseg
