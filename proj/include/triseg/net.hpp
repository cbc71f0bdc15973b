#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "triseg/ops.hpp"
#include "triseg/rng.hpp"
#include "triseg/tensor.hpp"

namespace triseg {

enum class StageKind { kResidualBlock, kInterSlice, kDownsample, kHead };

/// One entry of the ordered layer schedule. Residual blocks carry their
/// in-plane dilation; heads carry the upsampling factor back to input
/// resolution.
struct StageSpec {
  StageKind kind = StageKind::kResidualBlock;
  int dilation = 1;  // residual blocks only
  int scale = 1;     // heads only
};

struct NetworkConfig {
  std::string name;  // wnet | tnet | enet
  int64_t input_channels = 4;
  int64_t base_channels = 32;  // C_o
  int64_t class_count = 2;     // C_l
  std::vector<StageSpec> stages;
};

/// The layer schedules used throughout: two in-plane scales are traversed
/// by wnet/tnet (two downsamplings) and one by enet, dilation grows with
/// depth, and three prediction heads tap progressively deeper blocks.
inline NetworkConfig canonical_config(const std::string& name, int64_t base_channels = 32) {
  NetworkConfig c;
  c.name = name;
  c.base_channels = base_channels;
  auto block = [](int d) { return StageSpec{StageKind::kResidualBlock, d, 1}; };
  auto inter = [] { return StageSpec{StageKind::kInterSlice, 1, 1}; };
  auto down = [] { return StageSpec{StageKind::kDownsample, 1, 1}; };
  auto head = [](int s) { return StageSpec{StageKind::kHead, 1, s}; };
  if (name == "wnet" || name == "tnet") {
    c.stages = {block(1), block(1), inter(), down(),
                block(1), block(1), inter(), down(),
                block(1), block(1), head(4), inter(),
                block(2), block(2), head(4), inter(),
                block(3), block(3), head(4)};
  } else if (name == "enet") {
    c.stages = {block(1), block(1), inter(), down(),
                block(1), block(1), inter(),
                block(2), block(2), head(2), inter(),
                block(3), block(3), head(2), inter(),
                block(1), block(1), head(2)};
  } else {
    throw std::invalid_argument("canonical_config: unknown network '" + name + "'");
  }
  return c;
}

inline void validate_config(const NetworkConfig& c) {
  auto fail = [&](const std::string& rule) {
    throw std::invalid_argument("network config '" + c.name + "' violates: " + rule);
  };
  if (c.name != "wnet" && c.name != "tnet" && c.name != "enet")
    fail("name must be wnet, tnet or enet");
  if (c.input_channels < 1) fail("input_channels must be positive");
  if (c.base_channels < 1) fail("base_channels must be positive");
  if (c.class_count < 2) fail("class_count must be at least 2");
  int blocks = 0, inters = 0, downs = 0, heads = 0;
  int scale = 1;
  bool backbone_after_last_head = false;
  for (const StageSpec& s : c.stages) {
    switch (s.kind) {
      case StageKind::kResidualBlock:
        ++blocks;
        if (s.dilation < 1 || s.dilation > 3) fail("block dilation must be in {1,2,3}");
        if (heads > 0) backbone_after_last_head = true;
        break;
      case StageKind::kInterSlice:
        ++inters;
        if (heads > 0) backbone_after_last_head = true;
        break;
      case StageKind::kDownsample:
        ++downs;
        scale *= 2;
        if (heads > 0) backbone_after_last_head = true;
        break;
      case StageKind::kHead:
        ++heads;
        backbone_after_last_head = false;
        if (s.scale != scale) fail("head scale must equal the cumulative downsampling factor");
        break;
    }
  }
  if (blocks != 10) fail("exactly 10 residual blocks (20 intra-slice convolutions) required");
  if (inters != 4) fail("exactly 4 inter-slice convolutions required");
  if (heads != 3) fail("exactly 3 prediction heads required");
  const int expected_downs = c.name == "enet" ? 1 : 2;
  if (downs != expected_downs)
    fail(std::string("exactly ") + std::to_string(expected_downs) +
         " downsampling stages required for " + c.name);
  if (backbone_after_last_head) fail("the last stage contributing to output must be a head");
}

/// One layer on a receptive-field path: kernel extents, dilations, and
/// strides per axis.
struct RfLayer {
  std::array<int, 3> kernel{1, 1, 1};
  std::array<int, 3> dilation{1, 1, 1};
  std::array<int, 3> stride{1, 1, 1};
};

/// rf_a = 1 + Σ (k−1)·d·jump over the layers, where jump is the product of
/// the strides of all earlier layers.
inline std::array<int64_t, 3> receptive_field(const std::vector<RfLayer>& layers) {
  std::array<int64_t, 3> rf{1, 1, 1}, jump{1, 1, 1};
  for (const RfLayer& l : layers)
    for (int a = 0; a < 3; ++a) {
      rf[a] += static_cast<int64_t>(l.kernel[a] - 1) * l.dilation[a] * jump[a];
      jump[a] *= l.stride[a];
    }
  return rf;
}

/// The backbone path feeding the deepest prediction head, as rf layers.
/// Heads are side branches hanging off this path, so their own 3x3x1
/// convolutions (and the fusion convolution) are not part of it.
inline std::vector<RfLayer> backbone_rf_path(const NetworkConfig& c) {
  validate_config(c);
  size_t deepest_head = 0;
  for (size_t i = 0; i < c.stages.size(); ++i)
    if (c.stages[i].kind == StageKind::kHead) deepest_head = i;
  std::vector<RfLayer> path;
  for (size_t i = 0; i < deepest_head; ++i) {
    const StageSpec& s = c.stages[i];
    switch (s.kind) {
      case StageKind::kResidualBlock:
        for (int rep = 0; rep < 2; ++rep)
          path.push_back({{3, 3, 1}, {s.dilation, s.dilation, 1}, {1, 1, 1}});
        break;
      case StageKind::kInterSlice:
        path.push_back({{1, 1, 3}, {1, 1, 1}, {1, 1, 1}});
        break;
      case StageKind::kDownsample:
        path.push_back({{2, 2, 1}, {1, 1, 1}, {2, 2, 1}});
        break;
      case StageKind::kHead:
        break;
    }
  }
  return path;
}

/// Theoretical per-axis receptive field of the network's deepest output
/// path.
inline std::array<int64_t, 3> receptive_field(const NetworkConfig& c) {
  return receptive_field(backbone_rf_path(c));
}

inline std::string format_config(const NetworkConfig& c) {
  std::string s;
  s += "version=1\n";
  s += "name=" + c.name + "\n";
  s += "input_channels=" + std::to_string(c.input_channels) + "\n";
  s += "base_channels=" + std::to_string(c.base_channels) + "\n";
  s += "class_count=" + std::to_string(c.class_count) + "\n";
  s += "stages=";
  for (size_t i = 0; i < c.stages.size(); ++i) {
    const StageSpec& st = c.stages[i];
    if (i) s += ",";
    switch (st.kind) {
      case StageKind::kResidualBlock: s += "B" + std::to_string(st.dilation); break;
      case StageKind::kInterSlice: s += "I"; break;
      case StageKind::kDownsample: s += "D"; break;
      case StageKind::kHead: s += "H" + std::to_string(st.scale); break;
    }
  }
  s += "\n";
  return s;
}

inline NetworkConfig parse_config(const std::map<std::string, std::string>& kv) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end())
      throw std::invalid_argument("network config: missing key '" + key + "'");
    return it->second;
  };
  if (get("version") != "1")
    throw std::invalid_argument("network config: unsupported version " + get("version"));
  NetworkConfig c;
  c.name = get("name");
  c.input_channels = std::stoll(get("input_channels"));
  c.base_channels = std::stoll(get("base_channels"));
  c.class_count = std::stoll(get("class_count"));
  const std::string& stages = get("stages");
  size_t pos = 0;
  while (pos < stages.size()) {
    size_t end = stages.find(',', pos);
    if (end == std::string::npos) end = stages.size();
    const std::string tok = stages.substr(pos, end - pos);
    pos = end + 1;
    if (tok.empty()) continue;
    StageSpec s;
    if (tok[0] == 'B') {
      s.kind = StageKind::kResidualBlock;
      s.dilation = std::stoi(tok.substr(1));
    } else if (tok == "I") {
      s.kind = StageKind::kInterSlice;
    } else if (tok == "D") {
      s.kind = StageKind::kDownsample;
    } else if (tok[0] == 'H') {
      s.kind = StageKind::kHead;
      s.scale = std::stoi(tok.substr(1));
    } else {
      throw std::invalid_argument("network config: unknown stage token '" + tok + "'");
    }
    c.stages.push_back(s);
  }
  validate_config(c);
  return c;
}

namespace detail {

// Index bundles into Network::params / Network::bn_states for one layer.
struct ConvRef {
  int weight = -1, bias = -1;
  KernelSpec spec;
};
struct BnRef {
  int gamma = -1, beta = -1, state = -1;
};
struct PreluRef {
  int slope = -1;
};
struct BlockRefs {
  ConvRef conv1, conv2;
  BnRef bn1, bn2;
  PreluRef act1, act2;
  bool skip = true;  // false when input/output channel counts differ
};
struct InterRefs {
  ConvRef conv;
  BnRef bn;
  PreluRef act;
};
struct HeadRefs {
  ConvRef conv;
  int scale = 1;
};

}  // namespace detail

constexpr float kPreluInit = 0.25f;

/// An executable network: named parameter leaves, per-layer batch-norm
/// state, and the stage schedule interpreted by forward().
template <class T>
class NetworkT {
 public:
  NetworkT(NetworkConfig config, uint64_t seed) : config_(std::move(config)), seed_(seed) {
    validate_config(config_);
    Rng rng = Rng(seed).fork(0x6e657469);  // parameter-init stream
    int block_no = 0, inter_no = 0, head_no = 0;
    const int64_t C = config_.base_channels;
    for (const StageSpec& s : config_.stages) {
      switch (s.kind) {
        case StageKind::kResidualBlock: {
          ++block_no;
          const std::string p = "b" + std::to_string(block_no);
          detail::BlockRefs b;
          const int64_t in_ch = block_no == 1 ? config_.input_channels : C;
          b.conv1 = add_conv(p + ".conv1", in_ch, C, KernelSpec::intra_slice(s.dilation), rng);
          b.bn1 = add_bn(p + ".bn1", C);
          b.act1 = add_prelu(p + ".act1", C);
          b.conv2 = add_conv(p + ".conv2", C, C, KernelSpec::intra_slice(s.dilation), rng);
          b.bn2 = add_bn(p + ".bn2", C);
          b.act2 = add_prelu(p + ".act2", C);
          b.skip = in_ch == C;
          blocks_.push_back(b);
          break;
        }
        case StageKind::kInterSlice: {
          ++inter_no;
          const std::string p = "i" + std::to_string(inter_no);
          detail::InterRefs l;
          l.conv = add_conv(p + ".conv", C, C, KernelSpec::inter_slice(), rng);
          l.bn = add_bn(p + ".bn", C);
          l.act = add_prelu(p + ".act", C);
          inters_.push_back(l);
          break;
        }
        case StageKind::kDownsample:
          break;
        case StageKind::kHead: {
          ++head_no;
          detail::HeadRefs h;
          h.conv = add_conv("head" + std::to_string(head_no), C, config_.class_count,
                            KernelSpec::intra_slice(1), rng);
          h.scale = s.scale;
          heads_.push_back(h);
          break;
        }
      }
    }
    fuse_ = add_conv("fuse", 3 * config_.class_count, config_.class_count,
                     KernelSpec::intra_slice(1), rng);
  }

  NetworkT(const NetworkT&) = delete;
  NetworkT& operator=(const NetworkT&) = delete;
  NetworkT(NetworkT&&) = default;
  NetworkT& operator=(NetworkT&&) = default;

  const NetworkConfig& config() const { return config_; }
  uint64_t seed() const { return seed_; }

  std::vector<std::pair<std::string, Tensor<T>>>& params() { return params_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }
  std::vector<std::pair<std::string, BnState<T>>>& bn_states() { return bn_states_; }
  const std::vector<std::pair<std::string, BnState<T>>>& bn_states() const { return bn_states_; }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, p] : params_) n += p.numel();
    return n;
  }

  void set_requires_grad(bool rg) {
    for (auto& [name, p] : params_) p.set_requires_grad(rg);
  }

  /// Marks every batch-norm state usable with identity statistics; lets a
  /// freshly initialized network run in infer mode.
  void set_identity_bn_stats() {
    for (auto& [name, s] : bn_states_) s.set_identity();
  }

  /// Logits [B,C_l,X,Y,Z] at input resolution. In-plane extents are padded
  /// internally to a multiple of the total downsampling factor and cropped
  /// back afterwards.
  Tensor<T> forward(const Tensor<T>& input, BnMode mode) {
    const Shape& is = input.shape();
    if (is.size() != 5)
      throw std::invalid_argument("network forward: input must be [B,C,X,Y,Z], got " +
                                  shape_str(is));
    if (is[1] != config_.input_channels)
      throw std::invalid_argument("network forward: expected " +
                                  std::to_string(config_.input_channels) + " channels, got " +
                                  std::to_string(is[1]));
    int64_t factor = 1;
    for (const StageSpec& s : config_.stages)
      if (s.kind == StageKind::kDownsample) factor *= 2;
    const int64_t X = is[2], Y = is[3];
    const int64_t Xp = (X + factor - 1) / factor * factor;
    const int64_t Yp = (Y + factor - 1) / factor * factor;
    Tensor<T> x = pad2d_to(input, Xp, Yp);

    std::vector<Tensor<T>> head_outputs;
    size_t bi = 0, ii = 0, hi = 0;
    for (const StageSpec& s : config_.stages) {
      switch (s.kind) {
        case StageKind::kResidualBlock: {
          const detail::BlockRefs& b = blocks_[bi++];
          Tensor<T> y = conv_aniso(x, pt(b.conv1.weight), pt(b.conv1.bias), b.conv1.spec);
          y = batch_norm(y, pt(b.bn1.gamma), pt(b.bn1.beta), bn_states_[b.bn1.state].second, mode);
          y = prelu(y, pt(b.act1.slope));
          y = conv_aniso(y, pt(b.conv2.weight), pt(b.conv2.bias), b.conv2.spec);
          y = batch_norm(y, pt(b.bn2.gamma), pt(b.bn2.beta), bn_states_[b.bn2.state].second, mode);
          y = prelu(y, pt(b.act2.slope));
          x = b.skip ? add(x, y) : y;
          break;
        }
        case StageKind::kInterSlice: {
          const detail::InterRefs& l = inters_[ii++];
          Tensor<T> y = conv_aniso(x, pt(l.conv.weight), pt(l.conv.bias), l.conv.spec);
          y = batch_norm(y, pt(l.bn.gamma), pt(l.bn.beta), bn_states_[l.bn.state].second, mode);
          x = prelu(y, pt(l.act.slope));
          break;
        }
        case StageKind::kDownsample:
          x = downsample2d(x);
          break;
        case StageKind::kHead: {
          const detail::HeadRefs& h = heads_[hi++];
          Tensor<T> y = conv_aniso(x, pt(h.conv.weight), pt(h.conv.bias), h.conv.spec);
          head_outputs.push_back(upsample2d(y, h.scale));
          break;
        }
      }
    }
    Tensor<T> logits =
        conv_aniso(concat_channels(head_outputs), pt(fuse_.weight), pt(fuse_.bias), fuse_.spec);
    return crop2d_to(logits, X, Y);
  }

 private:
  Tensor<T>& pt(int idx) { return params_[idx].second; }

  int add_param(const std::string& name, Tensor<T> t) {
    params_.emplace_back(name, std::move(t));
    return static_cast<int>(params_.size() - 1);
  }

  detail::ConvRef add_conv(const std::string& name, int64_t in_ch, int64_t out_ch,
                           const KernelSpec& spec, Rng& rng) {
    const int64_t fan_in = in_ch * spec.kernel[0] * spec.kernel[1] * spec.kernel[2];
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<T> w(out_ch * fan_in);
    for (auto& v : w) v = static_cast<T>(rng.gauss() * std);
    detail::ConvRef r;
    r.spec = spec;
    r.weight = add_param(name + ".weight",
                         Tensor<T>::from_data({out_ch, in_ch, spec.kernel[0], spec.kernel[1],
                                               spec.kernel[2]},
                                              std::move(w)));
    r.bias = add_param(name + ".bias", Tensor<T>::zeros({out_ch}));
    return r;
  }

  detail::BnRef add_bn(const std::string& name, int64_t channels) {
    detail::BnRef r;
    r.gamma = add_param(name + ".gamma", Tensor<T>::filled({channels}, T(1)));
    r.beta = add_param(name + ".beta", Tensor<T>::zeros({channels}));
    bn_states_.emplace_back(name, BnState<T>(channels));
    r.state = static_cast<int>(bn_states_.size() - 1);
    return r;
  }

  detail::PreluRef add_prelu(const std::string& name, int64_t channels) {
    detail::PreluRef r;
    r.slope = add_param(name + ".slope", Tensor<T>::filled({channels}, static_cast<T>(kPreluInit)));
    return r;
  }

  NetworkConfig config_;
  uint64_t seed_ = 0;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::pair<std::string, BnState<T>>> bn_states_;
  std::vector<detail::BlockRefs> blocks_;
  std::vector<detail::InterRefs> inters_;
  std::vector<detail::HeadRefs> heads_;
  detail::ConvRef fuse_;
};

using Network = NetworkT<float>;

}  // namespace triseg
