#include <algorithm>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "triseg/cascade.hpp"
#include "triseg/checkpoint.hpp"
#include "triseg/metrics.hpp"
#include "triseg/net.hpp"
#include "triseg/phantom.hpp"
#include "triseg/png.hpp"
#include "triseg/regions.hpp"
#include "triseg/train.hpp"
#include "triseg/views.hpp"
#include "triseg/volume.hpp"

namespace fs = std::filesystem;
using namespace triseg;

namespace {

// Plain key=value configuration; '#' starts a comment, blank lines are
// skipped.
std::map<std::string, std::string> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r' || line.back() == '\t'))
      line.pop_back();
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path.string() + ": malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

const std::string* find_key(const std::map<std::string, std::string>& kv,
                            const std::string& key) {
  auto it = kv.find(key);
  return it == kv.end() ? nullptr : &it->second;
}

const std::string& require_key(const std::map<std::string, std::string>& kv,
                               const std::string& key, const std::string& ctx) {
  const std::string* v = find_key(kv, key);
  if (!v) throw std::runtime_error(ctx + ": missing config key '" + key + "'");
  return *v;
}

int64_t to_int(const std::string& s, const std::string& key) {
  try {
    size_t pos = 0;
    const int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key '" + key + "': bad integer '" + s + "'");
  }
}

double to_double(const std::string& s, const std::string& key) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key '" + key + "': bad number '" + s + "'");
  }
}

std::array<int64_t, 3> to_triple(const std::string& s, const std::string& key) {
  std::istringstream is(s);
  std::array<int64_t, 3> v;
  if (!(is >> v[0] >> v[1] >> v[2]))
    throw std::runtime_error("config key '" + key + "': expected three integers, got '" + s + "'");
  std::string rest;
  if (is >> rest)
    throw std::runtime_error("config key '" + key + "': expected three integers, got '" + s + "'");
  return v;
}

std::array<double, 2> to_range(const std::string& s, const std::string& key) {
  std::istringstream is(s);
  std::array<double, 2> v;
  std::string rest;
  if (!(is >> v[0] >> v[1]) || (is >> rest))
    throw std::runtime_error("config key '" + key + "': expected two numbers, got '" + s + "'");
  return v;
}

// Case directories under a dataset root: subdirectories holding a
// labels.avol, in name order.
std::vector<fs::path> list_case_dirs(const fs::path& root) {
  if (!fs::is_directory(root))
    throw std::runtime_error("not a directory: " + root.string());
  std::vector<fs::path> cases;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() && fs::exists(entry.path() / "labels.avol"))
      cases.push_back(entry.path());
  std::sort(cases.begin(), cases.end());
  if (cases.empty())
    throw std::runtime_error("no case directories (with labels.avol) under " + root.string());
  return cases;
}

int64_t modality_index(const std::string& name) {
  for (size_t m = 0; m < kModalities.size(); ++m)
    if (name == kModalities[m]) return static_cast<int64_t>(m);
  throw std::runtime_error("unknown modality '" + name + "' (expected t1, t1c, t2 or flair)");
}

struct CommonFlags {
  std::string config, data, out;
  uint64_t seed = 1;
  int threads = 1;
};

void cmd_phantom_gen(const CommonFlags& f) {
  if (f.config.empty()) throw std::runtime_error("phantom-gen: --config is required");
  if (f.out.empty()) throw std::runtime_error("phantom-gen: --out is required");
  const auto kv = read_config(f.config);
  const std::string ctx = "phantom-gen";
  const int64_t count = to_int(require_key(kv, "count", ctx), "count");
  if (count <= 0) throw std::runtime_error("phantom-gen: count must be positive");

  PhantomParams params;
  if (const auto* v = find_key(kv, "extents")) params.extents = to_triple(*v, "extents");
  if (const auto* v = find_key(kv, "noise_std")) params.noise_std = to_double(*v, "noise_std");
  if (const auto* v = find_key(kv, "bias_strength"))
    params.bias_strength = to_double(*v, "bias_strength");
  if (const auto* v = find_key(kv, "wt_radius")) {
    auto r = to_range(*v, "wt_radius");
    params.wt = {r[0], r[1]};
  }
  if (const auto* v = find_key(kv, "tc_radius")) {
    auto r = to_range(*v, "tc_radius");
    params.tc = {r[0], r[1]};
  }
  if (const auto* v = find_key(kv, "en_radius")) {
    auto r = to_range(*v, "en_radius");
    params.en = {r[0], r[1]};
  }
  if (const auto* v = find_key(kv, "wt_fraction")) {
    auto r = to_range(*v, "wt_fraction");
    params.min_wt_fraction = r[0];
    params.max_wt_fraction = r[1];
  }

  fs::create_directories(f.out);
  for (int64_t i = 0; i < count; ++i) {
    params.seed = f.seed + static_cast<uint64_t>(i);
    auto [vols, labels] = phantom_generate(params);
    char name[32];
    std::snprintf(name, sizeof(name), "case_%03lld", static_cast<long long>(i));
    save_case(fs::path(f.out) / name, vols, labels);
    std::cout << name << " seed=" << params.seed << "\n";
  }
}

void cmd_train(const CommonFlags& f) {
  if (f.config.empty()) throw std::runtime_error("train: --config is required");
  if (f.data.empty()) throw std::runtime_error("train: --data is required");
  if (f.out.empty()) throw std::runtime_error("train: --out is required");
  const auto kv = read_config(f.config);
  const std::string ctx = "train";

  TrainConfig cfg;
  cfg.stage = require_key(kv, "stage", ctx);
  cfg.view = require_key(kv, "view", ctx);
  cfg.patch = default_patch(cfg.stage);
  cfg.seed = f.seed;
  if (const auto* v = find_key(kv, "iterations")) cfg.iterations = to_int(*v, "iterations");
  if (const auto* v = find_key(kv, "batch")) cfg.batch = to_int(*v, "batch");
  if (const auto* v = find_key(kv, "base_channels"))
    cfg.base_channels = to_int(*v, "base_channels");
  if (const auto* v = find_key(kv, "lr")) cfg.adam.lr = to_double(*v, "lr");
  if (const auto* v = find_key(kv, "weight_decay"))
    cfg.adam.weight_decay = to_double(*v, "weight_decay");
  if (const auto* v = find_key(kv, "patch")) cfg.patch = to_triple(*v, "patch");
  if (const auto* v = find_key(kv, "margin")) cfg.margin = to_triple(*v, "margin");
  if (const auto* v = find_key(kv, "log_every")) cfg.log_every = to_int(*v, "log_every");
  validate_train_config(cfg);

  const auto case_dirs = list_case_dirs(f.data);
  std::vector<VolumeSet> raw;
  std::vector<LabelMap> labels;
  raw.reserve(case_dirs.size());
  for (const auto& dir : case_dirs) {
    raw.push_back(load_volume_set(dir));
    labels.push_back(load_case_labels(dir));
  }
  std::vector<const VolumeSet*> raw_ptrs;
  for (const auto& v : raw) raw_ptrs.push_back(&v);
  const NormStats stats = compute_norm_stats(raw_ptrs);

  const ViewId view = parse_view(cfg.view);
  std::vector<PreparedCase> cases;
  cases.reserve(raw.size());
  for (size_t i = 0; i < raw.size(); ++i)
    cases.push_back(prepare_case(normalize(raw[i], stats), labels[i], cfg.stage, view, cfg.margin));

  Network net(canonical_config(cfg.stage, cfg.base_channels), cfg.seed);
  Adam adam(net.params(), cfg.adam);

  const fs::path loss_path = f.out + ".loss.csv";
  std::ofstream loss_csv(loss_path);
  if (!loss_csv) throw std::runtime_error("cannot open for writing: " + loss_path.string());
  const TrainResult result = train_network(net, adam, cases, cfg, &loss_csv);

  CheckpointExtras extras;
  extras.iteration = cfg.iterations;
  extras.normalized = true;
  extras.norm = stats;
  save_checkpoint(f.out, net, extras, &adam);
  std::cout << "trained " << cfg.stage << "/" << cfg.view << " for " << cfg.iterations
            << " iterations on " << cases.size() << " cases, final loss "
            << result.losses.back() << ", rejected steps " << result.rejected_steps << "\n";
}

// Loads the nine checkpoints named by the manifest and keeps them alive
// alongside the pointer table the cascade consumes.
struct ModelSet {
  std::vector<LoadedCheckpoint> loaded;
  CascadeModels models;
  CascadeParams params;
  NormStats stats;  // from the wnet/axial checkpoint
};

ModelSet load_model_set(const fs::path& manifest_path, int threads, bool allow_unnormalized) {
  const auto kv = read_config(manifest_path);
  const std::string ctx = manifest_path.string();
  ModelSet set;
  set.params.threads = threads;

  const char* stages[3] = {"wnet", "tnet", "enet"};
  set.loaded.reserve(9);
  for (int s = 0; s < 3; ++s)
    for (int v = 0; v < 3; ++v) {
      const std::string key =
          std::string("checkpoint.") + stages[s] + "." + view_name(kAllViews[v]);
      set.loaded.push_back(load_checkpoint(require_key(kv, key, ctx)));
      LoadedCheckpoint& lc = set.loaded.back();
      if (lc.net.config().name != stages[s])
        throw std::runtime_error(ctx + ": " + key + " holds a " + lc.net.config().name +
                                 " network");
      if (!lc.extras.normalized && !allow_unnormalized)
        throw std::runtime_error(ctx + ": " + key +
                                 " was saved without normalization statistics; pass "
                                 "--allow-unnormalized to use it anyway");
    }
  for (int s = 0; s < 3; ++s)
    for (int v = 0; v < 3; ++v) set.models.stage(s)[v] = &set.loaded[s * 3 + v].net;
  set.stats = set.loaded[0].extras.norm;

  for (int v = 0; v < 3; ++v)
    if (const auto* val = find_key(kv, std::string("weight.") + view_name(kAllViews[v])))
      set.params.view_weights[v] = to_double(*val, "weight");
  if (const auto* val = find_key(kv, "margin")) set.params.margin = to_triple(*val, "margin");
  if (const auto* val = find_key(kv, "overlap")) set.params.overlap = to_triple(*val, "overlap");
  for (int s = 0; s < 3; ++s)
    if (const auto* val = find_key(kv, std::string("window.") + stages[s]))
      set.params.windows[s] = to_triple(*val, "window");
  if (const auto* val = find_key(kv, "threshold"))
    set.params.threshold = to_double(*val, "threshold");
  validate_cascade_params(set.params);
  return set;
}

// Re-embeds a cropped probability map into the full grid as pure
// background outside the box.
FloatVolume uncrop_prob(const FloatVolume& sub, const BoundingBox& box,
                        std::array<int64_t, 3> extents, std::array<double, 3> spacing) {
  FloatVolume out(sub.channels, extents, spacing);
  std::fill(out.data.begin(), out.data.begin() + out.voxels(), 1.0f);  // background channel
  for (int64_t c = 0; c < sub.channels; ++c)
    for (int64_t x = 0; x < sub.extents[0]; ++x)
      for (int64_t y = 0; y < sub.extents[1]; ++y)
        for (int64_t z = 0; z < sub.extents[2]; ++z)
          out.at(c, box.lo[0] + x, box.lo[1] + y, box.lo[2] + z) = sub.at(c, x, y, z);
  return out;
}

void cmd_infer(const CommonFlags& f, bool allow_unnormalized, bool save_probs) {
  if (f.config.empty()) throw std::runtime_error("infer: --config (manifest) is required");
  if (f.data.empty()) throw std::runtime_error("infer: --data (case dir) is required");
  if (f.out.empty()) throw std::runtime_error("infer: --out is required");

  ModelSet set = load_model_set(f.config, f.threads, allow_unnormalized);
  const VolumeSet input = normalize(load_volume_set(f.data), set.stats);

  CascadeTrace trace;
  const LabelMap result = run_cascade(set.models, input, set.params, &trace);
  if (const fs::path parent = fs::path(f.out).parent_path(); !parent.empty())
    fs::create_directories(parent);
  write_avol(f.out, result);

  if (save_probs) {
    write_avol(f.out + ".wt_prob.avol", trace.wt_prob);
    if (trace.wt_box)
      write_avol(f.out + ".tc_prob.avol",
                 uncrop_prob(trace.tc_prob, *trace.wt_box, input.extents, input.spacing));
    if (trace.tc_box)
      write_avol(f.out + ".en_prob.avol",
                 uncrop_prob(trace.en_prob, *trace.tc_box, input.extents, input.spacing));
  }
}

struct RegionScores {
  std::vector<double> dice;
  std::vector<double> hausdorff;
  int64_t hausdorff_undefined = 0;
};

void print_summary_row(std::ostream& os, const std::string& region, const std::string& metric,
                       const ScoreSummary& s) {
  os << "summary," << region << "," << metric << "," << detail::fmt_double(s.mean) << ","
     << detail::fmt_double(s.stddev) << "," << detail::fmt_double(s.median) << ","
     << detail::fmt_double(s.q25) << "," << detail::fmt_double(s.q75) << "," << s.count << ","
     << s.undefined_count << "\n";
}

void cmd_evaluate(const CommonFlags& f, const std::string& pred_dir) {
  if (pred_dir.empty()) throw std::runtime_error("evaluate: --pred is required");
  if (f.data.empty()) throw std::runtime_error("evaluate: --data (ground truth dir) is required");
  if (f.out.empty()) throw std::runtime_error("evaluate: --out is required");

  const auto case_dirs = list_case_dirs(f.data);
  std::ostringstream csv;
  csv << "case,region,dice,hausdorff_mm\n";
  std::map<RegionId, RegionScores> scores;
  for (const auto& dir : case_dirs) {
    const std::string name = dir.filename().string();
    const LabelMap truth = load_case_labels(dir);
    const LabelMap pred = read_labels(fs::path(pred_dir) / (name + ".avol"));
    if (pred.extents != truth.extents)
      throw std::runtime_error("evaluate: prediction for " + name +
                               " disagrees with ground truth on extents");
    for (RegionId region : kAllRegions) {
      const BinaryMask pm = binarize_region(pred, region);
      const BinaryMask tm = binarize_region(truth, region);
      const double d = dice_score(pm, tm);
      const std::optional<double> h = hausdorff(pm, tm);
      auto& rs = scores[region];
      rs.dice.push_back(d);
      if (h) rs.hausdorff.push_back(*h);
      else ++rs.hausdorff_undefined;
      csv << name << "," << region_name(region) << "," << detail::fmt_double(d) << ",";
      if (h) csv << detail::fmt_double(*h);
      csv << "\n";
    }
  }
  csv << "summary,region,metric,mean,stddev,median,q25,q75,count,undefined\n";
  for (RegionId region : kAllRegions) {
    const auto& rs = scores[region];
    print_summary_row(csv, region_name(region), "dice", summarize(rs.dice));
    if (!rs.hausdorff.empty())
      print_summary_row(csv, region_name(region), "hausdorff_mm",
                        summarize(rs.hausdorff, rs.hausdorff_undefined));
    else
      csv << "summary," << region_name(region) << ",hausdorff_mm,,,,,,0,"
          << rs.hausdorff_undefined << "\n";
  }

  std::ofstream out(f.out);
  if (!out) throw std::runtime_error("cannot open for writing: " + f.out);
  out << csv.str();
  std::cout << csv.str();
}

void cmd_rf(const CommonFlags& f) {
  auto print_rf = [](const NetworkConfig& c) {
    const auto rf = receptive_field(c);
    std::cout << c.name << " " << rf[0] << " " << rf[1] << " " << rf[2] << "\n";
  };
  if (!f.config.empty()) {
    print_rf(parse_config(read_config(f.config)));
    return;
  }
  for (const char* name : {"wnet", "tnet", "enet"}) print_rf(canonical_config(name));
}

void cmd_render(const CommonFlags& f) {
  if (f.config.empty()) throw std::runtime_error("render: --config is required");
  if (f.data.empty()) throw std::runtime_error("render: --data (case dir) is required");
  if (f.out.empty()) throw std::runtime_error("render: --out is required");
  const auto kv = read_config(f.config);
  const std::string ctx = "render";

  const int64_t channel = modality_index(require_key(kv, "modality", ctx));
  const std::string& axis_s = require_key(kv, "axis", ctx);
  if (axis_s.size() != 1 || axis_s[0] < 'x' || axis_s[0] > 'z')
    throw std::runtime_error("render: axis must be x, y or z");
  const int axis = axis_s[0] - 'x';
  const int64_t slice = to_int(require_key(kv, "slice", ctx), "slice");

  const VolumeSet vols = load_volume_set(f.data);
  const LabelMap labels = find_key(kv, "labels")
                              ? read_labels(*find_key(kv, "labels"))
                              : load_case_labels(f.data);

  int64_t width = 0, height = 0;
  const auto rgb = render_slice(vols, channel, labels, axis, slice, width, height);
  write_png(f.out, width, height, rgb);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"triseg: cascaded anisotropic segmentation toolkit"};
  app.require_subcommand(1);

  CommonFlags f;
  std::string pred_dir;
  bool allow_unnormalized = false;
  bool save_probs = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "configuration file");
    sub->add_option("--data", f.data, "input directory or file");
    sub->add_option("--out", f.out, "output directory or file");
    sub->add_option("--seed", f.seed, "random seed");
    sub->add_option("--threads", f.threads, "worker threads (1 = deterministic test mode)");
    return sub;
  };

  auto* gen = add_common(app.add_subcommand("phantom-gen", "generate synthetic cases"));
  auto* train = add_common(app.add_subcommand("train", "train one stage/view network"));
  auto* infer = add_common(app.add_subcommand("infer", "run the cascade on one case"));
  infer->add_flag("--allow-unnormalized", allow_unnormalized,
                  "accept checkpoints without normalization statistics");
  infer->add_flag("--save-probs", save_probs, "also write per-stage probability volumes");
  auto* evaluate = add_common(app.add_subcommand("evaluate", "score predictions against truth"));
  evaluate->add_option("--pred", pred_dir, "directory of predicted label volumes");
  auto* rf = add_common(app.add_subcommand("rf", "print per-axis receptive fields"));
  auto* render = add_common(app.add_subcommand("render", "render a slice overlay PNG"));

  try {
    app.parse(argc, argv);
    if (gen->parsed()) cmd_phantom_gen(f);
    else if (train->parsed()) cmd_train(f);
    else if (infer->parsed()) cmd_infer(f, allow_unnormalized, save_probs);
    else if (evaluate->parsed()) cmd_evaluate(f, pred_dir);
    else if (rf->parsed()) cmd_rf(f);
    else if (render->parsed()) cmd_render(f);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
