// Release-gate checks. Each criterion prints exactly one [PASS]/[FAIL]
// line on stdout; progress notes go to stderr. Exit status is nonzero
// when any criterion fails. The long end-to-end experiment (criterion 6)
// produces the trained models reused by criteria 7 and 8.

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "triseg/adam.hpp"
#include "triseg/cascade.hpp"
#include "triseg/checkpoint.hpp"
#include "triseg/metrics.hpp"
#include "triseg/net.hpp"
#include "triseg/ops.hpp"
#include "triseg/phantom.hpp"
#include "triseg/regions.hpp"
#include "triseg/rng.hpp"
#include "triseg/tensor.hpp"
#include "triseg/train.hpp"
#include "triseg/views.hpp"
#include "triseg/volume.hpp"

namespace fs = std::filesystem;
using triseg::BinaryMask;
using triseg::BnMode;
using triseg::CascadeModels;
using triseg::CascadeParams;
using triseg::FloatVolume;
using triseg::LabelMap;
using triseg::Network;
using triseg::RegionId;
using triseg::Rng;
using triseg::Shape;
using triseg::Tensor;

namespace {

int g_failures = 0;
fs::path g_dir;  // scratch directory for files produced along the way

void report(int id, bool pass, const std::string& detail) {
  if (!pass) ++g_failures;
  std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
}

template <class F>
void criterion(int id, F&& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(id, false, std::string("exception: ") + e.what());
  }
}

void note(const std::string& msg) {
  std::fprintf(stderr, "  .. %s\n", msg.c_str());
  std::fflush(stderr);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_cli(const std::string& args, const fs::path& capture = {}) {
  std::string cmd = std::string(TRISEG_CLI_PATH) + " " + args;
  cmd += capture.empty() ? " > /dev/null 2>&1" : " > " + capture.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spew(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

// ---------------------------------------------------------------- 1

Tensor<double> rand_tensor(const Shape& shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from_data(shape, std::move(v));
}

// PReLU and max pooling have kinks; keep sampled values away from ties so
// the central difference stays valid at the fixed step size.
Tensor<double> rand_tensor_off_zero(const Shape& shape, uint64_t seed) {
  auto t = rand_tensor(shape, seed);
  for (auto& x : t.values_mut()) x = (x < 0 ? -1.0 : 1.0) * (0.1 + 0.9 * std::fabs(x));
  return t;
}

void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  int64_t coords = 0;
  auto run = [&](const std::string& name, const std::function<Tensor<double>()>& f,
                 std::vector<Tensor<double>> leaves, int64_t per_leaf) {
    const auto rep = gradcheck::check(f, std::move(leaves), per_leaf, 7);
    coords += rep.coords_checked;
    if (rep.max_rel_err > worst) {
      worst = rep.max_rel_err;
      worst_name = name + " (" + rep.worst + ")";
    }
  };

  auto square_sum = [](const Tensor<double>& y) { return triseg::sum(triseg::mul(y, y)); };

  for (int d = 1; d <= 3; ++d) {
    auto x = rand_tensor({1, 2, 5, 5, 3}, 100 + d);
    auto w = rand_tensor({2, 2, 3, 3, 1}, 110 + d);
    auto b = rand_tensor({2}, 120 + d);
    run("conv3x3x1 d" + std::to_string(d),
        [=]() {
          return square_sum(triseg::conv_aniso(x, w, b, triseg::KernelSpec::intra_slice(d)));
        },
        {x, w, b}, 12);
  }
  {
    auto x = rand_tensor({1, 2, 5, 5, 3}, 130);
    auto w = rand_tensor({2, 2, 1, 1, 3}, 131);
    auto b = rand_tensor({2}, 132);
    run("conv1x1x3",
        [=]() { return square_sum(triseg::conv_aniso(x, w, b, triseg::KernelSpec::inter_slice())); },
        {x, w, b}, 12);
  }
  {
    auto x = rand_tensor({2, 3, 4, 4, 3}, 140);
    auto gamma = rand_tensor({3}, 141, 0.5, 1.5);
    auto beta = rand_tensor({3}, 142);
    auto state = std::make_shared<triseg::BnState<double>>(3);
    run("batch_norm",
        [=]() {
          return triseg::sum(
              triseg::mul(triseg::batch_norm(x, gamma, beta, *state, BnMode::kTrain), x));
        },
        {x, gamma, beta}, 12);
  }
  {
    auto x = rand_tensor_off_zero({1, 2, 4, 4, 3}, 150);
    auto slope = rand_tensor({2}, 151, 0.1, 0.5);
    run("prelu", [=]() { return square_sum(triseg::prelu(x, slope)); }, {x, slope}, 16);
  }
  {
    auto x = rand_tensor({1, 2, 5, 6, 3}, 160);  // odd X exercises the pad
    run("max_pool", [=]() { return square_sum(triseg::downsample2d(x)); }, {x}, 24);
  }
  {
    auto x = rand_tensor({1, 2, 4, 4, 3}, 170);
    run("upsample", [=]() { return square_sum(triseg::upsample2d(x, 2)); }, {x}, 24);
  }
  {
    auto logits = rand_tensor({1, 2, 4, 4, 3}, 180);
    auto target = rand_tensor({1, 4, 4, 3}, 181, 0.0, 1.0);
    for (auto& v : target.values_mut()) v = v > 0.5 ? 1.0 : 0.0;
    run("softmax+dice_loss",
        [=]() { return triseg::dice_loss(triseg::softmax_channels(logits), target); }, {logits},
        24);
  }
  {
    auto a = rand_tensor({1, 2, 3, 3, 2}, 190);
    auto b = rand_tensor({1, 2, 3, 3, 2}, 191);
    run("residual_add", [=]() { return square_sum(triseg::add(a, b)); }, {a, b}, 12);
  }
  {
    auto a = rand_tensor({1, 2, 3, 3, 2}, 192);
    auto b = rand_tensor({1, 1, 3, 3, 2}, 193);
    run("concat",
        [=]() { return square_sum(triseg::concat_channels(std::vector<Tensor<double>>{a, b})); },
        {a, b}, 12);
  }
  {
    triseg::NetworkT<double> net(triseg::canonical_config("enet", 4), 9);
    // Pin the PReLU slopes to 1 so no activation has a kink: central
    // differences would straddle kinks somewhere in a whole-network
    // forward. The slope gradients themselves stay nontrivial, and the
    // dedicated prelu check above covers the nonlinear regime.
    for (auto& [name, p] : net.params())
      if (name.ends_with(".slope"))
        for (auto& v : p.values_mut()) v = 1.0;
    auto x = rand_tensor({1, 4, 8, 8, 5}, 200);
    auto target = rand_tensor({1, 8, 8, 5}, 201, 0.0, 1.0);
    for (auto& v : target.values_mut()) v = v > 0.5 ? 1.0 : 0.0;
    std::vector<Tensor<double>> leaves{x};
    for (auto& [name, p] : net.params()) leaves.push_back(p);
    run("enet_forward",
        [&net, x, target]() {
          return triseg::dice_loss(triseg::softmax_channels(net.forward(x, BnMode::kTrain)),
                                   target);
        },
        leaves, 3);
  }

  const double elapsed = seconds_since(t0);
  const bool pass = worst < 1e-4 && elapsed < 60.0;
  report(1, pass,
         "gradient suite: max rel err " + fmt(worst, 8) + " over " + std::to_string(coords) +
             " coords in " + fmt(elapsed, 1) + " s" + (pass ? "" : "; worst " + worst_name));
}

// ---------------------------------------------------------------- 2

void criterion_2() {
  // Run in double so the comparison measures the algorithm, not float
  // rounding: accumulating a hundred-odd taps in f32 alone can drift past
  // the 1e-6 budget.
  triseg::NoGradGuard guard;
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    Rng rng(40000 + trial);
    const int64_t B = 1 + rng.below(2);
    const int64_t Ci = 1 + rng.below(3), Co = 1 + rng.below(3);
    const int64_t X = 1 + rng.below(7), Y = 1 + rng.below(7), Z = 1 + rng.below(7);
    const triseg::KernelSpec spec = rng.coin(0.5)
                                        ? triseg::KernelSpec::intra_slice(1 + (int)rng.below(3))
                                        : triseg::KernelSpec::inter_slice();
    const auto [kx, ky, kz] = std::tuple{spec.kernel[0], spec.kernel[1], spec.kernel[2]};

    auto fill = [&](int64_t n) {
      std::vector<double> v(static_cast<size_t>(n));
      for (auto& x : v) x = rng.uniform(-1.0, 1.0);
      return v;
    };
    const auto xv = fill(B * Ci * X * Y * Z);
    const auto wv = fill(Co * Ci * kx * ky * kz);
    const auto bv = fill(Co);

    const auto y = triseg::conv_aniso(
        Tensor<double>::from_data({B, Ci, X, Y, Z}, std::vector<double>(xv)),
        Tensor<double>::from_data({Co, Ci, kx, ky, kz}, std::vector<double>(wv)),
        Tensor<double>::from_data({Co}, std::vector<double>(bv)), spec);

    const auto ref = oracle::conv_brute(xv, B, Ci, X, Y, Z, wv, Co, (int)kx, (int)ky, (int)kz,
                                        spec.dilation[0], spec.dilation[1], spec.dilation[2], bv);

    for (size_t i = 0; i < ref.size(); ++i)
      worst = std::max(worst, std::fabs(y.values()[i] - ref[i]));
  }
  report(2, worst <= 1e-6, "convolution vs nested-loop oracle: max abs err " + fmt(worst, 9) +
                               " over 200 cases");
}

// ---------------------------------------------------------------- 3

void criterion_3() {
  const fs::path out = g_dir / "rf.txt";
  if (run_cli("rf", out) != 0) {
    report(3, false, "rf subcommand exited nonzero");
    return;
  }
  std::ifstream in(out);
  std::string name;
  int64_t got[3][3];
  std::string names[3];
  for (int i = 0; i < 3; ++i)
    if (!(in >> names[i] >> got[i][0] >> got[i][1] >> got[i][2])) {
      report(3, false, "rf output was not three 'name x y z' lines");
      return;
    }

  bool ok = names[0] == "wnet" && names[1] == "tnet" && names[2] == "enet";
  for (int i = 0; i < 3; ++i) {
    const double lo = i < 2 ? 217.0 * 0.9 : 113.0 * 0.9;
    const double hi = i < 2 ? 217.0 * 1.1 : 113.0 * 1.1;
    ok = ok && got[i][2] == 9;                                        // out-plane exactly
    ok = ok && got[i][0] >= lo && got[i][0] <= hi && got[i][1] >= lo  // in-plane within 10%
         && got[i][1] <= hi;
    const int64_t frozen = i < 2 ? 220 : 122;  // values pinned at first audit
    ok = ok && got[i][0] == frozen && got[i][1] == frozen;
  }
  std::string vals;
  for (int i = 0; i < 3; ++i)
    vals += names[i] + " " + std::to_string(got[i][0]) + "x" + std::to_string(got[i][1]) + "x" +
            std::to_string(got[i][2]) + (i < 2 ? ", " : "");
  report(3, ok, "receptive fields " + vals + " (bounds 217/113 +-10%, out-plane 9)");
}

// ---------------------------------------------------------------- 4

void criterion_4() {
  const std::array<int64_t, 3> ext{8, 8, 8};
  int dice_mismatch = 0;
  double worst_hd = 0.0;
  int hd_convention_mismatch = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(50000 + trial);
    BinaryMask a(ext), b(ext);
    const double da = rng.uniform(0.05, 0.5), db = rng.uniform(0.05, 0.5);
    for (auto& v : a.voxels) v = rng.coin(da) ? 1 : 0;
    for (auto& v : b.voxels) v = rng.coin(db) ? 1 : 0;
    if (trial % 11 == 0) std::fill(a.voxels.begin(), a.voxels.end(), uint8_t(0));
    if (trial % 17 == 0) std::fill(b.voxels.begin(), b.voxels.end(), uint8_t(0));

    if (triseg::dice_score(a, b) != oracle::dice_brute(a.voxels, b.voxels)) ++dice_mismatch;

    const auto got = triseg::hausdorff(a, b);
    const auto ref = oracle::hausdorff_brute(a.voxels, b.voxels, ext[0], ext[1], ext[2], a.spacing);
    if (got.has_value() != ref.has_value())
      ++hd_convention_mismatch;
    else if (got)
      worst_hd = std::max(worst_hd, std::fabs(*got - *ref));
  }

  // the classic 3-4-5 right triangle: two single voxels 5 mm apart
  BinaryMask p({5, 6, 2}), q({5, 6, 2});
  p.at(0, 0, 0) = 1;
  q.at(3, 4, 0) = 1;
  const auto hd = triseg::hausdorff(p, q);
  const bool triangle_ok = hd && std::fabs(*hd - 5.0) < 1e-12;

  const bool pass =
      dice_mismatch == 0 && hd_convention_mismatch == 0 && worst_hd <= 1e-9 && triangle_ok;
  report(4, pass,
         "metrics vs brute force on 100 mask pairs: dice mismatches " +
             std::to_string(dice_mismatch) + ", max Hausdorff err " + fmt(worst_hd, 12) +
             ", 3-4-5 case " + (triangle_ok ? "= 5.0 mm" : "wrong"));
}

// ---------------------------------------------------------------- 5

void criterion_5() {
  int64_t violations = 0, bad_labels = 0, nonempty = 0;
  for (int trial = 0; trial < 50; ++trial) {
    triseg::PhantomParams pp;
    pp.extents = {24, 24, 16};
    pp.wt = {5.0, 7.0};
    pp.tc = {3.0, 4.0};
    pp.en = {1.5, 2.5};
    pp.min_wt_fraction = 0.002;
    pp.max_wt_fraction = 0.5;
    pp.seed = 500 + trial;
    auto [vols, truth] = triseg::phantom_generate(pp);
    const auto stats = triseg::compute_norm_stats({&vols});
    const auto norm = triseg::normalize(vols, stats);

    std::vector<Network> nets;
    nets.reserve(9);
    CascadeModels models;
    for (int s = 0; s < 3; ++s)
      for (int v = 0; v < 3; ++v) {
        const char* kind = s == 0 ? "wnet" : s == 1 ? "tnet" : "enet";
        nets.emplace_back(triseg::canonical_config(kind, 2), 7000 + trial * 9 + s * 3 + v);
        nets.back().set_identity_bn_stats();
      }
    for (int s = 0; s < 3; ++s)
      for (int v = 0; v < 3; ++v) models.stage(s)[v] = &nets[s * 3 + v];

    CascadeParams params;
    params.windows = {{{16, 16, 5}, {12, 12, 5}, {8, 8, 5}}};
    params.overlap = {4, 4, 2};
    params.margin = {2, 2, 1};
    const LabelMap out = triseg::run_cascade(models, norm, params);

    const BinaryMask wt = triseg::binarize_region(out, RegionId::kWholeTumor);
    const BinaryMask tc = triseg::binarize_region(out, RegionId::kTumorCore);
    const BinaryMask en = triseg::binarize_region(out, RegionId::kEnhancing);
    for (size_t i = 0; i < out.labels.size(); ++i) {
      const uint8_t l = out.labels[i];
      if (l != 0 && l != 1 && l != 2 && l != 4) ++bad_labels;
      if (en.voxels[i] && !tc.voxels[i]) ++violations;
      if (tc.voxels[i] && !wt.voxels[i]) ++violations;
    }
    if (wt.count() > 0) ++nonempty;
  }
  report(5, violations == 0 && bad_labels == 0,
         "nesting over 50 random-model inferences: " + std::to_string(violations) +
             " violations, " + std::to_string(bad_labels) + " invalid labels (" +
             std::to_string(nonempty) + " non-empty predictions)");
}

// ---------------------------------------------------------------- 6..8 shared state

struct Experiment {
  std::vector<Network> nets;  // stage-major: wnet a/s/c, tnet a/s/c, enet a/s/c
  triseg::NormStats stats;
  std::vector<FloatVolume> test_norm;
  std::vector<LabelMap> test_truth;
  std::vector<FloatVolume> train_norm;
  std::vector<LabelMap> train_truth;
  std::array<double, 3> fused_mean{};  // WT, TC, EN
  bool ready = false;

  CascadeModels models() {
    CascadeModels m;
    for (int s = 0; s < 3; ++s)
      for (int v = 0; v < 3; ++v) m.stage(s)[v] = &nets[s * 3 + v];
    return m;
  }
};

Experiment g_exp;

constexpr const char* kStageNames[3] = {"wnet", "tnet", "enet"};
constexpr std::array<std::array<int64_t, 3>, 3> kStagePatches{
    {{48, 48, 11}, {32, 32, 11}, {24, 24, 11}}};

triseg::TrainConfig experiment_config(int stage, int view) {
  triseg::TrainConfig cfg;
  cfg.stage = kStageNames[stage];
  cfg.view = triseg::view_name(triseg::kAllViews[view]);
  cfg.base_channels = 8;
  cfg.patch = kStagePatches[stage];
  cfg.batch = 5;
  cfg.iterations = 2000;
  cfg.seed = 1000 + stage * 10 + view;
  cfg.margin = {5, 5, 3};
  return cfg;
}

std::vector<triseg::PreparedCase> prepare_all(const Experiment& e, const triseg::TrainConfig& cfg,
                                              triseg::ViewId view) {
  std::vector<triseg::PreparedCase> cases;
  cases.reserve(e.train_norm.size());
  for (size_t i = 0; i < e.train_norm.size(); ++i)
    cases.push_back(
        triseg::prepare_case(e.train_norm[i], e.train_truth[i], cfg.stage, view, cfg.margin));
  return cases;
}

std::array<double, 3> mean_region_dice(Experiment& e, const CascadeParams& params) {
  std::array<double, 3> sums{};
  for (size_t i = 0; i < e.test_norm.size(); ++i) {
    const LabelMap pred = triseg::run_cascade(e.models(), e.test_norm[i], params);
    for (int r = 0; r < 3; ++r)
      sums[r] += triseg::dice_score(triseg::binarize_region(pred, triseg::kAllRegions[r]),
                                    triseg::binarize_region(e.test_truth[i], triseg::kAllRegions[r]));
  }
  for (auto& s : sums) s /= static_cast<double>(e.test_norm.size());
  return sums;
}

triseg::CheckpointExtras experiment_extras(const triseg::TrainConfig& cfg) {
  triseg::CheckpointExtras ex;
  ex.iteration = cfg.iterations;
  ex.normalized = true;
  ex.norm = g_exp.stats;
  return ex;
}

void criterion_6() {
  const auto t0 = std::chrono::steady_clock::now();

  // 25 phantoms with fixed seeds: 20 train, 5 test
  std::vector<FloatVolume> raw;
  std::vector<LabelMap> truth;
  for (uint64_t seed = 1; seed <= 25; ++seed) {
    triseg::PhantomParams pp;
    pp.seed = seed;
    auto [v, l] = triseg::phantom_generate(pp);
    raw.push_back(std::move(v));
    truth.push_back(std::move(l));
  }
  std::vector<const FloatVolume*> train_ptrs;
  for (size_t i = 0; i < 20; ++i) train_ptrs.push_back(&raw[i]);
  g_exp.stats = triseg::compute_norm_stats(train_ptrs);
  for (size_t i = 0; i < raw.size(); ++i) {
    auto norm = triseg::normalize(raw[i], g_exp.stats);
    if (i < 20) {
      g_exp.train_norm.push_back(std::move(norm));
      g_exp.train_truth.push_back(truth[i]);
    } else {
      g_exp.test_norm.push_back(std::move(norm));
      g_exp.test_truth.push_back(truth[i]);
    }
  }
  raw.clear();
  note("c6: 25 phantoms generated and normalized in " + fmt(seconds_since(t0), 1) + " s");

  // Train the nine networks, as many in parallel as the hardware offers
  // (each network itself trains on one thread, so the per-network result
  // is identical to a serial run).
  g_exp.nets.reserve(9);
  for (int s = 0; s < 3; ++s)
    for (int v = 0; v < 3; ++v) {
      const auto cfg = experiment_config(s, v);
      g_exp.nets.emplace_back(triseg::canonical_config(cfg.stage, cfg.base_channels), cfg.seed);
    }
  const unsigned workers =
      std::max(1u, std::min(4u, std::thread::hardware_concurrency()));
  std::atomic<int> next_job{0};
  std::mutex note_mutex;
  std::array<double, 9> job_seconds{};
  auto worker = [&]() {
    for (int k = next_job.fetch_add(1); k < 9; k = next_job.fetch_add(1)) {
      const int s = k / 3, v = k % 3;
      const auto tn0 = std::chrono::steady_clock::now();
      const auto cfg = experiment_config(s, v);
      const auto cases = prepare_all(g_exp, cfg, triseg::kAllViews[v]);
      triseg::Adam adam(g_exp.nets[k].params(), cfg.adam);
      const auto result = triseg::train_network(g_exp.nets[k], adam, cases, cfg);
      if (s == 2 && v == 0)  // kept for the determinism check (criterion 8)
        triseg::save_checkpoint(g_dir / "c6_enet_axial.ckpt", g_exp.nets[k],
                                experiment_extras(cfg), &adam);
      job_seconds[k] = seconds_since(tn0);
      std::lock_guard<std::mutex> lock(note_mutex);
      note("c6: trained " + cfg.stage + "/" + cfg.view + " in " + fmt(job_seconds[k], 1) +
           " s, final loss " + fmt(result.losses.back(), 3) + ", rejected " +
           std::to_string(result.rejected_steps));
    }
  };
  const auto train0 = std::chrono::steady_clock::now();
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  const double train_wall = seconds_since(train0);

  // fused three-view inference on the held-out cases
  g_exp.fused_mean = mean_region_dice(g_exp, CascadeParams{});
  g_exp.ready = true;

  // The 45 minute budget is defined for a 4-core desktop CPU. A machine with
  // at least 4 cores answers that directly with its measured wall time. On a
  // smaller machine, schedule the measured per-network times onto 4 workers
  // (the same greedy order the pool uses) and add the non-training overhead;
  // the result is what the pool would take with the budgeted core count.
  const double elapsed = seconds_since(t0);
  double wall_for_budget = elapsed;
  std::string wall_text =
      "wall " + fmt(elapsed / 60.0, 1) + " min on " + std::to_string(workers) + " worker(s)";
  if (std::thread::hardware_concurrency() < 4) {
    std::array<double, 4> avail{};
    for (double d : job_seconds) *std::min_element(avail.begin(), avail.end()) += d;
    const double makespan = *std::max_element(avail.begin(), avail.end());
    wall_for_budget = (elapsed - train_wall) + makespan;
    wall_text += ", projected 4-core wall " + fmt(wall_for_budget / 60.0, 1) + " min";
  }
  const bool pass = g_exp.fused_mean[0] >= 0.80 && g_exp.fused_mean[1] >= 0.70 &&
                    g_exp.fused_mean[2] >= 0.60 && wall_for_budget < 45.0 * 60.0;
  report(6, pass,
         "end-to-end: mean test Dice WT " + fmt(g_exp.fused_mean[0], 3) + " TC " +
             fmt(g_exp.fused_mean[1], 3) + " EN " + fmt(g_exp.fused_mean[2], 3) +
             " (thresholds 0.80/0.70/0.60, budget 45 min on 4 cores), " + wall_text);
}

// ---------------------------------------------------------------- 7

void criterion_7() {
  if (!g_exp.ready) {
    report(7, false, "skipped: criterion 6 experiment unavailable");
    return;
  }
  CascadeParams axial_only;
  axial_only.view_weights = {1.0, 0.0, 0.0};
  const auto axial = mean_region_dice(g_exp, axial_only);

  bool no_regression = true, strictly_better = false;
  for (int r = 0; r < 3; ++r) {
    no_regression = no_regression && g_exp.fused_mean[r] >= axial[r] - 0.01;
    strictly_better = strictly_better || g_exp.fused_mean[r] > axial[r];
  }
  report(7, no_regression && strictly_better,
         "fusion direction: axial-only WT/TC/EN " + fmt(axial[0], 3) + "/" + fmt(axial[1], 3) +
             "/" + fmt(axial[2], 3) + " vs fused " + fmt(g_exp.fused_mean[0], 3) + "/" +
             fmt(g_exp.fused_mean[1], 3) + "/" + fmt(g_exp.fused_mean[2], 3));
}

// ---------------------------------------------------------------- 8

void criterion_8() {
  if (!g_exp.ready) {
    report(8, false, "skipped: criterion 6 experiment unavailable");
    return;
  }
  // retrain one (stage, view) of the experiment with the same seed
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = experiment_config(2, 0);  // enet axial, the cheapest
  const auto cases = prepare_all(g_exp, cfg, triseg::ViewId::kAxial);
  Network net(triseg::canonical_config(cfg.stage, cfg.base_channels), cfg.seed);
  triseg::Adam adam(net.params(), cfg.adam);
  triseg::train_network(net, adam, cases, cfg);
  triseg::save_checkpoint(g_dir / "c8_retrain.ckpt", net, experiment_extras(cfg), &adam);
  const bool ckpt_same = slurp(g_dir / "c6_enet_axial.ckpt") == slurp(g_dir / "c8_retrain.ckpt");
  note("c8: retrained enet/axial in " + fmt(seconds_since(t0), 1) + " s");

  // repeated single-thread inference must serialize identically
  CascadeParams params;  // threads defaults to 1
  triseg::write_avol(g_dir / "c8_a.avol", triseg::run_cascade(g_exp.models(), g_exp.test_norm[0], params));
  triseg::write_avol(g_dir / "c8_b.avol", triseg::run_cascade(g_exp.models(), g_exp.test_norm[0], params));
  const bool label_same = slurp(g_dir / "c8_a.avol") == slurp(g_dir / "c8_b.avol");

  report(8, ckpt_same && label_same,
         std::string("determinism: retrained checkpoint ") +
             (ckpt_same ? "byte-identical" : "differs") + ", repeated inference labels " +
             (label_same ? "byte-identical" : "differ"));
}

// ---------------------------------------------------------------- 9

void criterion_9() {
  std::string detail;
  bool pass = true;
  auto check = [&](bool ok, const std::string& what) {
    pass = pass && ok;
    if (!ok) detail += (detail.empty() ? "" : "; ") + what + " FAILED";
  };

  // volume round trip: save, load, save again, byte-identical
  {
    Rng rng(90001);
    FloatVolume v(4, {7, 6, 5}, {1.0, 1.0, 6.0});
    for (auto& x : v.data) x = static_cast<float>(rng.uniform(-2.0, 2.0));
    triseg::write_avol(g_dir / "v1.avol", v);
    triseg::write_avol(g_dir / "v2.avol", triseg::read_float_volume(g_dir / "v1.avol"));
    check(slurp(g_dir / "v1.avol") == slurp(g_dir / "v2.avol"), "float volume round trip");

    LabelMap m({7, 6, 5});
    const uint8_t legal[4] = {0, 1, 2, 4};
    for (auto& x : m.labels) x = legal[rng.below(4)];
    triseg::write_avol(g_dir / "m1.avol", m);
    triseg::write_avol(g_dir / "m2.avol", triseg::read_labels(g_dir / "m1.avol"));
    check(slurp(g_dir / "m1.avol") == slurp(g_dir / "m2.avol"), "label volume round trip");
  }

  // checkpoint round trip: load, restore optimizer, save, byte-identical
  const fs::path ckpt = g_dir / "c9.ckpt";
  {
    Network net(triseg::canonical_config("tnet", 2), 23);
    triseg::Adam adam(net.params(), {});
    triseg::PhantomParams pp;
    pp.seed = 3;
    auto [vols, labels] = triseg::phantom_generate(pp);
    const auto stats = triseg::compute_norm_stats({&vols});
    triseg::TrainConfig cfg;
    cfg.stage = "tnet";
    cfg.base_channels = 2;
    cfg.patch = {12, 12, 5};
    cfg.batch = 2;
    cfg.iterations = 3;
    std::vector<triseg::PreparedCase> cases;
    cases.push_back(triseg::prepare_case(triseg::normalize(vols, stats), labels, "tnet",
                                         triseg::ViewId::kAxial, cfg.margin));
    triseg::train_network(net, adam, cases, cfg);
    triseg::CheckpointExtras ex;
    ex.iteration = 3;
    ex.normalized = true;
    ex.norm = stats;
    triseg::save_checkpoint(ckpt, net, ex, &adam);

    auto lc = triseg::load_checkpoint<float>(ckpt);
    triseg::Adam re(lc.net.params(), {});
    for (size_t i = 0; i < lc.adam_m.size(); ++i)
      re.restore(lc.adam_step, i, lc.adam_m[i], lc.adam_v[i]);
    triseg::save_checkpoint(g_dir / "c9_resaved.ckpt", lc.net, lc.extras, &re);
    check(slurp(ckpt) == slurp(g_dir / "c9_resaved.ckpt"), "checkpoint round trip");
  }

  // corrupted magic and length fields must be rejected with nonzero exit
  {
    triseg::PhantomParams pp;
    pp.extents = {16, 16, 16};
    pp.wt = {3.5, 4.5};
    pp.tc = {2.0, 2.8};
    pp.en = {1.0, 1.5};
    pp.min_wt_fraction = 0.002;
    pp.max_wt_fraction = 0.6;
    pp.seed = 11;
    auto [vols, labels] = triseg::phantom_generate(pp);
    const fs::path case_dir = g_dir / "c9_case";
    triseg::save_case(case_dir, vols, labels);
    std::ofstream(g_dir / "render.cfg") << "modality=t1\naxis=z\nslice=8\n";

    auto corrupt = [&](const fs::path& src, const fs::path& dst, size_t offset,
                       std::initializer_list<unsigned char> bytes) {
      auto data = slurp(src);
      size_t i = offset;
      for (unsigned char b : bytes) data[i++] = static_cast<char>(b);
      spew(dst, data);
    };

    corrupt(case_dir / "t1.avol", case_dir / "t1.avol", 0, {'Z'});
    check(run_cli("render --config " + (g_dir / "render.cfg").string() + " --data " +
                  case_dir.string() + " --out " + (g_dir / "c9.png").string()) != 0,
          "corrupted volume magic rejected");

    triseg::write_avol(case_dir / "t1.avol", vols);  // restore, then break the length field
    corrupt(case_dir / "t1.avol", case_dir / "t1.avol", 8, {0xff, 0xff, 0xff, 0x7f});
    check(run_cli("render --config " + (g_dir / "render.cfg").string() + " --data " +
                  case_dir.string() + " --out " + (g_dir / "c9.png").string()) != 0,
          "corrupted volume length rejected");
    triseg::write_avol(case_dir / "t1.avol", vols);

    std::ostringstream manifest;
    for (const char* stage : {"wnet", "tnet", "enet"})
      for (const char* view : {"axial", "sagittal", "coronal"})
        manifest << "checkpoint." << stage << "." << view << "="
                 << (g_dir / "c9_broken.ckpt").string() << "\n";
    std::ofstream(g_dir / "manifest.cfg") << manifest.str();

    corrupt(ckpt, g_dir / "c9_broken.ckpt", 0, {'Z'});
    check(run_cli("infer --config " + (g_dir / "manifest.cfg").string() + " --data " +
                  case_dir.string() + " --out " + (g_dir / "c9_pred.avol").string()) != 0,
          "corrupted checkpoint magic rejected");

    corrupt(ckpt, g_dir / "c9_broken.ckpt", 8, {0xff, 0xff, 0xff, 0x7f});
    check(run_cli("infer --config " + (g_dir / "manifest.cfg").string() + " --data " +
                  case_dir.string() + " --out " + (g_dir / "c9_pred.avol").string()) != 0,
          "corrupted checkpoint length rejected");
  }

  report(9, pass,
         pass ? "persistence: round trips byte-identical, corrupted magic/length rejected"
              : "persistence: " + detail);
}

}  // namespace

// With no arguments every criterion runs in order; passing criterion
// numbers restricts the run (7 and 8 need 6 in the same invocation).
int main(int argc, char** argv) {
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));
  const auto enabled = [&](int id) {
    return wanted.empty() || std::find(wanted.begin(), wanted.end(), id) != wanted.end();
  };

  g_dir = fs::temp_directory_path() / ("triseg_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(g_dir);

  if (enabled(1)) criterion(1, criterion_1);
  if (enabled(2)) criterion(2, criterion_2);
  if (enabled(3)) criterion(3, criterion_3);
  if (enabled(4)) criterion(4, criterion_4);
  if (enabled(5)) criterion(5, criterion_5);
  if (enabled(6)) criterion(6, criterion_6);
  if (enabled(7)) criterion(7, criterion_7);
  if (enabled(8)) criterion(8, criterion_8);
  if (enabled(9)) criterion(9, criterion_9);

  fs::remove_all(g_dir);
  return g_failures == 0 ? 0 : 1;
}
