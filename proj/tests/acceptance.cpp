// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.

#include "oracles.hpp"

#include "cgrseg/blocks.hpp"
#include "cgrseg/cli.hpp"
#include "cgrseg/flops.hpp"
#include "cgrseg/gradcheck.hpp"
#include "cgrseg/io.hpp"
#include "cgrseg/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>

using namespace cgr;
using oracle::random_tensor;
using oracle::rel_diff;

namespace {

constexpr double kGradTol = 1e-4;
constexpr int kGradSamples = 20;
constexpr double kGradBudgetSeconds = 300.0;
constexpr double kKernelTol = 1e-9;
constexpr int kMinKernelCases = 100;
constexpr double kIdentityTol = 1e-12;
constexpr Index kFlopsSide = 512;
constexpr double kTargetMiou = 0.90;
constexpr Index kMaxSteps = 2000;
constexpr double kTrainBudgetSeconds = 900.0;
constexpr double kFocusRatio = 1.1;
constexpr int kFocusSamples = 20;
constexpr const char* kFocusStage = "sfr.s8";

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string data(const std::string& name) { return std::string(CGRSEG_TEST_DATA) + "/" + name; }

// Training runs are shared between criteria 5-8.
struct Trained {
  TrainResult result;
  double seconds;
};

std::map<RcaVariant, std::optional<Trained>> g_runs;

Trained& default_run(RcaVariant variant) {
  auto& slot = g_runs[variant];
  if (!slot) {
    ModelConfig mcfg;
    mcfg.rca_variant = variant;
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult r = train_toy(TrainConfig{}, mcfg);
    slot = Trained{std::move(r), seconds_since(t0)};
  }
  return *slot;
}

Outcome gradients() {
  GradCheckOptions opt;
  opt.samples = kGradSamples;
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = run_gradcheck_suite(0, opt);
  const double secs = seconds_since(t0);
  bool ok = secs < kGradBudgetSeconds;
  std::string detail;
  std::set<std::string> blocks;
  for (const auto& c : checks) {
    ok = ok && c.result.max_rel_error <= kGradTol && c.result.checked >= kGradSamples;
    blocks.insert(c.block);
    detail += fmt("%s=%.1e(%d) ", c.block.c_str(), c.result.max_rel_error, c.result.checked);
  }
  ok = ok && blocks == std::set<std::string>{"rca", "rcm.add", "rcm.mul", "dpg_head", "model"};
  return {ok, detail + fmt("eps=%.0e tol=%.0e time=%.2fs", opt.eps, kGradTol, secs)};
}

Outcome kernels() {
  Rng rng(2024);
  double worst = 0.0;
  int cases = 0;
  std::map<std::string, int> kinds;
  for (int i = 0; i < 140; ++i) {
    const oracle::ConvCase c = oracle::conv_case(i, rng);
    const Tensor y = conv2d(c.x, c.w, &c.bias, c.opt);
    worst = std::max(worst, rel_diff(y, oracle::conv2d(c.x, c.w, &c.bias, c.opt)));
    const Tensor g = random_tensor(y.shape(), rng);
    const auto got = conv2d_backward(c.x, c.w, true, g, c.opt);
    const auto want = oracle::conv2d_backward(c.x, c.w, g, c.opt);
    worst = std::max({worst, rel_diff(got.input, want.input), rel_diff(got.weight, want.weight),
                      rel_diff(got.bias, want.bias)});
    ++kinds[c.kind];
    ++cases;
  }
  for (int i = 0; i < 110; ++i) {
    const Index m = rng.uniform_int(1, 12), k = rng.uniform_int(1, 12), p = rng.uniform_int(1, 12);
    const Tensor a = random_tensor(Shape{1, m, k, 1}, rng), b = random_tensor(Shape{1, k, p, 1}, rng);
    worst = std::max(worst, rel_diff(matmul(a, b), oracle::matmul(a, b)));
    ++cases;
  }
  for (int i = 0; i < 110; ++i) {
    Shape sa, sb;
    for (int ax = 0; ax < 4; ++ax) {
      const Index d = rng.uniform_int(1, 5);
      sa[ax] = rng.uniform_int(0, 2) == 0 ? 1 : d;
      sb[ax] = rng.uniform_int(0, 2) == 0 ? 1 : d;
    }
    const Tensor a = random_tensor(sa, rng), b = random_tensor(sb, rng);
    worst = std::max({worst, rel_diff(add_broadcast(a, b), oracle::broadcast(a, b, std::plus<>())),
                      rel_diff(mul_hadamard(a, b), oracle::broadcast(a, b, std::multiplies<>()))});
    ++cases;
  }
  const bool covered = kinds["depthwise"] > 0 && kinds["strip1x11"] > 0 && kinds["strip11x1"] > 0 &&
                       kinds["pointwise"] > 0;
  return {covered && cases >= kMinKernelCases && worst <= kKernelTol,
          fmt("cases=%d (conv 140 incl. depthwise %d, 1x11 %d, 11x1 %d, 1x1 %d) max_rel=%.1e tol=%.0e", cases,
              kinds["depthwise"], kinds["strip1x11"], kinds["strip11x1"], kinds["pointwise"], worst, kKernelTol)};
}

Outcome identities() {
  Rng rng(7);
  std::vector<NamedTensor> named;

  // RCM with a zero output layer returns its input.
  double rcm_dev = 0.0;
  for (RcaVariant v : {RcaVariant::add, RcaVariant::mul}) {
    for (NormMode mode : {NormMode::eval, NormMode::train}) {
      RcmParams p = RcmParams::init(8, 11, 3, 4, rng);
      named.clear();
      visit_params(p, "rcm", [&](const std::string& n, Tensor& t, ParamKind k) { named.push_back({n, &t, k}); });
      randomize_params(named, rng.next_u64());
      p.mlp_w2 = Tensor::zeros(p.mlp_w2.shape());
      p.mlp_b2 = Tensor::zeros(p.mlp_b2.shape());
      const Tensor x = random_tensor(Shape{2, 8, 9, 13}, rng);
      Tape tape;
      const Tensor y = rcm_forward(tape.constant(x), p, {v, mode}).value();
      rcm_dev = std::max(rcm_dev, (y.data() - x.data()).cwiseAbs().maxCoeff());
    }
  }

  // Pre-calibration context is a row term plus a column term.
  double sep_dev = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const Shape s{2, 3, rng.uniform_int(3, 17), rng.uniform_int(3, 17)};
    const Tensor x = random_tensor(s, rng);
    Tape tape;
    const Tensor a = axial_context(tape.constant(x), RcaVariant::add).value();
    for (Index n = 0; n < s.n; ++n)
      for (Index c = 0; c < s.c; ++c)
        for (Index h = 0; h < s.h; ++h)
          for (Index w = 0; w < s.w; ++w) {
            double r = 0.0, col = 0.0;
            for (Index j = 0; j < s.w; ++j) r += x(n, c, h, j);
            for (Index i = 0; i < s.h; ++i) col += x(n, c, i, w);
            sep_dev = std::max(sep_dev, std::abs(a(n, c, h, w) - (r / double(s.w) + col / double(s.h))));
          }
  }

  // Class embedding is a distribution over classes.
  double embed_dev = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    DpgParams p = DpgParams::init(6, 16, 4, rng);
    named.clear();
    visit_params(p, "dpg", [&](const std::string& n, Tensor& t, ParamKind k) { named.push_back({n, &t, k}); });
    randomize_params(named, rng.next_u64());
    const Tensor fx = random_tensor(Shape{1, 16, 8, 8}, rng, -2.0, 2.0);
    Tape tape;
    const Tensor e = dpg_class_embed(dpg_prototype(tape.constant(fx), p), p).value();
    embed_dev = std::max(embed_dev, std::abs(e.data().sum() - 1.0));
  }

  // split(concat(xs)) == xs bit for bit.
  bool round_trip = true;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> parts;
    std::vector<Index> sizes;
    const Index n = rng.uniform_int(1, 3), h = rng.uniform_int(1, 6), w = rng.uniform_int(1, 6);
    for (Index k = rng.uniform_int(1, 4); k > 0; --k) {
      sizes.push_back(rng.uniform_int(1, 5));
      parts.push_back(random_tensor(Shape{n, sizes.back(), h, w}, rng));
    }
    const auto back = split_channels(concat_channels(std::span<const Tensor>(parts)), std::span<const Index>(sizes));
    for (std::size_t i = 0; i < parts.size(); ++i) {
      round_trip = round_trip && back[i].shape() == parts[i].shape() && back[i].data() == parts[i].data();
    }
  }

  const bool ok = rcm_dev == 0.0 && sep_dev <= kIdentityTol && embed_dev <= kIdentityTol && round_trip;
  return {ok, fmt("rcm_identity_dev=%.1e separable_dev=%.1e embed_sum_dev=%.1e split_concat=%s tol=%.0e", rcm_dev,
                  sep_dev, embed_dev, round_trip ? "exact" : "MISMATCH", kIdentityTol)};
}

Outcome flops() {
  const ModelConfig cfg;
  const FlopsReport a = count_flops(cfg, kFlopsSide, kFlopsSide);
  const FlopsReport b = count_flops(cfg, 2 * kFlopsSide, 2 * kFlopsSide);
  const std::int64_t want = oracle::tiny_closed_form(kFlopsSide);
  std::int64_t spatial_a = 0, spatial_b = 0, fc = 0;
  for (const auto& e : a.entries) {
    spatial_a += e.conv_macs + e.matmul_macs;
    fc += e.fc_macs;
  }
  for (const auto& e : b.entries) spatial_b += e.conv_macs + e.matmul_macs;
  const bool ok = a.total_macs() == want && spatial_b == 4 * spatial_a &&
                  b.total_macs() == 4 * a.total_macs() - 3 * fc;
  return {ok, fmt("macs@512=%lld closed_form=%lld macs@1024=%lld spatial_ratio=%.6f total_ratio=%.9f "
                  "(fixed per-image fc macs=%lld)",
                  static_cast<long long>(a.total_macs()), static_cast<long long>(want),
                  static_cast<long long>(b.total_macs()), double(spatial_b) / double(spatial_a),
                  double(b.total_macs()) / double(a.total_macs()), static_cast<long long>(fc))};
}

Outcome training() {
  const TrainConfig cfg;
  Trained& first = default_run(RcaVariant::add);
  const TrainResult second = train_toy(cfg, ModelConfig{});
  const bool same = first.result.log == second.log;
  const double m = first.result.final_miou;
  const bool ok = m >= kTargetMiou && cfg.steps <= kMaxSteps && first.seconds < kTrainBudgetSeconds && same;
  return {ok, fmt("miou=%.4f target=%.2f steps=%lld time=%.0fs budget=%.0fs log_reproducible=%s", m, kTargetMiou,
                  static_cast<long long>(cfg.steps), first.seconds, kTrainBudgetSeconds, same ? "yes" : "NO")};
}

Outcome attention_focus() {
  Trained& run = default_run(RcaVariant::add);
  const ModelConfig mcfg;
  // Per-sample means inside and outside the foreground, averaged over samples.
  double mi = 0.0, mo = 0.0;
  for (int i = 0; i < kFocusSamples; ++i) {
    const ToySample s = heldout_sample(1000 + i, mcfg.input_h, mcfg.input_w, mcfg.num_classes);
    const Tensor a = calibrated_attention(s.image, run.result.params, mcfg, kFocusStage);
    double inside = 0.0, outside = 0.0;
    std::int64_t n_in = 0, n_out = 0;
    for (Index y = 0; y < mcfg.input_h; ++y)
      for (Index x = 0; x < mcfg.input_w; ++x) {
        const bool fg = s.mask(y, x) != 0;
        (fg ? inside : outside) += a(0, 0, y, x);
        ++(fg ? n_in : n_out);
      }
    mi += inside / double(n_in) / kFocusSamples;
    mo += outside / double(n_out) / kFocusSamples;
  }
  return {mi >= kFocusRatio * mo,
          fmt("stage=%s mean_fg=%.4f mean_bg=%.4f ratio=%.3f target=%.2f samples=%d", kFocusStage, mi, mo, mi / mo,
              kFocusRatio, kFocusSamples)};
}

Outcome variants() {
  const double add = default_run(RcaVariant::add).result.final_loss;
  const Trained& mul = default_run(RcaVariant::mul);
  const bool ok = std::isfinite(add) && std::isfinite(mul.result.final_loss);
  return {ok, fmt("add: loss=%.4f miou=%.4f  mul: loss=%.4f miou=%.4f", add, default_run(RcaVariant::add).result.final_miou,
                  mul.result.final_loss, mul.result.final_miou)};
}

Outcome round_trips() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "cgrseg_acceptance";
  fs::create_directories(dir);
  const std::string w1 = (dir / "a.cgrw").string(), w2 = (dir / "b.cgrw").string();
  ModelParams& trained = default_run(RcaVariant::add).result.params;
  save_weights(trained, w1);
  ModelParams reloaded = ModelParams::init(ModelConfig{}, 123);
  load_weights(reloaded, w1);
  save_weights(reloaded, w2);
  const bool weights_ok = read_file(w1) == read_file(w2);

  bool images_ok = true;
  for (const char* name : {"fixture.ppm", "fixture_golden.pgm"}) {
    const std::string bytes = read_file(data(name));
    images_ok = images_ok && encode_pnm(decode_pnm(bytes)) == bytes;
  }
  const Tensor img = read_ppm(data("fixture.ppm"));
  images_ok = images_ok && encode_pnm(tensor_to_image(img)) == read_file(data("fixture.ppm"));

  const std::string mask = (dir / "mask.pgm").string();
  const std::vector<std::string> args{"cgrseg", "--config", data("fixture.json"), "infer", "--weights",
                                      data("fixture.cgrw"), "--image", data("fixture.ppm"), "--out", mask};
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  const bool golden_ok = code == kExitOk && read_file(mask) == read_file(data("fixture_golden.pgm"));
  return {weights_ok && images_ok && golden_ok,
          fmt("weights=%s pnm=%s infer_golden=%s", weights_ok ? "identical" : "DIFFER", images_ok ? "identical" : "DIFFER",
              golden_ok ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, gradients}, {2, kernels}, {3, identities}, {4, flops},
      {5, training},  {6, attention_focus}, {7, variants}, {8, round_trips}};
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& [id, run] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    Outcome o{false, ""};
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %d: %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
