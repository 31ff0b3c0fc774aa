#include "cgrseg/cli.hpp"

#include "cgrseg/config.hpp"
#include "cgrseg/flops.hpp"
#include "cgrseg/gradcheck.hpp"
#include "cgrseg/io.hpp"
#include "cgrseg/train.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>

namespace cgr {

namespace {

constexpr double kGradTolerance = 1e-4;

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
  if (g.seed) cfg.train.seed = *g.seed;
  return cfg;
}

std::pair<Index, Index> parse_size(const std::string& text) {
  const auto x = text.find('x');
  Index h = 0, w = 0;
  try {
    if (x == std::string::npos) throw std::invalid_argument("no x");
    std::size_t used = 0;
    h = std::stoll(text.substr(0, x), &used);
    if (used != x) throw std::invalid_argument("junk");
    w = std::stoll(text.substr(x + 1), &used);
    if (used != text.size() - x - 1) throw std::invalid_argument("junk");
  } catch (const std::logic_error&) {
    throw Error("--size expects HxW, got '" + text + "'");
  }
  validate_input_size(h, w);
  return {h, w};
}

std::string fmt(const char* format, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

int cmd_flops(const GlobalOptions& g, const std::string& size, std::ostream& out) {
  const RunConfig cfg = resolve_config(g);
  Index h = cfg.model.input_h, w = cfg.model.input_w;
  if (!size.empty()) std::tie(h, w) = parse_size(size);
  const FlopsReport r = count_flops(cfg.model, h, w);
  out << "input " << h << "x" << w << "\n";
  out << fmt("%-26s %14s %14s %10s %8s\n", "module", "macs", "2*macs", "params", "buffers");
  for (const auto& e : r.entries) {
    out << fmt("%-26s %14lld %14lld %10lld %8lld\n", e.name.c_str(), static_cast<long long>(e.macs()),
               static_cast<long long>(2 * e.macs()), static_cast<long long>(e.params),
               static_cast<long long>(e.buffers));
  }
  out << fmt("%-26s %14lld %14lld %10lld %8lld\n", "total", static_cast<long long>(r.total_macs()),
             static_cast<long long>(2 * r.total_macs()), static_cast<long long>(r.total_params()),
             static_cast<long long>(r.total_buffers()));
  out << "elementwise ops (not in macs): " << r.total_elementwise() << "\n";
  return kExitOk;
}

int cmd_gradcheck(const GlobalOptions& g, const std::string& corrupt, int samples, std::ostream& out,
                  std::ostream& err) {
  const RunConfig cfg = resolve_config(g);
  GradCheckOptions opt;
  opt.seed = cfg.train.seed;
  opt.samples = samples;
  opt.corrupt = corrupt;
  bool ok = true;
  for (const auto& c : run_gradcheck_suite(cfg.train.seed, opt)) {
    const bool pass = c.result.max_rel_error <= kGradTolerance;
    ok = ok && pass;
    out << fmt("%-9s max_rel_err=%.3e worst=%s[%lld] checked=%d %s\n", c.block.c_str(), c.result.max_rel_error,
               c.result.worst_name.c_str(), static_cast<long long>(c.result.worst_index), c.result.checked,
               pass ? "PASS" : "FAIL");
    if (!pass) err << "gradcheck: " << c.block << " fails at parameter " << c.result.worst_name << "\n";
  }
  return ok ? kExitOk : kExitNumerical;
}

int cmd_train(const GlobalOptions& g, const std::string& weights, std::string log_path, std::ostream& out) {
  const RunConfig cfg = resolve_config(g);
  if (log_path.empty()) log_path = weights + ".log";
  std::string log;
  try {
    TrainResult r = train_toy(cfg.train, cfg.model, [&](const std::string& line) {
      log += line;
      log += '\n';
      if (line.find("miou=") != std::string::npos) out << line << "\n" << std::flush;
    });
    save_weights(r.params, weights);
    write_file(log_path, log);
    out << fmt("final miou=%.4f\n", r.final_miou);
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(weights, ec);
    std::filesystem::remove(log_path, ec);
    throw;
  }
  return kExitOk;
}

Image8 gray_image(const Tensor& map, bool color) {
  Image8 gray = tensor_to_image(map);
  if (!color) return gray;
  Image8 rgb{gray.width, gray.height, 3, {}};
  for (auto v : gray.pixels) rgb.pixels.insert(rgb.pixels.end(), {v, v, v});
  return rgb;
}

Tensor crop(const Tensor& t, Index h, Index w) {
  const Shape s = t.shape();
  Tensor out(Shape{s.n, s.c, h, w});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) out(n, c, y, x) = t(n, c, y, x);
  return out;
}

int cmd_infer(const GlobalOptions& g, const std::string& weights, const std::string& image_path,
              const std::string& mask_path, const std::string& color_path,
              const std::vector<std::string>& attn_specs, bool pad) {
  const RunConfig cfg = resolve_config(g);
  ModelParams params = ModelParams::init(cfg.model, cfg.train.seed);
  load_weights(params, weights);
  Tensor img = read_ppm(image_path);
  const Index h = img.shape().h, w = img.shape().w;
  if (pad) {
    const Index ph = (h + 63) / 64 * 64, pw = (w + 63) / 64 * 64;
    img = pad_reflect(img, ph - h, pw - w);
  }
  validate_input_size(img.shape().h, img.shape().w);

  std::vector<std::pair<std::string, std::string>> attn;
  const auto stages = attention_stages(cfg.model);
  for (const auto& spec : attn_specs) {
    const auto colon = spec.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == spec.size()) {
      throw Error("--attn expects stage:path, got '" + spec + "'");
    }
    const std::string stage = spec.substr(0, colon);
    if (std::find(stages.begin(), stages.end(), stage) == stages.end()) {
      std::string names;
      for (const auto& s : stages) names += (names.empty() ? "" : ", ") + s;
      throw Error("unknown attention stage '" + stage + "' (available: " + names + ")");
    }
    attn.emplace_back(stage, spec.substr(colon + 1));
  }

  Tape tape;
  auto out = model_forward(tape.constant(img.reshaped(img.shape())), params, cfg.model, NormMode::eval);
  const LabelMap mask = predict_mask(crop(out.logits.value(), h, w));
  write_pnm(mask_to_image(mask), mask_path);
  if (!color_path.empty()) write_pnm(colorize(mask), color_path);
  for (const auto& [stage, path] : attn) {
    const Tensor map = crop(export_attention(img, params, cfg.model, stage), h, w);
    write_pnm(gray_image(map, !path.ends_with(".pgm")), path);
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"CGRSeg decoder toolkit: FLOPs ledger, gradient checks, toy training and inference", "cgrseg"};
  app.require_subcommand(1);
  GlobalOptions g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Seed (overrides train.seed)");

  auto* flops = app.add_subcommand("flops", "Per-module MACs and parameter ledger");
  std::string size;
  flops->add_option("--size", size, "Input size HxW (default: config input size)");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  std::string corrupt;
  int samples = 20;
  grad->add_option("--samples", samples, "Sampled coordinates per block")->check(CLI::PositiveNumber);
  grad->add_option("--corrupt", corrupt, "Test fixture: scale the gradient of this tensor by 1.5");

  auto* train = app.add_subcommand("train-toy", "Train on synthetic shapes");
  std::string train_out, log_path;
  train->add_option("--out", train_out, "Weight file to write")->required();
  train->add_option("--log", log_path, "Metrics log (default: <out>.log)");

  auto* infer = app.add_subcommand("infer", "Segment a PPM image");
  std::string weights, image, mask_out, color_out;
  std::vector<std::string> attn;
  bool pad = false;
  infer->add_option("--weights", weights, "Weight file")->required()->check(CLI::ExistingFile);
  infer->add_option("--image", image, "Input P6 image")->required()->check(CLI::ExistingFile);
  infer->add_option("--out", mask_out, "Label mask (P5)")->required();
  infer->add_option("--color", color_out, "Palette-colored mask (P6)");
  infer->add_option("--attn", attn, "Attention heatmap, stage:path (repeatable)");
  infer->add_flag("--pad", pad, "Reflect-pad to a multiple of 64 and crop back");

  for (auto* sub : {flops, grad, train, infer}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (*flops) return cmd_flops(g, size, out);
    if (*grad) return cmd_gradcheck(g, corrupt, samples, out, err);
    if (*train) return cmd_train(g, train_out, log_path, out);
    return cmd_infer(g, weights, image, mask_out, color_out, attn, pad);
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace cgr
