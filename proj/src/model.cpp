#include "cgrseg/model.hpp"

#include <algorithm>

namespace cgr {

namespace {

constexpr std::array<const char*, 3> kLevelNames{"s8", "s16", "s32"};

void require(bool ok, const std::string& message) {
  if (!ok) throw Error("invalid model config: " + message);
}

Var conv_bn_relu(Var x, ConvBnParams& layer, Index stride, NormMode mode) {
  const Index k = layer.weight.shape().h;
  Var y = conv2d(x, x.tape().parameter(layer.weight), Var{}, Conv2dOptions::strided(k, stride));
  return relu(batch_norm(y, layer.bn, mode));
}

Var project(Var x, Tensor& weight) {
  return conv2d(x, x.tape().parameter(weight), Var{}, Conv2dOptions{});
}

BlockOptions block_options(const ModelConfig& cfg, NormMode mode) {
  return BlockOptions{cfg.rca_variant, mode};
}

Var run_rcm(Var x, RcmParams& rcm, const BlockOptions& opt, const std::string& name,
            AttentionMaps* attention) {
  Var a;
  Var y = rcm_forward(x, rcm, opt, &a);
  if (attention) attention->emplace_back(name, a);
  return y;
}

}  // namespace

void validate_input_size(Index h, Index w) {
  if (h < 64 || w < 64 || h % 64 != 0 || w % 64 != 0) {
    throw Error("input size " + std::to_string(h) + "x" + std::to_string(w) +
                " must be positive multiples of 64");
  }
}

void ModelConfig::validate() const {
  require(in_channels > 0, "in_channels must be positive");
  for (Index c : stage_channels) require(c > 0, "stage_channels must be positive");
  require(num_classes >= 2, "num_classes must be at least 2");
  require(strip_kernel > 0 && strip_kernel % 2 == 1, "strip_kernel must be odd");
  require(fusion_kernel > 0 && fusion_kernel % 2 == 1, "fusion_kernel must be odd");
  require(mlp_ratio > 0, "mlp_ratio must be positive");
  require(num_pyramid_rcm >= 0, "num_pyramid_rcm must be non-negative");
  require(head_width > 0, "head_width must be positive");
  require(head_hidden >= 0, "head_hidden must be non-negative");
  validate_input_size(input_h, input_w);
}

Index ModelConfig::resolved_head_hidden() const {
  return head_hidden > 0 ? head_hidden : std::max<Index>(1, head_width / 4);
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const auto& ch = cfg.stage_channels;
  ModelParams p;
  Index prev = cfg.in_channels;
  for (int stage = 0; stage < 4; ++stage) {
    for (int layer = 0; layer < 2; ++layer) {
      const Index cin = layer == 0 ? prev : ch[stage];
      p.backbone.push_back({kaiming_uniform(Shape{ch[stage], cin, 3, 3}, rng),
                            BatchNormParams::identity(ch[stage])});
    }
    prev = ch[stage];
  }
  for (int level = 0; level < 3; ++level) {
    const Index c = ch[level + 1];
    p.align_enc[level] = kaiming_uniform(Shape{c, c, 1, 1}, rng);
  }
  for (int level = 0; level < 2; ++level) {
    p.align_dec[level] = kaiming_uniform(Shape{ch[level + 1], ch[level + 2], 1, 1}, rng);
  }
  if (cfg.use_rcm) {
    for (Index i = 0; i < cfg.num_pyramid_rcm; ++i) {
      p.pyramid.push_back(RcmParams::init(cfg.pyramid_channels(), cfg.strip_kernel,
                                          cfg.fusion_kernel, cfg.mlp_ratio, rng));
    }
    for (int level = 0; level < 3; ++level) {
      p.sfr.push_back(RcmParams::init(ch[level + 1], cfg.strip_kernel, cfg.fusion_kernel,
                                      cfg.mlp_ratio, rng));
    }
  }
  p.head_in = kaiming_uniform(Shape{cfg.head_width, ch[1], 1, 1}, rng);
  p.head = DpgParams::init(cfg.num_classes, cfg.head_width, cfg.resolved_head_hidden(), rng);
  return p;
}

void visit_params(ModelParams& p, const ParamVisitor& visit) {
  for (std::size_t i = 0; i < p.backbone.size(); ++i) {
    const std::string prefix =
        "backbone.stage" + std::to_string(i / 2 + 1) + ".conv" + std::to_string(i % 2);
    visit(prefix + ".weight", p.backbone[i].weight, ParamKind::learnable);
    visit_params(p.backbone[i].bn, prefix + ".bn", visit);
  }
  for (int level = 0; level < 3; ++level) {
    visit(std::string("decoder.align_enc.") + kLevelNames[level], p.align_enc[level], ParamKind::learnable);
  }
  for (int level = 0; level < 2; ++level) {
    visit(std::string("decoder.align_dec.") + kLevelNames[level], p.align_dec[level], ParamKind::learnable);
  }
  for (std::size_t i = 0; i < p.pyramid.size(); ++i) {
    visit_params(p.pyramid[i], "pyramid.rcm" + std::to_string(i), visit);
  }
  for (std::size_t level = 0; level < p.sfr.size(); ++level) {
    visit_params(p.sfr[level], std::string("sfr.") + kLevelNames[level], visit);
  }
  visit("head.in_proj", p.head_in, ParamKind::learnable);
  visit_params(p.head, "head.dpg", visit);
}

std::vector<NamedTensor> param_registry(ModelParams& p) {
  std::vector<NamedTensor> out;
  visit_params(p, [&](const std::string& name, Tensor& t, ParamKind kind) {
    out.push_back({name, &t, kind});
  });
  return out;
}

std::array<Var, 4> backbone_forward(Var img, ModelParams& p, const ModelConfig& cfg, NormMode mode) {
  const Shape s = img.shape();
  validate_input_size(s.h, s.w);
  if (s.c != cfg.in_channels) {
    throw ShapeError("image has " + std::to_string(s.c) + " channels, config expects " +
                     std::to_string(cfg.in_channels));
  }
  std::array<Var, 4> feats;
  Var x = img;
  for (int stage = 0; stage < 4; ++stage) {
    x = conv_bn_relu(x, p.backbone[2 * stage], 2, mode);
    x = conv_bn_relu(x, p.backbone[2 * stage + 1], stage == 0 ? 2 : 1, mode);
    feats[stage] = x;
  }
  return feats;
}

std::array<Var, 3> pyramid_context(Var f2, Var f3, Var f4, ModelParams& p, const ModelConfig& cfg,
                                   NormMode mode, AttentionMaps* attention) {
  const std::array<Var, 3> sources{f2, f3, f4};
  const std::array<Index, 3> factors{8, 4, 2};
  std::array<Var, 3> pooled;
  std::array<Index, 3> sizes{};
  for (int i = 0; i < 3; ++i) {
    pooled[i] = avg_pool2d(sources[i], factors[i]);
    sizes[i] = sources[i].shape().c;
  }
  if (pooled[0].shape().h != pooled[1].shape().h || pooled[1].shape().h != pooled[2].shape().h ||
      pooled[0].shape().w != pooled[1].shape().w || pooled[1].shape().w != pooled[2].shape().w) {
    throw ShapeError("pyramid inputs do not reach a common 1/64 grid");
  }
  Var x = concat_channels(pooled);
  const BlockOptions opt = block_options(cfg, mode);
  for (std::size_t i = 0; i < p.pyramid.size(); ++i) {
    x = run_rcm(x, p.pyramid[i], opt, "pyramid." + std::to_string(i), attention);
  }
  auto parts = split_channels(x, sizes);
  std::array<Var, 3> out;
  for (int i = 0; i < 3; ++i) {
    out[i] = upsample_bilinear(parts[i], sources[i].shape().h, sources[i].shape().w);
  }
  return out;
}

Var sfr_stage(Var enc, Var dec_prev, Var pyr, ModelParams& p, const ModelConfig& cfg, int level,
              NormMode mode, AttentionMaps* attention) {
  if (level < 0 || level > 2) throw ShapeError("decoder level out of range");
  Var fused = project(enc, p.align_enc[level]);
  if (dec_prev.valid()) {
    if (level > 1) throw ShapeError("the deepest level takes no coarser decoder input");
    Var up = project(dec_prev, p.align_dec[level]);
    up = upsample_bilinear(up, enc.shape().h, enc.shape().w);
    fused = add_broadcast(fused, up);
  }
  if (fused.shape() != pyr.shape()) {
    throw ShapeError("sfr level " + std::to_string(level) + ": fused " + fused.shape().str() +
                     " vs pyramid " + pyr.shape().str());
  }
  fused = add_broadcast(fused, pyr);
  if (p.sfr.empty()) return fused;
  return run_rcm(fused, p.sfr[static_cast<std::size_t>(level)], block_options(cfg, mode),
                 std::string("sfr.") + kLevelNames[level], attention);
}

ModelOutput model_forward(Var img, ModelParams& p, const ModelConfig& cfg, NormMode mode) {
  ModelOutput out;
  auto f = backbone_forward(img, p, cfg, mode);
  auto pyr = pyramid_context(f[1], f[2], f[3], p, cfg, mode, &out.attention);
  Var dec = sfr_stage(f[3], Var{}, pyr[2], p, cfg, 2, mode, &out.attention);
  dec = sfr_stage(f[2], dec, pyr[1], p, cfg, 1, mode, &out.attention);
  dec = sfr_stage(f[1], dec, pyr[0], p, cfg, 0, mode, &out.attention);
  Var logits = dpg_head_forward(project(dec, p.head_in), p.head);
  out.logits = upsample_bilinear(logits, img.shape().h, img.shape().w);
  return out;
}

std::vector<std::string> attention_stages(const ModelConfig& cfg) {
  std::vector<std::string> names;
  if (!cfg.use_rcm) return names;
  for (Index i = 0; i < cfg.num_pyramid_rcm; ++i) names.push_back("pyramid." + std::to_string(i));
  for (int level = 2; level >= 0; --level) names.push_back(std::string("sfr.") + kLevelNames[level]);
  return names;
}

Tensor calibrated_attention(const Tensor& img, ModelParams& p, const ModelConfig& cfg,
                            const std::string& stage) {
  const auto stages = attention_stages(cfg);
  if (std::find(stages.begin(), stages.end(), stage) == stages.end()) {
    throw Error("unknown attention stage '" + stage + "'");
  }
  if (img.shape().n != 1) throw ShapeError("calibrated_attention takes a single image");
  Tape tape;
  auto out = model_forward(tape.constant(img.reshaped(img.shape())), p, cfg, NormMode::eval);
  for (const auto& [name, a] : out.attention) {
    if (name != stage) continue;
    const Shape s = a.shape();
    Tensor avg(Shape{1, 1, s.h, s.w});
    for (Index c = 0; c < s.c; ++c) {
      for (Index i = 0; i < s.h * s.w; ++i) avg[i] += a.value().plane(0, c)[i];
    }
    avg.data() /= static_cast<double>(s.c);
    return upsample_bilinear(avg, img.shape().h, img.shape().w);
  }
  throw Error("attention stage '" + stage + "' was not produced");
}

Tensor export_attention(const Tensor& img, ModelParams& p, const ModelConfig& cfg,
                        const std::string& stage) {
  Tensor map = calibrated_attention(img, p, cfg, stage);
  const double lo = map.data().minCoeff();
  const double hi = map.data().maxCoeff();
  if (!(hi - lo > 1e-12 * std::max(1.0, std::abs(hi)))) return Tensor::zeros(map.shape());
  map.data() = (map.data().array() - lo) / (hi - lo);
  return map;
}

}  // namespace cgr
