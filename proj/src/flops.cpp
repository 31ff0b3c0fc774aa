#include "cgrseg/flops.hpp"

#include <array>
#include <numeric>

namespace cgr {

namespace {

using i64 = std::int64_t;

constexpr std::array<const char*, 3> kLevelNames{"s8", "s16", "s32"};

FlopsEntry rcm_entry(const std::string& name, i64 c, i64 h, i64 w, i64 k, i64 f, i64 r) {
  const i64 hw = h * w;
  const i64 hidden = r * c;
  FlopsEntry e;
  e.name = name;
  e.conv_macs = conv_macs(1, c, h, w, 1, 1, k)       // horizontal strip
                + conv_macs(1, c, h, w, 1, k, 1)     // vertical strip
                + conv_macs(1, c, h, w, 1, f, f)     // depthwise fusion
                + conv_macs(1, hidden, h, w, c, 1, 1)  // MLP expand
                + conv_macs(1, c, h, w, hidden, 1, 1);  // MLP reduce
  // pool_rows, pool_cols, combine, BN, ReLU, sigmoid, gate, BN, residual
  // over C maps plus the hidden ReLU.
  e.elementwise = 9 * c * hw + hidden * hw;
  e.params = c * k                  // strip_h
             + c * k + c            // strip_v + bias
             + 2 * c                // bn_cal
             + c * f * f + c        // fuse_dw + bias
             + 2 * c                // bn_out
             + hidden * c + hidden  // mlp_w1 + b1
             + c * hidden + c;      // mlp_w2 + b2
  e.buffers = 4 * c;
  return e;
}

}  // namespace

std::int64_t conv_macs(Index batch, Index cout, Index hout, Index wout, Index cin_per_group, Index kh,
                       Index kw) {
  return i64{batch} * cout * hout * wout * cin_per_group * kh * kw;
}

i64 FlopsReport::total_macs() const {
  return std::accumulate(entries.begin(), entries.end(), i64{0},
                         [](i64 acc, const FlopsEntry& e) { return acc + e.macs(); });
}

i64 FlopsReport::total_params() const {
  return std::accumulate(entries.begin(), entries.end(), i64{0},
                         [](i64 acc, const FlopsEntry& e) { return acc + e.params; });
}

i64 FlopsReport::total_buffers() const {
  return std::accumulate(entries.begin(), entries.end(), i64{0},
                         [](i64 acc, const FlopsEntry& e) { return acc + e.buffers; });
}

i64 FlopsReport::total_elementwise() const {
  return std::accumulate(entries.begin(), entries.end(), i64{0},
                         [](i64 acc, const FlopsEntry& e) { return acc + e.elementwise; });
}

const FlopsEntry& FlopsReport::entry(std::string_view name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw Error("no FLOPs entry named '" + std::string(name) + "'");
}

FlopsReport count_flops(const ModelConfig& cfg, Index h, Index w) {
  cfg.validate();
  validate_input_size(h, w);
  FlopsReport report;
  report.input_h = h;
  report.input_w = w;
  const auto& ch = cfg.stage_channels;

  // Backbone: stage s ends at stride 2^(s+2); stage 1 strides twice.
  i64 cin = cfg.in_channels;
  for (int stage = 0; stage < 4; ++stage) {
    for (int layer = 0; layer < 2; ++layer) {
      const i64 stride_log = stage == 0 ? layer + 1 : stage + 2;
      const i64 ho = h >> stride_log;
      const i64 wo = w >> stride_log;
      const i64 in = layer == 0 ? cin : ch[stage];
      FlopsEntry e;
      e.name = "backbone.stage" + std::to_string(stage + 1) + ".conv" + std::to_string(layer);
      e.conv_macs = conv_macs(1, ch[stage], ho, wo, in, 3, 3);
      e.elementwise = 2 * ch[stage] * ho * wo;  // BN + ReLU
      e.params = ch[stage] * in * 9 + 2 * ch[stage];
      e.buffers = 2 * ch[stage];
      report.entries.push_back(e);
    }
    cin = ch[stage];
  }

  // Feature extents at strides 8, 16, 32 (decoder levels 0..2).
  std::array<i64, 3> lh{}, lw{}, lc{};
  for (int level = 0; level < 3; ++level) {
    lh[level] = h >> (level + 3);
    lw[level] = w >> (level + 3);
    lc[level] = ch[level + 1];
  }
  const i64 ph = h / 64;
  const i64 pw = w / 64;

  {
    FlopsEntry pool;
    pool.name = "pyramid.pool";
    for (int level = 0; level < 3; ++level) pool.elementwise += lc[level] * lh[level] * lw[level];
    report.entries.push_back(pool);
  }
  if (cfg.use_rcm) {
    for (Index i = 0; i < cfg.num_pyramid_rcm; ++i) {
      report.entries.push_back(rcm_entry("pyramid.rcm" + std::to_string(i), cfg.pyramid_channels(), ph,
                                         pw, cfg.strip_kernel, cfg.fusion_kernel, cfg.mlp_ratio));
    }
  }
  {
    FlopsEntry up;
    up.name = "pyramid.upsample";
    for (int level = 0; level < 3; ++level) up.elementwise += lc[level] * lh[level] * lw[level];
    report.entries.push_back(up);
  }

  for (int level = 2; level >= 0; --level) {
    const i64 hw = lh[level] * lw[level];
    FlopsEntry enc;
    enc.name = std::string("decoder.align_enc.") + kLevelNames[level];
    enc.conv_macs = conv_macs(1, lc[level], lh[level], lw[level], lc[level], 1, 1);
    enc.params = lc[level] * lc[level];
    report.entries.push_back(enc);
    FlopsEntry fuse;
    fuse.name = std::string("decoder.fuse.") + kLevelNames[level];
    fuse.elementwise = lc[level] * hw;  // + pyramid
    if (level < 2) {
      FlopsEntry dec;
      dec.name = std::string("decoder.align_dec.") + kLevelNames[level];
      dec.conv_macs = conv_macs(1, lc[level], lh[level + 1], lw[level + 1], lc[level + 1], 1, 1);
      dec.params = lc[level] * lc[level + 1];
      report.entries.push_back(dec);
      fuse.elementwise += 2 * lc[level] * hw;  // upsample + add
    }
    report.entries.push_back(fuse);
    if (cfg.use_rcm) {
      report.entries.push_back(rcm_entry(std::string("sfr.") + kLevelNames[level], lc[level], lh[level],
                                         lw[level], cfg.strip_kernel, cfg.fusion_kernel, cfg.mlp_ratio));
    }
  }

  const i64 d = cfg.head_width;
  const i64 dm = cfg.resolved_head_hidden();
  const i64 k = cfg.num_classes;
  const i64 hw8 = lh[0] * lw[0];
  {
    FlopsEntry e;
    e.name = "head.in_proj";
    e.conv_macs = conv_macs(1, d, lh[0], lw[0], lc[0], 1, 1);
    e.params = d * lc[0];
    report.entries.push_back(e);
  }
  {
    FlopsEntry e;
    e.name = "head.dpg";
    e.conv_macs = conv_macs(1, k, lh[0], lw[0], d, 1, 1)    // class projection
                  + conv_macs(1, k, lh[0], lw[0], d, 1, 1);  // classifier
    e.matmul_macs = k * hw8 * d;  // prototype
    e.fc_macs = k * d             // compress
                + d * k           // prototype^T * embedding
                + dm * d + d * dm;  // fc1, fc2
    e.elementwise = k * d       // prototype scaling
                    + k         // softmax
                    + 2 * dm    // LayerNorm + ReLU
                    + d * hw8;  // channel gate
    e.params = k * d + k        // proj_cls
               + d              // fc_compress
               + dm * d + dm    // fc1
               + 2 * dm         // LayerNorm
               + d * dm + d     // fc2
               + k * d + k;     // classifier
    report.entries.push_back(e);
  }
  {
    FlopsEntry e;
    e.name = "head.upsample";
    e.elementwise = k * h * w;
    report.entries.push_back(e);
  }
  return report;
}

std::string param_module(std::string_view name) {
  const std::size_t keep =
      (name.starts_with("backbone.") || name.starts_with("decoder.")) ? 3 : 2;
  std::size_t pos = 0;
  for (std::size_t part = 0; part < keep; ++part) {
    pos = name.find('.', pos);
    if (pos == std::string_view::npos) return std::string(name);
    if (part + 1 < keep) ++pos;
  }
  return std::string(name.substr(0, pos));
}

std::vector<ParamCount> count_params(ModelParams& params) {
  std::vector<ParamCount> out;
  visit_params(params, [&](const std::string& name, Tensor& t, ParamKind kind) {
    const std::string module = param_module(name);
    if (out.empty() || out.back().module != module) out.push_back({module, 0, 0});
    (kind == ParamKind::learnable ? out.back().learnable : out.back().buffers) += t.size();
  });
  return out;
}

}  // namespace cgr
