#pragma once

#include "cgrseg/autodiff.hpp"
#include "cgrseg/blocks.hpp"
#include "cgrseg/layers.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace cgr {

/// Architecture description. Defaults are the tiny desk-scale model.
struct ModelConfig {
  Index in_channels = 3;
  std::array<Index, 4> stage_channels{8, 16, 24, 32};  // F1..F4
  Index num_classes = 4;
  Index strip_kernel = 11;
  Index fusion_kernel = 3;
  Index mlp_ratio = 4;
  Index num_pyramid_rcm = 2;
  RcaVariant rca_variant = RcaVariant::add;
  Index head_width = 16;
  Index head_hidden = 0;  // 0 selects head_width / 4
  Index input_h = 128;
  Index input_w = 128;
  bool use_rcm = true;  // false removes every RCM (pyramid and reconstruction)

  /// Throws Error on any violated invariant.
  void validate() const;
  Index resolved_head_hidden() const;
  Index pyramid_channels() const { return stage_channels[1] + stage_channels[2] + stage_channels[3]; }
};

/// Throws Error unless h and w are positive multiples of 64.
void validate_input_size(Index h, Index w);

struct ConvBnParams {
  Tensor weight;
  BatchNormParams bn;
};

/// All weights of a model. Decoder levels are indexed 0 = 1/8, 1 = 1/16,
/// 2 = 1/32 of the input resolution.
struct ModelParams {
  std::vector<ConvBnParams> backbone;  // two conv-BN-ReLU layers per stage
  std::array<Tensor, 3> align_enc;     // (c_i, c_i, 1, 1), encoder -> decoder
  std::array<Tensor, 2> align_dec;     // coarser decoder -> this level
  std::vector<RcmParams> pyramid;
  std::vector<RcmParams> sfr;  // one per level, empty when RCMs are disabled
  Tensor head_in;              // (D, c2, 1, 1)
  DpgParams head;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
};

/// Enumerates every tensor once, in a fixed order, with a unique name.
void visit_params(ModelParams& p, const ParamVisitor& visit);

struct NamedTensor {
  std::string name;
  Tensor* tensor;
  ParamKind kind;
};
std::vector<NamedTensor> param_registry(ModelParams& p);

/// Calibrated attention maps keyed by RCM name ("pyramid.0", "sfr.s8", ...).
using AttentionMaps = std::vector<std::pair<std::string, Var>>;

std::array<Var, 4> backbone_forward(Var img, ModelParams& p, const ModelConfig& cfg, NormMode mode);

/// Pools F2/F3/F4 to 1/64 scale, refines the concatenation with the stacked
/// RCMs, splits it back and upsamples each part to its source scale.
std::array<Var, 3> pyramid_context(Var f2, Var f3, Var f4, ModelParams& p, const ModelConfig& cfg,
                                   NormMode mode, AttentionMaps* attention = nullptr);

/// One reconstruction level: align(enc) + upsample(align(dec_prev)) + pyr,
/// refined by the level's RCM. `dec_prev` is invalid at the deepest level.
Var sfr_stage(Var enc, Var dec_prev, Var pyr, ModelParams& p, const ModelConfig& cfg, int level,
              NormMode mode, AttentionMaps* attention = nullptr);

struct ModelOutput {
  Var logits;  // (N, Ccls, H, W)
  AttentionMaps attention;
};

ModelOutput model_forward(Var img, ModelParams& p, const ModelConfig& cfg, NormMode mode);

/// RCM names valid for export_attention under `cfg`.
std::vector<std::string> attention_stages(const ModelConfig& cfg);

/// Channel-mean calibrated attention of `stage` for a single image,
/// bilinearly resized to the image size. Eval mode.
Tensor calibrated_attention(const Tensor& img, ModelParams& p, const ModelConfig& cfg,
                            const std::string& stage);

/// calibrated_attention min-max normalized to [0, 1]; a flat map gives zeros.
Tensor export_attention(const Tensor& img, ModelParams& p, const ModelConfig& cfg,
                        const std::string& stage);

}  // namespace cgr
