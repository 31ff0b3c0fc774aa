#pragma once

// Rectangular self-calibration attention (RCA), the module built around it
// (RCM), and the dynamic prototype guided (DPG) segmentation head.

#include "cgrseg/autodiff.hpp"
#include "cgrseg/layers.hpp"
#include "cgrseg/rng.hpp"

#include <string>

namespace cgr {

/// How the two axial context vectors are combined before calibration.
enum class RcaVariant { add, mul };

const char* to_string(RcaVariant v);
RcaVariant parse_rca_variant(const std::string& text);

struct BlockOptions {
  RcaVariant variant = RcaVariant::add;
  NormMode mode = NormMode::eval;
};

/// Weights of one RCM over C channels.
///
/// Attention branch: 1 x k depthwise strip (no bias) -> BN -> ReLU ->
/// k x 1 depthwise strip (bias) -> sigmoid. Fusion: depthwise f x f conv on
/// the input, gated by the attention. Then BN and a 1x1 MLP (C -> rC -> C)
/// and a residual connection.
struct RcmParams {
  Tensor strip_h;       // (C, 1, 1, k)
  Tensor strip_v;       // (C, 1, k, 1)
  Tensor strip_v_bias;  // (1, C, 1, 1)
  BatchNormParams bn_cal;
  Tensor fuse_dw;       // (C, 1, f, f)
  Tensor fuse_bias;     // (1, C, 1, 1)
  BatchNormParams bn_out;
  Tensor mlp_w1;  // (rC, C, 1, 1)
  Tensor mlp_b1;
  Tensor mlp_w2;  // (C, rC, 1, 1); zero at init so the block starts as identity
  Tensor mlp_b2;

  Index channels() const { return strip_h.shape().n; }
  Index strip_kernel() const { return strip_h.shape().w; }

  static RcmParams init(Index channels, Index strip_kernel, Index fusion_kernel, Index mlp_ratio,
                        Rng& rng);
};

void visit_params(RcmParams& p, const std::string& prefix, const ParamVisitor& visit);

/// H_P(x) combined with V_P(x): the rectangular context map before
/// calibration. Exactly r[h] + c[w] (or r[h] * c[w] for the mul variant).
Var axial_context(Var x, RcaVariant variant);

/// Calibrated attention in (0, 1), same shape as x.
Var rca_attention(Var x, RcmParams& p, const BlockOptions& opt);

/// Depthwise fusion conv of x, gated elementwise by `attention`.
Var rca_fuse(Var x, Var attention, RcmParams& p);

/// Full module with residual. If `attention_out` is non-null it receives the
/// calibrated attention map.
Var rcm_forward(Var x, RcmParams& p, const BlockOptions& opt, Var* attention_out = nullptr);

/// Weights of the DPG head for `classes` classes over D input channels.
struct DpgParams {
  Tensor proj_cls;       // (Ccls, D, 1, 1) class projection
  Tensor proj_bias;      // (1, Ccls, 1, 1)
  Tensor fc_compress;    // (1, D, 1, 1) prototype row -> one logit
  Tensor fc1_w;          // (Dmid, D, 1, 1)
  Tensor fc1_b;          // (1, Dmid, 1, 1)
  Tensor ln_gamma;       // (1, Dmid, 1, 1)
  Tensor ln_beta;        // (1, Dmid, 1, 1)
  Tensor fc2_w;          // (D, Dmid, 1, 1)
  Tensor fc2_b;          // (1, D, 1, 1)
  Tensor cls_w;          // (Ccls, D, 1, 1) classifier, zero at init
  Tensor cls_b;          // (1, Ccls, 1, 1)

  Index classes() const { return proj_cls.shape().n; }
  Index width() const { return proj_cls.shape().c; }
  Index hidden() const { return fc1_w.shape().n; }

  static DpgParams init(Index classes, Index width, Index hidden, Rng& rng);
};

void visit_params(DpgParams& p, const std::string& prefix, const ParamVisitor& visit);

/// Dynamic prototype (1, Ccls, D, 1) of a single sample fx (1, D, H, W):
/// the class map times the pixel features, divided by H*W.
Var dpg_prototype(Var fx, DpgParams& p);

/// Class embedding (1, Ccls, 1, 1): softmax over classes of the compressed
/// prototype rows.
Var dpg_class_embed(Var prototype, DpgParams& p);

/// Channel gate from prototype and class embedding, applied to fx.
Var dpg_attend(Var prototype, Var class_embed, Var fx, DpgParams& p);

/// Class logits (N, Ccls, H, W) for features (N, D, H, W).
Var dpg_head_forward(Var fx, DpgParams& p);

}  // namespace cgr
