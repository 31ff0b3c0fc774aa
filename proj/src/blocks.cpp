#include "cgrseg/blocks.hpp"

#include <vector>

namespace cgr {

const char* to_string(RcaVariant v) { return v == RcaVariant::add ? "add" : "mul"; }

RcaVariant parse_rca_variant(const std::string& text) {
  if (text == "add") return RcaVariant::add;
  if (text == "mul") return RcaVariant::mul;
  throw Error("unknown rca_variant '" + text + "' (expected add or mul)");
}

RcmParams RcmParams::init(Index channels, Index strip_kernel, Index fusion_kernel, Index mlp_ratio,
                          Rng& rng) {
  if (channels < 1 || mlp_ratio < 1) throw ShapeError("RCM needs positive channels and mlp_ratio");
  if (strip_kernel < 1 || strip_kernel % 2 == 0 || fusion_kernel < 1 || fusion_kernel % 2 == 0) {
    throw ShapeError("RCM kernel sizes must be odd");
  }
  const Index hidden = channels * mlp_ratio;
  RcmParams p;
  p.strip_h = kaiming_uniform(Shape{channels, 1, 1, strip_kernel}, rng);
  p.strip_v = kaiming_uniform(Shape{channels, 1, strip_kernel, 1}, rng);
  p.strip_v_bias = Tensor::zeros(channel_shape(channels));
  p.bn_cal = BatchNormParams::identity(channels);
  p.fuse_dw = kaiming_uniform(Shape{channels, 1, fusion_kernel, fusion_kernel}, rng);
  p.fuse_bias = Tensor::zeros(channel_shape(channels));
  p.bn_out = BatchNormParams::identity(channels);
  p.mlp_w1 = kaiming_uniform(Shape{hidden, channels, 1, 1}, rng);
  p.mlp_b1 = Tensor::zeros(channel_shape(hidden));
  p.mlp_w2 = Tensor::zeros(Shape{channels, hidden, 1, 1});
  p.mlp_b2 = Tensor::zeros(channel_shape(channels));
  return p;
}

void visit_params(RcmParams& p, const std::string& prefix, const ParamVisitor& visit) {
  visit(prefix + ".strip_h", p.strip_h, ParamKind::learnable);
  visit(prefix + ".strip_v", p.strip_v, ParamKind::learnable);
  visit(prefix + ".strip_v_bias", p.strip_v_bias, ParamKind::learnable);
  visit_params(p.bn_cal, prefix + ".bn_cal", visit);
  visit(prefix + ".fuse_dw", p.fuse_dw, ParamKind::learnable);
  visit(prefix + ".fuse_bias", p.fuse_bias, ParamKind::learnable);
  visit_params(p.bn_out, prefix + ".bn_out", visit);
  visit(prefix + ".mlp_w1", p.mlp_w1, ParamKind::learnable);
  visit(prefix + ".mlp_b1", p.mlp_b1, ParamKind::learnable);
  visit(prefix + ".mlp_w2", p.mlp_w2, ParamKind::learnable);
  visit(prefix + ".mlp_b2", p.mlp_b2, ParamKind::learnable);
}

Var axial_context(Var x, RcaVariant variant) {
  Var rows = pool_rows(x);
  Var cols = pool_cols(x);
  return variant == RcaVariant::add ? add_broadcast(rows, cols) : mul_hadamard(rows, cols);
}

Var rca_attention(Var x, RcmParams& p, const BlockOptions& opt) {
  if (x.shape().c != p.channels()) {
    throw ShapeError("RCM expects " + std::to_string(p.channels()) + " channels, got " + x.shape().str());
  }
  Tape& t = x.tape();
  const Index c = p.channels();
  const Index k = p.strip_kernel();
  Var a = axial_context(x, opt.variant);
  a = conv2d(a, t.parameter(p.strip_h), Var{}, Conv2dOptions::same(1, k, c));
  a = relu(batch_norm(a, p.bn_cal, opt.mode));
  a = conv2d(a, t.parameter(p.strip_v), t.parameter(p.strip_v_bias), Conv2dOptions::same(k, 1, c));
  return sigmoid(a);
}

Var rca_fuse(Var x, Var attention, RcmParams& p) {
  if (x.shape() != attention.shape()) {
    throw ShapeError("rca_fuse: input " + x.shape().str() + " vs attention " + attention.shape().str());
  }
  Tape& t = x.tape();
  const Index f = p.fuse_dw.shape().h;
  Var local = conv2d(x, t.parameter(p.fuse_dw), t.parameter(p.fuse_bias),
                     Conv2dOptions::same(f, f, p.channels()));
  return mul_hadamard(local, attention);
}

Var rcm_forward(Var x, RcmParams& p, const BlockOptions& opt, Var* attention_out) {
  Tape& t = x.tape();
  Var a = rca_attention(x, p, opt);
  if (attention_out) *attention_out = a;
  Var y = rca_fuse(x, a, p);
  y = batch_norm(y, p.bn_out, opt.mode);
  y = relu(conv2d(y, t.parameter(p.mlp_w1), t.parameter(p.mlp_b1), Conv2dOptions{}));
  y = conv2d(y, t.parameter(p.mlp_w2), t.parameter(p.mlp_b2), Conv2dOptions{});
  return add_broadcast(y, x);
}

// ---------------------------------------------------------------------------

DpgParams DpgParams::init(Index classes, Index width, Index hidden, Rng& rng) {
  if (classes < 1 || width < 1 || hidden < 1) throw ShapeError("DPG head needs positive dims");
  DpgParams p;
  p.proj_cls = kaiming_uniform(Shape{classes, width, 1, 1}, rng);
  p.proj_bias = Tensor::zeros(channel_shape(classes));
  p.fc_compress = kaiming_uniform(Shape{1, width, 1, 1}, rng);
  p.fc1_w = kaiming_uniform(Shape{hidden, width, 1, 1}, rng);
  p.fc1_b = Tensor::zeros(channel_shape(hidden));
  p.ln_gamma = Tensor::ones(channel_shape(hidden));
  p.ln_beta = Tensor::zeros(channel_shape(hidden));
  p.fc2_w = kaiming_uniform(Shape{width, hidden, 1, 1}, rng);
  p.fc2_b = Tensor::zeros(channel_shape(width));
  p.cls_w = Tensor::zeros(Shape{classes, width, 1, 1});
  p.cls_b = Tensor::zeros(channel_shape(classes));
  return p;
}

void visit_params(DpgParams& p, const std::string& prefix, const ParamVisitor& visit) {
  visit(prefix + ".proj_cls", p.proj_cls, ParamKind::learnable);
  visit(prefix + ".proj_bias", p.proj_bias, ParamKind::learnable);
  visit(prefix + ".fc_compress", p.fc_compress, ParamKind::learnable);
  visit(prefix + ".fc1_w", p.fc1_w, ParamKind::learnable);
  visit(prefix + ".fc1_b", p.fc1_b, ParamKind::learnable);
  visit(prefix + ".ln_gamma", p.ln_gamma, ParamKind::learnable);
  visit(prefix + ".ln_beta", p.ln_beta, ParamKind::learnable);
  visit(prefix + ".fc2_w", p.fc2_w, ParamKind::learnable);
  visit(prefix + ".fc2_b", p.fc2_b, ParamKind::learnable);
  visit(prefix + ".cls_w", p.cls_w, ParamKind::learnable);
  visit(prefix + ".cls_b", p.cls_b, ParamKind::learnable);
}

Var dpg_prototype(Var fx, DpgParams& p) {
  const Shape s = fx.shape();
  if (s.n != 1) throw ShapeError("dpg_prototype takes one sample, got " + s.str());
  if (s.c != p.width()) {
    throw ShapeError("DPG head expects " + std::to_string(p.width()) + " channels, got " + s.str());
  }
  Tape& t = fx.tape();
  const Index pixels = s.h * s.w;
  Var class_map = conv2d(fx, t.parameter(p.proj_cls), t.parameter(p.proj_bias), Conv2dOptions{});
  class_map = reshape(class_map, Shape{1, p.classes(), pixels, 1});
  Var pixel_feats = transpose2d(reshape(fx, Shape{1, s.c, pixels, 1}));
  return scale(matmul(class_map, pixel_feats), 1.0 / static_cast<double>(pixels));
}

Var dpg_class_embed(Var prototype, DpgParams& p) {
  Var logits = matmul(prototype, prototype.tape().parameter(p.fc_compress));
  return softmax(logits, 1);
}

Var dpg_attend(Var prototype, Var class_embed, Var fx, DpgParams& p) {
  Tape& t = fx.tape();
  // (D x Ccls) * (Ccls x 1) is a (1, D, 1, 1) channel vector.
  Var v = matmul(transpose2d(prototype), class_embed);
  v = conv2d(v, t.parameter(p.fc1_w), t.parameter(p.fc1_b), Conv2dOptions{});
  v = relu(layer_norm(v, t.parameter(p.ln_gamma), t.parameter(p.ln_beta), kNormEps));
  v = conv2d(v, t.parameter(p.fc2_w), t.parameter(p.fc2_b), Conv2dOptions{});
  if (v.shape().c != fx.shape().c) throw ShapeError("dpg_attend gate width does not match features");
  return mul_hadamard(fx, v);
}

Var dpg_head_forward(Var fx, DpgParams& p) {
  Tape& t = fx.tape();
  std::vector<Var> attended;
  attended.reserve(static_cast<std::size_t>(fx.shape().n));
  for (Index n = 0; n < fx.shape().n; ++n) {
    Var x = select_batch(fx, n);
    Var proto = dpg_prototype(x, p);
    Var embed = dpg_class_embed(proto, p);
    attended.push_back(dpg_attend(proto, embed, x, p));
  }
  Var feats = attended.size() == 1 ? attended[0] : stack_batch(attended);
  return conv2d(feats, t.parameter(p.cls_w), t.parameter(p.cls_b), Conv2dOptions{});
}

}  // namespace cgr
