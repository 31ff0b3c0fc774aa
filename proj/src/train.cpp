#include "cgrseg/train.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace cgr {

Var cross_entropy(Var logits, std::span<const LabelMap> masks) {
  const Shape s = logits.shape();
  if (static_cast<Index>(masks.size()) != s.n) {
    throw ShapeError("cross_entropy: " + std::to_string(masks.size()) + " masks for batch " +
                     std::to_string(s.n));
  }
  for (const auto& m : masks) {
    if (m.rows() != s.h || m.cols() != s.w) throw ShapeError("cross_entropy: mask size mismatch");
    if (m.size() > 0 && (m.minCoeff() < 0 || m.maxCoeff() >= s.c)) {
      throw Error("cross_entropy: label out of range [0, " + std::to_string(s.c) + ")");
    }
  }
  const Index hw = s.h * s.w;
  const double count = static_cast<double>(s.n * hw);
  // Softmax probabilities, kept for backward.
  Tensor prob(s);
  double total = 0.0;
  const Tensor& x = logits.value();
  for (Index n = 0; n < s.n; ++n) {
    const std::int32_t* labels = masks[static_cast<std::size_t>(n)].data();
    for (Index i = 0; i < hw; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Index c = 0; c < s.c; ++c) mx = std::max(mx, x.plane(n, c)[i]);
      double z = 0.0;
      for (Index c = 0; c < s.c; ++c) {
        const double e = std::exp(x.plane(n, c)[i] - mx);
        prob.plane(n, c)[i] = e;
        z += e;
      }
      for (Index c = 0; c < s.c; ++c) prob.plane(n, c)[i] /= z;
      total -= x.plane(n, labels[i])[i] - mx - std::log(z);
    }
  }
  Tensor loss = Tensor::constant(Shape{1, 1, 1, 1}, total / count);
  check_finite(loss, "cross_entropy");
  std::vector<LabelMap> saved(masks.begin(), masks.end());
  return logits.tape().record(
      std::move(loss), {logits},
      [logits, prob = std::move(prob), saved = std::move(saved), count](Tape& tp, const Tensor& g,
                                                                       const Tensor&) {
        const Shape s = prob.shape();
        const Index hw = s.h * s.w;
        Tensor dx = prob;
        for (Index n = 0; n < s.n; ++n) {
          const std::int32_t* labels = saved[static_cast<std::size_t>(n)].data();
          for (Index i = 0; i < hw; ++i) dx.plane(n, labels[i])[i] -= 1.0;
        }
        dx.data() *= g[0] / count;
        tp.accumulate(logits, std::move(dx));
      });
}

double poly_lr(double base, Index step, Index total, double power) {
  if (total <= 0 || step >= total) return 0.0;
  return base * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

void Sgd::step(std::span<const NamedTensor> params, double lr) {
  std::size_t k = 0;
  for (const auto& p : params) {
    if (p.kind != ParamKind::learnable) continue;
    Tensor& t = *p.tensor;
    if (k == velocity_.size()) velocity_.push_back(Tensor::Vector::Zero(t.size()));
    Tensor::Vector& v = velocity_[k++];
    if (v.size() != t.size()) throw ShapeError("Sgd::step: parameter list changed between steps");
    if (!t.has_grad()) throw Error("Sgd::step: '" + p.name + "' has no gradient");
    v = momentum_ * v + t.grad() + weight_decay_ * t.data();
    t.data() -= lr * v;
  }
}

double clip_grad_norm(std::span<const NamedTensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p.kind == ParamKind::learnable && p.tensor->has_grad()) sq += p.tensor->grad().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      if (p.kind == ParamKind::learnable && p.tensor->has_grad()) p.tensor->grad() *= factor;
    }
  }
  return norm;
}

LabelMap predict_mask(const Tensor& logits) {
  const Shape s = logits.shape();
  if (s.n != 1) throw ShapeError("predict_mask takes a single image, got " + s.str());
  LabelMap out(s.h, s.w);
  for (Index i = 0; i < s.h * s.w; ++i) {
    Index best = 0;
    for (Index c = 1; c < s.c; ++c) {
      if (logits.plane(0, c)[i] > logits.plane(0, best)[i]) best = c;
    }
    out.data()[i] = static_cast<std::int32_t>(best);
  }
  return out;
}

Confusion::Confusion(Index classes) : classes_(classes), counts_(classes, classes) {
  if (classes < 1) throw Error("Confusion needs at least one class");
  counts_.setZero();
}

void Confusion::add(const LabelMap& pred, const LabelMap& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) {
    throw ShapeError("miou: prediction and truth sizes differ");
  }
  for (Index i = 0; i < pred.size(); ++i) {
    const Index p = pred.data()[i];
    const Index t = truth.data()[i];
    if (p < 0 || p >= classes_ || t < 0 || t >= classes_) throw Error("miou: label out of range");
    ++counts_(t, p);
  }
}

MiouResult Confusion::result() const {
  MiouResult r;
  double sum = 0.0;
  int present = 0;
  for (Index c = 0; c < classes_; ++c) {
    const std::int64_t tp = counts_(c, c);
    const std::int64_t fn = counts_.row(c).sum() - tp;
    const std::int64_t fp = counts_.col(c).sum() - tp;
    const std::int64_t denom = tp + fp + fn;
    if (denom == 0) {
      r.iou.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    r.iou.push_back(static_cast<double>(tp) / static_cast<double>(denom));
    sum += r.iou.back();
    ++present;
  }
  r.mean = present > 0 ? sum / present : 0.0;
  return r;
}

MiouResult miou(const LabelMap& pred, const LabelMap& truth, Index classes) {
  Confusion conf(classes);
  conf.add(pred, truth);
  return conf.result();
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* message) {
    if (!ok) throw Error(std::string("invalid train config: ") + message);
  };
  require(steps >= 0, "steps must be non-negative");
  require(batch_size >= 2, "batch_size must be at least 2 (train-mode batch norm)");
  require(lr > 0.0, "lr must be positive");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(poly_power >= 0.0, "poly_power must be non-negative");
  require(grad_clip >= 0.0, "grad_clip must be non-negative");
  require(eval_interval > 0, "eval_interval must be positive");
  require(eval_samples > 0, "eval_samples must be positive");
}

MiouResult evaluate_heldout(ModelParams& params, const ModelConfig& mcfg, Index count) {
  Confusion conf(mcfg.num_classes);
  for (Index i = 0; i < count; ++i) {
    ToySample s = heldout_sample(i, mcfg.input_h, mcfg.input_w, mcfg.num_classes);
    Tape tape;
    auto out = model_forward(tape.constant(std::move(s.image)), params, mcfg, NormMode::eval);
    conf.add(predict_mask(out.logits.value()), s.mask);
  }
  return conf.result();
}

std::string format_log_line(Index step, double lr, double loss, const double* miou) {
  char buf[160];
  int n = std::snprintf(buf, sizeof buf, "step=%lld lr=%.8f loss=%.6f", static_cast<long long>(step), lr, loss);
  if (miou) std::snprintf(buf + n, sizeof buf - static_cast<std::size_t>(n), " miou=%.4f", *miou);
  return buf;
}

TrainResult train_toy(const TrainConfig& cfg, const ModelConfig& mcfg,
                      const std::function<void(const std::string&)>& on_log) {
  cfg.validate();
  mcfg.validate();
  if (mcfg.in_channels != 3) throw Error("toy training needs in_channels = 3 (RGB shapes)");
  TrainResult result{ModelParams::init(mcfg, cfg.seed), {}, std::numeric_limits<double>::quiet_NaN(), 0.0};
  const auto registry = param_registry(result.params);
  Sgd sgd(cfg.momentum, cfg.weight_decay);
  // Separate stream for data so initialization and batches are independent.
  Rng data_rng(cfg.seed ^ 0xA5A5A5A5DA7AULL);

  for (Index step = 0; step < cfg.steps; ++step) {
    const double lr = poly_lr(cfg.lr, step, cfg.steps, cfg.poly_power);
    std::vector<Tensor> images;
    std::vector<LabelMap> masks;
    for (Index b = 0; b < cfg.batch_size; ++b) {
      ToySample s = gen_toy_sample(data_rng, mcfg.input_h, mcfg.input_w, mcfg.num_classes);
      images.push_back(std::move(s.image));
      masks.push_back(std::move(s.mask));
    }
    double loss_value = 0.0;
    try {
      Tape tape;
      auto out = model_forward(tape.constant(stack_batch(std::span<const Tensor>(images))), result.params, mcfg, NormMode::train);
      Var loss = cross_entropy(out.logits, masks);
      loss_value = loss.value()[0];
      if (!std::isfinite(loss_value)) throw NumericError("loss is not finite");
      tape.backward(loss);
      if (cfg.grad_clip > 0.0) clip_grad_norm(registry, cfg.grad_clip);
      sgd.step(registry, lr);
      for (const auto& p : registry) {
        if (!p.tensor->all_finite()) throw NumericError("parameter '" + p.name + "' is not finite");
      }
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    result.final_loss = loss_value;

    const bool eval = (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps;
    double m = 0.0;
    if (eval) {
      m = evaluate_heldout(result.params, mcfg, cfg.eval_samples).mean;
      result.final_miou = m;
    }
    result.log.push_back(format_log_line(step, lr, loss_value, eval ? &m : nullptr));
    if (on_log) on_log(result.log.back());
  }
  if (cfg.steps == 0) result.final_miou = evaluate_heldout(result.params, mcfg, cfg.eval_samples).mean;
  return result;
}

}  // namespace cgr
