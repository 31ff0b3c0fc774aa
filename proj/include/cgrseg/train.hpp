#pragma once

#include "cgrseg/autodiff.hpp"
#include "cgrseg/model.hpp"
#include "cgrseg/toy_data.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace cgr {

/// Mean over all pixels of -log softmax(logits)[label]. Softmax runs over the
/// channel axis; masks[n] labels batch element n.
/// Throws ShapeError on mismatched extents and Error on out-of-range labels.
Var cross_entropy(Var logits, std::span<const LabelMap> masks);

/// base * (1 - step / total)^power; 0 once step >= total.
double poly_lr(double base, Index step, Index total, double power);

/// SGD with heavy-ball momentum and L2 weight decay:
///   v <- m * v + g + wd * theta;  theta <- theta - lr * v.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  /// Updates every learnable tensor from its grad slot. The tensor list must
  /// be the same on every call; buffers are skipped.
  void step(std::span<const NamedTensor> params, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor::Vector> velocity_;
};

/// Rescales the gradients of all learnable tensors so their joint L2 norm is
/// at most `max_norm`. Returns the norm before clipping.
double clip_grad_norm(std::span<const NamedTensor> params, double max_norm);

/// Argmax over channels of (1, C, H, W) logits; ties pick the lowest class.
LabelMap predict_mask(const Tensor& logits);

struct MiouResult {
  std::vector<double> iou;       // per class; NaN where the class is absent from both
  double mean = 0.0;             // over classes present in prediction or truth
};

/// Pixel confusion counts accumulated over any number of mask pairs.
class Confusion {
 public:
  explicit Confusion(Index classes);
  /// Throws ShapeError on mismatched sizes and Error on out-of-range labels.
  void add(const LabelMap& pred, const LabelMap& truth);
  MiouResult result() const;
  std::int64_t count(Index truth, Index pred) const { return counts_(truth, pred); }

 private:
  Index classes_;
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts_;
};

/// IoU_c = TP / (TP + FP + FN) for a single pair.
MiouResult miou(const LabelMap& pred, const LabelMap& truth, Index classes);

struct TrainConfig {
  Index steps = 2000;
  Index batch_size = 8;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double poly_power = 1.0;
  double grad_clip = 1.0;  // global L2 norm cap on the gradient; 0 disables
  std::uint64_t seed = 0;
  Index eval_interval = 250;
  Index eval_samples = 32;

  /// Throws Error on any violated invariant.
  void validate() const;
};

/// mIoU of eval-mode predictions over held-out samples 0..count-1, pooled
/// into one confusion matrix.
MiouResult evaluate_heldout(ModelParams& params, const ModelConfig& mcfg, Index count);

struct TrainResult {
  ModelParams params;
  std::vector<std::string> log;  // one metrics record per step
  double final_loss = 0.0;       // NaN when no step ran
  double final_miou = 0.0;
};

/// "step=<int> lr=<float> loss=<float>[ miou=<float>]".
std::string format_log_line(Index step, double lr, double loss, const double* miou);

/// Seeded loop: sample batch -> forward (train-mode BN) -> cross entropy ->
/// backward -> SGD with a poly schedule. mIoU on the held-out set is logged
/// every eval_interval steps and after the last step. `on_log` sees each
/// record as it is produced. Throws NumericError naming the step on
/// divergence.
TrainResult train_toy(const TrainConfig& cfg, const ModelConfig& mcfg,
                      const std::function<void(const std::string&)>& on_log = {});

}  // namespace cgr
