#include "cgrseg/gradcheck.hpp"

#include "cgrseg/rng.hpp"

#include <algorithm>
#include <cmath>

namespace cgr {

namespace {

struct Evaluation {
  double value;
  std::vector<bool> relu_signs;
};

Evaluation evaluate(const Objective& f) {
  ReluSignRecorder recorder;
  Tape tape;
  const double v = f(tape).value()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check objective is not finite");
  return {v, recorder.signs()};
}

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

std::vector<NamedTensor> collect(const std::function<void(const ParamVisitor&)>& visit_all) {
  std::vector<NamedTensor> out;
  visit_all([&](const std::string& name, Tensor& t, ParamKind kind) { out.push_back({name, &t, kind}); });
  return out;
}

// Mean of output (*) fixed random weights; keeps the objective O(1).
Var probe(Var out, const Tensor& weights) {
  return mean(mul_hadamard(out, out.tape().constant(weights.reshaped(weights.shape()))));
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const Objective& f, std::span<const NamedTensor> params,
                           const GradCheckOptions& opt) {
  std::vector<NamedTensor> learnable;
  for (const auto& p : params) {
    if (p.kind == ParamKind::learnable && p.tensor->size() > 0) learnable.push_back(p);
  }
  if (learnable.empty()) throw Error("grad_check has no learnable tensors");

  std::vector<bool> base_signs;
  {
    ReluSignRecorder recorder;
    Tape tape;
    Var loss = f(tape);
    if (!std::isfinite(loss.value()[0])) throw NumericError("grad_check objective is not finite");
    tape.backward(loss);
    base_signs = recorder.signs();
  }
  std::vector<Tensor::Vector> analytic;
  analytic.reserve(learnable.size());
  for (const auto& p : learnable) {
    Tensor::Vector g = p.tensor->has_grad() ? p.tensor->grad() : Tensor::Vector::Zero(p.tensor->size());
    if (!opt.corrupt.empty() && p.name == opt.corrupt) g *= opt.corrupt_factor;
    analytic.push_back(std::move(g));
  }

  GradCheckResult result;
  // Returns false when the +-eps interval crosses a ReLU kink, where central
  // differences do not estimate the one-sided derivative backward() uses.
  auto check = [&](std::size_t t, Index i, bool forced) {
    Tensor& param = *learnable[t].tensor;
    const double saved = param[i];
    param[i] = saved + opt.eps;
    const Evaluation up = evaluate(f);
    param[i] = saved - opt.eps;
    const Evaluation down = evaluate(f);
    param[i] = saved;
    if (!forced && (up.relu_signs != base_signs || down.relu_signs != base_signs)) {
      ++result.kinks_skipped;
      return false;
    }
    const double numeric = (up.value - down.value) / (2.0 * opt.eps);
    const double err = relative_error(analytic[t][i], numeric, opt.floor);
    ++result.checked;
    if (err > result.max_rel_error || result.worst_index < 0) {
      result.max_rel_error = std::max(err, result.max_rel_error);
      result.worst_name = learnable[t].name;
      result.worst_index = i;
      result.worst_analytic = analytic[t][i];
      result.worst_numeric = numeric;
    }
    return true;
  };

  Rng rng(opt.seed);
  const int max_draws = 20 * opt.samples;
  for (int draw = 0; draw < max_draws && result.checked < opt.samples; ++draw) {
    const auto t = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(learnable.size()) - 1));
    check(t, rng.uniform_int(0, learnable[t].tensor->size() - 1), false);
  }
  if (!opt.corrupt.empty()) {
    for (std::size_t t = 0; t < learnable.size(); ++t) {
      if (learnable[t].name != opt.corrupt) continue;
      // Largest-magnitude coordinate so the corruption is visible.
      Index best = 0;
      analytic[t].cwiseAbs().maxCoeff(&best);
      check(t, best, true);
    }
  }
  return result;
}

void randomize_params(std::span<const NamedTensor> params, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& p : params) {
    Tensor& t = *p.tensor;
    const Shape& s = t.shape();
    const bool vector_like = s.n == 1 && s.h == 1 && s.w == 1;
    double lo = -0.5;
    double hi = 0.5;
    if (p.name.ends_with("running_var") || p.name.ends_with("gamma")) {
      lo = 0.5;
      hi = 1.5;
    } else if (!vector_like) {
      // Fan-in scaled so activations keep O(1) magnitude through deep stacks.
      hi = std::sqrt(6.0 / static_cast<double>(s.c * s.h * s.w));
      lo = -hi;
    }
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  }
}

std::vector<BlockCheck> run_gradcheck_suite(std::uint64_t seed, const GradCheckOptions& opt) {
  std::vector<BlockCheck> checks;
  Rng rng(seed);

  for (RcaVariant variant : {RcaVariant::add, RcaVariant::mul}) {
    const BlockOptions bopt{variant, NormMode::eval};
    const Shape s{2, 8, 6, 6};
    RcmParams rcm = RcmParams::init(8, 5, 3, 2, rng);
    auto named = collect([&](const ParamVisitor& v) { visit_params(rcm, "rcm", v); });
    randomize_params(named, rng.next_u64());
    Tensor x = random_tensor(s, rng);
    Tensor w = random_tensor(s, rng);
    named.push_back({"input", &x, ParamKind::learnable});

    if (variant == RcaVariant::add) {
      Objective rca = [&](Tape& t) { return probe(rca_attention(t.parameter(x), rcm, bopt), w); };
      checks.push_back({"rca", grad_check(rca, named, opt)});
    }
    Objective block = [&](Tape& t) { return probe(rcm_forward(t.parameter(x), rcm, bopt), w); };
    checks.push_back({std::string("rcm.") + to_string(variant), grad_check(block, named, opt)});
  }

  {
    // Hidden width 4: LayerNorm over two values is nearly constant.
    DpgParams head = DpgParams::init(4, 16, 4, rng);
    auto named = collect([&](const ParamVisitor& v) { visit_params(head, "dpg", v); });
    randomize_params(named, rng.next_u64());
    Tensor x = random_tensor(Shape{2, 16, 6, 6}, rng);
    Tensor w = random_tensor(Shape{2, 4, 6, 6}, rng);
    named.push_back({"input", &x, ParamKind::learnable});
    Objective f = [&](Tape& t) { return probe(dpg_head_forward(t.parameter(x), head), w); };
    checks.push_back({"dpg_head", grad_check(f, named, opt)});
  }

  {
    ModelConfig cfg;
    cfg.stage_channels = {8, 16, 24, 32};
    cfg.head_width = 16;
    ModelParams params = ModelParams::init(cfg, rng.next_u64());
    auto named = param_registry(params);
    randomize_params(named, rng.next_u64());
    Tensor img = random_tensor(Shape{2, 3, 64, 64}, rng, 0.0, 1.0);
    Tensor w = random_tensor(Shape{2, cfg.num_classes, 64, 64}, rng);
    // Pull running statistics toward the batch statistics so frozen BN keeps
    // activations in range and the gates stay out of saturation.
    for (int pass = 0; pass < 40; ++pass) {
      Tape tape;
      model_forward(tape.constant(img.reshaped(img.shape())), params, cfg, NormMode::train);
    }
    // The prototype is quadratic in the head features; unnormalized decoder
    // sums reach ~20 under random weights and would saturate the class softmax.
    params.head_in.data() *= 0.1;
    Objective f = [&](Tape& t) {
      return probe(model_forward(t.constant(img.reshaped(img.shape())), params, cfg, NormMode::eval).logits, w);
    };
    checks.push_back({"model", grad_check(f, named, opt)});
  }
  return checks;
}

}  // namespace cgr
