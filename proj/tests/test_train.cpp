#include "oracles.hpp"

#include "cgrseg/train.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace cgr;

namespace {

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.input_h = 64;
  cfg.input_w = 64;
  return cfg;
}

TrainConfig short_run() {
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 2;
  cfg.eval_interval = 2;
  cfg.eval_samples = 2;
  cfg.seed = 11;
  return cfg;
}

LabelMap constant_mask(Index h, Index w, int label) { return LabelMap::Constant(h, w, label); }

}  // namespace

TEST_CASE("cross entropy values") {
  Tape tape;
  std::vector<LabelMap> masks{constant_mask(2, 3, 1)};
  CHECK(cross_entropy(tape.constant(Tensor::zeros(Shape{1, 4, 2, 3})), masks).value()[0] ==
        doctest::Approx(std::log(4.0)).epsilon(1e-15));

  Tensor confident = Tensor::zeros(Shape{1, 4, 2, 3});
  for (Index i = 0; i < 6; ++i) confident.plane(0, 1)[i] = 30.0;
  CHECK(cross_entropy(tape.constant(confident), masks).value()[0] < 1e-9);

  // Two pixels with hand-computed log-softmax terms.
  Tensor two(Shape{1, 2, 1, 2});
  two(0, 0, 0, 0) = 1.0;
  two(0, 1, 0, 1) = 2.0;
  LabelMap m(1, 2);
  m << 0, 0;
  std::vector<LabelMap> mm{m};
  const double want = 0.5 * (std::log(1.0 + std::exp(-1.0)) + std::log(1.0 + std::exp(2.0)));
  CHECK(cross_entropy(tape.constant(two), mm).value()[0] == doctest::Approx(want).epsilon(1e-14));

  std::vector<LabelMap> bad{constant_mask(2, 3, 4)};
  CHECK_THROWS_AS(cross_entropy(tape.constant(Tensor::zeros(Shape{1, 4, 2, 3})), bad), Error);
  std::vector<LabelMap> wrong{constant_mask(3, 3, 0)};
  CHECK_THROWS_AS(cross_entropy(tape.constant(Tensor::zeros(Shape{1, 4, 2, 3})), wrong), ShapeError);
}

TEST_CASE("poly schedule") {
  CHECK(poly_lr(0.01, 0, 100, 1.0) == 0.01);
  CHECK(poly_lr(0.01, 50, 100, 1.0) == doctest::Approx(0.005).epsilon(1e-15));
  CHECK(poly_lr(0.01, 50, 100, 2.0) == doctest::Approx(0.0025).epsilon(1e-15));
  CHECK(poly_lr(0.01, 100, 100, 1.0) == 0.0);
  CHECK(poly_lr(0.01, 150, 100, 1.0) == 0.0);
}

TEST_CASE("sgd with momentum and weight decay, two steps by hand") {
  Tensor theta = Tensor::ones(Shape{1, 1, 1, 1});
  Tensor stats = Tensor::ones(Shape{1, 1, 1, 1});
  std::vector<NamedTensor> params{{"theta", &theta, ParamKind::learnable}, {"stats", &stats, ParamKind::buffer}};
  Sgd sgd(0.9, 0.1);
  theta.set_grad(Tensor::Vector::Constant(1, 0.5));
  sgd.step(params, 0.1);
  // v = 0.5 + 0.1 * 1 = 0.6, theta = 1 - 0.06
  CHECK(theta[0] == doctest::Approx(0.94).epsilon(1e-15));
  theta.set_grad(Tensor::Vector::Constant(1, 0.5));
  sgd.step(params, 0.1);
  // v = 0.9 * 0.6 + 0.5 + 0.1 * 0.94 = 1.134
  CHECK(theta[0] == doctest::Approx(0.8266).epsilon(1e-14));
  CHECK(stats[0] == 1.0);

  Tensor plain = Tensor::constant(Shape{1, 2, 1, 1}, 2.0);
  std::vector<NamedTensor> one{{"plain", &plain, ParamKind::learnable}};
  Sgd gd(0.0, 0.0);
  plain.set_grad(Tensor::Vector::Constant(2, 3.0));
  gd.step(one, 0.25);
  CHECK(plain.data().isConstant(1.25, 0.0));
}

TEST_CASE("gradient norm clipping") {
  Tensor a = Tensor::zeros(Shape{1, 1, 1, 1});
  Tensor b = Tensor::zeros(Shape{1, 1, 1, 1});
  std::vector<NamedTensor> params{{"a", &a, ParamKind::learnable}, {"b", &b, ParamKind::learnable}};
  a.set_grad(Tensor::Vector::Constant(1, 3.0));
  b.set_grad(Tensor::Vector::Constant(1, 4.0));
  CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == 3.0);
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(b.grad()[0] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("prediction and mIoU") {
  Tensor logits = Tensor::zeros(Shape{1, 3, 1, 3});
  logits(0, 2, 0, 0) = 1.0;
  logits(0, 1, 0, 1) = 1.0;
  logits(0, 2, 0, 1) = 1.0;  // tie between 1 and 2 goes to 1
  const LabelMap pred = predict_mask(logits);
  CHECK(pred(0, 0) == 2);
  CHECK(pred(0, 1) == 1);
  CHECK(pred(0, 2) == 0);

  const LabelMap a = constant_mask(4, 4, 1);
  CHECK(miou(a, a, 2).mean == 1.0);
  CHECK(std::isnan(miou(a, a, 2).iou[0]));
  CHECK(miou(constant_mask(4, 4, 0), a, 2).mean == 0.0);

  LabelMap truth = LabelMap::Zero(4, 4), guess = LabelMap::Zero(4, 4);
  truth(0, 0) = truth(0, 1) = truth(0, 2) = 1;
  guess(0, 1) = guess(0, 2) = guess(1, 1) = 1;
  const MiouResult r = miou(guess, truth, 3);
  CHECK(r.iou[1] == doctest::Approx(0.5).epsilon(1e-15));  // TP 2, FP 1, FN 1
  CHECK(r.iou[0] == doctest::Approx(12.0 / 14.0).epsilon(1e-15));
  CHECK(std::isnan(r.iou[2]));
  CHECK(r.mean == doctest::Approx(19.0 / 28.0).epsilon(1e-15));

  // Pooled counts across pairs, not an average of per-pair scores.
  Confusion conf(2);
  conf.add(guess, truth);
  conf.add(truth, truth);
  CHECK(conf.count(1, 1) == 5);
  CHECK(conf.result().iou[1] == doctest::Approx(5.0 / 7.0).epsilon(1e-15));
  CHECK_THROWS_AS(conf.add(LabelMap::Zero(2, 2), truth), ShapeError);
  CHECK_THROWS_AS(conf.add(constant_mask(4, 4, 2), truth), Error);
}

TEST_CASE("toy samples") {
  Rng a(5), b(5);
  const ToySample s = gen_toy_sample(a, 64, 128, 4);
  const ToySample t = gen_toy_sample(b, 64, 128, 4);
  CHECK(s.image.shape() == Shape{1, 3, 64, 128});
  CHECK(s.mask.rows() == 64);
  CHECK(s.mask.cols() == 128);
  CHECK(s.image.data() == t.image.data());
  CHECK(s.mask == t.mask);

  Rng rng(6);
  for (int i = 0; i < 300; ++i) {
    const ToySample x = gen_toy_sample(rng, 64, 64, 4);
    const double fg = foreground_fraction(x.mask);
    CHECK(fg > 0.05);
    CHECK(fg < 0.6);
    CHECK(x.mask.minCoeff() >= 0);
    CHECK(x.mask.maxCoeff() < 4);
    CHECK(x.image.data().minCoeff() >= 0.0);
    CHECK(x.image.data().maxCoeff() <= 1.0);
    // Background is gray: equal channels.
    bool gray = true;
    for (Index y = 0; y < 64; ++y)
      for (Index z = 0; z < 64; ++z)
        if (x.mask(y, z) == 0) gray = gray && x.image(0, 0, y, z) == x.image(0, 1, y, z) && x.image(0, 1, y, z) == x.image(0, 2, y, z);
    CHECK(gray);
  }

  std::set<std::array<double, 3>> colors;
  for (Index c = 1; c <= 7; ++c) colors.insert(class_color(c));
  CHECK(colors.size() == 7);

  const ToySample h0 = heldout_sample(0, 64, 64, 4);
  CHECK(heldout_sample(0, 64, 64, 4).mask == h0.mask);
  CHECK_FALSE(heldout_sample(1, 64, 64, 4).mask == h0.mask);
  Rng r2(7);
  CHECK_THROWS_AS(gen_toy_sample(r2, 64, 64, 1), Error);
  CHECK_THROWS_AS(gen_toy_sample(r2, 60, 64, 4), Error);
}

TEST_CASE("log line format") {
  CHECK(format_log_line(3, 0.5, 1.25, nullptr) == "step=3 lr=0.50000000 loss=1.250000");
  const double m = 0.75;
  CHECK(format_log_line(0, 0.01, 1.0, &m) == "step=0 lr=0.01000000 loss=1.000000 miou=0.7500");
}

TEST_CASE("short training runs are reproducible") {
  const TrainConfig cfg = short_run();
  std::vector<std::string> streamed;
  const TrainResult a = train_toy(cfg, small_model(), [&](const std::string& line) { streamed.push_back(line); });
  const TrainResult b = train_toy(cfg, small_model());
  CHECK(a.log == b.log);
  CHECK(a.log == streamed);
  REQUIRE(a.log.size() == 3);
  // A zero classifier makes the first loss exactly ln 4.
  CHECK(a.log[0].starts_with("step=0 lr=0.01000000 loss=1.386294"));
  CHECK(a.log[0].find("miou") == std::string::npos);
  CHECK(a.log[1].find("miou=") != std::string::npos);
  CHECK(a.log[2].find("miou=") != std::string::npos);
  CHECK(std::isfinite(a.final_loss));

  TrainConfig other = cfg;
  other.seed = 12;
  CHECK(train_toy(other, small_model()).log != a.log);
}

TEST_CASE("zero steps leave the initialization untouched") {
  TrainConfig cfg = short_run();
  cfg.steps = 0;
  TrainResult r = train_toy(cfg, small_model());
  ModelParams fresh = ModelParams::init(small_model(), cfg.seed);
  const auto got = param_registry(r.params);
  const auto want = param_registry(fresh);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i].tensor->data() == want[i].tensor->data());
  CHECK(r.log.empty());
  CHECK(std::isnan(r.final_loss));
  CHECK(r.final_miou >= 0.0);
}

TEST_CASE("invalid training setups") {
  TrainConfig cfg = short_run();
  cfg.batch_size = 1;
  CHECK_THROWS_AS(train_toy(cfg, small_model()), Error);
  ModelConfig gray = small_model();
  gray.in_channels = 1;
  CHECK_THROWS_AS(train_toy(short_run(), gray), Error);

  TrainConfig wild = short_run();
  wild.steps = 30;
  wild.lr = 1e300;
  wild.grad_clip = 0.0;
  wild.momentum = 0.0;
  try {
    train_toy(wild, small_model());
    FAIL("expected divergence");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("training diverged at step") != std::string::npos);
  }
}
