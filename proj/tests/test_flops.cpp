#include "oracles.hpp"

#include "cgrseg/flops.hpp"

#include <doctest.h>

#include <map>

using namespace cgr;

using i64 = std::int64_t;
using oracle::tiny_closed_form;

TEST_CASE("conv MAC counts") {
  CHECK(conv_macs(1, 128, 16, 16, 64, 1, 1) == 2097152);
  CHECK(conv_macs(1, 32, 8, 1, 1, 1, 11) == 2816);
  CHECK(conv_macs(2, 8, 4, 4, 3, 3, 3) == 6912);
}

TEST_CASE("tiny model at 512x512 matches the closed form") {
  const ModelConfig cfg;
  const FlopsReport r = count_flops(cfg, 512, 512);
  CHECK(tiny_closed_form(512) == 78896384);
  CHECK(r.total_macs() == tiny_closed_form(512));
  CHECK(count_flops(cfg, 1024, 1024).total_macs() == tiny_closed_form(1024));
  CHECK(count_flops(cfg, 128, 128).total_macs() == tiny_closed_form(128));
}

TEST_CASE("doubling the input quadruples spatial MACs") {
  const ModelConfig cfg;
  const FlopsReport a = count_flops(cfg, 512, 512);
  const FlopsReport b = count_flops(cfg, 1024, 1024);
  i64 spatial_a = 0, spatial_b = 0, fc_a = 0, fc_b = 0;
  for (const auto& e : a.entries) {
    spatial_a += e.conv_macs + e.matmul_macs;
    fc_a += e.fc_macs;
  }
  for (const auto& e : b.entries) {
    spatial_b += e.conv_macs + e.matmul_macs;
    fc_b += e.fc_macs;
  }
  CHECK(spatial_b == 4 * spatial_a);
  CHECK(fc_a == 256);
  CHECK(fc_b == fc_a);
  CHECK(b.total_macs() == 4 * a.total_macs() - 3 * fc_a);
  CHECK(b.total_params() == a.total_params());
}

TEST_CASE("rectangular inputs") {
  const ModelConfig cfg;
  const FlopsReport r = count_flops(cfg, 128, 256);
  CHECK(r.entry("backbone.stage1.conv0").conv_macs == 64 * 128 * 3 * 8 * 9);
  CHECK(r.entry("pyramid.rcm0").conv_macs == 2 * 4 * 72 * (2 * 11 + 9 + 2 * 4 * 72));  // 2x4 grid
  CHECK_THROWS_AS(count_flops(cfg, 100, 100), Error);
  CHECK_THROWS_AS(r.entry("nope"), Error);
}

TEST_CASE("parameter counts agree with the registry") {
  for (bool use_rcm : {true, false}) {
    ModelConfig cfg;
    cfg.use_rcm = use_rcm;
    ModelParams p = ModelParams::init(cfg, 0);
    const FlopsReport r = count_flops(cfg, 128, 128);
    std::map<std::string, std::pair<i64, i64>> from_flops;
    for (const auto& e : r.entries) {
      if (e.params == 0 && e.buffers == 0) continue;
      from_flops[e.name] = {e.params, e.buffers};
    }
    i64 learnable = 0, buffers = 0;
    for (const auto& c : count_params(p)) {
      CAPTURE(c.module);
      REQUIRE(from_flops.count(c.module) == 1);
      CHECK(from_flops[c.module].first == c.learnable);
      CHECK(from_flops[c.module].second == c.buffers);
      learnable += c.learnable;
      buffers += c.buffers;
    }
    CHECK(learnable == r.total_params());
    CHECK(buffers == r.total_buffers());
  }
}

TEST_CASE("hand-counted head parameters") {
  const FlopsReport r = count_flops(ModelConfig{}, 64, 64);
  // proj 4x16+4, compress 16, fc1 4x16+4, LayerNorm 2x4, fc2 16x4+16, classifier 4x16+4.
  CHECK(r.entry("head.dpg").params == 308);
  CHECK(r.entry("head.in_proj").params == 16 * 16);
  // A 1x1 conv 16 -> 16 with no bias at 1/8 of 64x64.
  CHECK(r.entry("decoder.align_enc.s8").conv_macs == 8 * 8 * 16 * 16);
}

TEST_CASE("module names") {
  CHECK(param_module("sfr.s8.mlp_w1") == "sfr.s8");
  CHECK(param_module("backbone.stage2.conv1.bn.gamma") == "backbone.stage2.conv1");
  CHECK(param_module("decoder.align_enc.s8") == "decoder.align_enc.s8");
  CHECK(param_module("head.in_proj") == "head.in_proj");
  CHECK(param_module("head.dpg.fc1_w") == "head.dpg");
}
