#include "cast/profiler.hpp"
#include "support.hpp"

#include <map>

using namespace cast;
using namespace cast::test;

namespace {

std::map<std::string, std::pair<std::int64_t, std::int64_t>> by_name(const std::vector<CostRow>& rows) {
  std::map<std::string, std::pair<std::int64_t, std::int64_t>> m;
  for (const auto& r : rows) m[r.name] = {r.learnable, r.frozen};
  return m;
}

double giga(std::int64_t v) { return static_cast<double>(v) / 1e9; }

}  // namespace

TEST_CASE("analytic counts equal the instantiated parameter registry") {
  for (const auto& tag : variant_tags())
    for (bool out_proj : {true, false}) {
      CAPTURE(tag);
      CAPTURE(out_proj);
      CastConfig c = toy_config(tag);
      c.out_proj = out_proj;
      CastModel<float> m(c);
      const auto report = count_params(c);
      CHECK(by_name(report.rows) == by_name(registry_rows(m.params())));
      CHECK(report.learnable == m.params().count_values(false));
      CHECK(report.frozen == m.params().count_values(true));
    }
}

TEST_CASE("cost_row_of groups parameters by layer") {
  CHECK(cost_row_of("spatial.block3.bcast.s2t.q.weight") == "exchange.block3");
  CHECK(cost_row_of("temporal.block1.lateral.weight") == "exchange.block1");
  CHECK(cost_row_of("temporal.block1.adapter_mlp.up.bias") == "temporal.block1");
  CHECK(cost_row_of("spatial.cls_token") == "spatial.embed");
  CHECK(cost_row_of("spatial.norm.weight") == "spatial.norm");
  CHECK(cost_row_of("head.motion.fc.weight") == "head");
}

TEST_CASE("adapter arithmetic on a one-block toy") {
  CastConfig c = toy_config("identity");
  c.depth = 1;
  c.dim = 8;
  c.heads = 2;
  c.adapter_ratio = 0.5;
  CostAssumptions no_bias;
  no_bias.include_biases = false;
  const auto rows = by_name(count_params(c, no_bias).rows);
  // Two adapters per block, each 2 * 8 * 4 = 64 weights.
  CHECK(rows.at("spatial.block1").first == 2 * 64);
  CHECK(by_name(count_params(c).rows).at("spatial.block1").first == 2 * (64 + 4 + 8));
}

TEST_CASE("totals are row sums and identity exchange costs nothing") {
  for (const auto& tag : variant_tags()) {
    const auto r = profile(toy_config(tag), 3);
    std::int64_t l = 0, f = 0, fl = 0;
    for (const auto& row : r.rows) {
      l += row.learnable;
      f += row.frozen;
      fl += row.flops;
    }
    CHECK(l == r.learnable);
    CHECK(f == r.frozen);
    CHECK(fl == r.flops_per_view);
    CHECK(r.total_flops == 3 * r.flops_per_view);
  }
  const auto id = profile(toy_config("identity"));
  for (const auto& row : id.rows) CHECK(row.name.rfind("exchange.", 0) == std::string::npos);
  CHECK(profile(toy_config("identity")).flops_per_view < profile(toy_config("cast")).flops_per_view);
}

TEST_CASE("costs grow with depth, width and frames") {
  const CastConfig base = toy_config();
  CastConfig deeper = base, wider = base, longer = base;
  deeper.depth = 3;
  wider.dim = 64;
  longer.frames = 8;
  const auto b = profile(base);
  for (const auto& c : {deeper, wider}) {
    const auto r = profile(c);
    CHECK(r.learnable > b.learnable);
    CHECK(r.frozen > b.frozen);
    CHECK(r.flops_per_view > b.flops_per_view);
  }
  CHECK(profile(longer).flops_per_view > b.flops_per_view);
  CastConfig r2 = base;
  r2.bcast_ratio = 0.25;
  CHECK(count_params(r2).learnable < b.learnable);
}

TEST_CASE("ViT-B scale figures") {
  const CastConfig big = CastConfig::paper_scale();
  const double s = giga(count_flops(tower_config(big, TowerSelect::spatial), 1).flops_per_view);
  const double t = giga(count_flops(tower_config(big, TowerSelect::temporal), 1).flops_per_view);
  const auto cast6 = count_flops(big, 6);
  MESSAGE("GFLOPs/view spatial " << s << " temporal " << t << " cast " << giga(cast6.flops_per_view));
  CHECK(std::abs(s / 140.0 - 1) < 0.1);
  CHECK(std::abs(t / 180.0 - 1) < 0.1);
  CHECK(std::abs(giga(cast6.flops_per_view) / 391.0 - 1) < 0.1);
  CHECK(std::abs(giga(cast6.total_flops) / 2350.0 - 1) < 0.1);

  std::vector<double> learn;
  for (const char* tag : {"identity", "cast", "no_adapter", "xattn_then_adapter"})
    learn.push_back(static_cast<double>(count_params(apply_variant(big, tag)).learnable) / 1e6);
  MESSAGE("learnable M: " << learn[0] << " " << learn[1] << " " << learn[2] << " " << learn[3]);
  CHECK(learn[0] < learn[1]);
  CHECK(learn[1] < learn[2]);
  CHECK(learn[2] < learn[3]);
  CHECK(std::abs(learn[1] / 44.8 - 1) < 0.15);
}

TEST_CASE("adapter ratio fit and rendering") {
  CostReport r = count_params(CastConfig::paper_scale());
  fit_adapter_ratio(r, 18.1e6);
  CHECK(r.best_fit_adapter_ratio > 0.0);
  CHECK(std::abs(static_cast<double>(r.best_fit_learnable) / 18.1e6 - 1) < 0.01);
  CHECK(report_json(r).find("\"rows\"") != std::string::npos);
  CHECK(report_text(r).find("exchange.block1") != std::string::npos);
  CHECK(assumptions_text(r).find("adapter") != std::string::npos);
  CHECK_THROWS_AS(profile(toy_config(), 0), ConfigError);
}
