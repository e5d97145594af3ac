// Acceptance suite: one PASS/FAIL line per criterion.
//   cast_acceptance [--mode fast|experiment|all] [--only N]...
#include "cast/checkpoint.hpp"
#include "cast/hashing.hpp"
#include "cast/profiler.hpp"
#include "cast/run_config.hpp"
#include "oracles.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sys/wait.h>

using namespace cast;
using namespace cast::test;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kHmTol = 0.05;           // criterion 1, absolute
constexpr double kFlopTol = 0.10;         // criterion 2, relative
constexpr double kParamTol = 0.15;        // criterion 3, relative
constexpr double kGradTol = 1e-4;         // criterion 4, max relative error
constexpr double kGradFloor = 1e-6;       // criterion 4, denominator floor
constexpr double kGradStep = 1e-5;        // criterion 4, central-difference step
constexpr double kWindowTol = 1e-5;       // criterion 6, max abs difference
constexpr int kFrozenSteps = 200;         // criterion 7
constexpr double kHmMargin = 5.0;         // criterion 8(b), points
constexpr int kIdentityClips = 100;       // criterion 5

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

Outcome metric_reproduction() {
  const double a = harmonic_mean({72.5, 60.9, 71.6, 85.3});
  const double b = harmonic_mean({54.9, 52.7, 47.8, 78.9});
  const double c = harmonic_mean({71.6, 85.3});
  const bool ok = std::abs(a - 71.6) <= kHmTol && std::abs(b - 56.5) <= kHmTol && std::abs(c - 77.9) <= kHmTol;
  return {ok, fmt("HM = %.3f / %.3f / %.3f (targets 71.6 / 56.5 / 77.9, tol %.2f)", a, b, c, kHmTol)};
}

Outcome flop_reproduction() {
  const CastConfig big = CastConfig::paper_scale();
  const double s = double(count_flops(tower_config(big, TowerSelect::spatial), 1).flops_per_view) / 1e9;
  const double t = double(count_flops(tower_config(big, TowerSelect::temporal), 1).flops_per_view) / 1e9;
  const auto full = count_flops(big, 6);
  const double c = double(full.flops_per_view) / 1e9, c6 = double(full.total_flops) / 1e12;
  auto near = [](double v, double target) { return std::abs(v / target - 1.0) <= kFlopTol; };
  const bool ok = near(s, 140) && near(t, 180) && near(c, 391) && near(c6, 2.35);
  return {ok, fmt("GFLOPs/view spatial %.1f (140), temporal %.1f (180), CAST %.1f (391); x6 views %.3f TFLOPs (2.35); "
                  "tol %.0f%%, 1 FLOP per multiply-accumulate",
                  s, t, c, c6, kFlopTol * 100)};
}

Outcome parameter_accounting() {
  bool ok = true;
  std::string detail;
  for (bool out_proj : {true, false}) {
    CastConfig big = CastConfig::paper_scale();
    big.out_proj = out_proj;
    std::vector<double> m;
    for (const char* tag : {"identity", "cast", "no_adapter", "xattn_then_adapter"})
      m.push_back(double(count_params(apply_variant(big, tag)).learnable) / 1e6);
    const bool order = m[0] < m[1] && m[1] < m[2] && m[2] < m[3];
    const bool near = std::abs(m[1] / 44.8 - 1.0) <= kParamTol;
    ok = ok && order && near;
    detail += fmt("%sout_proj=%d: %.2f < %.2f < %.2f < %.2f M (%s), bcast %.2f vs 44.8 M", detail.empty() ? "" : "; ",
                  int(out_proj), m[0], m[1], m[2], m[3], order ? "ordered" : "NOT ordered", m[1]);
  }
  return {ok, detail + fmt(" (tol %.0f%%, adapter ratio 0.25, biases counted)", kParamTol * 100)};
}

Var<double> summed_loss(Tape<double>& tape, const CastModel<double>& m, const Tensor<double>& clip) {
  auto out = m.forward(tape, clip);
  Var<double> loss;
  for (const auto& t : out.tasks)
    for (const auto& member : t.members) {
      std::vector<int> labels(static_cast<std::size_t>(clip.dim(0)));
      for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>((i * 7 + 3) % member.cols());
      auto ce = cross_entropy(member, std::span<const int>(labels));
      loss = loss.tape ? add(loss, ce) : ce;
    }
  return loss;
}

Outcome gradient_correctness() {
  CastModel<double> m(toy_config("cast"));
  // Random learnable values so that no path is silenced by zero initialisation.
  randomize_learnable(m, 7);
  const auto clip = random_clip<double>(m.config(), 2, 18);
  {
    Tape<double> tape;
    tape.backward(summed_loss(tape, m, clip));
  }
  auto objective = [&] {
    Tape<double> tape(false);
    return summed_loss(tape, m, clip).value()[0];
  };
  double worst = 0;
  std::string where;
  long checked = 0;
  int params = 0;
  for (auto& p : m.params()) {
    if (p->frozen) continue;
    ++params;
    if (!p->grad) return {false, "no gradient for " + p->name};
    for (Index i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + kGradStep;
      const double up = objective();
      p->value[i] = saved - kGradStep;
      const double down = objective();
      p->value[i] = saved;
      const double fd = (up - down) / (2 * kGradStep), bp = (*p->grad)[i];
      const double err = std::abs(fd - bp) / std::max({std::abs(fd), std::abs(bp), kGradFloor});
      ++checked;
      if (err > worst) {
        worst = err;
        where = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return {worst < kGradTol, fmt("%ld values in %d learnable tensors (L=2, D=32, float64); max rel error %.2e at %s "
                                "(tol %.0e, step %.0e, floor %.0e)",
                                checked, params, worst, where.c_str(), kGradTol, kGradStep, kGradFloor)};
}

Outcome zero_init_identity() {
  CastModel<float> cast(toy_config("cast")), indep(toy_config("identity"));
  int equal = 0;
  for (int s = 0; s < kIdentityClips; ++s) {
    const auto clip = random_clip<float>(cast.config(), 1, 1000 + s);
    equal += bitwise_equal(logits(cast, clip), logits(indep, clip));
  }
  return {equal == kIdentityClips, fmt("%d / %d clips with bitwise-identical logits", equal, kIdentityClips)};
}

Outcome window_oracles() {
  const Index D = 4;
  double worst = 0;
  int cases = 0, support_ok = 0, support_cases = 0;
  for (Window w : {Window::space, Window::time, Window::space_time})
    for (Index T = 1; T <= 4; ++T)
      for (Index N = 1; N <= 4; ++N) {
        for (Index heads : {1, 2}) {
          Tape<double> tape(false);
          const bool cls = w != Window::time && N % 2 == 1;
          auto x = random_grid(tape, 2, T, N, D, cls, 100 * T + N);
          auto y = random_grid(tape, 2, T, N, D, cls, 100 * T + N + 50);
          auto wts = AttnWeights::random(D, T * 7 + N, heads == 1);
          auto self = mhsa(x, wts.vars(tape, heads, w));
          auto cross = mhca(x, y, wts.vars(tape, heads, w));
          worst = std::max(worst, (self.data.value().matrix() - masked_attention(x, x, wts, heads, w)).cwiseAbs().maxCoeff());
          worst = std::max(worst, (cross.data.value().matrix() - masked_attention(x, y, wts, heads, w)).cwiseAbs().maxCoeff());
          cases += 2;
        }
        Tape<double> tape(false);
        auto q = random_grid(tape, 1, T, N, D, false, 7 * T + N);
        auto kv = random_grid(tape, 1, T, N, D, false, 7 * T + N + 99);
        const auto seen = observed_support(q, kv, AttnWeights::random(D, 3), 2, w);
        const auto expect = attention_support(w, T, N);
        bool same = seen.size() == expect.size();
        for (std::size_t i = 0; same && i < expect.size(); ++i)
          same = seen[i] == std::set<Index>(expect[i].begin(), expect[i].end());
        support_ok += same;
        ++support_cases;
      }
  return {worst <= kWindowTol && support_ok == support_cases,
          fmt("%d windowed-vs-masked cases, max |diff| %.2e (tol %.0e); MHCA support sets exact in %d / %d", cases, worst,
              kWindowTol, support_ok, support_cases)};
}

RunConfig reference_config() { return load_run_config(std::string(CAST_CONFIG_DIR) + "/reference.cfg"); }

Outcome frozen_contract() {
  RunConfig rc = reference_config();
  rc.data.train_count = 400;
  rc.data.val_count = 16;
  const Dataset d = generate(rc.data);
  CastModel<float> m(rc.model);
  TrainConfig t = rc.train;
  t.epochs = kFrozenSteps * t.batch_size / rc.data.train_count;
  t.val_every = 0;
  const std::string before = frozen_digest(m.params());
  const auto enc_before = encode_checkpoint(m.params(), 0);
  const auto r = train(m, d, split_dataset(d, rc.data.train_count), t);
  const std::string after = frozen_digest(m.params());
  const bool moved = encode_checkpoint(m.params(), 0) != enc_before;
  return {before == after && r.steps == kFrozenSteps && moved,
          fmt("%ld steps; frozen SHA-256 %s… before, %s… after; learnable values %s", r.steps,
              before.substr(0, 16).c_str(), after.substr(0, 16).c_str(), moved ? "changed" : "UNCHANGED")};
}

int run_shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "cast_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cli = CAST_CLI_PATH, cfg = std::string(CAST_CONFIG_DIR) + "/toy.cfg";
  const std::string data = (dir / "toy.castdata").string();
  if (run_shell(cli + " gen-data --config " + cfg + " --out " + data + " > /dev/null") != 0) return {false, "gen-data failed"};
  for (const char* run : {"a", "b"})
    if (run_shell(cli + " train --config " + cfg + " --seed 3 --data " + data + " --out " + (dir / run).string() +
                  " > /dev/null 2>&1") != 0)
      return {false, std::string("train run ") + run + " failed"};
  const std::string ca = sha256_file((dir / "a/checkpoint.ckpt").string()), cb = sha256_file((dir / "b/checkpoint.ckpt").string());
  const std::string ma = sha256_file((dir / "a/metrics.json").string()), mb = sha256_file((dir / "b/metrics.json").string());
  fs::remove_all(dir);
  return {ca == cb && ma == mb, fmt("two CLI train runs: checkpoint sha256 %s (%s), metrics.json sha256 %s (%s)",
                                    ca.substr(0, 16).c_str(), ca == cb ? "identical" : "DIFFERENT", ma.substr(0, 16).c_str(),
                                    ma == mb ? "identical" : "DIFFERENT")};
}

// ---------------------------------------------------------------------------

struct Trained {
  std::string variant;
  std::uint64_t seed;
  double appearance, motion, hm, seconds;
};

struct Experiment {
  RunConfig rc = reference_config();
  Dataset data;
  Split split;
  std::vector<Trained> runs;
  std::unique_ptr<CastModel<float>> spatial_seed0;

  Experiment() {
    data = generate(rc.data);
    split = split_dataset(data, rc.data.train_count);
  }

  const Trained& get(const std::string& variant, std::uint64_t seed) {
    for (const auto& r : runs)
      if (r.variant == variant && r.seed == seed) return r;
    CastConfig c = apply_variant(rc.model, variant);
    c.seed = seed;
    TrainConfig t = rc.train;
    t.seed = seed;
    auto model = std::make_unique<CastModel<float>>(c);
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = train(*model, data, split, t);
    Trained tr{variant, seed, res.final_val.top1_per_task.at("appearance"), res.final_val.top1_per_task.at("motion"),
               res.final_val.harmonic_means.begin()->second, seconds_since(t0)};
    std::printf("  trained %-14s seed %llu: appearance %.1f motion %.1f HM %.2f (%.0fs)\n", variant.c_str(),
                static_cast<unsigned long long>(seed), tr.appearance, tr.motion, tr.hm, tr.seconds);
    std::fflush(stdout);
    if (variant == "spatial_only" && seed == 0) spatial_seed0 = std::move(model);
    runs.push_back(tr);
    return runs.back();
  }
};

Outcome balanced_understanding(Experiment& ex) {
  const auto t0 = std::chrono::steady_clock::now();
  std::map<std::string, double> mean;
  for (std::uint64_t seed : {0, 1, 2})
    for (const char* v : {"spatial_only", "temporal_only", "cast"}) mean[v] += ex.get(v, seed).hm / 3.0;

  // (a) Spatial-only logits on every validation clip and its frame reversal.
  const CastModel<float>& sp = *ex.spatial_seed0;
  const int motion_task = 1;
  long identical = 0, decisions = 0, correct = 0;
  for (std::size_t i : ex.split.val) {
    const Tensor<float> clip = ex.data.batch<float>({i});
    Tensor<float> rev = clip;
    const Index F = clip.dim(1), fs = clip.size() / F;
    for (Index f = 0; f < F; ++f) rev.data().segment(f * fs, fs) = clip.data().segment((F - 1 - f) * fs, fs);
    Tape<float> tape(false);
    const auto a = sp.forward(tape, clip).tasks[motion_task].members[0].value();
    const auto b = sp.forward(tape, rev).tasks[motion_task].members[0].value();
    identical += bitwise_equal(a.matrix(), b.matrix());
    const int m = ex.data.samples[i].motion, partner = m ^ 1;
    auto pick = [&](const Tensor<float>& l) {
      const int lo = std::min(m, partner), hi = std::max(m, partner);
      return l[hi] > l[lo] ? hi : lo;
    };
    correct += pick(a) == m;
    correct += pick(b) == partner;
    decisions += 2;
  }
  const double pair_acc = 100.0 * double(correct) / double(decisions);
  const bool a_ok = identical == static_cast<long>(ex.split.val.size()) && std::abs(pair_acc - 50.0) < 1e-9;
  const double margin = mean["cast"] - std::max(mean["spatial_only"], mean["temporal_only"]);
  const bool b_ok = margin >= kHmMargin;
  return {a_ok && b_ok,
          fmt("(a) spatial-only logits identical under frame reversal on %ld / %zu val clips, reversal-pair accuracy "
              "%.2f%% [%s]; (b) mean HM over seeds 0-2: spatial %.2f, temporal %.2f, CAST %.2f, margin %.2f (need "
              "%.1f) [%s]; %.0fs",
              identical, ex.split.val.size(), pair_acc, a_ok ? "ok" : "FAIL", mean["spatial_only"],
              mean["temporal_only"], mean["cast"], margin, kHmMargin, b_ok ? "ok" : "FAIL", seconds_since(t0))};
}

Outcome direction_ablation(Experiment& ex) {
  const auto t0 = std::chrono::steady_clock::now();
  std::map<std::string, double> mean;
  std::string per_seed;
  for (std::uint64_t seed : {0, 1, 2}) {
    per_seed += fmt("%sseed %d: %.2f / %.2f / %.2f", seed ? ", " : "", int(seed), ex.get("cast", seed).hm,
                    ex.get("s2t_only", seed).hm, ex.get("t2s_only", seed).hm);
    for (const char* v : {"cast", "s2t_only", "t2s_only"}) mean[v] += ex.get(v, seed).hm / 3.0;
  }
  const double both = mean["cast"], s2t = mean["s2t_only"], t2s = mean["t2s_only"];
  return {both >= s2t && both >= t2s,
          fmt("mean HM over seeds 0-2: both directions %.2f, S2T only %.2f, T2S only %.2f (%s); %.0fs", both, s2t,
              t2s, per_seed.c_str(), seconds_since(t0))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria, one PASS/FAIL line each"};
  std::string mode = "all";
  std::vector<int> only;
  app.add_option("--mode", mode, "fast (1-7, 10), experiment (8-9) or all")->check(CLI::IsMember({"fast", "experiment", "all"}));
  app.add_option("--only", only, "run only these criterion numbers");
  CLI11_PARSE(app, argc, argv);

  std::unique_ptr<Experiment> ex;
  auto experiment = [&]() -> Experiment& {
    if (!ex) ex = std::make_unique<Experiment>();
    return *ex;
  };
  const std::vector<std::tuple<int, const char*, bool, std::function<Outcome()>>> criteria = {
      {1, "metric reproduction", false, metric_reproduction},
      {2, "FLOP reproduction", false, flop_reproduction},
      {3, "parameter accounting", false, parameter_accounting},
      {4, "gradient correctness", false, gradient_correctness},
      {5, "zero-init identity", false, zero_init_identity},
      {6, "window oracles", false, window_oracles},
      {7, "frozen contract", false, frozen_contract},
      {8, "balanced understanding", true, [&] { return balanced_understanding(experiment()); }},
      {9, "direction ablation", true, [&] { return direction_ablation(experiment()); }},
      {10, "determinism", false, determinism},
  };
  int failed = 0, ran = 0;
  for (const auto& [id, name, slow, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    if (only.empty() && ((mode == "fast" && slow) || (mode == "experiment" && !slow))) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    ++ran;
    failed += !o.pass;
    std::printf("%s %2d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d / %d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
