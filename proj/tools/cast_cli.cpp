#include "cast/checkpoint.hpp"
#include "cast/hashing.hpp"
#include "cast/profiler.hpp"
#include "cast/run_config.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace cast;

namespace {

struct Options {
  std::string config, out, data, checkpoint, variant, views, tower = "both", variants;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool has_seed = false, paper_scale = false, assumptions = false, json = false;
  double fit_target = 0.0;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("write to '" + path + "' failed");
}

void make_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

RunConfig load(const Options& o, bool data_seed) {
  std::vector<std::string> overrides = o.sets;
  if (!o.variant.empty()) overrides.push_back("model.variant=" + o.variant);
  if (o.has_seed) {
    if (data_seed) {
      overrides.push_back("data.seed=" + std::to_string(o.seed));
    } else {
      overrides.push_back("model.seed=" + std::to_string(o.seed));
      overrides.push_back("train.seed=" + std::to_string(o.seed));
      overrides.push_back("run.seeds=" + std::to_string(o.seed));
    }
  }
  if (!o.views.empty()) overrides.push_back("run.views=" + o.views);
  if (!o.data.empty()) overrides.push_back("run.data=" + o.data);
  if (!o.checkpoint.empty()) overrides.push_back("run.checkpoint=" + o.checkpoint);
  if (!o.out.empty()) overrides.push_back("run.out=" + o.out);
  if (!o.variants.empty()) overrides.push_back("run.variants=" + o.variants);
  return o.config.empty() ? parse_run_config("", overrides) : load_run_config(o.config, overrides);
}

Dataset load_data(const RunConfig& rc) {
  if (rc.data_path.empty()) throw ConfigError("no dataset given (--data or run.data)");
  return read_dataset(rc.data_path);
}

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

int cmd_gen_data(const Options& o) {
  RunConfig rc = load(o, true);
  if (rc.out.empty()) throw ConfigError("gen-data needs --out");
  Dataset d = generate(rc.data);
  write_dataset(d, rc.out);
  std::printf("gen-data: %zu samples (train %d, val %d), %dx%dx%dx%d, sha256 %s, config %s -> %s\n", d.samples.size(),
              rc.data.train_count, rc.data.val_count, d.frames, d.height, d.width, d.channels,
              sha256_file(rc.out).c_str(), hex64(rc.hash()).c_str(), rc.out.c_str());
  return 0;
}

TrainResult train_one(const CastConfig& model_cfg, const RunConfig& rc, const Dataset& d, CastModel<float>& model,
                      bool verbose) {
  check_compatible(model_cfg, d);
  const Split split = split_dataset(d, rc.data.train_count);
  return train(model, d, split, rc.train, [&](const EpochLog& e) {
    if (!verbose) return;
    std::fprintf(stderr, "epoch %d lr %.6g loss %.5f", e.epoch, e.lr, e.train_loss);
    for (const auto& [k, v] : e.val.harmonic_means) std::fprintf(stderr, " val_hm[%s] %.2f", k.c_str(), v);
    std::fprintf(stderr, "\n");
  });
}

int cmd_train(const Options& o) {
  RunConfig rc = load(o, false);
  const Dataset d = load_data(rc);
  const std::string dir = rc.out.empty() ? "run" : rc.out;
  make_dir(dir);
  CastModel<float> model(rc.model);
  const TrainResult r = train_one(rc.model, rc, d, model, true);
  const std::uint64_t hash = rc.hash();
  save_checkpoint(model.params(), hash, dir + "/checkpoint.ckpt");
  write_text(dir + "/metrics.json", metrics_json(r.final_val, hash, rc.model.seed));
  write_text(dir + "/loss.csv", loss_curve_csv(r.curve));
  write_text(dir + "/config.txt", "# config_hash " + hex64(hash) + "\n" + rc.to_text());
  std::printf("train: %ld steps, %lld learnable / %lld frozen parameters, config %s -> %s\n", r.steps,
              static_cast<long long>(model.params().count_values(false)),
              static_cast<long long>(model.params().count_values(true)), hex64(hash).c_str(), dir.c_str());
  for (const auto& [k, v] : r.final_val.top1_per_task) std::printf("  val top1 %-10s %6.2f\n", k.c_str(), v);
  for (const auto& [k, v] : r.final_val.harmonic_means) std::printf("  val hm   %-10s %6.2f\n", k.c_str(), v);
  return 0;
}

int cmd_eval(const Options& o) {
  RunConfig rc = load(o, false);
  if (rc.checkpoint_path.empty()) throw ConfigError("eval needs --checkpoint");
  const Dataset d = load_data(rc);
  CastModel<float> model(rc.model);
  check_compatible(rc.model, d);
  const std::uint64_t stored = load_checkpoint(model.params(), rc.checkpoint_path);
  if (stored != rc.hash())
    std::fprintf(stderr, "note: checkpoint config hash %s differs from this config %s\n", hex64(stored).c_str(),
                 hex64(rc.hash()).c_str());
  const Split split = split_dataset(d, rc.data.train_count);
  const auto before = model.forward_count();
  const MetricsReport m = evaluate(model, d, split.val, rc.train.batch_size, rc.views);
  const auto passes = model.forward_count() - before;
  const std::string json = metrics_json(m, stored, rc.model.seed);
  if (!rc.out.empty()) write_text(rc.out, json);
  std::fputs(json.c_str(), stdout);
  std::fprintf(stderr, "eval: %zu clips, views %dx%d, forward passes %llu (%llu per clip)\n", split.val.size(),
               rc.views.temporal, rc.views.spatial, static_cast<unsigned long long>(passes),
               static_cast<unsigned long long>(split.val.empty() ? 0 : passes / split.val.size()));
  return 0;
}

int cmd_ablate(const Options& o) {
  RunConfig rc = load(o, false);
  if (rc.variants.empty()) throw ConfigError("ablate needs a non-empty variant list (--variants)");
  const Dataset d = load_data(rc);
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  std::string text;
  char line[256];
  std::snprintf(line, sizeof line, "%-24s %12s %12s %12s %12s %8s\n", "variant", "learnable", "appearance", "motion",
                "action", "HM");
  text += line;
  for (const auto& tag : rc.variants) {
    CastConfig cfg = apply_variant(rc.model, tag);
    std::map<std::string, double> top1;
    double hm = 0.0, action = 0.0;
    long long learnable = 0;
    std::vector<double> per_seed;
    for (std::uint64_t seed : rc.seeds) {
      cfg.seed = seed;
      RunConfig seeded = rc;
      seeded.train.seed = seed;
      CastModel<float> model(cfg);
      learnable = model.params().count_values(false);
      std::fprintf(stderr, "ablate: %s seed %llu\n", tag.c_str(), static_cast<unsigned long long>(seed));
      const TrainResult r = train_one(cfg, seeded, d, model, false);
      for (const auto& [k, v] : r.final_val.top1_per_task) top1[k] += v / double(rc.seeds.size());
      const double h = r.final_val.harmonic_means.begin()->second;
      per_seed.push_back(h);
      hm += h / double(rc.seeds.size());
      action += r.final_val.action_top1 / double(rc.seeds.size());
    }
    auto get = [&](const char* k) { return top1.count(k) ? fixed(top1[k]) : std::string("-"); };
    std::snprintf(line, sizeof line, "%-24s %12lld %12s %12s %12s %8s\n", tag.c_str(), learnable,
                  get("appearance").c_str(), get("motion").c_str(), fixed(action).c_str(), fixed(hm).c_str());
    text += line;
    rows.push_back({{"variant", tag},
                    {"learnable_params", learnable},
                    {"top1_per_task", top1},
                    {"action_top1", action},
                    {"harmonic_mean", hm},
                    {"harmonic_mean_per_seed", per_seed}});
  }
  nlohmann::ordered_json j;
  j["config_hash"] = hex64(rc.hash());
  j["seeds"] = rc.seeds;
  j["rows"] = rows;
  std::fputs(text.c_str(), stdout);
  if (!rc.out.empty()) write_text(rc.out, j.dump(2) + "\n");
  return 0;
}

int cmd_profile(const Options& o) {
  RunConfig rc = load(o, false);
  CastConfig cfg = rc.model;
  if (o.paper_scale) {
    cfg = CastConfig::paper_scale();
    cfg.variant = rc.model.variant;
    cfg = apply_variant(cfg, rc.model.variant);
  }
  TowerSelect tower = TowerSelect::both;
  if (o.tower == "spatial") tower = TowerSelect::spatial;
  else if (o.tower == "temporal") tower = TowerSelect::temporal;
  else if (o.tower != "both") throw ConfigError("--tower must be both, spatial or temporal");
  CostReport r = profile(tower_config(cfg, tower), rc.views.count());
  const double target = o.fit_target > 0 ? o.fit_target : (o.paper_scale ? 18.1e6 : 0.0);
  if (target > 0) fit_adapter_ratio(r, target);
  const std::string out = o.assumptions ? assumptions_text(r) : o.json ? report_json(r) : report_text(r);
  if (!rc.out.empty()) write_text(rc.out, out);
  std::fputs(out.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-attention between spatial and temporal expert towers: data, training, ablation, profiling"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "key = value config file");
    c->add_option("--out", o.out, "output path");
    c->add_option("--set", o.sets, "override, e.g. --set model.dim=32")->take_all();
    c->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { o.seed = s, o.has_seed = true; }, "seed override");
  };
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  common(gen);
  auto* tr = app.add_subcommand("train", "fine-tune a model, write checkpoint, metrics and loss curve");
  common(tr);
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  common(ev);
  auto* ab = app.add_subcommand("ablate", "train and compare a list of variants");
  common(ab);
  auto* pr = app.add_subcommand("profile", "analytic parameter and FLOP report");
  common(pr);
  for (auto* c : {tr, ev, ab}) c->add_option("--data", o.data, "dataset file");
  for (auto* c : {tr, ev, ab, pr}) c->add_option("--variant", o.variant, "ablation variant tag");
  for (auto* c : {ev, pr}) c->add_option("--views", o.views, "views as TxS, e.g. 2x3");
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  ab->add_option("--variants", o.variants, "comma-separated variant tags");
  pr->add_flag("--paper-scale", o.paper_scale, "ViT-B/16, 2T=16, 224x224 preset");
  pr->add_option("--tower", o.tower, "both | spatial | temporal");
  pr->add_flag("--assumptions", o.assumptions, "print only the assumption block");
  pr->add_flag("--json", o.json, "emit JSON");
  pr->add_option("--fit-identity", o.fit_target, "identity-variant learnable count to fit the adapter ratio to");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (gen->parsed()) return cmd_gen_data(o);
    if (tr->parsed()) return cmd_train(o);
    if (ev->parsed()) return cmd_eval(o);
    if (ab->parsed()) return cmd_ablate(o);
    if (pr->parsed()) return cmd_profile(o);
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  }
  return 2;
}
