// Command-line front end: generate, train, evaluate, ablate, cam.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "jaf/trainer.hpp"

using namespace jaf;
namespace fs = std::filesystem;

namespace {

train::TrainConfig read_train_config(const std::string& path) {
  train::TrainConfig cfg;
  if (!path.empty()) {
    auto kv = data::read_key_values(path);
    train::apply_train_config(kv, cfg);
  }
  return cfg;
}

int generate(const std::string& config, const std::string& out) {
  data::GenConfig g;
  if (!config.empty()) {
    auto kv = data::read_key_values(config);
    data::apply_gen_config(kv, g);
    if (!kv.empty()) throw ConfigError("unknown generator key '" + kv.begin()->first + "'");
  }
  auto ds = data::build_dataset(g);
  data::save_dataset(ds, out);
  std::size_t bad = 0;
  for (const auto& c : ds.cases) bad += c.label == 1;
  std::printf("wrote %zu cases (%zu bad prognosis) to %s\n", ds.cases.size(), bad, out.c_str());
  return 0;
}

int run_train(const std::string& config, std::string data_dir, std::string out) {
  auto cfg = read_train_config(config);
  if (data_dir.empty()) data_dir = cfg.data_dir;
  if (out.empty()) out = cfg.out_dir;
  if (data_dir.empty() || out.empty()) throw ConfigError("train needs a data and an output directory");
  cfg.data_dir = fs::absolute(data_dir).string();
  train::validate(cfg);
  const auto ds = data::load_dataset(data_dir);
  const auto prep = train::prepare(ds, cfg.window);
  const train::CellKey key{cfg.model.mode, cfg.model.topology, cfg.losses};
  auto runs = train::run_cells(cfg, prep, {key}, true);
  train::write_cell_outputs(runs, out);
  std::size_t failed = 0;
  for (const auto& r : runs) {
    if (!r.ok) {
      ++failed;
      std::fprintf(stderr, "cell fold %zu seed %llu failed: %s\n", r.fold,
                   static_cast<unsigned long long>(r.seed), r.error.c_str());
      continue;
    }
    const auto dir = fs::path(out) / ("model_f" + std::to_string(r.fold) + "_s" + std::to_string(r.seed));
    train::save_model(*r.model, cfg, dir.string());
  }
  const auto s = train::summarize(runs, key);
  std::printf("%s: %zu cells, %zu failed, mean AUC %.4f\n", key.name().c_str(), s.cells, s.failed,
              s.mean_auc);
  return failed ? 1 : 0;
}

int run_evaluate(const std::string& model_dir, std::string data_dir, std::size_t fold) {
  auto [model, cfg] = train::load_model(model_dir);
  if (data_dir.empty()) data_dir = cfg.data_dir;
  if (data_dir.empty()) throw ConfigError("evaluate needs --data");
  const auto ds = data::load_dataset(data_dir);
  if (fold >= ds.folds.k) throw ConfigError("fold " + std::to_string(fold) + " out of range");
  const auto prep = train::prepare(ds, cfg.window);
  const auto m = train::evaluate(model, prep, ds.folds.validation(fold));
  std::printf("acc,recall,prec,f1,auc,tp,fp,tn,fn\n%.17g,%.17g,%.17g,%.17g,", m.accuracy, m.recall,
              m.precision, m.f1);
  if (m.auc) std::printf("%.17g", *m.auc);
  else std::printf("nan");
  std::printf(",%zu,%zu,%zu,%zu\n", m.confusion.tp, m.confusion.fp, m.confusion.tn, m.confusion.fn);
  return 0;
}

int run_ablate(const std::string& config, std::string data_dir, std::string out) {
  auto cfg = read_train_config(config);
  if (data_dir.empty()) data_dir = cfg.data_dir;
  if (out.empty()) out = cfg.out_dir;
  if (data_dir.empty() || out.empty()) throw ConfigError("ablate needs a data and an output directory");
  train::validate(cfg);
  const auto ds = data::load_dataset(data_dir);
  const auto prep = train::prepare(ds, cfg.window);
  auto runs = train::run_ablations(cfg, prep, out);
  std::size_t failed = 0;
  for (const auto& r : runs) failed += !r.ok;
  const auto grids = train::ablation_grids();
  for (const auto& key : grids.unique()) {
    const auto s = train::summarize(runs, key);
    std::printf("%-28s mean AUC %.4f (%zu/%zu cells ok)\n", key.name().c_str(), s.mean_auc,
                s.cells - s.failed, s.cells);
  }
  if (failed) std::fprintf(stderr, "%zu cells failed; see failures.txt\n", failed);
  return 0;
}

int run_cam(const std::string& model_dir, std::string data_dir, const std::string& case_id,
            std::optional<std::size_t> slice, const std::string& out, int target) {
  auto [model, cfg] = train::load_model(model_dir);
  if (data_dir.empty()) data_dir = cfg.data_dir;
  if (data_dir.empty()) throw ConfigError("cam needs --data");
  const auto ds = data::load_dataset(data_dir);
  const auto idx = ds.index_of(case_id);
  const auto volume = data::preprocess_volume(ds.cases[idx].volume, cfg.window).values;
  const std::size_t s = slice ? *slice : train::default_cam_slice(volume.dim(0));
  const auto cam = train::score_cam(model, volume, ds.cases[idx].report, s, target);
  fs::path pgm(out), csv(out);
  if (pgm.extension() != ".pgm") pgm += ".pgm";
  csv.replace_extension(".csv");
  if (!csv.parent_path().empty()) fs::create_directories(csv.parent_path());
  train::write_pgm(cam.heatmap, pgm.string());
  train::write_heatmap_csv(cam.heatmap, csv.string());
  const auto com = train::center_of_mass(cam.heatmap);
  std::printf("slice %zu, centre of mass (row %.2f, col %.2f)%s\n", s, com[0], com[1],
              cam.degenerate ? ", degenerate" : "");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint vision/report prognosis models on synthetic head CT"};
  app.require_subcommand(1);

  std::string config, data_dir, out, model_dir, case_id;
  std::size_t fold = 0;
  std::optional<std::size_t> slice;
  int target = 1;

  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  gen->add_option("--config", config, "Generator key=value file");
  gen->add_option("--out", out, "Dataset directory")->required();

  auto* tr = app.add_subcommand("train", "Train one configuration over its seeds and folds");
  tr->add_option("--config", config, "Training key=value file");
  tr->add_option("--data", data_dir, "Dataset directory");
  tr->add_option("--out", out, "Output directory");

  auto* ev = app.add_subcommand("evaluate", "Score a saved model on one validation fold");
  ev->add_option("--model", model_dir, "Model directory written by train")->required();
  ev->add_option("--data", data_dir, "Dataset directory (default: the one it was trained on)");
  ev->add_option("--fold", fold, "Fold index")->required();

  auto* ab = app.add_subcommand("ablate", "Run the modality, topology and loss grids");
  ab->add_option("--config", config, "Training key=value file");
  ab->add_option("--data", data_dir, "Dataset directory");
  ab->add_option("--out", out, "Output directory");

  auto* cm = app.add_subcommand("cam", "Score-CAM heatmap for one case");
  cm->add_option("--model", model_dir, "Model directory written by train")->required();
  cm->add_option("--data", data_dir, "Dataset directory (default: the one it was trained on)");
  cm->add_option("--case", case_id, "Case id, e.g. case_007")->required();
  cm->add_option("--slice", slice, "Axial slice (default floor(depth*25/64))");
  cm->add_option("--target", target, "Target class")->check(CLI::Range(0, 1));
  cm->add_option("--out", out, "Heatmap path; writes .pgm and .csv")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return generate(config, out);
    if (*tr) return run_train(config, data_dir, out);
    if (*ev) return run_evaluate(model_dir, data_dir, fold);
    if (*ab) return run_ablate(config, data_dir, out);
    if (*cm) return run_cam(model_dir, data_dir, case_id, slice, out, target);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
