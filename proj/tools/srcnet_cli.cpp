/*
 * Copyright (c) 2026 The srcnet Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// srcnet command-line front end: train, eval, infer, gradcheck, synth, tile.

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "srcnet/gradcheck_suite.hpp"
#include "srcnet/srcnet.hpp"

namespace fs = std::filesystem;
using namespace srcnet;

namespace {

constexpr int kUsageError = 2;

// Flags shared by the model-facing subcommands. Unset optionals leave the
// config-file value alone.
struct CommonFlags {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::string> variant;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch;
  std::optional<double> lr;
  std::optional<std::string> precision;
  bool paper_scale = false;
  bool overlays = false;
  bool augment = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Flat key = value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--data", f.data, "Dataset directory (tiles.txt or A/, B/, label/)");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--variant", f.variant, "Model variant")->check(CLI::IsMember({"full", "alpha", "beta", "gamma"}));
  cmd->add_option("--seed", f.seed, "Initialization and shuffling seed");
  cmd->add_option("--epochs", f.epochs, "Total training epochs")->check(CLI::PositiveNumber);
  cmd->add_option("--batch", f.batch, "Batch size")->check(CLI::PositiveNumber);
  cmd->add_option("--lr", f.lr, "Initial learning rate")->check(CLI::PositiveNumber);
  cmd->add_option("--precision", f.precision, "Floating-point width")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_flag("--paper-scale", f.paper_scale, "Use the paper-scale model configuration");
  cmd->add_flag("--overlays", f.overlays, "Write confusion overlays to <out>/overlays");
}

struct ResolvedConfig {
  ModelConfig model;
  TrainConfig train;
};

ResolvedConfig resolve(const CommonFlags& f) {
  KeyValueConfig kv;
  if (!f.config.empty()) kv = KeyValueConfig::load(f.config);
  ResolvedConfig rc;
  rc.model = ModelConfig::from_kv(kv, f.paper_scale ? ModelConfig::paper_scale() : ModelConfig::desk());
  rc.train = TrainConfig::from_kv(kv);
  if (f.variant) rc.model.variant = parse_variant(*f.variant);
  if (f.seed) rc.train.seed = *f.seed;
  if (f.epochs) rc.train.epochs = *f.epochs;
  if (f.batch) rc.train.batch_size = *f.batch;
  if (f.lr) rc.train.lr = *f.lr;
  if (f.precision) rc.train.precision = *f.precision;
  if (f.augment) rc.train.augment = true;
  if (!f.data.empty()) rc.train.data_dir = f.data;
  if (!f.out.empty()) rc.train.out_dir = f.out;
  rc.model.validate();
  rc.train.validate();
  return rc;
}

std::string model_label(const ModelConfig& cfg) { return "srcnet_" + to_string(cfg.variant); }

std::string dataset_label(const std::string& dir) {
  const auto p = fs::path(dir).lexically_normal();
  const auto name = (p.has_filename() ? p.filename() : p.parent_path().filename()).string();
  return name.empty() ? "dataset" : name;
}

void write_metrics_csv(const std::string& out_dir, const std::string& row) {
  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / "metrics.csv");
  out << metrics_csv_header() << '\n' << row << '\n';
}

void print_metrics(const Metrics& m) {
  std::printf("precision %.4f  recall %.4f  f1 %.4f  oa %.4f  iou %.4f\n", m.precision, m.recall, m.f1, m.oa,
              m.iou);
  if (m.any_undefined()) {
    std::printf("note: zero denominator in%s%s%s%s (reported as 0)\n", m.precision_undefined ? " precision" : "",
                m.recall_undefined ? " recall" : "", m.f1_undefined ? " f1" : "", m.iou_undefined ? " iou" : "");
  }
}

template <typename T>
int run_train(const ResolvedConfig& rc, const std::string& resume) {
  if (rc.train.data_dir.empty()) throw ConfigError("train: --data is required");
  const auto train = load_dataset(rc.train.data_dir, "train");
  const auto val = load_dataset(rc.train.data_dir, "val");
  if (train.empty()) throw DataError("train: no training samples under " + rc.train.data_dir);
  std::printf("train %zu pairs, val %zu pairs, variant %s, precision %s\n", train.size(), val.size(),
              to_string(rc.model.variant).c_str(), rc.train.precision.c_str());

  Trainer<T> trainer(rc.model, rc.train);
  if (!resume.empty()) {
    trainer.load_state(resume);
    std::printf("resumed from %s at epoch %zu\n", resume.c_str(), trainer.epoch());
  }
  std::printf("parameters %zu\n", count_parameters(trainer.model()));
  const auto t0 = std::chrono::steady_clock::now();
  trainer.fit(train, val, [&](const EpochRecord& r) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("epoch %3zu  lr %.3e  loss %9.5f  l1 %.5f  l2 %9.5f  l3 %9.5f  val_f1 %.4f  %6.1fs\n", r.epoch, r.lr,
                r.loss, r.loss1, r.loss2, r.loss3, r.val_f1, secs);
    std::fflush(stdout);
  });
  std::printf("best val_f1 %.4f\n", trainer.best_f1());

  if (!rc.train.out_dir.empty() && !val.empty()) {
    auto best = load_model<T>((fs::path(rc.train.out_dir) / "best.ckpt").string());
    const auto res = evaluate(best, val, rc.train.batch_size);
    write_metrics_csv(rc.train.out_dir, metrics_csv_row(model_label(rc.model), dataset_label(rc.train.data_dir),
                                                        res.metrics, count_parameters(best)));
    print_metrics(res.metrics);
  }
  return 0;
}

template <typename T>
int run_eval(const CommonFlags& f, const std::string& checkpoint, const std::string& split) {
  if (f.data.empty()) throw ConfigError("eval: --data is required");
  const auto ck = read_checkpoint(checkpoint);
  if (ck.kind != CheckpointKind::model) throw CheckpointError(checkpoint + " is not a model checkpoint");
  // An explicit configuration must agree with the checkpoint's.
  ModelConfig cfg = checkpoint_config(ck);
  if (!f.config.empty() || f.variant || f.paper_scale) cfg = resolve(f).model;
  SrcNet<T> model(cfg, 0);
  load_weights(ck, model);

  const auto samples = load_dataset(f.data, split);
  if (samples.empty()) throw DataError("eval: no samples for split '" + split + "' under " + f.data);
  const std::string overlay_dir = f.overlays && !f.out.empty() ? (fs::path(f.out) / "overlays").string() : "";
  const auto res = evaluate(model, samples, f.batch.value_or(8), overlay_dir);
  const auto row = metrics_csv_row(model_label(cfg), dataset_label(f.data), res.metrics, count_parameters(model));
  print_metrics(res.metrics);
  std::printf("%s\n%s\n", metrics_csv_header().c_str(), row.c_str());
  if (!f.out.empty()) write_metrics_csv(f.out, row);
  return 0;
}

template <typename T>
int run_infer(const std::string& checkpoint, const std::string& img1_path, const std::string& img2_path,
              const std::string& out_path) {
  auto model = load_model<T>(checkpoint);
  model.eval();
  NoGradGuard no_grad;
  SamplePair s;
  s.img1 = read_png(img1_path);
  s.img2 = read_png(img2_path);
  if (s.img1.height != s.img2.height || s.img1.width != s.img2.width) {
    throw DataError("infer: images have different sizes");
  }
  s.mask = Mask(s.img1.height, s.img1.width);
  s.id = fs::path(img1_path).stem().string();
  const auto batch = collate<T>({&s});
  const auto masks = probs_to_masks(model.predict_probs(batch.img1, batch.img2));
  write_mask_png(out_path, masks[0]);
  std::printf("%s: %zu of %zu pixels changed\n", out_path.c_str(), masks[0].count(), masks[0].values.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"srcnet: bi-temporal change detection"};
  app.require_subcommand(1);

  CommonFlags train_flags;
  std::string resume;
  auto* train = app.add_subcommand("train", "Train a model on a tiled dataset");
  add_common(train, train_flags);
  train->add_flag("--augment", train_flags.augment, "Random flips and 90-degree rotations");
  train->add_option("--resume", resume, "Training-state checkpoint to resume from")->check(CLI::ExistingFile);

  CommonFlags eval_flags;
  std::string eval_ckpt;
  std::string eval_split = "val";
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  add_common(eval, eval_flags);
  eval->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split, "Manifest split to score (empty = all)");

  std::string infer_ckpt, infer_a, infer_b, infer_out, infer_precision = "f64";
  auto* infer = app.add_subcommand("infer", "Predict a change mask for one image pair");
  infer->add_option("--checkpoint", infer_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--img1", infer_a, "Earlier image (PNG)")->required()->check(CLI::ExistingFile);
  infer->add_option("--img2", infer_b, "Later image (PNG)")->required()->check(CLI::ExistingFile);
  infer->add_option("--out", infer_out, "Output mask PNG")->required();
  infer->add_option("--precision", infer_precision, "Floating-point width")->check(CLI::IsMember({"f32", "f64"}));

  bool tiny = false;
  std::uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite (64-bit)");
  gc->add_flag("--tiny", tiny, "Tiny model configuration (the only size checked)");
  gc->add_option("--seed", gc_seed, "Seed for random inputs and weights");

  SynthSpec spec;
  std::size_t synth_n = 64, synth_val = 0;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic bi-temporal dataset");
  synth->add_option("--n", synth_n, "Training pairs (all pairs when --n-val is 0)")->check(CLI::PositiveNumber);
  synth->add_option("--n-val", synth_val, "Validation pairs appended after the training pairs");
  synth->add_option("--seed", spec.seed, "Generator seed");
  synth->add_option("--size", spec.image_size, "Image side length")->check(CLI::PositiveNumber);
  synth->add_option("--out", synth_out, "Output directory; omit to only print the hash");

  std::string tile_src, tile_out;
  std::size_t tile_size = 256;
  std::uint64_t tile_seed = 0;
  auto* tile = app.add_subcommand("tile", "Cut aligned A/B/label rasters into tiles");
  tile->add_option("--src", tile_src, "Source directory with A/, B/, label/")->required()->check(CLI::ExistingDirectory);
  tile->add_option("--out", tile_out, "Output directory")->required();
  tile->add_option("--tile", tile_size, "Tile side length")->check(CLI::PositiveNumber);
  tile->add_option("--seed", tile_seed, "Train/val split seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsageError;
  }

  try {
    if (*train) {
      const auto rc = resolve(train_flags);
      return rc.train.precision == "f32" ? run_train<float>(rc, resume) : run_train<double>(rc, resume);
    }
    if (*eval) {
      const auto precision = eval_flags.precision.value_or("f64");
      return precision == "f32" ? run_eval<float>(eval_flags, eval_ckpt, eval_split)
                                : run_eval<double>(eval_flags, eval_ckpt, eval_split);
    }
    if (*infer) {
      return infer_precision == "f32" ? run_infer<float>(infer_ckpt, infer_a, infer_b, infer_out)
                                      : run_infer<double>(infer_ckpt, infer_a, infer_b, infer_out);
    }
    if (*gc) {
      (void)tiny;
      const auto t0 = std::chrono::steady_clock::now();
      const bool ok = print_gradcheck_table(run_gradcheck_suite(gc_seed));
      std::printf("%s in %.1fs\n", ok ? "all checks passed" : "FAILED",
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      return ok ? 0 : 1;
    }
    if (*synth) {
      const auto samples = generate_synthetic(spec, synth_n + synth_val);
      if (!synth_out.empty()) {
        std::vector<ManifestEntry> manifest;
        for (std::size_t i = 0; i < samples.size(); ++i) {
          const std::string split =
              synth_val > 0 ? (i < synth_n ? "train" : "val") : split_of(samples[i].id, spec.seed);
          manifest.push_back(write_sample(synth_out, samples[i], split));
        }
        write_manifest((fs::path(synth_out) / "tiles.txt").string(), manifest);
      }
      std::printf("pairs %zu  hash %016" PRIx64 "\n", samples.size(), dataset_hash(samples));
      return 0;
    }
    if (*tile) {
      const auto report = tile_dataset(tile_src, tile_size, tile_out, tile_seed);
      for (const auto& e : report.errors) std::fprintf(stderr, "skipped %s\n", e.c_str());
      std::printf("source pairs %zu, tiles %zu, skipped %zu\n", report.source_pairs, report.tiles.size(),
                  report.errors.size());
      return report.errors.empty() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kUsageError;
}
