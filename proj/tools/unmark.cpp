// unmark: blind visible-watermark removal toolkit.
// Subcommands: synth, train, eval, remove, stats, summary.

#include <torch/torch.h>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "unmark/compositor.hpp"
#include "unmark/config.hpp"
#include "unmark/metrics.hpp"
#include "unmark/networks.hpp"
#include "unmark/trainer.hpp"

namespace {

void print_summary(int64_t base_width) {
  auto info = unmark::summarize(unmark::NetworkConfig{base_width, false});
  auto widths = unmark::scale_widths(base_width);
  std::printf("channel widths: [%lld, %lld, %lld, %lld, %lld]\n",
              static_cast<long long>(widths[0]), static_cast<long long>(widths[1]),
              static_cast<long long>(widths[2]), static_cast<long long>(widths[3]),
              static_cast<long long>(widths[4]));
  std::printf("stage-1 network parameters: %lld\n", static_cast<long long>(info.split_params));
  std::printf("stage-2 network parameters: %lld\n", static_cast<long long>(info.refine_params));
  std::printf("total parameters:           %lld (%.2fM)\n",
              static_cast<long long>(info.total_params), info.total_params / 1e6);
  std::printf("parameter budget:           %lld (%.2fM), deviation %+.1f%%\n",
              static_cast<long long>(unmark::kParamBudget), unmark::kParamBudget / 1e6,
              100.0 * info.budget_deviation);
}

struct TrainFlags {
  std::string config_file;
  std::optional<std::string> manifest, checkpoint_dir, vgg_weights, resume;
  std::optional<double> lr, alpha, beta, grad_clip;
  std::optional<int64_t> batch_size, epochs, image_size, seed, base_width, val_every,
      val_max_samples, save_every, max_steps, log_every;
  std::optional<bool> s2am_fine_levels, wm_post_alpha, deterministic;

  unmark::TrainConfig merge() const {
    unmark::TrainConfig cfg;
    if (!config_file.empty()) cfg = unmark::TrainConfig::from_file(config_file);
    if (manifest) cfg.manifest = *manifest;
    if (checkpoint_dir) cfg.checkpoint_dir = *checkpoint_dir;
    if (vgg_weights) cfg.vgg_weights = *vgg_weights;
    if (resume) cfg.resume = *resume;
    if (lr) cfg.lr = *lr;
    if (alpha) cfg.alpha = *alpha;
    if (beta) cfg.beta = *beta;
    if (grad_clip) cfg.grad_clip = *grad_clip;
    if (batch_size) cfg.batch_size = *batch_size;
    if (epochs) cfg.epochs = *epochs;
    if (image_size) cfg.image_size = *image_size;
    if (seed) cfg.seed = *seed;
    if (base_width) cfg.base_width = *base_width;
    if (val_every) cfg.val_every = *val_every;
    if (val_max_samples) cfg.val_max_samples = *val_max_samples;
    if (save_every) cfg.save_every = *save_every;
    if (max_steps) cfg.max_steps = *max_steps;
    if (log_every) cfg.log_every = *log_every;
    if (s2am_fine_levels) cfg.s2am_fine_levels = *s2am_fine_levels;
    if (wm_post_alpha) cfg.wm_post_alpha = *wm_post_alpha;
    if (deterministic) cfg.deterministic = *deterministic;
    cfg.validate();
    return cfg;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "unmark: synthesize watermarked datasets, train the two-stage removal "
      "pipeline, evaluate checkpoints and strip watermarks from images"};
  app.require_subcommand(0, 1);

  bool summary_flag = false;
  app.add_flag("--summary", summary_flag, "print the parameter-count summary and exit");

  // ---- synth ----------------------------------------------------------
  auto* synth = app.add_subcommand(
      "synth", "synthesize a watermarked dataset (writes <out>/<split>/<id>/{input,bg,wm,mask}.png "
               "and manifest.json)");
  std::string synth_profile, synth_hosts, synth_logos, synth_out;
  int64_t synth_seed = 1, synth_jobs = 1;
  std::optional<int64_t> synth_n_train, synth_n_test, synth_image_size;
  bool synth_post_alpha = false;
  synth->add_option("--profile", synth_profile,
                    "dataset profile: logo-l, logo-h, logo-gray or logo-30k")->required();
  synth->add_option("--hosts", synth_hosts, "directory of host (background) images")->required();
  synth->add_option("--logos", synth_logos, "directory of logo images (alpha channel honored)")
      ->required();
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--seed", synth_seed, "generator seed (identical seed => identical bytes)");
  synth->add_option("--jobs", synth_jobs, "parallel synthesis workers");
  synth->add_option("--n-train", synth_n_train, "override the profile's training sample count");
  synth->add_option("--n-test", synth_n_test, "override the profile's test sample count");
  synth->add_option("--image-size", synth_image_size, "override the 256x256 output size");
  synth->add_flag("--wm-post-alpha", synth_post_alpha,
                  "store alpha-multiplied watermark targets instead of raw logo pixels");

  // ---- stats ----------------------------------------------------------
  auto* stats = app.add_subcommand("stats", "dataset statistics from a manifest");
  std::string stats_manifest, stats_csv, stats_txt;
  stats->add_option("--manifest", stats_manifest, "manifest.json path")->required();
  stats->add_option("--out-csv", stats_csv, "CSV output path (default: <dataset>/stats.csv)");
  stats->add_option("--out-txt", stats_txt, "text output path (default: <dataset>/stats.txt)");

  // ---- train ----------------------------------------------------------
  auto* train = app.add_subcommand("train", "train the two-stage pipeline");
  TrainFlags tf;
  train->add_option("--config", tf.config_file, "key = value config file; flags override");
  train->add_option("--manifest", tf.manifest, "dataset manifest.json");
  train->add_option("--checkpoint-dir", tf.checkpoint_dir, "checkpoint/log directory");
  train->add_option("--vgg-weights", tf.vgg_weights,
                    "feature-extractor container (UNMARK_VGG_WEIGHTS overrides)");
  train->add_option("--resume", tf.resume, "checkpoint to resume from");
  train->add_option("--lr", tf.lr, "Adam learning rate (default 1e-3)");
  train->add_option("--alpha", tf.alpha, "deep-feature loss weight (default 0.025)");
  train->add_option("--beta", tf.beta, "structural-similarity loss weight (default 0.15)");
  train->add_option("--grad-clip", tf.grad_clip, "global grad-norm clip, 0 disables");
  train->add_option("--batch-size", tf.batch_size, "default 4");
  train->add_option("--epochs", tf.epochs, "default 100");
  train->add_option("--image-size", tf.image_size, "default 256");
  train->add_option("--seed", tf.seed, "default 1");
  train->add_option("--base-width", tf.base_width, "first-scale channel count (default 19)");
  train->add_option("--val-every", tf.val_every, "epochs between validation passes");
  train->add_option("--val-max-samples", tf.val_max_samples, "cap validation samples, 0 = all");
  train->add_option("--save-every", tf.save_every, "epochs between numbered checkpoints");
  train->add_option("--max-steps", tf.max_steps, "stop after N optimizer steps, 0 = no cap");
  train->add_option("--log-every", tf.log_every, "console log cadence");
  train->add_option("--s2am-fine-levels", tf.s2am_fine_levels,
                    "gate the two finest decoder levels instead of the two coarsest");
  train->add_option("--wm-post-alpha", tf.wm_post_alpha,
                    "train against alpha-multiplied watermark targets");
  train->add_option("--deterministic", tf.deterministic,
                    "single-threaded bitwise-reproducible numerics (default true)");

  // ---- eval -----------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint over a manifest split");
  std::string eval_ckpt, eval_manifest, eval_split = "test", eval_out;
  int64_t eval_max = 0;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint container")->required();
  eval->add_option("--manifest", eval_manifest, "dataset manifest.json")->required();
  eval->add_option("--split", eval_split, "train or test (default test)");
  eval->add_option("--out", eval_out, "report directory (default: <dataset>/eval_report)");
  eval->add_option("--max-samples", eval_max, "cap evaluated samples, 0 = all");

  // ---- remove ---------------------------------------------------------
  auto* remove = app.add_subcommand("remove", "strip the watermark from one image");
  std::string rm_ckpt, rm_input, rm_out;
  remove->add_option("--checkpoint", rm_ckpt, "checkpoint container")->required();
  remove->add_option("--input", rm_input, "input image (PNG/JPEG)")->required();
  remove->add_option("--out", rm_out, "output directory for final/coarse/mask/wm.png")->required();

  // ---- summary --------------------------------------------------------
  auto* summary = app.add_subcommand("summary", "parameter counts for a width configuration");
  int64_t summary_width = 19;
  summary->add_option("--base-width", summary_width, "first-scale channel count (default 19)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return unmark::kExitConfig;
  }

  try {
    torch::set_num_threads(1);
    if (summary_flag) {
      print_summary(19);
      return unmark::kExitOk;
    }
    if (app.get_subcommands().empty()) {
      std::cout << app.help() << std::endl;
      return unmark::kExitOk;
    }

    if (synth->parsed()) {
      auto profile = unmark::DatasetProfile::by_name(synth_profile);
      if (synth_n_train) profile.n_train = *synth_n_train;
      if (synth_n_test) profile.n_test = *synth_n_test;
      if (synth_image_size) profile.image_size = *synth_image_size;
      if (profile.n_train < 1 || profile.n_test < 1) {
        throw unmark::ConfigError("sample counts must be positive");
      }
      auto manifest = unmark::synthesize_dataset(profile, synth_hosts, synth_logos,
                                                 static_cast<uint64_t>(synth_seed), synth_out,
                                                 synth_jobs, synth_post_alpha);
      std::cout << "wrote " << manifest << " (" << profile.n_train << " train / "
                << profile.n_test << " test samples)" << std::endl;
    } else if (stats->parsed()) {
      auto manifest = unmark::ManifestData::load(stats_manifest);
      auto report = unmark::dataset_stats(manifest);
      if (stats_csv.empty()) stats_csv = (manifest.root / "stats.csv").string();
      if (stats_txt.empty()) stats_txt = (manifest.root / "stats.txt").string();
      std::ofstream(stats_csv, std::ios::trunc) << report.to_csv();
      std::ofstream(stats_txt, std::ios::trunc) << report.to_text();
      std::cout << report.to_text();
      std::cout << "wrote " << stats_csv << " and " << stats_txt << std::endl;
    } else if (train->parsed()) {
      auto cfg = tf.merge();
      unmark::Trainer trainer(cfg);
      auto result = trainer.train();
      std::cout << "training finished after " << result.steps_done << " steps\n";
      std::cout << "last checkpoint: " << result.last_checkpoint << "\n";
      if (!result.best_checkpoint.empty()) {
        std::cout << "best checkpoint: " << result.best_checkpoint << " (validation PSNR "
                  << result.best_val_psnr << " dB)\n";
      }
    } else if (eval->parsed()) {
      if (eval_out.empty()) {
        eval_out = (std::filesystem::path(eval_manifest).parent_path() / "eval_report").string();
      }
      auto report = unmark::evaluate_checkpoint(eval_ckpt, eval_manifest, eval_split, eval_out,
                                                eval_max);
      std::ifstream txt(report.text_path);
      std::cout << txt.rdbuf();
      std::cout << "wrote " << report.csv_path << std::endl;
    } else if (remove->parsed()) {
      auto result = unmark::remove_watermark(rm_ckpt, rm_input, rm_out);
      std::cout << "wrote " << result.final_path << ", " << result.coarse_path << ", "
                << result.mask_path << ", " << result.wm_path << std::endl;
    } else if (summary->parsed()) {
      print_summary(summary_width);
    }
    return unmark::kExitOk;
  } catch (const unmark::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return unmark::kExitConfig;
  } catch (const unmark::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << std::endl;
    return unmark::kExitNumeric;
  } catch (const unmark::DataError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return unmark::kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return unmark::kExitData;
  }
}
