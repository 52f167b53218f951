// adps command-line tool: train / eval / infer / synth-preview / ablate.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 runtime data
// error. ADPS_NUM_THREADS caps worker parallelism.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "adps/ablate.hpp"
#include "adps/config.hpp"
#include "adps/data.hpp"
#include "adps/image_io.hpp"
#include "adps/trainer.hpp"

namespace fs = std::filesystem;
using namespace adps;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir = "out";
  std::string preset = "paper";
  std::int64_t seed = -1;  // -1: keep config value
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "flat key=value config file");
  cmd->add_option("--set", o.sets, "override, e.g. --set k=4 (repeatable)");
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_option("--preset", o.preset, "base preset: paper|toy");
  cmd->add_option("--seed", o.seed, "override the config seed");
}

config::TrainConfig resolve_config(const CommonOpts& o) {
  config::TrainConfig cfg;
  if (o.preset == "paper") cfg = config::paper_preset();
  else if (o.preset == "toy") cfg = config::toy_preset();
  else throw ConfigError("unknown preset '" + o.preset + "' (expected paper|toy)");
  if (!o.config_path.empty())
    cfg = config::apply_overrides(cfg, config::parse_config_file(o.config_path));
  cfg = config::apply_overrides(cfg, config::parse_overrides(o.sets));
  if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
  cfg.validate();
  return cfg;
}

trainer::TextureProvider texture_provider(const config::TrainConfig& cfg) {
  if (cfg.synth.texture_source == "procedural") return {};
  auto folder = std::make_shared<data::TextureFolder>(cfg.synth.texture_source);
  return [folder](int h, int w, int c, std::uint64_t s) { return (*folder)(h, w, c, s); };
}

void write_train_log(const std::string& path, const std::vector<trainer::EpochLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  out << "epoch,ld,ls,total,lr\n";
  out.precision(10);
  for (const auto& e : log)
    out << e.epoch << "," << e.distill << "," << e.segmentation << "," << e.total << ","
        << e.lr << "\n";
}

int run_train(const CommonOpts& o) {
  config::TrainConfig cfg = resolve_config(o);
  auto [train_split, test_split] = data::load(cfg.dataset_spec());
  std::vector<Tensor> normals;
  for (const auto& li : train_split) normals.push_back(li.image);

  std::vector<trainer::EpochLog> log;
  trainer::Model model = trainer::train(normals, cfg, &log, texture_provider(cfg));

  fs::create_directories(o.out_dir);
  trainer::save_checkpoint(model, (fs::path(o.out_dir) / "ckpt.bin").string());
  write_train_log((fs::path(o.out_dir) / "train_log.csv").string(), log);
  config::write_config_file((fs::path(o.out_dir) / "resolved.conf").string(), cfg);
  std::cout << "trained " << cfg.epochs << " epochs; checkpoint at " << o.out_dir
            << "/ckpt.bin\n";
  return 0;
}

int run_eval(const CommonOpts& o, const std::string& ckpt_path) {
  if (!fs::exists(ckpt_path)) throw ConfigError("checkpoint not found: " + ckpt_path);
  trainer::Model model = trainer::load_checkpoint(ckpt_path);
  model.cfg = config::apply_overrides(model.cfg, config::parse_overrides(o.sets));
  if (o.seed >= 0) model.cfg.seed = static_cast<std::uint64_t>(o.seed);

  auto [train_split, test_split] = data::load(model.cfg.dataset_spec());
  metrics::MetricsReport rep = trainer::evaluate(model, test_split);

  fs::create_directories(o.out_dir);
  const std::string path = (fs::path(o.out_dir) / "metrics.json").string();
  std::ofstream out(path, std::ios::trunc);
  out << rep.to_json().dump(2) << "\n";
  std::cout << rep.to_json().dump(2) << "\n";
  return 0;
}

int run_infer(const CommonOpts& o, const std::string& ckpt_path,
              const std::vector<std::string>& images, double threshold, bool dump_raw) {
  if (!fs::exists(ckpt_path)) throw ConfigError("checkpoint not found: " + ckpt_path);
  trainer::Model model = trainer::load_checkpoint(ckpt_path);
  model.cfg = config::apply_overrides(model.cfg, config::parse_overrides(o.sets));
  fs::create_directories(o.out_dir);

  for (const std::string& img_path : images) {
    Tensor original = io::load_image(img_path, model.cfg.input_channels);
    const int h0 = original.h(), w0 = original.w();
    Tensor input = io::resize_image(original, model.cfg.resolution);
    trainer::InferResult r = trainer::infer(model, input);

    const std::string stem = fs::path(img_path).stem().string();
    Tensor heat = r.mask.abnormal();
    Tensor heat_full = resize_bilinear(heat, h0, w0);
    io::save_heatmap((fs::path(o.out_dir) / (stem + "_heat.png")).string(), heat_full);

    Tensor binary(1, h0, w0, 1);
    for (std::size_t p = 0; p < binary.size(); ++p)
      binary[p] = heat_full[p] >= threshold ? 1.0 : 0.0;
    io::save_mask((fs::path(o.out_dir) / (stem + "_mask.png")).string(), binary);

    for (std::size_t i = 0; i < r.coarse_masks.size(); ++i) {
      Tensor coarse(r.coarse_masks[i].shape());
      for (std::size_t p = 0; p < coarse.size(); ++p)
        coarse[p] = std::min(1.0, std::max(0.0, (1.0 - r.coarse_masks[i][p]) * 0.5));
      io::save_heatmap(
          (fs::path(o.out_dir) / (stem + "_wmb_stage" + std::to_string(i + 1) + ".png"))
              .string(),
          resize_bilinear(coarse, h0, w0));
    }
    if (dump_raw)
      io::save_raw_map((fs::path(o.out_dir) / (stem + "_heat.raw")).string(), heat_full);
    std::cout << stem << ": score " << r.image_score << "\n";
  }
  return 0;
}

int run_synth_preview(const CommonOpts& o, int count) {
  config::TrainConfig cfg = resolve_config(o);
  auto [train_split, test_split] = data::load(cfg.dataset_spec());
  if (train_split.empty()) throw EmptyDatasetError("synth-preview: empty train split");
  std::vector<Tensor> normals;
  for (int i = 0; i < count; ++i)
    normals.push_back(train_split[i % train_split.size()].image);

  synth::SynthConfig preview_cfg = cfg.synth;
  preview_cfg.anomaly_prob = 1.0;  // preview always shows corruptions
  auto samples = synth::make_batch(normals, preview_cfg, cfg.seed,
                                   texture_provider(cfg)
                                       ? texture_provider(cfg)
                                       : trainer::TextureProvider([](int h, int w, int c,
                                                                     std::uint64_t s) {
                                           return synth::procedural_texture(h, w, c, s);
                                         }));
  fs::create_directories(o.out_dir);
  char name[48];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(name, sizeof(name), "%03zu_image.png", i);
    io::save_image((fs::path(o.out_dir) / name).string(), samples[i].image);
    std::snprintf(name, sizeof(name), "%03zu_gt.png", i);
    io::save_mask((fs::path(o.out_dir) / name).string(), samples[i].gt);
  }
  std::cout << "wrote " << samples.size() << " synthetic samples to " << o.out_dir << "\n";
  return 0;
}

int run_ablate(const CommonOpts& o, const std::string& grid, int jobs) {
  config::TrainConfig base = resolve_config(o);
  auto entries = ablate::build_grid(grid, base);
  std::cout << "running " << entries.size() << " ablation entries (grid=" << grid << ")\n";
  auto results = ablate::run_grid(entries, jobs);
  fs::create_directories(o.out_dir);
  ablate::write_csv((fs::path(o.out_dir) / ("ablate_" + grid + ".csv")).string(), results);
  ablate::write_chart((fs::path(o.out_dir) / ("ablate_" + grid + ".png")).string(), results);
  for (const auto& r : results)
    std::cout << r.name << ": ap_seg " << r.report.ap_seg << " auroc_seg "
              << r.report.auroc_seg << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ADPS: asymmetric distillation post-segmentation toolkit"};
  app.require_subcommand(1);

  CommonOpts train_o, eval_o, infer_o, synth_o, ablate_o;
  std::string eval_ckpt, infer_ckpt;
  std::vector<std::string> infer_images;
  double infer_threshold = 0.5;
  bool infer_dump_raw = false;
  int synth_count = 8;
  std::string ablate_grid = "k";
  int ablate_jobs = 1;

  CLI::App* train_cmd = app.add_subcommand("train", "train a model");
  add_common(train_cmd, train_o);

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, eval_o);
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();

  CLI::App* infer_cmd = app.add_subcommand("infer", "segment images, write heatmaps");
  add_common(infer_cmd, infer_o);
  infer_cmd->add_option("--ckpt", infer_ckpt, "checkpoint file")->required();
  infer_cmd->add_option("images", infer_images, "input image files")->required();
  infer_cmd->add_option("--threshold", infer_threshold, "segmentation threshold");
  infer_cmd->add_flag("--dump-raw", infer_dump_raw, "also dump raw float maps");

  CLI::App* synth_cmd = app.add_subcommand("synth-preview", "write synthetic anomaly samples");
  add_common(synth_cmd, synth_o);
  synth_cmd->add_option("-n,--count", synth_count, "number of samples");

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "run an ablation grid");
  add_common(ablate_cmd, ablate_o);
  ablate_cmd->add_option("--grid", ablate_grid, "k|fusion|metric|framework|all");
  ablate_cmd->add_option("--jobs", ablate_jobs, "parallel grid entries");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train_cmd->parsed()) return run_train(train_o);
    if (eval_cmd->parsed()) return run_eval(eval_o, eval_ckpt);
    if (infer_cmd->parsed())
      return run_infer(infer_o, infer_ckpt, infer_images, infer_threshold, infer_dump_raw);
    if (synth_cmd->parsed()) return run_synth_preview(synth_o, synth_count);
    if (ablate_cmd->parsed()) return run_ablate(ablate_o, ablate_grid, ablate_jobs);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
