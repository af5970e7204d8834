#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "diffmap/checkpoint.hpp"
#include "diffmap/errors.hpp"
#include "diffmap/mapforge.hpp"
#include "diffmap/pipeline.hpp"

namespace fs = std::filesystem;
using namespace diffmap;

namespace {

struct Common {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::string log_level = "info";
};

pipeline::PipelineConfig base_config(const Common& common) {
  pipeline::PipelineConfig cfg = common.config_file.empty() ? pipeline::PipelineConfig{}
                                                            : pipeline::load_config(common.config_file);
  const char* env = std::getenv("DIFFMAP_SEED");
  if (common.seed || (env && *env)) {
    const std::uint64_t s = pipeline::resolve_seed(common.seed, cfg.seed);
    cfg.seed = cfg.vq_train.seed = cfg.diff_train.seed = cfg.sample.seed = s;
  }
  return cfg;
}

std::vector<double> parse_cuts(const std::string& text) {
  std::vector<double> cuts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      cuts.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--intervals: not a number: '" + item + "'");
    }
  }
  return cuts;
}

mapforge::Raster<std::uint8_t> read_baseline(const fs::path& dir, const mapforge::GridSpec& grid) {
  mapforge::Raster<std::uint8_t> r(mapforge::kNumClasses, grid.height_px, grid.width_px);
  r.data = io::read_le<std::uint8_t>(dir / "baseline.u8.bin", r.data.size());
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DiffMap: latent diffusion refinement of BEV map segmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_file, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "Global seed (falls back to DIFFMAP_SEED, then the config)");
  app.add_option("--log-level", common.log_level, "trace, debug, info, warn, error or off");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_out, preset;
  std::optional<int> gen_n;
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--n", gen_n, "Number of samples");
  gen->add_option("--preset", preset, "Grid preset")->check(CLI::IsMember({"short", "long"}));

  // train-vqvae
  auto* tvq = app.add_subcommand("train-vqvae", "Train the VQ-VAE on ground-truth maps");
  std::string tvq_data, tvq_out;
  std::optional<int> factor;
  std::optional<long> tvq_steps;
  bool tvq_resume = false;
  tvq->add_option("--data", tvq_data, "Dataset directory")->required();
  tvq->add_option("--out", tvq_out, "Checkpoint directory")->required();
  tvq->add_option("--factor", factor, "Downsampling factor")->check(CLI::IsMember({4, 8, 16}));
  tvq->add_option("--steps", tvq_steps, "Training steps");
  tvq->add_flag("--resume", tvq_resume, "Continue from the checkpoint in --out");

  // train-diff
  auto* tdf = app.add_subcommand("train-diff", "Train the conditional diffusion model");
  std::string tdf_data, tdf_vq, tdf_out;
  std::optional<long> tdf_steps;
  bool tdf_resume = false;
  tdf->add_option("--data", tdf_data, "Dataset directory")->required();
  tdf->add_option("--vqvae", tdf_vq, "VQ-VAE checkpoint directory")->required();
  tdf->add_option("--out", tdf_out, "Checkpoint directory")->required();
  tdf->add_option("--steps", tdf_steps, "Training steps");
  tdf->add_flag("--resume", tdf_resume, "Continue from the checkpoint in --out");

  // infer
  auto* inf = app.add_subcommand("infer", "Refine observations with a trained model");
  std::string inf_data, inf_ckpt, inf_out;
  std::optional<int> inf_steps, inf_samples;
  std::optional<double> eta, lambda;
  inf->add_option("--data", inf_data, "Dataset directory")->required();
  inf->add_option("--ckpt", inf_ckpt, "Diffusion checkpoint directory")->required();
  inf->add_option("--out", inf_out, "Prediction directory")->required();
  inf->add_option("--steps", inf_steps, "Denoising steps");
  inf->add_option("--samples", inf_samples, "Independent chains to average");
  inf->add_option("--eta", eta, "Sampler stochasticity");
  inf->add_option("--lambda", lambda, "Weight of the z-branch estimate");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate predictions against ground truth");
  std::string ev_pred, ev_gt, ev_out, ev_intervals;
  ev->add_option("--pred", ev_pred, "Prediction directory")->required();
  ev->add_option("--gt", ev_gt, "Ground-truth dataset directory")->required();
  ev->add_option("--out", ev_out, "Report JSON path")->required();
  ev->add_option("--intervals", ev_intervals, "Comma-separated forward-range cuts in meters");

  // viz
  auto* viz = app.add_subcommand("viz", "Render observation | baseline | DiffMap | gt panels");
  std::string viz_sample, viz_pred, viz_out;
  viz->add_option("--sample", viz_sample, "Ground-truth sample directory")->required();
  viz->add_option("--pred", viz_pred, "Prediction sample (or prediction dataset) directory");
  viz->add_option("--out", viz_out, "Output PNG")->required();

  // ablate-factor
  auto* abl = app.add_subcommand("ablate-factor", "Train and evaluate with VQ factors 4, 8 and 16");
  std::string abl_data, abl_out, abl_work;
  std::optional<long> abl_vq_steps, abl_diff_steps;
  abl->add_option("--data", abl_data, "Dataset directory")->required();
  abl->add_option("--out", abl_out, "Report JSON path")->required();
  abl->add_option("--work", abl_work, "Directory for intermediate checkpoints");
  abl->add_option("--vq-steps", abl_vq_steps, "VQ-VAE steps per factor");
  abl->add_option("--diff-steps", abl_diff_steps, "Diffusion steps per factor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    spdlog::set_level(spdlog::level::from_str(common.log_level));
    pipeline::PipelineConfig cfg = base_config(common);

    if (*gen) {
      if (!preset.empty() && preset != cfg.preset) {
        cfg.preset = preset;
        cfg.scene = mapforge::SceneConfig::preset(preset);
      }
      if (gen_n) cfg.dataset_size = *gen_n;
      cfg.validate();
      mapforge::generate_dataset(gen_out, cfg.dataset_size, cfg.seed, cfg.scene, cfg.preset);
      pipeline::RunManifest run;
      run.command = "gen-data";
      run.config_json = pipeline::config_to_json_text(cfg);
      run.outputs = {{"dataset", gen_out}, {"samples", std::to_string(cfg.dataset_size)}};
      run.write(fs::path(gen_out) / "run.json");
      std::cout << "wrote " << cfg.dataset_size << " samples to " << gen_out << "\n";
    } else if (*tvq) {
      if (factor) cfg.vq.factor = *factor;
      if (tvq_steps) cfg.vq_train.steps = *tvq_steps;
      cfg.validate();
      const auto data = pipeline::load_dataset(tvq_data);
      pipeline::train_vqvae(data, cfg, tvq_out, tvq_resume);
      const auto iou = pipeline::vq_reconstruction_iou(vq::VqVae::load(tvq_out), data);
      std::cout << "reconstruction IoU divider " << iou[0] << " ped_crossing " << iou[1] << " boundary " << iou[2]
                << "\n";
    } else if (*tdf) {
      if (tdf_steps) cfg.diff_train.steps = *tdf_steps;
      cfg.validate();
      const auto data = pipeline::load_dataset(tdf_data);
      const auto r = pipeline::train_diffusion(data, tdf_vq, cfg, tdf_out, tdf_resume);
      if (!r.losses.empty()) std::cout << "final loss " << r.losses.back() << "\n";
    } else if (*inf) {
      if (eta) cfg.sample.sampler.eta = *eta;
      if (lambda) cfg.sample.sampler.lambda = *lambda;
      cfg.validate();
      pipeline::infer_dataset(inf_data, inf_ckpt, inf_out, cfg, inf_steps, inf_samples, std::nullopt);
      std::cout << "predictions written to " << inf_out << "\n";
    } else if (*ev) {
      const std::vector<double> cuts = ev_intervals.empty() ? cfg.intervals : parse_cuts(ev_intervals);
      const auto report = pipeline::evaluate(ev_pred, ev_gt, cuts, ev_out, cfg.eval);
      std::cout << report.to_table();
    } else if (*viz) {
      const auto sample = mapforge::load_sample(viz_sample);
      std::optional<mapforge::MapSample> pred;
      std::optional<mapforge::Raster<std::uint8_t>> base;
      if (!viz_pred.empty()) {
        fs::path pdir = viz_pred;
        if (!fs::exists(pdir / "manifest.json")) pdir /= fs::path(viz_sample).filename();
        pred = mapforge::load_sample(pdir);
        if (fs::exists(pdir / "baseline.u8.bin")) base = read_baseline(pdir, pred->gt.grid);
      }
      const auto img = pipeline::render_comparison(&sample.observation, base ? &*base : nullptr,
                                                   pred ? &pred->gt.semantic : nullptr, &sample.gt.semantic);
      pipeline::write_png(img, viz_out);
      std::cout << "wrote " << viz_out << "\n";
    } else if (*abl) {
      if (abl_vq_steps) cfg.ablation.vq_steps = *abl_vq_steps;
      if (abl_diff_steps) cfg.ablation.diff_steps = *abl_diff_steps;
      cfg.validate();
      const fs::path work = abl_work.empty() ? fs::path(abl_out).parent_path() / "ablation_work" : fs::path(abl_work);
      const auto rows = pipeline::ablate_factor(abl_data, work, cfg);
      io::write_text(abl_out, pipeline::ablation_json(rows));
      std::cout << "factor  vq_miou  miou    obs_miou  mAP\n";
      for (const auto& r : rows)
        std::printf("%-7d %-8.4f %-7.4f %-9.4f %.4f\n", r.factor, r.vq_recon_iou, r.miou, r.observation_miou, r.map);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
