#include <chrono>
#include <iostream>

#include <spdlog/spdlog.h>

#include "diffmap/checkpoint.hpp"
#include "diffmap/errors.hpp"
#include "diffmap/pipeline.hpp"
#include "json.hpp"

namespace diffmap::pipeline {

std::vector<evalkit::Interval> resolve_intervals(const std::vector<double>& cuts, const mapforge::GridSpec& grid) {
  if (!cuts.empty()) return evalkit::intervals_from_cuts(cuts);
  const double span = grid.x_max - grid.x_min;
  return evalkit::intervals_from_cuts(
      {grid.x_min, grid.x_min + span / 3.0, grid.x_min + 2.0 * span / 3.0, grid.x_max});
}

evalkit::Report evaluate(const fs::path& pred_dir, const fs::path& gt_dir, const std::vector<double>& cuts,
                         const fs::path& out_path, const evalkit::EvalConfig& config) {
  mapforge::DatasetIndex index;
  try {
    index = mapforge::read_dataset_index(gt_dir);
  } catch (const std::exception& e) {
    throw DataError(std::string("gt dataset: ") + e.what());
  }
  std::vector<std::string> missing;
  for (const auto& id : index.sample_ids)
    if (!fs::exists(pred_dir / id / "manifest.json")) missing.push_back(id);
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : ", ") + id;
    throw DataError("prediction directory " + pred_dir.string() + " is missing " + std::to_string(missing.size()) +
                    " sample(s): " + list);
  }

  std::vector<evalkit::Interval> intervals;
  std::vector<std::vector<evalkit::CellTally>> totals;
  for (const auto& id : index.sample_ids) {
    mapforge::MapSample gt, pred;
    try {
      gt = mapforge::load_sample(gt_dir / id);
      pred = mapforge::load_sample(pred_dir / id);
    } catch (const FormatError& e) {
      throw DataError(id + ": " + e.what());
    }
    if (!(gt.gt.grid == pred.gt.grid)) throw DataError(id + ": prediction grid differs from gt grid");
    if (intervals.empty()) {
      intervals = resolve_intervals(cuts, gt.gt.grid);
      totals.assign(intervals.size(), std::vector<evalkit::CellTally>(mapforge::kNumClasses));
    }
    const auto t = evalkit::tally_intervals({pred.gt, pred.vectors}, {gt.gt, gt.vectors}, intervals, config);
    for (std::size_t i = 0; i < t.size(); ++i)
      for (int c = 0; c < mapforge::kNumClasses; ++c) totals[i][c].add(t[i][c]);
  }
  const evalkit::Report report =
      evalkit::make_report(intervals, totals, static_cast<int>(index.sample_ids.size()));
  if (!out_path.empty()) {
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    io::write_text(out_path, report.to_json());
    fs::path csv = out_path;
    csv.replace_extension(".csv");
    io::write_text(csv, report.to_csv());
    RunManifest run;
    run.command = "eval";
    run.config_json = "{}";
    run.inputs = {{"pred", io::hex64(io::fnv1a_tree(pred_dir))}, {"gt", io::hex64(io::fnv1a_tree(gt_dir))}};
    run.outputs = {{"report", out_path.string()}, {"csv", csv.string()}};
    fs::path manifest = out_path;
    manifest.replace_extension(".run.json");
    run.write(manifest);
  }
  return report;
}

std::vector<AblationRow> ablate_factor(const fs::path& data_dir, const fs::path& work_dir,
                                       const PipelineConfig& config) {
  const Dataset data = load_dataset(data_dir, config.ablation.samples);
  std::vector<AblationRow> rows;
  for (int f : config.ablation.factors) {
    const auto t0 = std::chrono::steady_clock::now();
    PipelineConfig cfg = config;
    cfg.vq.factor = f;
    cfg.vq_train.steps = config.ablation.vq_steps;
    cfg.diff_train.steps = config.ablation.diff_steps;
    cfg.validate();
    const fs::path dir = work_dir / ("f" + std::to_string(f));
    spdlog::info("ablation: factor {}", f);
    train_vqvae(data, cfg, dir / "vqvae");
    AblationRow row;
    row.factor = f;
    {
      const auto recon = vq_reconstruction_iou(vq::VqVae::load(dir / "vqvae"), data);
      row.vq_recon_iou = (recon[0] + recon[1] + recon[2]) / 3.0;
    }
    train_diffusion(data, dir / "vqvae", cfg, dir / "diffusion");
    auto [model, mcfg] = DiffMapModel::load(dir / "diffusion");
    mcfg.sample = cfg.sample;

    std::vector<mapforge::Raster<std::uint8_t>> preds, obs, gts;
    std::vector<evalkit::CellTally> tally(mapforge::kNumClasses);
    for (const auto& s : data.samples) {
      const Prediction p = sample_map(model, s.observation, s.gt.grid, mcfg);
      const auto t = evalkit::tally_global({p.map, p.lines}, {s.gt, s.vectors}, cfg.eval);
      for (int c = 0; c < mapforge::kNumClasses; ++c) tally[c].add(t[c]);
      preds.push_back(p.map.semantic);
      obs.push_back(mapforge::binarize(s.observation));
      gts.push_back(s.gt.semantic);
    }
    const auto iou = pooled_class_iou(preds, gts);
    const auto obs_iou = pooled_class_iou(obs, gts);
    row.miou = (iou[0] + iou[1] + iou[2]) / 3.0;
    row.observation_miou = (obs_iou[0] + obs_iou[1] + obs_iou[2]) / 3.0;
    double ap = 0.0;
    int n_ap = 0;
    for (const auto& t : tally) {
      const auto m = evalkit::finalize(t);
      if (m.ap) ap += *m.ap, ++n_ap;
    }
    row.map = n_ap ? ap / n_ap : 0.0;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["columns"] = {"factor", "vq_recon_miou", "miou", "observation_miou", "map", "seconds"};
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"factor", r.factor},
                         {"vq_recon_miou", r.vq_recon_iou},
                         {"miou", r.miou},
                         {"observation_miou", r.observation_miou},
                         {"map", r.map},
                         {"seconds", r.seconds}});
  }
  return j.dump(2) + "\n";
}

}  // namespace diffmap::pipeline
