#include <cmath>

#include <spdlog/spdlog.h>

#include "diffmap/checkpoint.hpp"
#include "diffmap/errors.hpp"
#include "diffmap/pipeline.hpp"
#include "diffmap/rng.hpp"

namespace diffmap::pipeline {

Tensor run_chain(const Predictor& predict, const Shape& latent_shape, const SampleConfig& config,
                 const diffcore::NoiseSchedule& schedule, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Tensor z = Tensor::randn(latent_shape, rng);
  const std::vector<int> ts = diffcore::sampling_timesteps(schedule.steps(), config.steps);
  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    auto [eps_hat, z0_hat] = predict(z, ts[i]);
    const Tensor noise = config.sampler.eta > 0.0 ? Tensor::randn(latent_shape, rng) : Tensor(latent_shape);
    z = diffcore::sampler_step(z, z0_hat, eps_hat, ts[i], ts[i + 1], config.sampler, schedule, noise);
  }
  return z;
}

ChainDecode decode_latent(const DiffMapModel& model, const Tensor& z0, const PipelineConfig& config) {
  ag::NoGradGuard guard;
  ChainDecode out;
  out.latent = z0 * model.latent_scale();
  if (config.sample.snap_to_codebook) {
    const std::vector<int> idx = vq::nearest_codes(out.latent, model.vq().codebook().value());
    out.latent = vq::gather_codes(model.vq().codebook(), idx, out.latent.shape()).value();
  }
  const vq::Decoded dec = model.vq().decode(Var(out.latent));
  out.features = dec.features.value();
  out.probs = ag::sigmoid(dec.logits).value();
  return out;
}

namespace {

Tensor mean_of(const std::vector<Tensor>& parts) {
  Tensor m = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) m += parts[i];
  m *= 1.0 / static_cast<double>(parts.size());
  return m;
}

mapforge::Raster<float> to_raster(const Tensor& t) {
  mapforge::Raster<float> r(t.dim(1), t.dim(2), t.dim(3));
  for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = static_cast<float>(t[i]);
  return r;
}

Tensor to_tensor(const mapforge::Raster<float>& r) {
  Tensor t({1, r.channels, r.height, r.width});
  for (std::size_t i = 0; i < r.data.size(); ++i) t[i] = r.data[i];
  return t;
}

// Crops the leading rows/cols of a [1, K, H, W] tensor.
Tensor crop_tensor(const Tensor& t, int h, int w) {
  if (t.dim(2) == h && t.dim(3) == w) return t;
  Tensor out({1, t.dim(1), h, w});
  for (int c = 0; c < t.dim(1); ++c)
    for (int r = 0; r < h; ++r)
      for (int q = 0; q < w; ++q) out.at(0, c, r, q) = t.at(0, c, r, q);
  return out;
}

}  // namespace

Prediction assemble_prediction(const DiffMapModel& model, std::vector<ChainDecode> chains,
                               const mapforge::GridSpec& grid, const PipelineConfig& config) {
  ag::NoGradGuard guard;
  if (chains.empty()) throw ContractError("assemble_prediction: no chains");
  Prediction p;
  std::vector<Tensor> feats, probs;
  for (const auto& c : chains) {
    feats.push_back(c.features);
    probs.push_back(c.probs);
  }
  const int h = grid.height_px, w = grid.width_px;
  p.features = crop_tensor(mean_of(feats), h, w);
  p.probs = crop_tensor(mean_of(probs), h, w);
  p.chains = std::move(chains);

  const auto heads = model.diffmap_heads()(Var(p.features));
  p.heads.sem_logits = heads.sem_logits.value();
  p.heads.dir_logits = heads.dir_logits.value();

  p.map = mapforge::SemanticMap::empty(grid);
  for (std::size_t i = 0; i < p.map.semantic.data.size(); ++i) p.map.semantic.data[i] = p.probs[i] > 0.5 ? 1 : 0;
  const instancing::InstanceMap inst =
      instancing::cluster_instances(p.map.semantic, heads.embedding.value(), config.cluster);
  p.map.instance = inst.ids;
  const std::size_t hw = p.map.instance.plane();
  const int bins = p.heads.dir_logits.dim(1);
  for (std::size_t q = 0; q < hw; ++q) {
    if (p.map.instance.data[q] == 0) continue;
    int best = 0;
    for (int b = 1; b < bins; ++b)
      if (p.heads.dir_logits[b * hw + q] > p.heads.dir_logits[best * hw + q]) best = b;
    p.map.direction.data[q] = static_cast<std::uint8_t>(best);
  }
  p.lines = instancing::trace_polylines(inst, p.heads, grid, config.trace);
  return p;
}

Prediction sample_map(const DiffMapModel& model, const mapforge::Raster<float>& observation,
                      const mapforge::GridSpec& grid, const PipelineConfig& config) {
  ag::NoGradGuard guard;
  config.sample.validate();
  if (observation.height != grid.height_px || observation.width != grid.width_px ||
      observation.channels != mapforge::kNumClasses)
    throw ContractError("sample_map: observation does not match the grid");

  const auto padded = mapforge::pad_to_multiple(observation, 64);
  const Tensor obs = to_tensor(padded.raster);
  const int f = model.vq().config().factor;
  const int lh = obs.dim(2) / f, lw = obs.dim(3) / f;
  model.denoiser().config().check_latent_grid(lh, lw);

  const auto base = model.baseline().forward_pooled(Var(obs), f);
  const Var cond = model.denoiser().projector()(base.bev, lh, lw);
  const int T = model.schedule().steps();
  Predictor predict = [&](const Tensor& z_t, int t) {
    const auto out = model.denoiser().forward_projected(Var(z_t), {t}, cond, T);
    return std::make_pair(out.eps_hat.value(), out.z_hat.value());
  };

  const Shape shape = {1, model.vq().config().latent_dim, lh, lw};
  std::vector<Tensor> finals;
  for (int c = 0; c < config.sample.samples; ++c)
    finals.push_back(run_chain(predict, shape, config.sample, model.schedule(),
                               mix_seed(config.sample.seed, static_cast<std::uint64_t>(c))));
  std::vector<ChainDecode> chains;
  if (config.sample.average == "latent") {
    chains.push_back(decode_latent(model, mean_of(finals), config));
  } else {
    for (const Tensor& z : finals) chains.push_back(decode_latent(model, z, config));
  }
  Prediction p = assemble_prediction(model, std::move(chains), grid, config);

  const Tensor logits = crop_tensor(model.baseline_heads()(base.features).sem_logits.value(), grid.height_px,
                                    grid.width_px);
  p.baseline_semantic = mapforge::Raster<std::uint8_t>(mapforge::kNumClasses, grid.height_px, grid.width_px);
  const std::size_t hw = p.baseline_semantic.plane();
  for (std::size_t q = 0; q < hw; ++q) {
    int best = 0;
    for (int k = 1; k < logits.dim(1); ++k)
      if (logits[k * hw + q] > logits[best * hw + q]) best = k;
    if (best > 0) p.baseline_semantic.data[(best - 1) * hw + q] = 1;
  }
  return p;
}

void save_prediction(const Prediction& pred, const mapforge::MapSample& source, const fs::path& dir) {
  mapforge::MapSample out;
  out.gt = pred.map;
  out.observation = to_raster(pred.probs);
  out.scene_seed = source.scene_seed;
  out.meta = {{"kind", "prediction"}, {"chains", std::to_string(pred.chains.size())}};
  out.vectors = pred.lines;
  mapforge::save_sample(out, dir);
  io::write_le<std::uint8_t>(dir / "baseline.u8.bin", pred.baseline_semantic.data);
}

void infer_dataset(const fs::path& data_dir, const fs::path& ckpt_dir, const fs::path& out_dir,
                   const PipelineConfig& overrides, const std::optional<int>& steps,
                   const std::optional<int>& samples, std::optional<std::uint64_t> seed) {
  auto [model, config] = DiffMapModel::load(ckpt_dir);
  config.sample = overrides.sample;
  config.cluster = overrides.cluster;
  config.trace = overrides.trace;
  if (steps) config.sample.steps = *steps;
  if (samples) config.sample.samples = *samples;
  if (seed) config.sample.seed = *seed;
  config.sample.validate();
  if (config.sample.steps > model.schedule().steps()) throw ConfigError("--steps exceeds the diffusion step count");

  const Dataset data = load_dataset(data_dir);
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    const Prediction p = sample_map(model, s.observation, s.gt.grid, config);
    save_prediction(p, s, out_dir / data.ids[i]);
    spdlog::info("infer {} ({}/{})", data.ids[i], i + 1, data.samples.size());
  }
  const mapforge::DatasetIndex src = mapforge::read_dataset_index(data_dir);
  mapforge::write_dataset_index(out_dir, {data.ids, src.preset, src.seed});

  RunManifest run;
  run.command = "infer";
  run.config_json = config_to_json_text(config);
  run.inputs = {{"dataset", io::hex64(io::fnv1a_tree(data_dir))},
                {"checkpoint", io::hex64(io::fnv1a_file(ckpt_dir / "params.f64.bin"))}};
  run.outputs = {{"predictions", out_dir.string()}};
  run.write(out_dir / "run.json");
}

}  // namespace diffmap::pipeline
