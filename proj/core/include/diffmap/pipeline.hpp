#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "diffmap/bevbase.hpp"
#include "diffmap/denoiser.hpp"
#include "diffmap/diffcore.hpp"
#include "diffmap/evalkit.hpp"
#include "diffmap/instancing.hpp"
#include "diffmap/mapforge.hpp"
#include "diffmap/vq.hpp"

namespace diffmap::pipeline {

namespace fs = std::filesystem;
using ag::Var;

struct LrSchedule {
  std::string kind = "constant";  // constant | exponential | multistep
  double base = 1e-3;
  double final_factor = 0.1;                // exponential: lr at the last step / base
  std::vector<double> milestones = {0.7, 0.9};  // multistep: fractions of the run
  double gamma = 1.0 / 3.0;

  double at(long step, long total_steps) const;
  void validate() const;
};

struct LossWeights {
  double diff = 1.0;
  double ce = 1.0;
  double disc = 1.0;
  double dir = 0.2;
};

struct TrainConfig {
  std::string stage = "vqvae";  // vqvae | diffusion
  long steps = 2000;
  int batch_size = 4;
  nn::AdamWConfig optimizer;
  LrSchedule lr;
  LossWeights weights;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: only at the end

  void validate() const;
};

struct SampleConfig {
  int steps = 20;
  int samples = 3;
  diffcore::SamplerConfig sampler;
  bool snap_to_codebook = true;
  std::string average = "features";  // features | latent
  std::uint64_t seed = 0;

  void validate() const;
};

struct DiffusionConfig {
  int steps = 1000;
  double beta_first = 1e-4;
  double beta_last = 0.02;
};

struct AblationConfig {
  std::vector<int> factors = {4, 8, 16};
  long vq_steps = 300;
  long diff_steps = 300;
  int samples = 16;
};

// Every knob of a run. Loaded from JSON; absent keys keep their defaults.
struct PipelineConfig {
  std::uint64_t seed = 0;
  std::string preset = "short";
  int dataset_size = 16;
  mapforge::SceneConfig scene = mapforge::SceneConfig::preset("short");
  vq::VqConfig vq;
  TrainConfig vq_train;
  bevbase::BaselineConfig baseline;
  denoiser::DenoiserConfig denoiser;
  instancing::HeadConfig heads;
  instancing::DiscriminativeConfig disc;
  instancing::ClusterConfig cluster;
  instancing::TraceConfig trace;
  DiffusionConfig diffusion;
  TrainConfig diff_train;
  SampleConfig sample;
  std::vector<double> intervals;  // empty: three equal splits of the grid's forward range
  evalkit::EvalConfig eval;
  AblationConfig ablation;

  PipelineConfig();
  void validate() const;
};

PipelineConfig config_from_json_text(const std::string& text, const PipelineConfig& base = PipelineConfig{});
PipelineConfig load_config(const fs::path& file);
std::string config_to_json_text(const PipelineConfig& config);

// Seed precedence: explicit flag, then DIFFMAP_SEED, then the config value.
std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t config_seed);

// --- data -------------------------------------------------------------------

struct Dataset {
  std::vector<std::string> ids;
  std::vector<mapforge::MapSample> samples;
};

Dataset load_dataset(const fs::path& dir, int limit = 0);

// Stacks gt semantics / observations of the given samples into [B, C, H, W].
Tensor stack_semantic(const std::vector<const mapforge::MapSample*>& batch);
Tensor stack_observation(const std::vector<const mapforge::MapSample*>& batch);

// Batch members for a training step; a pure function of (seed, step).
std::vector<int> batch_indices(std::uint64_t seed, long step, int dataset_size, int batch_size);

// --- run bookkeeping --------------------------------------------------------

struct RunManifest {
  std::string command;
  std::string config_json;
  std::string code_revision;
  std::vector<std::pair<std::string, std::string>> inputs;   // name -> content hash
  std::vector<std::pair<std::string, std::string>> outputs;  // name -> path or value
  void write(const fs::path& file) const;
};

// --- training ---------------------------------------------------------------

struct TrainResult {
  std::vector<double> losses;  // total loss per executed step
  long final_step = 0;
};

// Trains (or resumes) the VQ-VAE on gt maps; writes the checkpoint to out_dir.
TrainResult train_vqvae(const Dataset& data, const PipelineConfig& config, const fs::path& out_dir,
                        bool resume = false);

// Per-class IoU of binarized reconstructions, pooled over the dataset.
std::vector<double> vq_reconstruction_iou(const vq::VqVae& model, const Dataset& data);

// Full conditional model: baseline, denoiser and both head sets, tied to a VQ-VAE.
class DiffMapModel {
 public:
  DiffMapModel(const PipelineConfig& config, std::shared_ptr<const vq::VqVae> vq, std::uint64_t seed);

  const bevbase::BaselineEncoder& baseline() const { return baseline_; }
  const denoiser::Denoiser& denoiser() const { return denoiser_; }
  const instancing::HeadSet& baseline_heads() const { return heads_base_; }
  const instancing::HeadSet& diffmap_heads() const { return heads_diff_; }
  const vq::VqVae& vq() const { return *vq_; }
  const diffcore::NoiseSchedule& schedule() const { return schedule_; }

  // Scale applied to VQ latents before diffusion (z = z_q / scale).
  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s) { latent_scale_ = s; }

  ag::ParamList parameters() const;
  ag::ParamList branch_parameters(const std::string& prefix) const;

  void save(const fs::path& dir, const PipelineConfig& config) const;
  // Loads a checkpoint written by save; the VQ-VAE is read from dir/vq.
  static std::pair<DiffMapModel, PipelineConfig> load(const fs::path& dir);

 private:
  std::shared_ptr<const vq::VqVae> vq_;
  bevbase::BaselineEncoder baseline_;
  denoiser::Denoiser denoiser_;
  instancing::HeadSet heads_base_;
  instancing::HeadSet heads_diff_;
  diffcore::NoiseSchedule schedule_;
  double latent_scale_ = 1.0;
};

struct DiffusionLossTerms {
  double total = 0.0;
  double diff = 0.0;
  double ce = 0.0;
  double disc = 0.0;
  double dir = 0.0;
};

// Trains the conditional model with the VQ-VAE at vq_dir frozen.
TrainResult train_diffusion(const Dataset& data, const fs::path& vq_dir, const PipelineConfig& config,
                            const fs::path& out_dir, bool resume = false,
                            std::vector<DiffusionLossTerms>* terms = nullptr);

// --- inference --------------------------------------------------------------

// (eps_hat, z0_hat) for a latent z_t at step t.
using Predictor = std::function<std::pair<Tensor, Tensor>(const Tensor& z_t, int t)>;

// One reverse chain from pure noise drawn with `seed`.
Tensor run_chain(const Predictor& predict, const Shape& latent_shape, const SampleConfig& config,
                 const diffcore::NoiseSchedule& schedule, std::uint64_t seed);

struct ChainDecode {
  Tensor latent;    // final latent in VQ units
  Tensor features;  // decoder features [1, F, H, W]
  Tensor probs;     // sigmoid of decoder logits [1, C, H, W]
};

struct Prediction {
  mapforge::SemanticMap map;
  mapforge::PolylineSet lines;
  Tensor probs;     // averaged mask probabilities [1, C, H, W]
  Tensor features;  // averaged decoder features
  instancing::PixelHeads heads;
  mapforge::Raster<std::uint8_t> baseline_semantic;  // baseline heads on its own features
  std::vector<ChainDecode> chains;
};

// Denoise -> decode -> heads -> cluster -> trace for one observation.
Prediction sample_map(const DiffMapModel& model, const mapforge::Raster<float>& observation,
                      const mapforge::GridSpec& grid, const PipelineConfig& config);

// Maps averaged decoder outputs to a prediction (shared by sample_map and tests).
Prediction assemble_prediction(const DiffMapModel& model, std::vector<ChainDecode> chains,
                               const mapforge::GridSpec& grid, const PipelineConfig& config);
ChainDecode decode_latent(const DiffMapModel& model, const Tensor& z0, const PipelineConfig& config);

// Runs sample_map over a dataset and writes one prediction sample per id.
void infer_dataset(const fs::path& data_dir, const fs::path& ckpt_dir, const fs::path& out_dir,
                   const PipelineConfig& overrides, const std::optional<int>& steps,
                   const std::optional<int>& samples, std::optional<std::uint64_t> seed);

void save_prediction(const Prediction& pred, const mapforge::MapSample& source, const fs::path& dir);

// --- evaluation -------------------------------------------------------------

std::vector<evalkit::Interval> resolve_intervals(const std::vector<double>& cuts, const mapforge::GridSpec& grid);

// Throws DataError listing every gt id missing from pred_dir.
evalkit::Report evaluate(const fs::path& pred_dir, const fs::path& gt_dir, const std::vector<double>& cuts,
                         const fs::path& out_path, const evalkit::EvalConfig& config = {});

// --- figures ----------------------------------------------------------------

struct Rgb {
  std::uint8_t r, g, b;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};
Rgb class_color(int class_id);
Rgb background_color();

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
  Rgb pixel(int x, int y) const;
};

struct LegendProbe {
  int x = 0;
  int y = 0;
};
// Pixel inside the legend swatch of a class.
LegendProbe legend_swatch(const Image& image, int class_id);

// Panels: observation | baseline | DiffMap | gt. Absent panels render empty.
Image render_comparison(const mapforge::Raster<float>* observation,
                        const mapforge::Raster<std::uint8_t>* baseline,
                        const mapforge::Raster<std::uint8_t>* prediction,
                        const mapforge::Raster<std::uint8_t>* gt);
void write_png(const Image& image, const fs::path& file);

// --- ablation ---------------------------------------------------------------

struct AblationRow {
  int factor = 0;
  double vq_recon_iou = 0.0;
  double miou = 0.0;
  double observation_miou = 0.0;
  double map = 0.0;
  double seconds = 0.0;
};

std::vector<AblationRow> ablate_factor(const fs::path& data_dir, const fs::path& work_dir,
                                       const PipelineConfig& config);
std::string ablation_json(const std::vector<AblationRow>& rows);

// --- shared metrics ---------------------------------------------------------

// Per-class IoU pooled over samples: pred vs gt [C, H, W] binary rasters.
std::vector<double> pooled_class_iou(const std::vector<mapforge::Raster<std::uint8_t>>& pred,
                                     const std::vector<mapforge::Raster<std::uint8_t>>& gt);

}  // namespace diffmap::pipeline
