#include "diffmap/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <spdlog/spdlog.h>

#include "diffmap/checkpoint.hpp"
#include "diffmap/errors.hpp"
#include "diffmap/rng.hpp"
#include "json_util.hpp"

#ifndef DIFFMAP_GIT_REV
#define DIFFMAP_GIT_REV "unknown"
#endif

namespace diffmap::pipeline {

using detail::json;

// --- schedules and config ---------------------------------------------------

double LrSchedule::at(long step, long total_steps) const {
  const double frac = total_steps > 0 ? static_cast<double>(step) / static_cast<double>(total_steps) : 0.0;
  if (kind == "exponential") return base * std::pow(final_factor, frac);
  if (kind == "multistep") {
    double lr = base;
    for (double m : milestones)
      if (frac >= m) lr *= gamma;
    return lr;
  }
  return base;
}

void LrSchedule::validate() const {
  if (kind != "constant" && kind != "exponential" && kind != "multistep")
    throw ConfigError("lr.kind must be constant, exponential or multistep (got '" + kind + "')");
  if (!(base > 0.0)) throw ConfigError("lr.base must be positive");
  if (!(final_factor > 0.0)) throw ConfigError("lr.final_factor must be positive");
  if (!(gamma > 0.0)) throw ConfigError("lr.gamma must be positive");
}

void TrainConfig::validate() const {
  if (stage != "vqvae" && stage != "diffusion") throw ConfigError("train.stage must be vqvae or diffusion");
  if (steps < 1) throw ConfigError(stage + ": steps must be >= 1");
  if (batch_size < 1) throw ConfigError(stage + ": batch_size must be >= 1");
  if (weights.diff < 0 || weights.ce < 0 || weights.disc < 0 || weights.dir < 0)
    throw ConfigError(stage + ": loss weights must be >= 0");
  if (checkpoint_every < 0) throw ConfigError(stage + ": checkpoint_every must be >= 0");
  lr.validate();
}

void SampleConfig::validate() const {
  if (steps < 1) throw ConfigError("sample.steps must be >= 1");
  if (samples < 1) throw ConfigError("sample.samples must be >= 1");
  if (sampler.eta < 0.0 || sampler.eta > 1.0) throw ConfigError("sample.eta must be in [0, 1]");
  if (sampler.lambda < 0.0 || sampler.lambda > 1.0) throw ConfigError("sample.lambda must be in [0, 1]");
  if (average != "features" && average != "latent") throw ConfigError("sample.average must be features or latent");
}

PipelineConfig::PipelineConfig() {
  vq_train.stage = "vqvae";
  vq_train.steps = 2000;
  vq_train.lr = {"exponential", 2e-3, 0.1, {0.7, 0.9}, 1.0 / 3.0};
  vq_train.optimizer.weight_decay = 0.0;
  diff_train.stage = "diffusion";
  diff_train.steps = 5000;
  diff_train.lr = {"multistep", 1e-3, 0.1, {0.7, 0.9}, 1.0 / 3.0};
  diff_train.optimizer.grad_clip = 1.0;
}

void PipelineConfig::validate() const {
  if (dataset_size < 1) throw ConfigError("dataset_size must be >= 1");
  scene.validate();
  vq.validate();
  vq_train.validate();
  baseline.validate();
  denoiser.validate();
  heads.validate();
  diff_train.validate();
  sample.validate();
  if (diffusion.steps < 1 || !(diffusion.beta_first > 0.0) || diffusion.beta_first > diffusion.beta_last ||
      !(diffusion.beta_last < 1.0))
    throw ConfigError("diffusion schedule needs T >= 1 and 0 < beta_first <= beta_last < 1");
  if (sample.steps > diffusion.steps) throw ConfigError("sample.steps exceeds the diffusion step count");
  for (int f : ablation.factors)
    if (f != 4 && f != 8 && f != 16) throw ConfigError("ablation.factors must be drawn from {4, 8, 16}");
}

namespace {

// Reads known keys of one JSON object section and rejects unknown ones.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + ": expected an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError(name_ + ": unknown key '" + it.key() + "'");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name_ + "." + key + ": wrong type (" + e.what() + ")");
    }
  }
  const json* child(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  std::string path(const std::string& key) const { return name_ + "." + key; }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> used_;
};

void read_lr(const json& j, const std::string& name, LrSchedule& lr) {
  Section s(j, name);
  s.get("kind", lr.kind);
  s.get("base", lr.base);
  s.get("final_factor", lr.final_factor);
  s.get("milestones", lr.milestones);
  s.get("gamma", lr.gamma);
}

void read_train(const json& j, const std::string& name, TrainConfig& t) {
  Section s(j, name);
  s.get("steps", t.steps);
  s.get("batch_size", t.batch_size);
  s.get("seed", t.seed);
  s.get("checkpoint_every", t.checkpoint_every);
  s.get("weight_decay", t.optimizer.weight_decay);
  s.get("beta1", t.optimizer.beta1);
  s.get("beta2", t.optimizer.beta2);
  s.get("eps", t.optimizer.eps);
  s.get("grad_clip", t.optimizer.grad_clip);
  if (const json* lr = s.child("lr")) read_lr(*lr, s.path("lr"), t.lr);
  if (const json* w = s.child("loss_weights")) {
    Section ws(*w, s.path("loss_weights"));
    ws.get("diff", t.weights.diff);
    ws.get("ce", t.weights.ce);
    ws.get("disc", t.weights.disc);
    ws.get("dir", t.weights.dir);
  }
}

json lr_json(const LrSchedule& lr) {
  return {{"kind", lr.kind}, {"base", lr.base}, {"final_factor", lr.final_factor},
          {"milestones", lr.milestones}, {"gamma", lr.gamma}};
}

json train_json(const TrainConfig& t) {
  return {{"steps", t.steps},
          {"batch_size", t.batch_size},
          {"seed", t.seed},
          {"checkpoint_every", t.checkpoint_every},
          {"weight_decay", t.optimizer.weight_decay},
          {"beta1", t.optimizer.beta1},
          {"beta2", t.optimizer.beta2},
          {"eps", t.optimizer.eps},
          {"grad_clip", t.optimizer.grad_clip},
          {"lr", lr_json(t.lr)},
          {"loss_weights", {{"diff", t.weights.diff}, {"ce", t.weights.ce}, {"disc", t.weights.disc},
                            {"dir", t.weights.dir}}}};
}

}  // namespace

PipelineConfig config_from_json_text(const std::string& text, const PipelineConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON (") + e.what() + ")");
  }
  PipelineConfig c = base;
  Section s(j, "config");
  const bool seed_given = j.is_object() && j.contains("seed");
  s.get("seed", c.seed);
  if (seed_given) c.vq_train.seed = c.diff_train.seed = c.sample.seed = c.seed;
  std::string preset = c.preset;
  s.get("preset", preset);
  if (preset != c.preset) {
    c.preset = preset;
    c.scene = mapforge::SceneConfig::preset(preset);
  }
  s.get("dataset_size", c.dataset_size);
  s.get("intervals", c.intervals);

  if (const json* sc = s.child("scene")) {
    Section ss(*sc, "scene");
    ss.get("p_ped", c.scene.p_ped);
    ss.get("stroke_px", c.scene.stroke_px);
    ss.get("min_lanes", c.scene.min_lanes);
    ss.get("max_lanes", c.scene.max_lanes);
    ss.get("lane_width_min_m", c.scene.lane_width_min_m);
    ss.get("lane_width_max_m", c.scene.lane_width_max_m);
    ss.get("edge_margin_m", c.scene.edge_margin_m);
    ss.get("max_heading", c.scene.max_heading);
    ss.get("max_bend_m", c.scene.max_bend_m);
    ss.get("min_stripes", c.scene.min_stripes);
    ss.get("max_stripes", c.scene.max_stripes);
    ss.get("stripe_spacing_m", c.scene.stripe_spacing_m);
    if (const json* cc = ss.child("corruption")) {
      Section cs(*cc, "scene.corruption");
      auto& k = c.scene.corruption;
      cs.get("dropout_patch_rate", k.dropout_patch_rate);
      cs.get("patch_size_px", k.patch_size_px);
      cs.get("blur_sigma_px", k.blur_sigma_px);
      cs.get("jitter_px", k.jitter_px);
      cs.get("erosion_dilation_px", k.erosion_dilation_px);
      cs.get("flip_label_rate", k.flip_label_rate);
    }
  }
  if (const json* v = s.child("vq")) {
    Section vs(*v, "vq");
    vs.get("factor", c.vq.factor);
    vs.get("beta", c.vq.beta);
    vs.get("codebook_size", c.vq.codebook_size);
    vs.get("latent_dim", c.vq.latent_dim);
    vs.get("base_width", c.vq.base_width);
    vs.get("max_width", c.vq.max_width);
    vs.get("feature_width", c.vq.feature_width);
  }
  if (const json* t = s.child("vq_train")) read_train(*t, "vq_train", c.vq_train);
  if (const json* b = s.child("baseline")) {
    Section bs(*b, "baseline");
    bs.get("channels", c.baseline.channels);
    bs.get("depth", c.baseline.depth);
    bs.get("hidden", c.baseline.hidden);
    bs.get("stem", c.baseline.stem);
    bs.get("feature_width", c.baseline.feature_width);
  }
  if (const json* d = s.child("denoiser")) {
    Section ds(*d, "denoiser");
    ds.get("cond_channels", c.denoiser.cond_channels);
    ds.get("base_width", c.denoiser.base_width);
    ds.get("max_width", c.denoiser.max_width);
    ds.get("depth", c.denoiser.depth);
    ds.get("heads", c.denoiser.heads);
    ds.get("time_dim", c.denoiser.time_dim);
    ds.get("time_hidden", c.denoiser.time_hidden);
    ds.get("kernel", c.denoiser.kernel);
  }
  if (const json* h = s.child("heads")) {
    Section hs(*h, "heads");
    hs.get("hidden", c.heads.hidden);
    hs.get("embedding_dim", c.heads.embedding_dim);
    hs.get("delta_v", c.disc.delta_v);
    hs.get("delta_d", c.disc.delta_d);
    hs.get("w_var", c.disc.w_var);
    hs.get("w_dist", c.disc.w_dist);
    hs.get("w_reg", c.disc.w_reg);
    hs.get("cluster_radius", c.cluster.radius);
    hs.get("cluster_min_points", c.cluster.min_points);
    hs.get("simplify_tolerance_m", c.trace.simplify_tolerance_m);
  }
  if (const json* d = s.child("diffusion")) {
    Section ds(*d, "diffusion");
    ds.get("steps", c.diffusion.steps);
    ds.get("beta_first", c.diffusion.beta_first);
    ds.get("beta_last", c.diffusion.beta_last);
  }
  if (const json* t = s.child("diff_train")) read_train(*t, "diff_train", c.diff_train);
  if (const json* sm = s.child("sample")) {
    Section ss(*sm, "sample");
    ss.get("steps", c.sample.steps);
    ss.get("samples", c.sample.samples);
    ss.get("eta", c.sample.sampler.eta);
    ss.get("lambda", c.sample.sampler.lambda);
    ss.get("snap_to_codebook", c.sample.snap_to_codebook);
    ss.get("average", c.sample.average);
    ss.get("seed", c.sample.seed);
  }
  if (const json* e = s.child("eval")) {
    Section es(*e, "eval");
    es.get("stroke_px", c.eval.stroke_px);
    es.get("densify_spacing", c.eval.densify_spacing);
    es.get("iou_threshold", c.eval.match.iou_threshold);
    es.get("cd_threshold", c.eval.match.cd_threshold);
  }
  if (const json* a = s.child("ablation")) {
    Section as(*a, "ablation");
    as.get("factors", c.ablation.factors);
    as.get("vq_steps", c.ablation.vq_steps);
    as.get("diff_steps", c.ablation.diff_steps);
    as.get("samples", c.ablation.samples);
  }
  c.vq_train.stage = "vqvae";
  c.diff_train.stage = "diffusion";
  c.validate();
  return c;
}

PipelineConfig load_config(const fs::path& file) {
  std::string text;
  try {
    text = io::read_text(file);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config " + file.string() + ": " + e.what());
  }
  return config_from_json_text(text);
}

std::string config_to_json_text(const PipelineConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["preset"] = c.preset;
  j["dataset_size"] = c.dataset_size;
  j["intervals"] = c.intervals;
  const auto& k = c.scene.corruption;
  j["scene"] = {{"p_ped", c.scene.p_ped},
                {"stroke_px", c.scene.stroke_px},
                {"min_lanes", c.scene.min_lanes},
                {"max_lanes", c.scene.max_lanes},
                {"lane_width_min_m", c.scene.lane_width_min_m},
                {"lane_width_max_m", c.scene.lane_width_max_m},
                {"edge_margin_m", c.scene.edge_margin_m},
                {"max_heading", c.scene.max_heading},
                {"max_bend_m", c.scene.max_bend_m},
                {"min_stripes", c.scene.min_stripes},
                {"max_stripes", c.scene.max_stripes},
                {"stripe_spacing_m", c.scene.stripe_spacing_m},
                {"corruption",
                 {{"dropout_patch_rate", k.dropout_patch_rate},
                  {"patch_size_px", k.patch_size_px},
                  {"blur_sigma_px", k.blur_sigma_px},
                  {"jitter_px", k.jitter_px},
                  {"erosion_dilation_px", k.erosion_dilation_px},
                  {"flip_label_rate", k.flip_label_rate}}}};
  j["vq"] = {{"factor", c.vq.factor},         {"beta", c.vq.beta},
             {"codebook_size", c.vq.codebook_size}, {"latent_dim", c.vq.latent_dim},
             {"base_width", c.vq.base_width}, {"max_width", c.vq.max_width},
             {"feature_width", c.vq.feature_width}};
  j["vq_train"] = train_json(c.vq_train);
  j["baseline"] = {{"channels", c.baseline.channels}, {"depth", c.baseline.depth}, {"hidden", c.baseline.hidden},
                   {"stem", c.baseline.stem}, {"feature_width", c.baseline.feature_width}};
  j["denoiser"] = {{"cond_channels", c.denoiser.cond_channels}, {"base_width", c.denoiser.base_width},
                   {"max_width", c.denoiser.max_width},         {"depth", c.denoiser.depth},
                   {"heads", c.denoiser.heads},                 {"time_dim", c.denoiser.time_dim},
                   {"time_hidden", c.denoiser.time_hidden},     {"kernel", c.denoiser.kernel}};
  j["heads"] = {{"hidden", c.heads.hidden},
                {"embedding_dim", c.heads.embedding_dim},
                {"delta_v", c.disc.delta_v},
                {"delta_d", c.disc.delta_d},
                {"w_var", c.disc.w_var},
                {"w_dist", c.disc.w_dist},
                {"w_reg", c.disc.w_reg},
                {"cluster_radius", c.cluster.radius},
                {"cluster_min_points", c.cluster.min_points},
                {"simplify_tolerance_m", c.trace.simplify_tolerance_m}};
  j["diffusion"] = {{"steps", c.diffusion.steps},
                    {"beta_first", c.diffusion.beta_first},
                    {"beta_last", c.diffusion.beta_last}};
  j["diff_train"] = train_json(c.diff_train);
  j["sample"] = {{"steps", c.sample.steps},
                 {"samples", c.sample.samples},
                 {"eta", c.sample.sampler.eta},
                 {"lambda", c.sample.sampler.lambda},
                 {"snap_to_codebook", c.sample.snap_to_codebook},
                 {"average", c.sample.average},
                 {"seed", c.sample.seed}};
  j["eval"] = {{"stroke_px", c.eval.stroke_px},
               {"densify_spacing", c.eval.densify_spacing},
               {"iou_threshold", c.eval.match.iou_threshold},
               {"cd_threshold", c.eval.match.cd_threshold}};
  j["ablation"] = {{"factors", c.ablation.factors},
                   {"vq_steps", c.ablation.vq_steps},
                   {"diff_steps", c.ablation.diff_steps},
                   {"samples", c.ablation.samples}};
  return j.dump(2) + "\n";
}

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t config_seed) {
  if (flag) return *flag;
  if (const char* env = std::getenv("DIFFMAP_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw ConfigError(std::string("DIFFMAP_SEED is not a nonnegative integer: ") + env);
    return v;
  }
  return config_seed;
}

// --- data -------------------------------------------------------------------

Dataset load_dataset(const fs::path& dir, int limit) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  mapforge::DatasetIndex index;
  try {
    index = mapforge::read_dataset_index(dir);
  } catch (const FormatError& e) {
    throw DataError(e.what());
  }
  Dataset d;
  for (const std::string& id : index.sample_ids) {
    if (limit > 0 && static_cast<int>(d.ids.size()) >= limit) break;
    try {
      d.samples.push_back(mapforge::load_sample(dir / id));
    } catch (const FormatError& e) {
      throw DataError(id + ": " + e.what());
    }
    d.ids.push_back(id);
  }
  if (d.samples.empty()) throw DataError("dataset " + dir.string() + " has no samples");
  return d;
}

Tensor stack_semantic(const std::vector<const mapforge::MapSample*>& batch) {
  const auto& s0 = batch.front()->gt.semantic;
  Tensor t({static_cast<int>(batch.size()), s0.channels, s0.height, s0.width});
  std::size_t off = 0;
  for (const auto* s : batch) {
    if (s->gt.semantic.data.size() != s0.data.size()) throw DataError("batch samples differ in grid size");
    for (std::uint8_t v : s->gt.semantic.data) t[off++] = v;
  }
  return t;
}

Tensor stack_observation(const std::vector<const mapforge::MapSample*>& batch) {
  const auto& o0 = batch.front()->observation;
  Tensor t({static_cast<int>(batch.size()), o0.channels, o0.height, o0.width});
  std::size_t off = 0;
  for (const auto* s : batch) {
    if (s->observation.data.size() != o0.data.size()) throw DataError("batch samples differ in grid size");
    for (float v : s->observation.data) t[off++] = v;
  }
  return t;
}

std::vector<int> batch_indices(std::uint64_t seed, long step, int dataset_size, int batch_size) {
  Rng rng(mix_seed(seed, 0xba7c, static_cast<std::uint64_t>(step)));
  std::vector<int> order(dataset_size);
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> out;
  while (static_cast<int>(out.size()) < batch_size) {
    for (int i = dataset_size - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
    for (int i = 0; i < dataset_size && static_cast<int>(out.size()) < batch_size; ++i) out.push_back(order[i]);
  }
  return out;
}

std::vector<double> pooled_class_iou(const std::vector<mapforge::Raster<std::uint8_t>>& pred,
                                     const std::vector<mapforge::Raster<std::uint8_t>>& gt) {
  if (pred.size() != gt.size()) throw ContractError("pooled_class_iou: sample count mismatch");
  std::vector<long> inter(mapforge::kNumClasses, 0), uni(mapforge::kNumClasses, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].data.size() != gt[i].data.size()) throw ContractError("pooled_class_iou: raster size mismatch");
    const std::size_t plane = gt[i].plane();
    for (int c = 0; c < mapforge::kNumClasses; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const bool a = pred[i].data[c * plane + p] != 0, b = gt[i].data[c * plane + p] != 0;
        inter[c] += a && b;
        uni[c] += a || b;
      }
  }
  std::vector<double> out;
  for (int c = 0; c < mapforge::kNumClasses; ++c)
    out.push_back(uni[c] == 0 ? 1.0 : static_cast<double>(inter[c]) / static_cast<double>(uni[c]));
  return out;
}

// --- run bookkeeping --------------------------------------------------------

void RunManifest::write(const fs::path& file) const {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["command"] = command;
  j["code_revision"] = code_revision.empty() ? std::string(DIFFMAP_GIT_REV) : code_revision;
  j["config"] = nlohmann::ordered_json::parse(config_json);
  nlohmann::ordered_json in = nlohmann::ordered_json::object();
  for (const auto& [k, v] : inputs) in[k] = v;
  j["inputs"] = in;
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (const auto& [k, v] : outputs) out[k] = v;
  j["outputs"] = out;
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  io::write_text(file, j.dump(2) + "\n");
}

namespace {

struct TrainState {
  std::string stage;
  long step = 0;
};

void write_train_state(const fs::path& dir, const TrainState& s) {
  io::write_text(dir / "train_state.json", json{{"stage", s.stage}, {"step", s.step}}.dump(2) + "\n");
}

TrainState read_train_state(const fs::path& dir) {
  const json j = detail::parse_json(io::read_text(dir / "train_state.json"), "train_state.json");
  return {detail::require_field<std::string>(j, "stage", "train_state.json"),
          detail::require_field<long>(j, "step", "train_state.json")};
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Loss log that survives resumption: rows past the resume step are dropped.
class LossLog {
 public:
  LossLog(const fs::path& file, const std::string& header, long resume_step) : file_(file) {
    std::vector<std::string> keep;
    if (resume_step > 0 && fs::exists(file)) {
      std::ifstream in(file);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::stol(line.substr(0, line.find(','))) < resume_step) keep.push_back(line);
      }
    }
    out_.open(file, std::ios::trunc);
    out_ << header << '\n';
    for (const auto& l : keep) out_ << l << '\n';
  }
  void row(long step, const std::vector<double>& values) {
    out_ << step;
    for (double v : values) out_ << ',' << fmt17(v);
    out_ << '\n';
  }
  void flush() { out_.flush(); }

 private:
  fs::path file_;
  std::ofstream out_;
};

std::string hash_dataset(const Dataset& data) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& s : data.samples) {
    for (std::uint8_t v : s.gt.semantic.data) h = (h ^ v) * 1099511628211ULL;
    for (float v : s.observation.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      h = (h ^ bits) * 1099511628211ULL;
    }
  }
  return io::hex64(h);
}

void check_finite(const std::string& stage, long step, const std::vector<std::pair<std::string, double>>& terms) {
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) {
      std::string detail;
      for (const auto& [n, x] : terms) detail += " " + n + "=" + fmt17(x);
      throw DivergenceError(stage + ": non-finite loss at step " + std::to_string(step) + ":" + detail);
    }
  }
}

void freeze(const ag::ParamList& params) {
  for (const auto& [name, v] : params) v.node()->requires_grad = false;
}

}  // namespace

// --- VQ-VAE training --------------------------------------------------------

TrainResult train_vqvae(const Dataset& data, const PipelineConfig& config, const fs::path& out_dir, bool resume) {
  const TrainConfig& tc = config.vq_train;
  tc.validate();
  config.vq.validate();
  const auto& grid = data.samples.front().gt.grid;
  if (grid.height_px % config.vq.factor != 0 || grid.width_px % config.vq.factor != 0) {
    throw ConfigError("grid " + std::to_string(grid.height_px) + "x" + std::to_string(grid.width_px) +
                      " is not divisible by the VQ factor " + std::to_string(config.vq.factor));
  }
  fs::create_directories(out_dir);

  long start = 0;
  const bool resuming = resume && fs::exists(out_dir / "train_state.json");
  if (resuming) {
    const TrainState st = read_train_state(out_dir);
    if (st.stage != "vqvae") throw ConfigError(out_dir.string() + " holds a " + st.stage + " checkpoint");
    start = st.step;
  }
  vq::VqVae model = resuming ? vq::VqVae::load(out_dir) : vq::VqVae(config.vq, mix_seed(tc.seed, 0x7171));
  nn::AdamW opt(model.parameters(), tc.optimizer);
  if (resuming) {
    std::vector<Tensor> m, v;
    io::load_moments(out_dir / "adam.f64.bin", opt.params(), m, v);
    opt.restore(start, std::move(m), std::move(v));
  }

  std::vector<const mapforge::MapSample*> all;
  for (const auto& s : data.samples) all.push_back(&s);
  const int n = static_cast<int>(all.size());

  LossLog log(out_dir / "loss.csv", "step,lr,total,recon,vq,commit", start);
  TrainResult result;
  auto checkpoint = [&](long step) {
    model.save(out_dir);
    io::save_moments(out_dir / "adam.f64.bin", opt.first_moments(), opt.second_moments());
    write_train_state(out_dir, {"vqvae", step});
    log.flush();
  };

  for (long step = start; step < tc.steps; ++step) {
    std::vector<const mapforge::MapSample*> batch;
    for (int i : batch_indices(tc.seed, step, n, tc.batch_size)) batch.push_back(all[i]);
    const Tensor x = stack_semantic(batch);
    const auto out = model.forward(Var(x));
    const vq::VqLoss loss = vq::vqvae_loss(x, out.decoded.logits, out.z_e, out.q.codes, config.vq.beta);
    const double total = loss.total.value()[0];
    check_finite("train-vqvae", step,
                 {{"total", total}, {"recon", loss.recon.value()[0]}, {"vq", loss.vq.value()[0]},
                  {"commit", loss.commit.value()[0]}});
    opt.zero_grad();
    ag::backward(loss.total);
    const double lr = tc.lr.at(step, tc.steps);
    opt.step(lr);
    model.record_usage(out.q.indices);
    log.row(step, {lr, total, loss.recon.value()[0], loss.vq.value()[0], loss.commit.value()[0]});
    result.losses.push_back(total);
    if (step % 100 == 0 || step + 1 == tc.steps)
      spdlog::info("vqvae step {}/{} loss {:.5f} recon {:.5f}", step + 1, tc.steps, total, loss.recon.value()[0]);
    if (tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 && step + 1 < tc.steps)
      checkpoint(step + 1);
  }
  result.final_step = std::max(start, tc.steps);
  checkpoint(result.final_step);

  RunManifest run;
  run.command = "train-vqvae";
  run.config_json = config_to_json_text(config);
  run.inputs = {{"dataset", hash_dataset(data)}};
  run.outputs = {{"checkpoint", out_dir.string()}, {"params", io::hex64(io::fnv1a_file(out_dir / "vq.params.f64.bin"))}};
  run.write(out_dir / "run.json");
  return result;
}

std::vector<double> vq_reconstruction_iou(const vq::VqVae& model, const Dataset& data) {
  ag::NoGradGuard guard;
  std::vector<mapforge::Raster<std::uint8_t>> preds, gts;
  for (const auto& s : data.samples) {
    const Tensor x = stack_semantic({&s});
    const auto out = model.forward(Var(x));
    mapforge::Raster<std::uint8_t> p(s.gt.semantic.channels, s.gt.semantic.height, s.gt.semantic.width);
    const Tensor& logits = out.decoded.logits.value();
    for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] = logits[i] > 0.0 ? 1 : 0;
    preds.push_back(std::move(p));
    gts.push_back(s.gt.semantic);
  }
  return pooled_class_iou(preds, gts);
}

// --- conditional model ------------------------------------------------------

namespace {

denoiser::DenoiserConfig denoiser_config(const PipelineConfig& c) {
  denoiser::DenoiserConfig d = c.denoiser;
  d.latent_dim = c.vq.latent_dim;
  d.bev_channels = c.baseline.channels;
  return d;
}

instancing::HeadConfig head_config(const PipelineConfig& c, int feature_width) {
  instancing::HeadConfig h = c.heads;
  h.feature_width = feature_width;
  return h;
}

instancing::HeadSet make_heads(const instancing::HeadConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return instancing::HeadSet(cfg, rng);
}

}  // namespace

DiffMapModel::DiffMapModel(const PipelineConfig& config, std::shared_ptr<const vq::VqVae> vq, std::uint64_t seed)
    : vq_(std::move(vq)),
      baseline_(config.baseline, mix_seed(seed, 0xb0)),
      denoiser_(denoiser_config(config), mix_seed(seed, 0xd0)),
      heads_base_(make_heads(head_config(config, config.baseline.feature_width), mix_seed(seed, 0xe0))),
      heads_diff_(make_heads(head_config(config, vq_->config().feature_width), mix_seed(seed, 0xe1))),
      schedule_(diffcore::NoiseSchedule::linear(config.diffusion.steps, config.diffusion.beta_first,
                                                config.diffusion.beta_last)) {
  if (vq_->config().latent_dim != config.vq.latent_dim || vq_->config().factor != config.vq.factor) {
    throw ConfigError("VQ checkpoint (factor " + std::to_string(vq_->config().factor) + ", D " +
                      std::to_string(vq_->config().latent_dim) + ") does not match the configuration (factor " +
                      std::to_string(config.vq.factor) + ", D " + std::to_string(config.vq.latent_dim) + ")");
  }
}

ag::ParamList DiffMapModel::parameters() const {
  ag::ParamList out;
  for (auto& [n, v] : baseline_.parameters()) out.emplace_back("baseline." + n, v);
  for (auto& [n, v] : denoiser_.parameters()) out.emplace_back("denoiser." + n, v);
  heads_base_.collect(out, "heads_base");
  heads_diff_.collect(out, "heads_diff");
  return out;
}

ag::ParamList DiffMapModel::branch_parameters(const std::string& prefix) const {
  ag::ParamList out;
  for (auto& p : parameters())
    if (p.first.rfind(prefix, 0) == 0) out.push_back(p);
  return out;
}

void DiffMapModel::save(const fs::path& dir, const PipelineConfig& config) const {
  fs::create_directories(dir);
  vq_->save(dir / "vq");
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["kind"] = "diffmap";
  j["config"] = nlohmann::ordered_json::parse(config_to_json_text(config));
  j["baseline_config"] = j["config"]["baseline"];
  j["denoiser_config"] = j["config"]["denoiser"];
  j["latent_scale"] = latent_scale_;
  j["schedule"] = {{"T", schedule_.steps()}, {"betas", schedule_.betas()}};
  j["vq_params_hash"] = io::hex64(io::fnv1a_file(dir / "vq" / "vq.params.f64.bin"));
  io::write_text(dir / "diffmap.json", j.dump(2) + "\n");
  io::save_params(dir / "params.f64.bin", parameters());
}

std::pair<DiffMapModel, PipelineConfig> DiffMapModel::load(const fs::path& dir) {
  if (!fs::exists(dir / "diffmap.json")) throw ConfigError("not a diffusion checkpoint: " + dir.string());
  const json j = detail::parse_json(io::read_text(dir / "diffmap.json"), "diffmap.json");
  if (detail::require_field<std::string>(j, "kind", "diffmap.json") != "diffmap")
    throw FormatError("diffmap.json: kind is not diffmap");
  PipelineConfig config = config_from_json_text(detail::require_field<json>(j, "config", "diffmap.json").dump());
  auto vqm = std::make_shared<vq::VqVae>(vq::VqVae::load(dir / "vq"));
  freeze(vqm->parameters());
  const std::string expect = detail::require_field<std::string>(j, "vq_params_hash", "diffmap.json");
  if (io::hex64(io::fnv1a_file(dir / "vq" / "vq.params.f64.bin")) != expect)
    throw ConfigError("VQ checkpoint in " + (dir / "vq").string() + " does not match the diffusion checkpoint");
  DiffMapModel model(config, vqm, 0);
  io::load_params(dir / "params.f64.bin", model.parameters());
  model.latent_scale_ = detail::require_field<double>(j, "latent_scale", "diffmap.json");
  const json sched = detail::require_field<json>(j, "schedule", "diffmap.json");
  model.schedule_ = diffcore::NoiseSchedule::from_betas(
      detail::require_field<std::vector<double>>(sched, "betas", "diffmap.json.schedule"));
  return {std::move(model), std::move(config)};
}

// --- diffusion training -----------------------------------------------------

TrainResult train_diffusion(const Dataset& data, const fs::path& vq_dir, const PipelineConfig& config,
                            const fs::path& out_dir, bool resume, std::vector<DiffusionLossTerms>* terms) {
  const TrainConfig& tc = config.diff_train;
  tc.validate();
  auto vqm = std::make_shared<vq::VqVae>(vq::VqVae::load(vq_dir));
  freeze(vqm->parameters());

  PipelineConfig cfg = config;
  cfg.vq = vqm->config();
  const auto& grid = data.samples.front().gt.grid;
  const int f = cfg.vq.factor;
  if (grid.height_px % f != 0 || grid.width_px % f != 0)
    throw ConfigError("grid is not divisible by the VQ factor " + std::to_string(f));
  const int lh = grid.height_px / f, lw = grid.width_px / f;
  denoiser_config(cfg).check_latent_grid(lh, lw);
  fs::create_directories(out_dir);

  // Frozen targets: quantized latents of every gt map.
  std::vector<Tensor> z_codes;
  {
    ag::NoGradGuard guard;
    for (const auto& s : data.samples) z_codes.push_back(vqm->forward(Var(stack_semantic({&s}))).q.codes.value());
  }

  long start = 0;
  const bool resuming = resume && fs::exists(out_dir / "train_state.json");
  std::optional<DiffMapModel> holder;
  if (resuming) {
    const TrainState st = read_train_state(out_dir);
    if (st.stage != "diffusion") throw ConfigError(out_dir.string() + " holds a " + st.stage + " checkpoint");
    start = st.step;
    auto loaded = DiffMapModel::load(out_dir);
    holder.emplace(std::move(loaded.first));
  } else {
    holder.emplace(cfg, vqm, mix_seed(tc.seed, 0xd1f));
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (const Tensor& z : z_codes)
      for (double v : z.values()) sum += v, sq += v * v, ++count;
    const double mean = sum / count;
    const double sd = std::sqrt(std::max(0.0, sq / count - mean * mean));
    holder->set_latent_scale(sd > 1e-8 ? sd : 1.0);
  }
  DiffMapModel& model = *holder;
  const double scale = model.latent_scale();
  std::vector<Tensor> z0s;
  for (const Tensor& z : z_codes) z0s.push_back(z * (1.0 / scale));

  nn::AdamW opt(model.parameters(), tc.optimizer);
  if (resuming) {
    std::vector<Tensor> m, v;
    io::load_moments(out_dir / "adam.f64.bin", opt.params(), m, v);
    opt.restore(start, std::move(m), std::move(v));
  }

  std::vector<std::vector<int>> sem_labels, dir_labels;
  std::vector<std::vector<std::uint16_t>> inst;
  for (const auto& s : data.samples) {
    sem_labels.push_back(instancing::semantic_labels(s.gt));
    dir_labels.push_back(instancing::direction_labels(s.gt));
    inst.push_back(s.gt.instance.data);
  }
  std::vector<const mapforge::MapSample*> all;
  for (const auto& s : data.samples) all.push_back(&s);
  const int n = static_cast<int>(all.size());
  const auto& sched = model.schedule();
  const int T = sched.steps();
  const LossWeights& w = tc.weights;

  LossLog log(out_dir / "loss.csv", "step,lr,total,diff,ce,disc,dir", start);
  TrainResult result;
  auto checkpoint = [&](long step) {
    model.save(out_dir, cfg);
    io::save_moments(out_dir / "adam.f64.bin", opt.first_moments(), opt.second_moments());
    write_train_state(out_dir, {"diffusion", step});
    log.flush();
  };

  for (long step = start; step < tc.steps; ++step) {
    const std::vector<int> idx = batch_indices(tc.seed, step, n, tc.batch_size);
    const int b = static_cast<int>(idx.size());
    Rng rng(mix_seed(tc.seed, 0x7e, static_cast<std::uint64_t>(step)));
    std::vector<const mapforge::MapSample*> batch;
    std::vector<int> ts;
    std::vector<int> labels, dlabels;
    std::vector<std::vector<std::uint16_t>> ids;
    const Shape zshape = {b, cfg.vq.latent_dim, lh, lw};
    Tensor z0(zshape), eps = Tensor::randn(zshape, rng), zt(zshape);
    const std::size_t per = z0s.front().numel();
    for (int i = 0; i < b; ++i) {
      batch.push_back(all[idx[i]]);
      ts.push_back(rng.uniform_int(1, T));
      const double a = sched.sqrt_alpha_bar(ts.back()), s = sched.sqrt_one_minus_alpha_bar(ts.back());
      for (std::size_t k = 0; k < per; ++k) {
        z0[i * per + k] = z0s[idx[i]][k];
        zt[i * per + k] = a * z0s[idx[i]][k] + s * eps[i * per + k];
      }
      labels.insert(labels.end(), sem_labels[idx[i]].begin(), sem_labels[idx[i]].end());
      dlabels.insert(dlabels.end(), dir_labels[idx[i]].begin(), dir_labels[idx[i]].end());
      ids.push_back(inst[idx[i]]);
    }

    // Direction logits are only supervised on instance pixels, so the
    // direction head runs on those alone.
    std::vector<std::size_t> dir_pixels;
    std::vector<int> dir_targets;
    for (std::size_t q = 0; q < dlabels.size(); ++q)
      if (dlabels[q] >= 0) dir_pixels.push_back(q), dir_targets.push_back(dlabels[q]);

    const auto base = model.baseline().forward_pooled(Var(stack_observation(batch)), f);
    const auto out = model.denoiser().forward(Var(zt), ts, base.bev, T);
    const Var l_diff = diffcore::diffusion_loss(out.z_hat, z0, out.eps_hat, eps);
    // The heads read decoded features of a detached z estimate; letting their
    // losses reach the z-branch through the decoder collapses it.
    const auto decoded = model.vq().decode(ag::scale(ag::detach(out.z_hat), scale));
    const auto& heads_d = model.diffmap_heads();
    const auto& heads_b = model.baseline_heads();
    const auto hd = heads_d.dense(decoded.features);
    const auto hb = heads_b.dense(base.features);
    const Var ce = ag::add(instancing::cross_entropy_loss(hd.sem_logits, labels),
                           instancing::cross_entropy_loss(hb.sem_logits, labels));
    const Var disc = ag::add(instancing::discriminative_loss(hd.embedding, ids, cfg.disc),
                             instancing::discriminative_loss(hb.embedding, ids, cfg.disc));
    const Var dir =
        ag::add(instancing::direction_loss(heads_d.direction_at(decoded.features, dir_pixels), dir_targets),
                instancing::direction_loss(heads_b.direction_at(base.features, dir_pixels), dir_targets));
    const Var total = ag::weighted_sum({l_diff, ce, disc, dir}, {w.diff, w.ce, w.disc, w.dir});

    DiffusionLossTerms t{total.value()[0], l_diff.value()[0], ce.value()[0], disc.value()[0], dir.value()[0]};
    check_finite("train-diff", step,
                 {{"total", t.total}, {"diff", t.diff}, {"ce", t.ce}, {"disc", t.disc}, {"dir", t.dir}});
    opt.zero_grad();
    ag::backward(total);
    const double lr = tc.lr.at(step, tc.steps);
    opt.step(lr);
    log.row(step, {lr, t.total, t.diff, t.ce, t.disc, t.dir});
    result.losses.push_back(t.total);
    if (terms) terms->push_back(t);
    if (step % 100 == 0 || step + 1 == tc.steps)
      spdlog::info("diffusion step {}/{} loss {:.5f} diff {:.5f} ce {:.4f} disc {:.4f} dir {:.4f}", step + 1,
                   tc.steps, t.total, t.diff, t.ce, t.disc, t.dir);
    if (tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 && step + 1 < tc.steps)
      checkpoint(step + 1);
  }
  result.final_step = std::max(start, tc.steps);
  checkpoint(result.final_step);

  RunManifest run;
  run.command = "train-diff";
  run.config_json = config_to_json_text(cfg);
  run.inputs = {{"dataset", hash_dataset(data)},
                {"vqvae", io::hex64(io::fnv1a_file(vq_dir / "vq.params.f64.bin"))}};
  run.outputs = {{"checkpoint", out_dir.string()}, {"params", io::hex64(io::fnv1a_file(out_dir / "params.f64.bin"))}};
  run.write(out_dir / "run.json");
  return result;
}

}  // namespace diffmap::pipeline
