#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>

#include "diffmap/checkpoint.hpp"
#include "diffmap/errors.hpp"
#include "diffmap/pipeline.hpp"
#include "diffmap/rng.hpp"
#include "test_util.hpp"

using namespace diffmap;
using namespace diffmap::pipeline;
namespace fs = std::filesystem;

namespace {

// A 16-sample toy dataset and a briefly trained VQ-VAE, cached on disk per
// test binary build since every test runs in its own process.
struct Toy {
  fs::path root, data, vq;
};

const Toy& toy() {
  static const Toy t = [] {
    const std::string stamp = std::to_string(std::hash<std::string>{}(__DATE__ " " __TIME__));
    Toy t;
    t.root = fs::temp_directory_path() / ("diffmap_pipeline_toy_" + stamp);
    t.data = t.root / "data";
    t.vq = t.root / "vq";
    if (!fs::exists(t.root / "ready")) {
      fs::remove_all(t.root);
      mapforge::generate_dataset(t.data, 16, 7, mapforge::SceneConfig::preset("short"), "short");
      PipelineConfig c;
      c.vq_train.steps = 150;
      train_vqvae(load_dataset(t.data), c, t.vq);
      std::ofstream(t.root / "ready") << "ok\n";
    }
    return t;
  }();
  return t;
}

PipelineConfig quick_config() {
  PipelineConfig c;
  c.sample.steps = 5;
  c.sample.samples = 1;
  return c;
}

DiffMapModel toy_model(const PipelineConfig& c, std::uint64_t seed = 3) {
  return DiffMapModel(c, std::make_shared<vq::VqVae>(vq::VqVae::load(toy().vq)), seed);
}

std::string file_hash(const fs::path& p) { return io::hex64(io::fnv1a_file(p)); }

double mean(const std::vector<double>& v, std::size_t from, std::size_t to) {
  return std::accumulate(v.begin() + from, v.begin() + to, 0.0) / static_cast<double>(to - from);
}

mapforge::Raster<std::uint8_t> binarize(const Tensor& probs) {
  mapforge::Raster<std::uint8_t> r(probs.dim(1), probs.dim(2), probs.dim(3));
  for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = probs[i] > 0.5;
  return r;
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughJson) {
  const PipelineConfig c;
  const std::string text = config_to_json_text(c);
  EXPECT_EQ(config_to_json_text(config_from_json_text(text)), text);
  EXPECT_EQ(c.vq_train.steps, 2000);
  EXPECT_EQ(c.diff_train.steps, 5000);
  EXPECT_EQ(c.sample.steps, 20);
  EXPECT_EQ(c.sample.samples, 3);
  EXPECT_EQ(c.vq.factor, 8);
}

TEST(Config, OverridesAndSeedPropagation) {
  const auto c = config_from_json_text(R"({"seed": 42, "vq": {"factor": 4}, "sample": {"steps": 10}})");
  EXPECT_EQ(c.vq.factor, 4);
  EXPECT_EQ(c.sample.steps, 10);
  EXPECT_EQ(c.vq_train.seed, 42u);
  EXPECT_EQ(c.diff_train.seed, 42u);
  EXPECT_EQ(c.sample.seed, 42u);
  EXPECT_EQ(c.vq.codebook_size, PipelineConfig().vq.codebook_size);
}

TEST(Config, RejectsBadInput) {
  const auto message = [](const std::string& text) {
    try {
      config_from_json_text(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message(R"({"bogus": 1})").find("bogus"), std::string::npos);
  EXPECT_NE(message(R"({"vq": {"factr": 8}})").find("factr"), std::string::npos);
  EXPECT_NE(message(R"({"diff_train": {"lr": {"kind": "cosine"}}})").find("lr.kind"), std::string::npos);
  EXPECT_NE(message(R"({"vq": {"factor": "eight"}})").find("vq.factor"), std::string::npos);
  EXPECT_NE(message(R"({"vq": {"factor": 5}})"), "no error");
  EXPECT_NE(message(R"({"denoiser": {"heads": 3}})"), "no error");
  EXPECT_NE(message(R"({"sample": {"steps": 2000}})"), "no error");
  EXPECT_NE(message("{not json"), "no error");
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, SeedPrecedence) {
  ::unsetenv("DIFFMAP_SEED");
  EXPECT_EQ(resolve_seed(std::nullopt, 9), 9u);
  ::setenv("DIFFMAP_SEED", "123", 1);
  EXPECT_EQ(resolve_seed(std::nullopt, 9), 123u);
  EXPECT_EQ(resolve_seed(77, 9), 77u);
  ::setenv("DIFFMAP_SEED", "abc", 1);
  EXPECT_THROW(resolve_seed(std::nullopt, 9), ConfigError);
  ::unsetenv("DIFFMAP_SEED");
}

TEST(Schedules, LearningRates) {
  const LrSchedule constant{"constant", 0.01};
  EXPECT_EQ(constant.at(0, 100), 0.01);
  EXPECT_EQ(constant.at(99, 100), 0.01);
  const LrSchedule expo{"exponential", 2e-3, 0.1};
  EXPECT_DOUBLE_EQ(expo.at(0, 100), 2e-3);
  EXPECT_NEAR(expo.at(50, 100), 2e-3 * std::sqrt(0.1), 1e-15);
  EXPECT_NEAR(expo.at(100, 100), 2e-4, 1e-15);
  const LrSchedule multi{"multistep", 1e-3, 0.1, {0.7, 0.9}, 0.5};
  EXPECT_EQ(multi.at(69, 100), 1e-3);
  EXPECT_EQ(multi.at(70, 100), 5e-4);
  EXPECT_EQ(multi.at(95, 100), 2.5e-4);
  LrSchedule bad = constant;
  bad.kind = "cosine";
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Batches, PureFunctionOfSeedAndStep) {
  for (long step = 0; step < 50; ++step) {
    const auto a = batch_indices(11, step, 16, 4);
    EXPECT_EQ(a, batch_indices(11, step, 16, 4));
    ASSERT_EQ(a.size(), 4u);
    EXPECT_EQ(std::set<int>(a.begin(), a.end()).size(), 4u);
    for (int i : a) {
      EXPECT_GE(i, 0);
      EXPECT_LT(i, 16);
    }
  }
  EXPECT_NE(batch_indices(11, 0, 16, 4), batch_indices(12, 0, 16, 4));
  EXPECT_EQ(batch_indices(1, 0, 2, 5).size(), 5u);
}

TEST(Data, LoadErrors) {
  EXPECT_THROW(load_dataset("/nonexistent/dir"), DataError);
  const fs::path empty = testutil::scratch_dir("empty_data");
  EXPECT_THROW(load_dataset(empty), DataError);
  const Dataset d = load_dataset(toy().data, 3);
  EXPECT_EQ(d.samples.size(), 3u);
  EXPECT_EQ(stack_semantic({&d.samples[0], &d.samples[1]}).shape(), (Shape{2, 3, 128, 64}));
}

TEST(TrainVq, ResumeReproducesUninterruptedRun) {
  const Dataset data = load_dataset(toy().data);
  PipelineConfig c;
  c.vq_train.lr = {"constant", 1e-3};
  c.vq_train.steps = 8;
  const fs::path dir = testutil::scratch_dir("vq_resume");
  const TrainResult full = train_vqvae(data, c, dir / "full");
  c.vq_train.steps = 4;
  const TrainResult first = train_vqvae(data, c, dir / "split");
  c.vq_train.steps = 8;
  const TrainResult rest = train_vqvae(data, c, dir / "split", true);
  ASSERT_EQ(rest.losses.size(), 4u);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(first.losses[i], full.losses[i]);
    EXPECT_EQ(rest.losses[i], full.losses[4 + i]);
  }
  EXPECT_EQ(file_hash(dir / "split" / "vq.params.f64.bin"), file_hash(dir / "full" / "vq.params.f64.bin"));
  for (double l : full.losses) EXPECT_TRUE(std::isfinite(l));
}

TEST(TrainDiffusion, FirstStepsAreDeterministicAndResumable) {
  const Dataset data = load_dataset(toy().data);
  PipelineConfig c;
  c.diff_train.lr = {"constant", 1e-3};
  c.diff_train.steps = 6;
  const fs::path dir = testutil::scratch_dir("diff_resume");
  const TrainResult a = train_diffusion(data, toy().vq, c, dir / "a");
  const TrainResult b = train_diffusion(data, toy().vq, c, dir / "b");
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(file_hash(dir / "a" / "params.f64.bin"), file_hash(dir / "b" / "params.f64.bin"));

  c.diff_train.steps = 3;
  train_diffusion(data, toy().vq, c, dir / "split");
  c.diff_train.steps = 6;
  const TrainResult rest = train_diffusion(data, toy().vq, c, dir / "split", true);
  ASSERT_EQ(rest.losses.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(rest.losses[i], a.losses[3 + i]);
  EXPECT_EQ(file_hash(dir / "split" / "params.f64.bin"), file_hash(dir / "a" / "params.f64.bin"));

  const auto [model, cfg] = DiffMapModel::load(dir / "a");
  EXPECT_EQ(cfg.diff_train.steps, 6);
  EXPECT_GT(model.latent_scale(), 0.0);
}

TEST(TrainDiffusion, IncompatibleFactorIsConfigError) {
  const Dataset data = load_dataset(toy().data, 2);
  PipelineConfig c;
  c.diff_train.steps = 1;
  c.denoiser.depth = 4;  // a 16x8 latent grid is not divisible by 16
  EXPECT_THROW(train_diffusion(data, toy().vq, c, testutil::scratch_dir("diff_bad")), ConfigError);
}

TEST(TrainDiffusion, BranchMasksHoldOnRealBatches) {
  const Dataset data = load_dataset(toy().data, 2);
  PipelineConfig c;
  const DiffMapModel model = toy_model(c);
  const Tensor obs = stack_observation({&data.samples[0]});
  Tensor z0;
  {
    ag::NoGradGuard guard;
    z0 = model.vq().forward(ag::Var(stack_semantic({&data.samples[0]}))).q.codes.value();
  }
  const auto base = model.baseline().forward_pooled(ag::Var(obs), model.vq().config().factor);
  const auto out = model.denoiser().forward(ag::Var(z0), {500}, base.bev, 1000);
  const auto params = model.parameters();
  ag::zero_grads(params);
  ag::backward(ag::mse(out.z_hat, ag::Var(z0)));
  double eps_branch = 0.0, z_branch = 0.0;
  for (const auto& [name, p] : params) {
    double s = 0.0;
    for (double g : p.grad().values()) s += g * g;
    if (name.rfind("denoiser.eps_decoder.", 0) == 0) eps_branch += s;
    if (name.rfind("denoiser.z_decoder.", 0) == 0) z_branch += s;
  }
  EXPECT_EQ(eps_branch, 0.0);
  EXPECT_GT(z_branch, 0.0);
}

TEST(TrainDiffusion, LossHalvesOverFiveHundredSteps) {
  const Dataset data = load_dataset(toy().data);
  PipelineConfig c;
  c.diff_train.steps = 500;
  std::vector<DiffusionLossTerms> terms;
  const TrainResult r = train_diffusion(data, toy().vq, c, testutil::scratch_dir("diff_500"), false, &terms);
  ASSERT_EQ(r.losses.size(), 500u);
  for (double l : r.losses) ASSERT_TRUE(std::isfinite(l));
  const double start = mean(r.losses, 0, 10), end = mean(r.losses, 490, 500);
  EXPECT_LE(end, 0.5 * start) << "start " << start << " end " << end;
  EXPECT_EQ(terms.size(), 500u);
}

TEST(Inference, SingleChainIsDeterministic) {
  const Dataset data = load_dataset(toy().data, 1);
  PipelineConfig c = quick_config();
  c.sample.seed = 21;
  const DiffMapModel model = toy_model(c);
  const auto& s = data.samples[0];
  const Prediction a = sample_map(model, s.observation, s.gt.grid, c);
  const Prediction b = sample_map(model, s.observation, s.gt.grid, c);
  EXPECT_EQ(a.probs.storage(), b.probs.storage());
  EXPECT_EQ(a.map, b.map);
  EXPECT_EQ(a.lines, b.lines);
  EXPECT_EQ(a.probs.shape(), (Shape{1, 3, 128, 64}));
  c.sample.seed = 22;
  EXPECT_NE(sample_map(model, s.observation, s.gt.grid, c).probs.storage(), a.probs.storage());
}

TEST(Inference, ThreeChainsAverageSingleChainRuns) {
  const Dataset data = load_dataset(toy().data, 1);
  PipelineConfig c = quick_config();
  c.sample.samples = 3;
  c.sample.seed = 8;
  const DiffMapModel model = toy_model(c);
  const auto& s = data.samples[0];
  const Prediction p3 = sample_map(model, s.observation, s.gt.grid, c);
  ASSERT_EQ(p3.chains.size(), 3u);

  const Tensor obs = stack_observation({&s});
  ag::NoGradGuard guard;
  const int f = model.vq().config().factor;
  const auto base = model.baseline().forward_pooled(ag::Var(obs), f);
  const ag::Var cond = model.denoiser().projector()(base.bev, 128 / f, 64 / f);
  const Predictor predict = [&](const Tensor& z, int t) {
    const auto out = model.denoiser().forward_projected(ag::Var(z), {t}, cond, model.schedule().steps());
    return std::make_pair(out.eps_hat.value(), out.z_hat.value());
  };
  std::vector<ChainDecode> chains;
  Tensor mean_probs({1, 3, 128, 64});
  for (int k = 0; k < 3; ++k) {
    const Tensor z = run_chain(predict, {1, 8, 128 / f, 64 / f}, c.sample, model.schedule(), mix_seed(8, k));
    chains.push_back(decode_latent(model, z, c));
    EXPECT_EQ(chains.back().probs.storage(), p3.chains[k].probs.storage());
  }
  for (const auto& ch : chains) mean_probs += ch.probs;
  mean_probs *= 1.0 / 3.0;
  for (std::size_t i = 0; i < mean_probs.numel(); ++i) EXPECT_NEAR(p3.probs[i], mean_probs[i], 1e-15);
  const Prediction again = assemble_prediction(model, chains, s.gt.grid, c);
  EXPECT_EQ(again.map, p3.map);
  EXPECT_EQ(again.lines, p3.lines);
}

TEST(Inference, OracleChainRecoversTheEncodedMap) {
  const Dataset data = load_dataset(toy().data, 1);
  PipelineConfig c = quick_config();
  const DiffMapModel model = toy_model(c);
  const auto& sched = model.schedule();
  c.sample.steps = sched.steps();
  Tensor z0;
  {
    ag::NoGradGuard guard;
    z0 = model.vq().forward(ag::Var(stack_semantic({&data.samples[0]}))).q.codes.value();
  }
  const Predictor oracle = [&](const Tensor& z, int t) {
    Tensor eps = z;
    for (std::size_t i = 0; i < eps.numel(); ++i)
      eps[i] = (z[i] - sched.sqrt_alpha_bar(t) * z0[i]) / sched.sqrt_one_minus_alpha_bar(t);
    return std::make_pair(eps, z0);
  };
  const Tensor z = run_chain(oracle, z0.shape(), c.sample, sched, 4);
  double err = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) err = std::max(err, std::abs(z[i] - z0[i]));
  EXPECT_LT(err, 1e-6);
  const ChainDecode decoded = decode_latent(model, z, c);
  const ChainDecode direct = decode_latent(model, z0, c);
  EXPECT_EQ(decoded.latent.storage(), z0.storage());
  EXPECT_EQ(binarize(decoded.probs), binarize(direct.probs));
}

TEST(Inference, ObservationShapeIsChecked) {
  PipelineConfig c = quick_config();
  const DiffMapModel model = toy_model(c);
  const auto grid = mapforge::GridSpec::preset("short");
  EXPECT_THROW(sample_map(model, mapforge::Raster<float>(3, 64, 64), grid, c), ContractError);
}

TEST(Evaluate, PredictionEqualToGtIsPerfect) {
  const fs::path out = testutil::scratch_dir("eval_perfect") / "report.json";
  const evalkit::Report rep = evaluate(toy().data, toy().data, {0.0, 6.0, 12.0, 19.2}, out);
  EXPECT_TRUE(fs::exists(out));
  EXPECT_EQ(rep.samples, 16);
  int defined = 0;
  for (const auto& row : rep.cells)
    for (const auto& cell : row) {
      if (!cell.defined()) continue;
      ++defined;
      EXPECT_EQ(*cell.iou, 1.0);
      EXPECT_EQ(*cell.ap, 1.0);
      if (cell.cd) EXPECT_EQ(*cell.cd, 0.0);
    }
  EXPECT_GE(defined, 6);
}

TEST(Evaluate, MissingPredictionsListEveryId) {
  const fs::path empty = testutil::scratch_dir("eval_empty");
  try {
    evaluate(empty, toy().data, {}, empty / "r.json");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    for (const auto& id : mapforge::read_dataset_index(toy().data).sample_ids)
      EXPECT_NE(msg.find(id), std::string::npos) << id;
  }
}

TEST(Evaluate, DefaultIntervalsSplitTheGridInThree) {
  const auto grid = mapforge::GridSpec::preset("short");
  const auto iv = resolve_intervals({}, grid);
  ASSERT_EQ(iv.size(), 3u);
  EXPECT_EQ(iv.front().lo, grid.x_min);
  EXPECT_NEAR(iv.back().hi, grid.x_max, 1e-12);
}

TEST(Render, EmptyGtPanelIsBackground) {
  const mapforge::Raster<std::uint8_t> empty(3, 16, 8);
  const Image img = render_comparison(nullptr, nullptr, nullptr, &empty);
  const LegendProbe swatch = legend_swatch(img, 0);
  // The gt panel is the last of four; sample its centre and corners.
  const int pw = 8 * 2, ph = 16 * 2, gap = 4;
  const int x0 = gap + 3 * (pw + gap);
  for (int y = gap; y < gap + ph; ++y)
    for (int x = x0; x < x0 + pw; ++x) ASSERT_EQ(img.pixel(x, y), background_color());
  EXPECT_LT(gap + ph, swatch.y);
}

TEST(Render, LegendMatchesClassOrderAndOutputIsDeterministic) {
  const Dataset data = load_dataset(toy().data, 1);
  const auto& s = data.samples[0];
  const Image a = render_comparison(&s.observation, &s.gt.semantic, &s.gt.semantic, &s.gt.semantic);
  const Image b = render_comparison(&s.observation, &s.gt.semantic, &s.gt.semantic, &s.gt.semantic);
  EXPECT_EQ(a.rgb, b.rgb);
  for (int k = 0; k < mapforge::kNumClasses; ++k) {
    const LegendProbe p = legend_swatch(a, k);
    EXPECT_EQ(a.pixel(p.x, p.y), class_color(k));
  }
  const fs::path dir = testutil::scratch_dir("render");
  write_png(a, dir / "a.png");
  write_png(b, dir / "b.png");
  EXPECT_EQ(file_hash(dir / "a.png"), file_hash(dir / "b.png"));
  std::ifstream in(dir / "a.png", std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic + 1, 3), "PNG");
}
