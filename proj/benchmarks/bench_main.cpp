#include <benchmark/benchmark.h>

#include "diffmap/bevbase.hpp"
#include "diffmap/denoiser.hpp"
#include "diffmap/diffcore.hpp"
#include "diffmap/evalkit.hpp"
#include "diffmap/instancing.hpp"
#include "diffmap/rng.hpp"
#include "diffmap/vq.hpp"

using namespace diffmap;

static void BM_Conv3x3(benchmark::State& state) {
  Rng rng(1);
  const int c = static_cast<int>(state.range(0));
  nn::Conv2d conv(c, c, 3, 1, rng);
  ag::Var x = ag::Var::parameter(Tensor::randn({4, c, 128, 64}, rng));
  for (auto _ : state) {
    ag::Var y = conv(x);
    ag::backward(ag::sum(y));
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * 4L * 128 * 64 * c * c * 9 * 3);
}
BENCHMARK(BM_Conv3x3)->Arg(8)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_BaselineTrainStep(benchmark::State& state) {
  Rng rng(2);
  bevbase::BaselineEncoder enc({}, 3);
  ag::Var obs(Tensor::uniform({4, 3, 128, 64}, rng, 0.0, 1.0));
  for (auto _ : state) {
    auto out = enc.forward_pooled(obs, 8);
    ag::backward(ag::add(ag::mean(out.bev), ag::mean(out.features)));
  }
}
BENCHMARK(BM_BaselineTrainStep)->Unit(benchmark::kMillisecond);

static void BM_VqDecodeTrainStep(benchmark::State& state) {
  Rng rng(3);
  vq::VqVae model({}, 4);
  for (auto& [n, v] : model.parameters()) v.node()->requires_grad = false;
  ag::Var z = ag::Var::parameter(Tensor::randn({4, 8, 16, 8}, rng));
  for (auto _ : state) {
    auto dec = model.decode(z);
    ag::backward(ag::mean(dec.features));
  }
}
BENCHMARK(BM_VqDecodeTrainStep)->Unit(benchmark::kMillisecond);

static void BM_VqTrainStep(benchmark::State& state) {
  Rng rng(3);
  vq::VqVae model({}, 4);
  Tensor x({4, 3, 128, 64});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.bernoulli(0.05);
  for (auto _ : state) {
    auto out = model.forward(ag::Var(x));
    auto loss = vq::vqvae_loss(x, out.decoded.logits, out.z_e, out.q.codes, 0.25);
    ag::backward(loss.total);
  }
}
BENCHMARK(BM_VqTrainStep)->Unit(benchmark::kMillisecond);

static void BM_DenoiserTrainStep(benchmark::State& state) {
  Rng rng(4);
  denoiser::Denoiser net({}, 5);
  ag::Var z(Tensor::randn({4, 8, 16, 8}, rng));
  ag::Var bev(Tensor::randn({4, 64, 16, 8}, rng));
  for (auto _ : state) {
    auto out = net.forward(z, {1, 10, 100, 1000}, bev, 1000);
    ag::backward(ag::add(ag::mean(out.eps_hat), ag::mean(out.z_hat)));
  }
}
BENCHMARK(BM_DenoiserTrainStep)->Unit(benchmark::kMillisecond);

static void BM_HeadsTrainStep(benchmark::State& state) {
  Rng rng(5);
  instancing::HeadSet heads({16, 32, 8}, rng);
  ag::Var f = ag::Var::parameter(Tensor::randn({4, 16, 128, 64}, rng));
  std::vector<int> labels(4 * 128 * 64, 0);
  std::vector<std::size_t> pixels;
  std::vector<int> bins;
  for (std::size_t q = 0; q < labels.size(); q += 8) pixels.push_back(q), bins.push_back(q % 36);
  for (auto _ : state) {
    auto h = heads.dense(f);
    ag::backward(ag::add(instancing::cross_entropy_loss(h.sem_logits, labels),
                         instancing::direction_loss(heads.direction_at(f, pixels), bins)));
  }
}
BENCHMARK(BM_HeadsTrainStep)->Unit(benchmark::kMillisecond);

static void BM_Quantize(benchmark::State& state) {
  Rng rng(6);
  Tensor z = Tensor::randn({4, 8, 16, 8}, rng);
  Tensor cb = Tensor::uniform({512, 8}, rng, -1.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(vq::nearest_codes(z, cb));
}
BENCHMARK(BM_Quantize);

static void BM_Chamfer(benchmark::State& state) {
  Rng rng(7);
  std::vector<mapforge::Point> a, b;
  for (int i = 0; i < state.range(0); ++i) {
    a.push_back({rng.uniform(0, 20), rng.uniform(-5, 5)});
    b.push_back({rng.uniform(0, 20), rng.uniform(-5, 5)});
  }
  for (auto _ : state) benchmark::DoNotOptimize(evalkit::chamfer(a, b));
}
BENCHMARK(BM_Chamfer)->Arg(64)->Arg(256);

static void BM_SamplerStep(benchmark::State& state) {
  Rng rng(8);
  const auto sched = diffcore::NoiseSchedule::linear(1000, 1e-4, 0.02);
  Tensor z = Tensor::randn({1, 8, 16, 8}, rng), e = Tensor::randn({1, 8, 16, 8}, rng);
  Tensor noise({1, 8, 16, 8});
  for (auto _ : state)
    benchmark::DoNotOptimize(diffcore::sampler_step(z, z, e, 500, 450, {}, sched, noise));
}
BENCHMARK(BM_SamplerStep);
BENCHMARK_MAIN();
