#include <gtest/gtest.h>

#include "diffmap/bevbase.hpp"
#include "diffmap/errors.hpp"
#include "diffmap/rng.hpp"
#include "test_util.hpp"

using namespace diffmap;
using ag::Var;

namespace {

Tensor observation(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform({1, 3, h, w}, rng, 0.0, 1.0);
}

}  // namespace

TEST(BevBase, OutputShapes) {
  bevbase::BaselineEncoder enc({}, 1);
  const auto out = enc.forward(Var(observation(128, 64, 2)));
  EXPECT_EQ(out.bev.shape(), (Shape{1, 64, 128, 64}));
  EXPECT_EQ(out.features.shape(), (Shape{1, 16, 128, 64}));
  EXPECT_TRUE(out.bev.value().all_finite());
}

TEST(BevBase, DeterministicForward) {
  bevbase::BaselineEncoder a({}, 3), b({}, 3);
  const Tensor x = observation(32, 32, 4);
  const auto oa = a.forward(Var(x)), ob = b.forward(Var(x)), oa2 = a.forward(Var(x));
  EXPECT_EQ(oa.bev.value().storage(), ob.bev.value().storage());
  EXPECT_EQ(oa.bev.value().storage(), oa2.bev.value().storage());
  EXPECT_EQ(oa.features.value().storage(), oa2.features.value().storage());
}

TEST(BevBase, PooledForwardMatchesPoolingTheFullGrid) {
  bevbase::BaselineEncoder enc({}, 5);
  const Tensor x = observation(64, 32, 6);
  const Tensor full = ag::avg_pool(enc.forward(Var(x)).bev, 8).value();
  const auto pooled = enc.forward_pooled(Var(x), 8);
  ASSERT_EQ(pooled.bev.shape(), full.shape());
  for (std::size_t i = 0; i < full.numel(); ++i) EXPECT_NEAR(pooled.bev.value()[i], full[i], 1e-12);
  EXPECT_EQ(pooled.features.value().storage(), enc.forward(Var(x)).features.value().storage());
}

TEST(BevBase, ShapeMismatchIsContractError) {
  bevbase::BaselineEncoder enc({}, 1);
  Rng rng(1);
  EXPECT_THROW(enc.forward(Var(Tensor::uniform({1, 2, 16, 16}, rng, 0, 1))), ContractError);
  EXPECT_THROW(enc.forward(Var(Tensor::uniform({1, 3, 18, 16}, rng, 0, 1))), ContractError);
  Tensor bad = observation(16, 16, 2);
  bad[7] = std::nan("");
  EXPECT_THROW(enc.forward(Var(bad)), ContractError);
  bevbase::BaselineConfig cfg;
  cfg.channels = 0;
  EXPECT_THROW(bevbase::BaselineEncoder(cfg, 1), ConfigError);
}

TEST(BevBase, PerturbingAParameterChangesTheOutput) {
  bevbase::BaselineEncoder enc({}, 7);
  const Tensor x = observation(16, 16, 8);
  const Tensor before = enc.forward(Var(x)).bev.value();
  auto params = enc.parameters();
  params.front().second.node()->value[0] += 1e-3;
  const Tensor after = enc.forward(Var(x)).bev.value();
  EXPECT_NE(before.storage(), after.storage());
}

TEST(BevBase, FiniteDifferenceGradientsOnCrop) {
  bevbase::BaselineEncoder enc({}, 9);
  const Tensor x = observation(16, 16, 10);
  Rng rng(11);
  const Tensor wb = Tensor::randn({1, 64, 16, 16}, rng), wf = Tensor::randn({1, 16, 16, 16}, rng);
  const auto loss = [&] {
    const auto out = enc.forward(Var(x));
    return ag::add(ag::sum(ag::mul(out.bev, Var(wb))), ag::sum(ag::mul(out.features, Var(wf))));
  };
  // Gradients under 1e-3 are compared in absolute terms.
  const auto r = testutil::check_gradients(loss, enc.parameters(), 1e-6, 1e-3);
  EXPECT_LT(r.max_rel, 1e-3) << r.worst;
  EXPECT_EQ(r.checked, ag::param_count(enc.parameters()));
}
