#include "diffmap/bevbase.hpp"

#include "diffmap/errors.hpp"
#include "diffmap/rng.hpp"

namespace diffmap::bevbase {

void BaselineConfig::validate() const {
  if (channels < 1 || feature_width < 1) throw ConfigError("baseline channels and feature width must be >= 1");
  if (in_channels < 1 || depth < 0 || hidden < 1 || stem < 1) throw ConfigError("invalid baseline encoder shape");
}

BaselineEncoder::BaselineEncoder(const BaselineConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(mix_seed(seed, 0xbe7));
  stem_ = nn::Conv2d(config_.in_channels, config_.stem, 3, 1, rng);
  int in = config_.stem;
  for (int i = 0; i < config_.depth; ++i) {
    down_.emplace_back(in, config_.hidden, 3, 2, rng);
    in = config_.hidden;
  }
  context_ = nn::Conv2d(in, in, 3, 1, rng);
  const int fused = config_.stem + in;
  bev_out_ = nn::Conv2d(fused, config_.channels, 1, 1, rng);
  feature_out_ = nn::Conv2d(fused, config_.feature_width, 1, 1, rng);
}

Var BaselineEncoder::fused_features(const Var& observation) const {
  if (observation.value().rank() != 4 || observation.dim(1) != config_.in_channels) {
    throw ContractError("baseline_forward: expected [N," + std::to_string(config_.in_channels) + ",H,W], got " +
                        shape_str(observation.shape()));
  }
  const int scale = 1 << config_.depth;
  if (observation.dim(2) % scale != 0 || observation.dim(3) % scale != 0) {
    throw ContractError("baseline_forward: H and W must be divisible by " + std::to_string(scale));
  }
  if (!observation.value().all_finite()) throw ContractError("baseline_forward: observation is not finite");
  Var stem = ag::relu(stem_(observation));
  Var h = stem;
  for (const auto& conv : down_) h = ag::relu(conv(h));
  h = ag::relu(context_(h));
  if (scale > 1) h = ag::upsample_nearest(h, scale);
  return ag::concat_channels({stem, h});
}

BaselineOutput BaselineEncoder::forward(const Var& observation) const {
  Var fused = fused_features(observation);
  return {bev_out_(fused), feature_out_(fused)};
}

BaselineOutput BaselineEncoder::forward_pooled(const Var& observation, int factor) const {
  Var fused = fused_features(observation);
  return {bev_out_(ag::avg_pool(fused, factor)), feature_out_(fused)};
}

ag::ParamList BaselineEncoder::parameters() const {
  ag::ParamList p;
  stem_.collect(p, "stem");
  for (std::size_t i = 0; i < down_.size(); ++i) down_[i].collect(p, "down" + std::to_string(i));
  context_.collect(p, "context");
  bev_out_.collect(p, "bev_out");
  feature_out_.collect(p, "feature_out");
  return p;
}

}  // namespace diffmap::bevbase
