#pragma once

#include <cstdint>

#include "diffmap/nn.hpp"

namespace diffmap::bevbase {

using ag::Var;

struct BaselineConfig {
  int in_channels = 3;
  int channels = 64;      // C of the BEV feature grid
  int depth = 2;          // strided stages
  int hidden = 32;        // width of the strided stages
  int stem = 16;          // full-resolution stem width
  int feature_width = 16; // C_feat of the feature map consumed by instance heads

  void validate() const;
};

struct BaselineOutput {
  Var bev;       // [N, C, H, W]
  Var features;  // [N, C_feat, H, W]
};

// Toy BEV encoder: full-resolution stem, strided context stages, nearest
// upsampling back to the grid and fusion with the stem.
class BaselineEncoder {
 public:
  BaselineEncoder(const BaselineConfig& config, std::uint64_t seed);

  const BaselineConfig& config() const { return config_; }
  BaselineOutput forward(const Var& observation) const;
  // Same as forward() with bev average-pooled by `factor`; the pooling is
  // applied before the pointwise output conv, which it commutes with.
  BaselineOutput forward_pooled(const Var& observation, int factor) const;
  ag::ParamList parameters() const;

 private:
  Var fused_features(const Var& observation) const;
  BaselineConfig config_;
  nn::Conv2d stem_;
  std::vector<nn::Conv2d> down_;
  nn::Conv2d context_;
  nn::Conv2d bev_out_;
  nn::Conv2d feature_out_;
};

}  // namespace diffmap::bevbase
