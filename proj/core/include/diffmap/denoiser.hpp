#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffmap/nn.hpp"

namespace diffmap::denoiser {

using ag::Var;

struct DenoiserConfig {
  int latent_dim = 8;        // D'
  int bev_channels = 64;     // C of the incoming BEV features
  int cond_channels = 16;    // C~ after projection
  int base_width = 32;
  int max_width = 64;
  int depth = 2;             // down/up levels
  int heads = 4;
  int time_dim = 32;         // sinusoidal embedding width
  int time_hidden = 64;
  int kernel = 3;            // 1 gives a purely pointwise (translation-free) network

  int width(int level) const;
  void validate() const;
  // Throws ConfigError unless a latent grid of h x w works with this depth.
  void check_latent_grid(int h, int w) const;
};

// Resizes BEV features to the latent grid by block averaging, then applies a
// learned 1x1 projection to cond_channels.
class ConditionProjector {
 public:
  ConditionProjector() = default;
  ConditionProjector(int bev_channels, int cond_channels, Rng& rng);

  Var operator()(const Var& bev, int latent_h, int latent_w) const;
  void collect(ag::ParamList& out, const std::string& prefix) const;

  nn::Conv2d proj;
};

// Channel concatenation, z_t channels first.
Var condition_concat(const Var& z_t, const Var& cond);

// Queries from the feature map, keys/values from the context map; output is
// projected and added back to the query map.
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(int query_dim, int context_dim, int heads, Rng& rng);

  Var operator()(const Var& query_map, const Var& context_map) const;
  // Attention output before the residual add, [N, query_dim, H, W].
  Var attend(const Var& query_map, const Var& context_map) const;
  void collect(ag::ParamList& out, const std::string& prefix) const;

  int heads = 1;
  nn::Linear to_q, to_k, to_v, to_out;
};

class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(int channels, int time_hidden, int kernel, Rng& rng);

  Var operator()(const Var& x, const Var& time_emb) const;
  void collect(ag::ParamList& out, const std::string& prefix) const;

 private:
  nn::Conv2d conv1_, conv2_;
  nn::Linear scale_, shift_;
};

struct DenoiserOutput {
  Var eps_hat;
  Var z_hat;
};

class Denoiser {
 public:
  Denoiser(const DenoiserConfig& config, std::uint64_t seed);

  const DenoiserConfig& config() const { return config_; }

  // z_t[N, D', h, w], steps[N] in [1, T], bev[N, C, H, W] with H = f*h.
  DenoiserOutput forward(const Var& z_t, const std::vector<int>& steps, const Var& bev, int total_steps) const;
  // Same with an already projected condition map [N, C~, h, w].
  DenoiserOutput forward_projected(const Var& z_t, const std::vector<int>& steps, const Var& cond,
                                   int total_steps) const;

  const ConditionProjector& projector() const { return projector_; }

  // Parameter groups: "projector.", "time.", "encoder.", "eps_decoder.", "z_decoder.".
  ag::ParamList parameters() const;

 private:
  struct Decoder {
    std::vector<nn::Conv2d> merge;
    std::vector<ResBlock> blocks;
    std::vector<CrossAttention> attn;
    nn::Conv2d out;
    void collect(ag::ParamList& p, const std::string& prefix) const;
  };

  Var run_decoder(const Decoder& dec, const Var& bottom, const std::vector<Var>& skips,
                  const std::vector<Var>& contexts, const Var& temb) const;

  DenoiserConfig config_;
  ConditionProjector projector_;
  nn::Linear time1_, time2_;
  nn::Conv2d in_conv_;
  std::vector<ResBlock> enc_blocks_;
  std::vector<CrossAttention> enc_attn_;
  std::vector<nn::Conv2d> down_;
  Decoder eps_dec_, z_dec_;
};

}  // namespace diffmap::denoiser
