#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "diffmap/nn.hpp"

namespace diffmap::vq {

using ag::Var;

struct VqConfig {
  int factor = 8;  // spatial downsampling: 4, 8 or 16
  double beta = 0.25;
  int codebook_size = 512;
  int latent_dim = 8;
  int in_channels = 3;
  int base_width = 32;    // encoder width after the first downsampling
  int max_width = 64;
  int feature_width = 8;  // full-resolution decoder feature map (fed to instance heads)

  int levels() const;  // log2(factor)
  void validate() const;
};

struct QuantizeResult {
  Var z_q;                   // straight-through: value = codes, gradient -> z_e
  Var codes;                 // gathered codebook rows, gradient -> codebook
  std::vector<int> indices;  // [N*h*w], row-major over (n, y, x)
};

// Nearest codebook row per latent position; ties resolve to the lowest index.
std::vector<int> nearest_codes(const Tensor& z_e, const Tensor& codebook);
// Gathers codebook rows into an [N, D, h, w] latent.
Var gather_codes(const Var& codebook, const std::vector<int>& indices, const Shape& latent_shape);
QuantizeResult quantize(const Var& z_e, const Var& codebook);

struct VqLoss {
  Var total;
  Var recon;
  Var vq;
  Var commit;
};

// recon = BCE(sigmoid(logits), x); vq = mse(sg[z_e], codes); commit = mse(z_e, sg[codes]);
// total = recon + vq + beta * commit.
VqLoss vqvae_loss(const Tensor& x, const Var& logits, const Var& z_e, const Var& codes, double beta);

struct Decoded {
  Var features;  // [N, feature_width, H, W]
  Var logits;    // [N, in_channels, H, W]
};

class VqVae {
 public:
  VqVae(const VqConfig& config, std::uint64_t seed);

  const VqConfig& config() const { return config_; }

  // x[N, C, H, W] -> z_e[N, D, H/f, W/f]
  Var encode(const Var& x) const;
  Decoded decode(const Var& z_q) const;

  struct Output {
    Var z_e;
    QuantizeResult q;
    Decoded decoded;
  };
  Output forward(const Var& x) const;

  Var& codebook() { return codebook_; }
  const Var& codebook() const { return codebook_; }
  std::vector<std::int64_t>& usage() { return usage_; }
  const std::vector<std::int64_t>& usage() const { return usage_; }
  void record_usage(const std::vector<int>& indices);

  ag::ParamList encoder_parameters() const;
  ag::ParamList decoder_parameters() const;
  ag::ParamList parameters() const;

  void save(const std::filesystem::path& dir) const;
  static VqVae load(const std::filesystem::path& dir);

 private:
  VqConfig config_;
  std::vector<nn::Conv2d> enc_down_;
  nn::Conv2d enc_mid_;
  nn::Conv2d enc_out_;
  nn::Conv2d dec_in_;
  nn::Conv2d dec_mid_;
  std::vector<nn::Conv2d> dec_up_;
  nn::Conv2d dec_logits_;
  Var codebook_;
  std::vector<std::int64_t> usage_;
};

}  // namespace diffmap::vq
