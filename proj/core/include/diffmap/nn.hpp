#pragma once

#include <string>
#include <vector>

#include "diffmap/autograd.hpp"
#include "diffmap/ops.hpp"

namespace diffmap::nn {

using ag::ParamList;
using ag::Var;

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride, Rng& rng, bool bias = true);

  Var operator()(const Var& x) const;
  void collect(ParamList& out, const std::string& prefix) const;

  int in_channels() const { return weight.dim(1); }
  int out_channels() const { return weight.dim(0); }

  Var weight;
  Var bias;
  int stride = 1;
  int padding = 0;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, Rng& rng);

  // x[N,I] -> [N,O]
  Var operator()(const Var& x) const;
  // tokens[N,L,I] -> [N,L,O]
  Var tokens(const Var& x) const;
  void collect(ParamList& out, const std::string& prefix) const;

  Var weight;
  Var bias;
};

// Per-pixel MLP (stack of 1x1 convolutions) with ReLU between layers.
class PixelMlp {
 public:
  PixelMlp() = default;
  PixelMlp(const std::vector<int>& widths, Rng& rng);

  Var operator()(const Var& x) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  std::vector<Conv2d> layers_;
};

// Sinusoidal embedding of integer timesteps, [N] -> [N, dim].
Tensor timestep_embedding(const std::vector<int>& steps, int dim);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
};

// AdamW with decoupled weight decay. Parameters without gradients this step
// are left untouched.
class AdamW {
 public:
  AdamW(ParamList params, AdamWConfig config);

  void step(double lr);
  void zero_grad();
  long steps_taken() const { return step_; }
  double last_grad_norm() const { return last_grad_norm_; }

  const ParamList& params() const { return params_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void restore(long step, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  ParamList params_;
  AdamWConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  long step_ = 0;
  double last_grad_norm_ = 0.0;
};

}  // namespace diffmap::nn
