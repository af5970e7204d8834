#pragma once

#include <vector>

#include "diffmap/autograd.hpp"
#include "diffmap/tensor.hpp"

namespace diffmap::diffcore {

// Discrete noise schedule indexed by t in [0, T]; t = 0 is clean data with
// alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int steps, double beta_first, double beta_last);
  static NoiseSchedule from_betas(std::vector<double> betas);

  int steps() const { return static_cast<int>(beta_.size()) - 1; }
  double beta(int t) const { return beta_[checked(t, 1)]; }
  double alpha(int t) const { return alpha_[checked(t, 1)]; }
  double alpha_bar(int t) const { return alpha_bar_[checked(t, 0)]; }
  double sqrt_alpha_bar(int t) const { return sqrt_alpha_bar_[checked(t, 0)]; }
  double sqrt_one_minus_alpha_bar(int t) const { return sqrt_one_minus_alpha_bar_[checked(t, 0)]; }

  // beta_1..beta_T
  std::vector<double> betas() const { return {beta_.begin() + 1, beta_.end()}; }

 private:
  NoiseSchedule() = default;
  std::size_t checked(int t, int lowest) const;

  std::vector<double> beta_, alpha_, alpha_bar_, sqrt_alpha_bar_, sqrt_one_minus_alpha_bar_;
};

// sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps, t in [1, T].
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule);

// mean((z_hat - z)^2) + mean((eps_hat - eps)^2)
double diffusion_loss(const Tensor& z_hat, const Tensor& z, const Tensor& eps_hat, const Tensor& eps);
ag::Var diffusion_loss(const ag::Var& z_hat, const Tensor& z, const ag::Var& eps_hat, const Tensor& eps);

// (z_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)
Tensor predict_z0_from_eps(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& schedule);

struct SamplerConfig {
  double eta = 0.0;     // 0 = deterministic
  double lambda = 0.5;  // weight of the z-branch estimate in the fused z0
};

// One reverse update t -> t_prev consuming both branch outputs:
//   z0_fused = lambda * z0_hat + (1 - lambda) * predict_z0_from_eps(z_t, eps_hat, t)
//   sigma    = eta * sqrt((1 - abar_prev) / (1 - abar_t)) * sqrt(1 - abar_t / abar_prev)
//   z_prev   = sqrt(abar_prev) z0_fused + sqrt(1 - abar_prev - sigma^2) eps_hat + sigma * noise
Tensor sampler_step(const Tensor& z_t, const Tensor& z0_hat, const Tensor& eps_hat, int t, int t_prev,
                    const SamplerConfig& config, const NoiseSchedule& schedule, const Tensor& noise);

// Descending uniform-stride subset of [T..1] with `count` entries, followed by 0.
std::vector<int> sampling_timesteps(int total_steps, int count);

}  // namespace diffmap::diffcore
