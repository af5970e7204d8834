#include "diffmap/diffcore.hpp"

#include <cmath>

#include "diffmap/errors.hpp"
#include "diffmap/ops.hpp"

namespace diffmap::diffcore {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_first, double beta_last) {
  if (steps < 1) throw ConfigError("noise schedule needs T >= 1");
  if (!(beta_first > 0.0) || beta_first > beta_last || !(beta_last < 1.0)) {
    throw ConfigError("noise schedule endpoints must satisfy 0 < beta_1 <= beta_T < 1");
  }
  std::vector<double> betas(steps);
  for (int i = 0; i < steps; ++i) {
    betas[i] = steps == 1 ? beta_first : beta_first + (beta_last - beta_first) * i / (steps - 1);
  }
  return from_betas(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("noise schedule needs T >= 1");
  NoiseSchedule s;
  const std::size_t n = betas.size();
  s.beta_.assign(n + 1, 0.0);
  s.alpha_.assign(n + 1, 1.0);
  s.alpha_bar_.assign(n + 1, 1.0);
  s.sqrt_alpha_bar_.assign(n + 1, 1.0);
  s.sqrt_one_minus_alpha_bar_.assign(n + 1, 0.0);
  for (std::size_t t = 1; t <= n; ++t) {
    const double b = betas[t - 1];
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("noise schedule betas must lie in (0,1)");
    if (t > 1 && b < betas[t - 2]) throw ConfigError("noise schedule betas must be non-decreasing");
    s.beta_[t] = b;
    s.alpha_[t] = 1.0 - b;
    s.alpha_bar_[t] = s.alpha_bar_[t - 1] * (1.0 - b);
    s.sqrt_alpha_bar_[t] = std::sqrt(s.alpha_bar_[t]);
    s.sqrt_one_minus_alpha_bar_[t] = std::sqrt(1.0 - s.alpha_bar_[t]);
  }
  return s;
}

std::size_t NoiseSchedule::checked(int t, int lowest) const {
  if (t < lowest || t > steps()) {
    throw ContractError("timestep " + std::to_string(t) + " outside [" + std::to_string(lowest) + ", " +
                        std::to_string(steps()) + "]");
  }
  return static_cast<std::size_t>(t);
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (t < 1) throw ContractError("q_sample: timestep must be in [1, T]");
  require_same_shape(z0, eps, "q_sample");
  const double a = schedule.sqrt_alpha_bar(t), b = schedule.sqrt_one_minus_alpha_bar(t);
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

double diffusion_loss(const Tensor& z_hat, const Tensor& z, const Tensor& eps_hat, const Tensor& eps) {
  require_same_shape(z_hat, z, "diffusion_loss");
  require_same_shape(eps_hat, eps, "diffusion_loss");
  require_same_shape(z_hat, eps_hat, "diffusion_loss");
  double sz = 0.0, se = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    sz += (z_hat[i] - z[i]) * (z_hat[i] - z[i]);
    se += (eps_hat[i] - eps[i]) * (eps_hat[i] - eps[i]);
  }
  const double n = static_cast<double>(z.numel());
  return sz / n + se / n;
}

ag::Var diffusion_loss(const ag::Var& z_hat, const Tensor& z, const ag::Var& eps_hat, const Tensor& eps) {
  require_same_shape(z_hat.value(), eps_hat.value(), "diffusion_loss");
  return ag::add(ag::mse(z_hat, ag::Var(z)), ag::mse(eps_hat, ag::Var(eps)));
}

Tensor predict_z0_from_eps(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& schedule) {
  if (t < 1) throw ContractError("predict_z0_from_eps: timestep must be in [1, T]");
  require_same_shape(z_t, eps_hat, "predict_z0_from_eps");
  const double a = schedule.sqrt_alpha_bar(t), b = schedule.sqrt_one_minus_alpha_bar(t);
  Tensor out(z_t.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (z_t[i] - b * eps_hat[i]) / a;
  return out;
}

Tensor sampler_step(const Tensor& z_t, const Tensor& z0_hat, const Tensor& eps_hat, int t, int t_prev,
                    const SamplerConfig& config, const NoiseSchedule& schedule, const Tensor& noise) {
  if (!(t > t_prev && t_prev >= 0)) throw ContractError("sampler_step: requires T >= t > t_prev >= 0");
  if (config.eta < 0.0 || config.eta > 1.0) throw ConfigError("sampler eta must lie in [0,1]");
  if (config.lambda < 0.0 || config.lambda > 1.0) throw ConfigError("sampler lambda must lie in [0,1]");
  require_same_shape(z_t, z0_hat, "sampler_step");
  require_same_shape(z_t, noise, "sampler_step");

  const Tensor z0_eps = predict_z0_from_eps(z_t, eps_hat, t, schedule);
  Tensor fused(z_t.shape());
  for (std::size_t i = 0; i < fused.numel(); ++i)
    fused[i] = config.lambda * z0_hat[i] + (1.0 - config.lambda) * z0_eps[i];
  if (t_prev == 0) return fused;

  const double ab_t = schedule.alpha_bar(t), ab_prev = schedule.alpha_bar(t_prev);
  const double sigma = config.eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  const double a = std::sqrt(ab_prev);
  Tensor out(z_t.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * fused[i] + dir * eps_hat[i] + sigma * noise[i];
  return out;
}

std::vector<int> sampling_timesteps(int total_steps, int count) {
  if (count < 1 || count > total_steps) throw ConfigError("sampling step count must lie in [1, T]");
  std::vector<int> ts;
  for (int i = 0; i < count; ++i) {
    ts.push_back(static_cast<int>(std::lround(static_cast<double>(total_steps) * (count - i) / count)));
  }
  ts.push_back(0);
  return ts;
}

}  // namespace diffmap::diffcore
