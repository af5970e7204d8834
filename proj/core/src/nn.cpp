#include "diffmap/nn.hpp"

#include <cmath>

#include "diffmap/errors.hpp"
#include "diffmap/rng.hpp"

namespace diffmap::nn {

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride_, Rng& rng, bool with_bias)
    : stride(stride_), padding(kernel / 2) {
  if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride_ < 1) {
    throw ConfigError("Conv2d: channel counts, kernel and stride must be positive");
  }
  const double fan_in = static_cast<double>(in_channels) * kernel * kernel;
  const double bound = std::sqrt(6.0 / fan_in);  // He-uniform
  weight = Var::parameter(Tensor::uniform({out_channels, in_channels, kernel, kernel}, rng, -bound, bound));
  if (with_bias) bias = Var::parameter(Tensor::zeros({out_channels}));
}

Var Conv2d::operator()(const Var& x) const { return ag::conv2d(x, weight, bias, stride, padding); }

void Conv2d::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

Linear::Linear(int in_features, int out_features, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = Var::parameter(Tensor::uniform({out_features, in_features}, rng, -bound, bound));
  bias = Var::parameter(Tensor::zeros({out_features}));
}

Var Linear::operator()(const Var& x) const { return ag::linear(x, weight, bias); }
Var Linear::tokens(const Var& x) const { return ag::token_linear(x, weight, bias); }

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

PixelMlp::PixelMlp(const std::vector<int>& widths, Rng& rng) {
  if (widths.size() < 2) throw ConfigError("PixelMlp needs at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers_.emplace_back(widths[i], widths[i + 1], 1, 1, rng);
}

Var PixelMlp::operator()(const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = ag::relu(h);
  }
  return h;
}

void PixelMlp::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, prefix + "." + std::to_string(i));
}

Tensor timestep_embedding(const std::vector<int>& steps, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("timestep embedding dim must be even and >= 2");
  const int half = dim / 2;
  Tensor out({static_cast<int>(steps.size()), dim});
  for (std::size_t i = 0; i < steps.size(); ++i) {
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * j / half);
      const double arg = steps[i] * freq;
      out[i * dim + j] = std::sin(arg);
      out[i * dim + half + j] = std::cos(arg);
    }
  }
  return out;
}

AdamW::AdamW(ParamList params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& [name, p] : params_) {
    (void)name;
    m_.push_back(Tensor::zeros_like(p.value()));
    v_.push_back(Tensor::zeros_like(p.value()));
  }
}

void AdamW::zero_grad() { ag::zero_grads(params_); }

void AdamW::step(double lr) {
  ++step_;
  double norm_sq = 0.0;
  for (const auto& [name, p] : params_) {
    (void)name;
    if (p.node()->grad.empty()) continue;
    for (double g : p.node()->grad.values()) norm_sq += g * g;
  }
  last_grad_norm_ = std::sqrt(norm_sq);
  double clip = 1.0;
  if (config_.grad_clip > 0.0 && last_grad_norm_ > config_.grad_clip) clip = config_.grad_clip / last_grad_norm_;

  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ag::Node* node = params_[i].second.node();
    if (node->grad.empty()) continue;
    Tensor& w = node->value;
    const Tensor& g = node->grad;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t k = 0; k < w.numel(); ++k) {
      const double gk = g[k] * clip;
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * gk;
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * gk * gk;
      const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config_.eps);
      w[k] -= lr * (update + config_.weight_decay * w[k]);
    }
  }
}

void AdamW::restore(long step, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw FormatError("optimizer state does not match parameter list");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    require_same_shape(m[i], params_[i].second.value(), "optimizer first moment");
    require_same_shape(v[i], params_[i].second.value(), "optimizer second moment");
  }
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace diffmap::nn
