#include "diffmap/denoiser.hpp"

#include <algorithm>

#include "diffmap/errors.hpp"
#include "diffmap/rng.hpp"

namespace diffmap::denoiser {

int DenoiserConfig::width(int level) const { return std::min(max_width, base_width << level); }

void DenoiserConfig::validate() const {
  if (latent_dim < 1 || bev_channels < 1 || cond_channels < 1 || base_width < 1 || max_width < 1)
    throw ConfigError("denoiser widths must be >= 1");
  if (depth < 0) throw ConfigError("denoiser depth must be >= 0");
  if (time_dim < 2 || time_dim % 2 != 0 || time_hidden < 1) throw ConfigError("invalid time embedding size");
  if (kernel != 1 && kernel != 3) throw ConfigError("denoiser kernel must be 1 or 3");
  if (heads < 1) throw ConfigError("attention heads must be >= 1");
  for (int l = 0; l <= depth; ++l) {
    if (width(l) % heads != 0) {
      throw ConfigError("attention heads (" + std::to_string(heads) + ") must divide level width " +
                        std::to_string(width(l)));
    }
  }
}

void DenoiserConfig::check_latent_grid(int h, int w) const {
  const int m = 1 << depth;
  if (h % m != 0 || w % m != 0) {
    throw ConfigError("latent grid " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by 2^depth = " +
                      std::to_string(m));
  }
}

ConditionProjector::ConditionProjector(int bev_channels, int cond_channels, Rng& rng)
    : proj(bev_channels, cond_channels, 1, 1, rng) {}

Var ConditionProjector::operator()(const Var& bev, int latent_h, int latent_w) const {
  if (bev.value().rank() != 4 || bev.dim(1) != proj.in_channels()) {
    throw ContractError("condition_project: expected [N," + std::to_string(proj.in_channels()) + ",H,W], got " +
                        shape_str(bev.shape()));
  }
  if (bev.dim(2) % latent_h != 0 || bev.dim(3) % latent_w != 0 || bev.dim(2) / latent_h != bev.dim(3) / latent_w) {
    throw ContractError("condition_project: BEV grid " + shape_str(bev.shape()) + " cannot be block-averaged to " +
                        std::to_string(latent_h) + "x" + std::to_string(latent_w));
  }
  return proj(ag::avg_pool(bev, bev.dim(2) / latent_h));
}

void ConditionProjector::collect(ag::ParamList& out, const std::string& prefix) const {
  proj.collect(out, prefix + ".proj");
}

Var condition_concat(const Var& z_t, const Var& cond) {
  if (z_t.value().rank() != 4 || cond.value().rank() != 4 || z_t.dim(0) != cond.dim(0) ||
      z_t.dim(2) != cond.dim(2) || z_t.dim(3) != cond.dim(3)) {
    throw ContractError("condition_concat: spatial mismatch " + shape_str(z_t.shape()) + " vs " +
                        shape_str(cond.shape()));
  }
  return ag::concat_channels({z_t, cond});
}

CrossAttention::CrossAttention(int query_dim, int context_dim, int heads_, Rng& rng)
    : heads(heads_),
      to_q(query_dim, query_dim, rng),
      to_k(context_dim, query_dim, rng),
      to_v(context_dim, query_dim, rng),
      to_out(query_dim, query_dim, rng) {
  if (heads_ < 1 || query_dim % heads_ != 0) {
    throw ConfigError("cross-attention: heads (" + std::to_string(heads_) + ") must divide width " +
                      std::to_string(query_dim));
  }
}

Var CrossAttention::attend(const Var& query_map, const Var& context_map) const {
  if (query_map.dim(0) != context_map.dim(0)) throw ContractError("cross_attention: batch mismatch");
  Var q = to_q.tokens(ag::to_tokens(query_map));
  Var ctx = ag::to_tokens(context_map);
  Var a = ag::attention(q, to_k.tokens(ctx), to_v.tokens(ctx), heads);
  return ag::from_tokens(to_out.tokens(a), query_map.dim(2), query_map.dim(3));
}

Var CrossAttention::operator()(const Var& query_map, const Var& context_map) const {
  return ag::add(query_map, attend(query_map, context_map));
}

void CrossAttention::collect(ag::ParamList& out, const std::string& prefix) const {
  to_q.collect(out, prefix + ".q");
  to_k.collect(out, prefix + ".k");
  to_v.collect(out, prefix + ".v");
  to_out.collect(out, prefix + ".out");
}

ResBlock::ResBlock(int channels, int time_hidden, int kernel, Rng& rng)
    : conv1_(channels, channels, kernel, 1, rng),
      conv2_(channels, channels, kernel, 1, rng),
      scale_(time_hidden, channels, rng),
      shift_(time_hidden, channels, rng) {
  // Residual branch starts small.
  conv2_.weight.mutable_value() *= 0.1;
}

Var ResBlock::operator()(const Var& x, const Var& time_emb) const {
  Var h = ag::silu(conv1_(x));
  h = ag::modulate(h, scale_(time_emb), shift_(time_emb));
  h = conv2_(h);
  return ag::add(x, h);
}

void ResBlock::collect(ag::ParamList& out, const std::string& prefix) const {
  conv1_.collect(out, prefix + ".conv1");
  conv2_.collect(out, prefix + ".conv2");
  scale_.collect(out, prefix + ".time_scale");
  shift_.collect(out, prefix + ".time_shift");
}

void Denoiser::Decoder::collect(ag::ParamList& p, const std::string& prefix) const {
  for (std::size_t i = 0; i < merge.size(); ++i) merge[i].collect(p, prefix + ".merge" + std::to_string(i));
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(p, prefix + ".block" + std::to_string(i));
  for (std::size_t i = 0; i < attn.size(); ++i) attn[i].collect(p, prefix + ".attn" + std::to_string(i));
  out.collect(p, prefix + ".out");
}

Denoiser::Denoiser(const DenoiserConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(mix_seed(seed, 0xde));
  const int k = config_.kernel;
  const int c_tilde = config_.cond_channels;
  projector_ = ConditionProjector(config_.bev_channels, c_tilde, rng);
  time1_ = nn::Linear(config_.time_dim, config_.time_hidden, rng);
  time2_ = nn::Linear(config_.time_hidden, config_.time_hidden, rng);
  in_conv_ = nn::Conv2d(config_.latent_dim + c_tilde, config_.width(0), k, 1, rng);
  for (int l = 0; l <= config_.depth; ++l) {
    enc_blocks_.emplace_back(config_.width(l), config_.time_hidden, k, rng);
    enc_attn_.emplace_back(config_.width(l), c_tilde, config_.heads, rng);
    if (l < config_.depth) down_.emplace_back(config_.width(l), config_.width(l + 1), 3, 2, rng);
  }
  for (Decoder* dec : {&eps_dec_, &z_dec_}) {
    if (config_.depth == 0) {
      dec->blocks.emplace_back(config_.width(0), config_.time_hidden, k, rng);
      dec->attn.emplace_back(config_.width(0), c_tilde, config_.heads, rng);
    }
    for (int l = config_.depth - 1; l >= 0; --l) {
      dec->merge.emplace_back(config_.width(l + 1) + config_.width(l), config_.width(l), k, 1, rng);
      dec->blocks.emplace_back(config_.width(l), config_.time_hidden, k, rng);
      dec->attn.emplace_back(config_.width(l), c_tilde, config_.heads, rng);
    }
    dec->out = nn::Conv2d(config_.width(0), config_.latent_dim, k, 1, rng);
    dec->out.weight.mutable_value() *= 0.1;
  }
}

Var Denoiser::run_decoder(const Decoder& dec, const Var& bottom, const std::vector<Var>& skips,
                          const std::vector<Var>& contexts, const Var& temb) const {
  Var h = bottom;
  if (config_.depth == 0) {
    h = dec.blocks[0](h, temb);
    h = dec.attn[0](h, contexts[0]);
  }
  for (int i = 0, l = config_.depth - 1; l >= 0; ++i, --l) {
    h = ag::upsample_nearest(h, 2);
    h = ag::silu(dec.merge[i](ag::concat_channels({h, skips[l]})));
    h = dec.blocks[i](h, temb);
    h = dec.attn[i](h, contexts[l]);
  }
  return dec.out(h);
}

DenoiserOutput Denoiser::forward(const Var& z_t, const std::vector<int>& steps, const Var& bev,
                                 int total_steps) const {
  if (z_t.value().rank() != 4) throw ContractError("denoiser: z_t must be [N,D,h,w]");
  return forward_projected(z_t, steps, projector_(bev, z_t.dim(2), z_t.dim(3)), total_steps);
}

DenoiserOutput Denoiser::forward_projected(const Var& z_t, const std::vector<int>& steps, const Var& cond,
                                           int total_steps) const {
  if (z_t.value().rank() != 4 || z_t.dim(1) != config_.latent_dim) {
    throw ContractError("denoiser: expected z_t [N," + std::to_string(config_.latent_dim) + ",h,w], got " +
                        shape_str(z_t.shape()));
  }
  if (static_cast<int>(steps.size()) != z_t.dim(0)) throw ContractError("denoiser: one timestep per batch item");
  for (int t : steps) {
    if (t < 1 || t > total_steps) throw ContractError("denoiser: timestep " + std::to_string(t) + " outside [1, T]");
  }
  config_.check_latent_grid(z_t.dim(2), z_t.dim(3));

  Var temb = ag::silu(time1_(Var(nn::timestep_embedding(steps, config_.time_dim))));
  temb = ag::silu(time2_(temb));

  std::vector<Var> contexts{cond};
  for (int l = 1; l <= config_.depth; ++l) contexts.push_back(ag::avg_pool(contexts.back(), 2));

  Var h = in_conv_(condition_concat(z_t, cond));
  std::vector<Var> skips;
  for (int l = 0; l <= config_.depth; ++l) {
    h = enc_blocks_[l](h, temb);
    h = enc_attn_[l](h, contexts[l]);
    if (l < config_.depth) {
      skips.push_back(h);
      h = ag::silu(down_[l](h));
    }
  }
  return {run_decoder(eps_dec_, h, skips, contexts, temb), run_decoder(z_dec_, h, skips, contexts, temb)};
}

ag::ParamList Denoiser::parameters() const {
  ag::ParamList p;
  projector_.collect(p, "projector");
  time1_.collect(p, "time.fc1");
  time2_.collect(p, "time.fc2");
  in_conv_.collect(p, "encoder.in");
  for (std::size_t l = 0; l < enc_blocks_.size(); ++l) {
    enc_blocks_[l].collect(p, "encoder.block" + std::to_string(l));
    enc_attn_[l].collect(p, "encoder.attn" + std::to_string(l));
  }
  for (std::size_t l = 0; l < down_.size(); ++l) down_[l].collect(p, "encoder.down" + std::to_string(l));
  eps_dec_.collect(p, "eps_decoder");
  z_dec_.collect(p, "z_decoder");
  return p;
}

}  // namespace diffmap::denoiser
