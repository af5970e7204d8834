#include "diffmap/vq.hpp"

#include <bit>
#include <limits>

#include "diffmap/checkpoint.hpp"
#include "diffmap/errors.hpp"
#include "diffmap/rng.hpp"
#include "json_util.hpp"

namespace diffmap::vq {

using detail::json;
using detail::require_field;

int VqConfig::levels() const { return std::countr_zero(static_cast<unsigned>(factor)); }

void VqConfig::validate() const {
  if (factor != 4 && factor != 8 && factor != 16) throw ConfigError("VQ factor must be 4, 8 or 16");
  if (codebook_size < 1 || latent_dim < 1) throw ConfigError("codebook must have K, D >= 1");
  if (beta < 0.0) throw ConfigError("commitment weight beta must be >= 0");
  if (in_channels < 1 || base_width < 1 || max_width < 1 || feature_width < 1)
    throw ConfigError("VQ channel widths must be >= 1");
}

std::vector<int> nearest_codes(const Tensor& z_e, const Tensor& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) < 1) throw ConfigError("quantize: empty codebook");
  if (z_e.rank() != 4 || z_e.dim(1) != codebook.dim(1)) {
    throw ContractError("quantize: latent " + shape_str(z_e.shape()) + " incompatible with codebook " +
                        shape_str(codebook.shape()));
  }
  const int n = z_e.dim(0), d = z_e.dim(1), k = codebook.dim(0);
  const std::size_t hw = static_cast<std::size_t>(z_e.dim(2)) * z_e.dim(3);
  std::vector<int> indices(n * hw);
  std::vector<double> v(d);
  for (int b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      for (int c = 0; c < d; ++c) v[c] = z_e[(static_cast<std::size_t>(b) * d + c) * hw + p];
      int best = 0;
      double best_dist = std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) {
        const double* row = codebook.data() + static_cast<std::size_t>(j) * d;
        double dist = 0.0;
        for (int c = 0; c < d; ++c) dist += (v[c] - row[c]) * (v[c] - row[c]);
        if (dist < best_dist) {
          best_dist = dist;
          best = j;
        }
      }
      indices[b * hw + p] = best;
    }
  }
  return indices;
}

Var gather_codes(const Var& codebook, const std::vector<int>& indices, const Shape& latent_shape) {
  const int n = latent_shape[0], d = latent_shape[1];
  const std::size_t hw = static_cast<std::size_t>(latent_shape[2]) * latent_shape[3];
  if (codebook.dim(1) != d || indices.size() != n * hw) throw ContractError("gather_codes: shape mismatch");
  Tensor out(latent_shape);
  for (int b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      const double* row = codebook.value().data() + static_cast<std::size_t>(indices[b * hw + p]) * d;
      for (int c = 0; c < d; ++c) out[(static_cast<std::size_t>(b) * d + c) * hw + p] = row[c];
    }
  ag::Node* nc = codebook.node();
  return ag::make_result(std::move(out), {codebook}, [nc, indices, n, d, hw](const Tensor& g) {
    Tensor gc(nc->value.shape());
    for (int b = 0; b < n; ++b)
      for (std::size_t p = 0; p < hw; ++p) {
        double* row = gc.data() + static_cast<std::size_t>(indices[b * hw + p]) * d;
        for (int c = 0; c < d; ++c) row[c] += g[(static_cast<std::size_t>(b) * d + c) * hw + p];
      }
    nc->accumulate(std::move(gc));
  });
}

QuantizeResult quantize(const Var& z_e, const Var& codebook) {
  QuantizeResult r;
  r.indices = nearest_codes(z_e.value(), codebook.value());
  r.codes = gather_codes(codebook, r.indices, z_e.shape());
  // z_e + sg(codes - z_e): forward value of the codes, identity gradient to z_e.
  ag::Node* ne = z_e.node();
  r.z_q = ag::make_result(r.codes.value(), {z_e}, [ne](const Tensor& g) { ne->accumulate(g); });
  return r;
}

VqLoss vqvae_loss(const Tensor& x, const Var& logits, const Var& z_e, const Var& codes, double beta) {
  require_same_shape(z_e.value(), codes.value(), "vqvae_loss latents");
  VqLoss loss;
  loss.recon = ag::bce_with_logits(logits, x);
  loss.vq = ag::mse(ag::detach(z_e), codes);
  loss.commit = ag::mse(z_e, ag::detach(codes));
  loss.total = ag::weighted_sum({loss.recon, loss.vq, loss.commit}, {1.0, 1.0, beta});
  return loss;
}

VqVae::VqVae(const VqConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(mix_seed(seed, 0x7a));
  const int levels = config_.levels();
  std::vector<int> widths;  // encoder width after each downsampling
  for (int l = 0; l < levels; ++l) widths.push_back(std::min(config_.max_width, config_.base_width << l));
  int in = config_.in_channels;
  for (int w : widths) {
    enc_down_.emplace_back(in, w, 3, 2, rng);
    in = w;
  }
  enc_mid_ = nn::Conv2d(in, in, 3, 1, rng);
  enc_out_ = nn::Conv2d(in, config_.latent_dim, 1, 1, rng);

  dec_in_ = nn::Conv2d(config_.latent_dim, in, 3, 1, rng);
  dec_mid_ = nn::Conv2d(in, in, 3, 1, rng);
  for (int l = levels - 1; l >= 0; --l) {
    const int out = l == 0 ? config_.feature_width : std::max(config_.feature_width, widths[l - 1] / 2);
    dec_up_.emplace_back(in, out, 3, 1, rng);
    in = out;
  }
  dec_logits_ = nn::Conv2d(in, config_.in_channels, 1, 1, rng);
  // Foreground is sparse; start near p = 0.1.
  dec_logits_.bias.mutable_value().fill(-2.0);

  codebook_ = Var::parameter(Tensor::uniform({config_.codebook_size, config_.latent_dim}, rng, -1.0, 1.0));
  usage_.assign(config_.codebook_size, 0);
}

Var VqVae::encode(const Var& x) const {
  if (x.value().rank() != 4 || x.dim(1) != config_.in_channels) {
    throw ContractError("vq_encode: expected [N," + std::to_string(config_.in_channels) + ",H,W], got " +
                        shape_str(x.shape()));
  }
  if (x.dim(2) % config_.factor != 0 || x.dim(3) % config_.factor != 0) {
    throw ContractError("vq_encode: H and W must be divisible by factor " + std::to_string(config_.factor) +
                        " (pad first), got " + shape_str(x.shape()));
  }
  Var h = x;
  for (const auto& conv : enc_down_) h = ag::relu(conv(h));
  h = ag::relu(enc_mid_(h));
  return enc_out_(h);
}

Decoded VqVae::decode(const Var& z_q) const {
  if (z_q.value().rank() != 4 || z_q.dim(1) != config_.latent_dim)
    throw ContractError("vq_decode: expected [N," + std::to_string(config_.latent_dim) + ",h,w], got " +
                        shape_str(z_q.shape()));
  Var h = ag::relu(dec_in_(z_q));
  h = ag::relu(dec_mid_(h));
  for (const auto& conv : dec_up_) h = ag::relu(conv(ag::upsample_nearest(h, 2)));
  return {h, dec_logits_(h)};
}

VqVae::Output VqVae::forward(const Var& x) const {
  Output out;
  out.z_e = encode(x);
  out.q = quantize(out.z_e, codebook_);
  out.decoded = decode(out.q.z_q);
  return out;
}

void VqVae::record_usage(const std::vector<int>& indices) {
  for (int i : indices) ++usage_[i];
}

ag::ParamList VqVae::encoder_parameters() const {
  ag::ParamList p;
  for (std::size_t i = 0; i < enc_down_.size(); ++i) enc_down_[i].collect(p, "encoder.down" + std::to_string(i));
  enc_mid_.collect(p, "encoder.mid");
  enc_out_.collect(p, "encoder.out");
  return p;
}

ag::ParamList VqVae::decoder_parameters() const {
  ag::ParamList p;
  dec_in_.collect(p, "decoder.in");
  dec_mid_.collect(p, "decoder.mid");
  for (std::size_t i = 0; i < dec_up_.size(); ++i) dec_up_[i].collect(p, "decoder.up" + std::to_string(i));
  dec_logits_.collect(p, "decoder.logits");
  return p;
}

ag::ParamList VqVae::parameters() const {
  ag::ParamList p = encoder_parameters();
  for (auto& e : decoder_parameters()) p.push_back(e);
  p.emplace_back("codebook", codebook_);
  return p;
}

namespace {

json config_to_json(const VqConfig& c) {
  return {{"factor", c.factor},          {"beta", c.beta},           {"codebook_size", c.codebook_size},
          {"latent_dim", c.latent_dim},  {"in_channels", c.in_channels}, {"base_width", c.base_width},
          {"max_width", c.max_width},    {"feature_width", c.feature_width}};
}

VqConfig config_from_json(const json& j) {
  const std::string ctx = "vq manifest.config";
  VqConfig c;
  c.factor = require_field<int>(j, "factor", ctx);
  c.beta = require_field<double>(j, "beta", ctx);
  c.codebook_size = require_field<int>(j, "codebook_size", ctx);
  c.latent_dim = require_field<int>(j, "latent_dim", ctx);
  c.in_channels = require_field<int>(j, "in_channels", ctx);
  c.base_width = require_field<int>(j, "base_width", ctx);
  c.max_width = require_field<int>(j, "max_width", ctx);
  c.feature_width = require_field<int>(j, "feature_width", ctx);
  return c;
}

}  // namespace

void VqVae::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json m;
  m["schema_version"] = 1;
  m["kind"] = "vqvae";
  m["config"] = config_to_json(config_);
  json tensors = json::array();
  for (const auto& [name, p] : parameters()) tensors.push_back({{"name", name}, {"shape", p.shape()}});
  m["tensors"] = tensors;
  m["usage"] = usage_;
  m["codebook_export"] = {{"file", "codebook.f32.bin"},
                          {"dtype", "f32"},
                          {"shape", codebook_.shape()},
                          {"layout", "row-major little-endian"}};
  io::write_text(dir / "vq.json", m.dump(2) + "\n");
  io::save_params(dir / "vq.params.f64.bin", parameters());
  std::vector<float> table(codebook_.value().storage().begin(), codebook_.value().storage().end());
  io::write_le<float>(dir / "codebook.f32.bin", table);
}

VqVae VqVae::load(const std::filesystem::path& dir) {
  const json m = detail::parse_json(io::read_text(dir / "vq.json"), "vq.json");
  if (require_field<std::string>(m, "kind", "vq.json") != "vqvae") throw FormatError("vq.json: kind is not vqvae");
  VqVae model(config_from_json(require_field<json>(m, "config", "vq.json")), 0);
  io::load_params(dir / "vq.params.f64.bin", model.parameters());
  if (m.contains("usage")) model.usage_ = m["usage"].get<std::vector<std::int64_t>>();
  return model;
}

}  // namespace diffmap::vq
