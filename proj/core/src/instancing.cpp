#include "diffmap/instancing.hpp"

#include <cmath>
#include <map>

#include "diffmap/errors.hpp"

namespace diffmap::instancing {

void HeadConfig::validate() const {
  if (feature_width < 1 || hidden < 1 || embedding_dim < 1 || num_classes < 1 || direction_bins < 1)
    throw ConfigError("head widths must be >= 1");
}

HeadSet::HeadSet(const HeadConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  sem_ = nn::PixelMlp({config_.feature_width, config_.hidden, config_.num_classes + 1}, rng);
  emb_ = nn::PixelMlp({config_.feature_width, config_.hidden, config_.embedding_dim}, rng);
  dir_ = nn::PixelMlp({config_.feature_width, config_.hidden, config_.direction_bins + 1}, rng);
}

void HeadSet::check_features(const Var& features) const {
  if (features.value().rank() != 4 || features.dim(1) != config_.feature_width) {
    throw ContractError("heads: expected [N," + std::to_string(config_.feature_width) + ",H,W], got " +
                        shape_str(features.shape()));
  }
}

HeadOutputs HeadSet::operator()(const Var& features) const {
  check_features(features);
  return {sem_(features), emb_(features), dir_(features)};
}

HeadOutputs HeadSet::dense(const Var& features) const {
  check_features(features);
  return {sem_(features), emb_(features), Var()};
}

Var HeadSet::direction_at(const Var& features, const std::vector<std::size_t>& pixels) const {
  check_features(features);
  return dir_(ag::gather_pixels(features, pixels));
}

void HeadSet::collect(ag::ParamList& out, const std::string& prefix) const {
  sem_.collect(out, prefix + ".sem");
  emb_.collect(out, prefix + ".emb");
  dir_.collect(out, prefix + ".dir");
}

std::vector<int> semantic_labels(const SemanticMap& map) {
  const auto& s = map.semantic;
  std::vector<int> labels(s.plane(), 0);
  for (int c = 0; c < s.channels; ++c)
    for (std::size_t p = 0; p < s.plane(); ++p)
      if (s.data[c * s.plane() + p]) labels[p] = c + 1;
  return labels;
}

std::vector<int> direction_labels(const SemanticMap& map) {
  std::vector<int> labels(map.instance.plane(), -1);
  for (std::size_t p = 0; p < labels.size(); ++p)
    if (map.instance.data[p] > 0) labels[p] = map.direction.data[p];
  return labels;
}

namespace {

void check_labels(const Var& logits, const std::vector<int>& labels, const char* what) {
  if (logits.value().rank() != 4) throw ContractError(std::string(what) + ": logits must be [N,K,H,W]");
  const std::size_t expect = static_cast<std::size_t>(logits.dim(0)) * logits.dim(2) * logits.dim(3);
  if (labels.size() != expect) {
    throw ContractError(std::string(what) + ": " + std::to_string(labels.size()) + " labels for logits " +
                        shape_str(logits.shape()));
  }
  for (int l : labels)
    if (l >= logits.dim(1)) throw ContractError(std::string(what) + ": label out of range");
}

}  // namespace

Var cross_entropy_loss(const Var& sem_logits, const std::vector<int>& labels) {
  check_labels(sem_logits, labels, "cross_entropy_loss");
  return ag::softmax_cross_entropy(sem_logits, labels);
}

Var direction_loss(const Var& dir_logits, const std::vector<int>& labels) {
  check_labels(dir_logits, labels, "direction_loss");
  return ag::softmax_cross_entropy(dir_logits, labels);
}

namespace {

// Loss of one sample and its gradient w.r.t. the embedding plane [E, HW].
double discriminative_single(const double* emb, int e_dim, std::size_t hw, const std::vector<std::uint16_t>& ids,
                             const DiscriminativeConfig& cfg, double* grad) {
  std::map<int, int> slot;
  for (std::size_t p = 0; p < hw; ++p)
    if (ids[p] > 0 && !slot.count(ids[p])) slot.emplace(ids[p], static_cast<int>(slot.size()));
  const int n_inst = static_cast<int>(slot.size());
  if (n_inst == 0) return 0.0;
  int next = 0;
  for (auto& entry : slot) entry.second = next++;

  std::vector<double> mu(static_cast<std::size_t>(n_inst) * e_dim, 0.0);
  std::vector<int> count(n_inst, 0);
  std::vector<int> owner(hw, -1);
  for (std::size_t p = 0; p < hw; ++p) {
    if (ids[p] == 0) continue;
    const int c = slot[ids[p]];
    owner[p] = c;
    ++count[c];
    for (int e = 0; e < e_dim; ++e) mu[c * e_dim + e] += emb[e * hw + p];
  }
  for (int c = 0; c < n_inst; ++c)
    for (int e = 0; e < e_dim; ++e) mu[c * e_dim + e] /= count[c];

  std::vector<double> g_mu(mu.size(), 0.0);
  double l_var = 0.0, l_dist = 0.0, l_reg = 0.0;

  // Pull term.
  for (std::size_t p = 0; p < hw; ++p) {
    const int c = owner[p];
    if (c < 0) continue;
    double r2 = 0.0;
    for (int e = 0; e < e_dim; ++e) {
      const double d = mu[c * e_dim + e] - emb[e * hw + p];
      r2 += d * d;
    }
    const double r = std::sqrt(r2);
    const double a = r - cfg.delta_v;
    if (a <= 0.0) continue;
    const double w = 1.0 / (n_inst * count[c]);
    l_var += w * a * a;
    if (grad && r > 0.0) {
      const double k = cfg.w_var * w * 2.0 * a / r;
      for (int e = 0; e < e_dim; ++e) {
        const double g = k * (mu[c * e_dim + e] - emb[e * hw + p]);
        g_mu[c * e_dim + e] += g;
        grad[e * hw + p] -= g;
      }
    }
  }

  // Push term over ordered pairs.
  if (n_inst > 1) {
    const double w = 1.0 / (static_cast<double>(n_inst) * (n_inst - 1));
    for (int a = 0; a < n_inst; ++a) {
      for (int b = a + 1; b < n_inst; ++b) {
        double r2 = 0.0;
        for (int e = 0; e < e_dim; ++e) {
          const double d = mu[a * e_dim + e] - mu[b * e_dim + e];
          r2 += d * d;
        }
        const double r = std::sqrt(r2);
        const double m = 2.0 * cfg.delta_d - r;
        if (m <= 0.0) continue;
        l_dist += 2.0 * w * m * m;
        if (grad && r > 0.0) {
          const double k = cfg.w_dist * 2.0 * w * 2.0 * m / r;
          for (int e = 0; e < e_dim; ++e) {
            const double g = k * (mu[a * e_dim + e] - mu[b * e_dim + e]);
            g_mu[a * e_dim + e] -= g;
            g_mu[b * e_dim + e] += g;
          }
        }
      }
    }
  }

  for (int c = 0; c < n_inst; ++c) {
    double r2 = 0.0;
    for (int e = 0; e < e_dim; ++e) r2 += mu[c * e_dim + e] * mu[c * e_dim + e];
    const double r = std::sqrt(r2);
    l_reg += r / n_inst;
    if (grad && r > 0.0)
      for (int e = 0; e < e_dim; ++e) g_mu[c * e_dim + e] += cfg.w_reg * mu[c * e_dim + e] / (r * n_inst);
  }

  if (grad) {
    for (std::size_t p = 0; p < hw; ++p) {
      const int c = owner[p];
      if (c < 0) continue;
      for (int e = 0; e < e_dim; ++e) grad[e * hw + p] += g_mu[c * e_dim + e] / count[c];
    }
  }
  return cfg.w_var * l_var + cfg.w_dist * l_dist + cfg.w_reg * l_reg;
}

}  // namespace

Var discriminative_loss(const Var& embedding, const std::vector<std::vector<std::uint16_t>>& instances,
                        const DiscriminativeConfig& config) {
  const Tensor& x = embedding.value();
  if (x.rank() != 4) throw ContractError("discriminative_loss: embedding must be [N,E,H,W]");
  const int n = x.dim(0), e_dim = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (static_cast<int>(instances.size()) != n) throw ContractError("discriminative_loss: one id plane per sample");
  for (const auto& ids : instances)
    if (ids.size() != hw) throw ContractError("discriminative_loss: id plane size mismatch");

  Tensor grad = Tensor::zeros_like(x);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * e_dim * hw;
    total += discriminative_single(x.data() + off, e_dim, hw, instances[i], config, grad.data() + off);
  }
  total /= n;
  grad *= 1.0 / n;
  ag::Node* node = embedding.node();
  return ag::make_result(Tensor({1}, total), {embedding},
                         [node, grad](const Tensor& g) { node->accumulate(grad * g[0]); });
}

}  // namespace diffmap::instancing
