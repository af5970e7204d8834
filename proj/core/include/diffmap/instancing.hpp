#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffmap/mapforge.hpp"
#include "diffmap/nn.hpp"

namespace diffmap::instancing {

using ag::Var;
using mapforge::GridSpec;
using mapforge::PolylineSet;
using mapforge::Raster;
using mapforge::SemanticMap;

struct HeadConfig {
  int feature_width = 8;
  int hidden = 32;
  int embedding_dim = 8;
  int num_classes = mapforge::kNumClasses;
  int direction_bins = mapforge::kNumDirectionBins;

  void validate() const;
};

// sem_logits [N, C+1, H, W] (index 0 = background), embedding [N, E, H, W],
// dir_logits [N, N_dir+1, H, W] (index 0 = background).
struct HeadOutputs {
  Var sem_logits;
  Var embedding;
  Var dir_logits;
};

class HeadSet {
 public:
  HeadSet() = default;
  HeadSet(const HeadConfig& config, Rng& rng);

  HeadOutputs operator()(const Var& features) const;
  // Semantic and embedding maps only; dir_logits is left undefined.
  HeadOutputs dense(const Var& features) const;
  // Direction logits [1, bins, P, 1] at flat (n, h, w) pixel indices.
  Var direction_at(const Var& features, const std::vector<std::size_t>& pixels) const;
  void collect(ag::ParamList& out, const std::string& prefix) const;
  const HeadConfig& config() const { return config_; }

 private:
  void check_features(const Var& features) const;
  HeadConfig config_;
  nn::PixelMlp sem_, emb_, dir_;
};

// Per-pixel single-label class index: 0 background, c+1 for class c, with
// overlaps resolved by priority divider < ped_crossing < boundary.
std::vector<int> semantic_labels(const SemanticMap& map);
// Direction bin on instance pixels, -1 (ignored) elsewhere.
std::vector<int> direction_labels(const SemanticMap& map);

// labels are the concatenation of per-sample label planes.
Var cross_entropy_loss(const Var& sem_logits, const std::vector<int>& labels);
Var direction_loss(const Var& dir_logits, const std::vector<int>& labels);

struct DiscriminativeConfig {
  double delta_v = 0.5;
  double delta_d = 3.0;
  double w_var = 1.0;
  double w_dist = 1.0;
  double w_reg = 0.001;
};

// Mean over the batch of the per-sample discriminative loss. instances holds
// one H*W id plane per batch item (0 = background).
Var discriminative_loss(const Var& embedding, const std::vector<std::vector<std::uint16_t>>& instances,
                        const DiscriminativeConfig& config = {});

// --- vectorization ----------------------------------------------------------

struct ClusterConfig {
  double radius = 1.5;  // embedding-space neighborhood
  int min_points = 3;
};

struct InstanceMap {
  Raster<std::uint16_t> ids;  // 1 x H x W, 0 = background, contiguous from 1
  std::vector<int> class_of;  // class of instance id (index id - 1)
  int count() const { return static_cast<int>(class_of.size()); }
};

// sem_mask: kNumClasses x H x W binary; embedding: [1, E, H, W]. Pixels set in
// several channels belong to the highest-priority class.
InstanceMap cluster_instances(const Raster<std::uint8_t>& sem_mask, const Tensor& embedding,
                              const ClusterConfig& config = {});

struct TraceConfig {
  double simplify_tolerance_m = 0.2;
};

// Per-pixel head values of one sample, [1, K, H, W]; either may be empty.
struct PixelHeads {
  Tensor sem_logits;
  Tensor dir_logits;
};

PolylineSet trace_polylines(const InstanceMap& instances, const PixelHeads& heads, const GridSpec& grid,
                            const TraceConfig& config = {});

// Zhang-Suen thinning of a single-channel binary mask.
Raster<std::uint8_t> skeletonize(const Raster<std::uint8_t>& mask);
std::vector<mapforge::Point> douglas_peucker(const std::vector<mapforge::Point>& points, double tolerance);

}  // namespace diffmap::instancing
