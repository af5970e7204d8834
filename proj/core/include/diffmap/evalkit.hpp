#pragma once

#include <optional>
#include <string>
#include <vector>

#include "diffmap/mapforge.hpp"

namespace diffmap::evalkit {

using mapforge::Mask;
using mapforge::Point;
using mapforge::PolylineSet;
using mapforge::SemanticMap;

// Single-channel masks of equal size; both empty gives 1.
double iou(const Mask& a, const Mask& b);

// Mean over a of the distance to the nearest point of b. Both non-empty.
double chamfer_dir(const std::vector<Point>& a, const std::vector<Point>& b);
double chamfer(const std::vector<Point>& a, const std::vector<Point>& b);

// Inserts points so consecutive spacing is at most `spacing` meters.
std::vector<Point> densify(const std::vector<Point>& points, double spacing = 0.1);

// One vectorized instance prepared for matching.
struct EvalInstance {
  double confidence = 1.0;
  Mask mask;                  // rasterized at gt stroke width
  std::vector<Point> points;  // densified curve
};

struct PredictionMatch {
  double confidence = 0.0;
  bool true_positive = false;
  int gt_index = -1;
  double chamfer = 0.0;  // valid for true positives
};

struct MatchResult {
  std::vector<PredictionMatch> predictions;  // in descending confidence order
  int n_gt = 0;
  void append(const MatchResult& other);
};

struct MatchConfig {
  double iou_threshold = 0.1;
  double cd_threshold = 1.0;
};

// Greedy confidence-ordered matching of one class. Each prediction takes the
// unmatched gt of highest IoU among those with IoU > thr and CD < thr.
MatchResult match_instances(const std::vector<EvalInstance>& preds, const std::vector<EvalInstance>& gts,
                            const MatchConfig& config = {});

// Mean of interpolated precision at recall 0.1..1.0.
double average_precision(const MatchResult& match);

// A map with its vectorized instances.
struct EvalMap {
  SemanticMap map;
  PolylineSet lines;
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  std::string label() const;
};

// Cuts [c0, c1, ..., cn] -> n intervals.
std::vector<Interval> intervals_from_cuts(const std::vector<double>& cuts);

// Splits a polyline at the interval bounds and keeps the pieces inside.
std::vector<std::vector<Point>> clip_polyline(const std::vector<Point>& points, const Interval& interval);

// Raw per-sample tallies for one class and one region; summed over samples.
struct CellTally {
  long intersection = 0;
  long unite = 0;
  MatchResult match;
  void add(const CellTally& other);
};

struct CellMetrics {
  std::optional<double> iou;
  std::optional<double> cd;
  std::optional<double> ap;
  bool defined() const { return iou.has_value(); }
};
CellMetrics finalize(const CellTally& tally);

struct EvalConfig {
  std::array<int, mapforge::kNumClasses> stroke_px = {3, 3, 3};
  double densify_spacing = 0.1;
  MatchConfig match;
};

// Tallies over the whole grid (no clipping).
std::vector<CellTally> tally_global(const EvalMap& pred, const EvalMap& gt, const EvalConfig& config = {});
// Tallies per interval: result[interval][class].
std::vector<std::vector<CellTally>> tally_intervals(const EvalMap& pred, const EvalMap& gt,
                                                    const std::vector<Interval>& intervals,
                                                    const EvalConfig& config = {});

struct Report {
  std::vector<Interval> intervals;
  std::vector<std::vector<CellMetrics>> cells;  // [interval][class]
  std::vector<CellMetrics> means;               // per interval, over defined classes
  int samples = 0;

  std::string to_json() const;
  std::string to_csv() const;
  std::string to_table() const;
};

Report make_report(const std::vector<Interval>& intervals, const std::vector<std::vector<CellTally>>& tallies,
                   int samples);

// Single-sample convenience: per-interval metrics.
Report interval_eval(const EvalMap& pred, const EvalMap& gt, const std::vector<Interval>& intervals,
                     const EvalConfig& config = {});

}  // namespace diffmap::evalkit
