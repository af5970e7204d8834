#include "diffmap/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "diffmap/errors.hpp"

namespace diffmap::evalkit {

double iou(const Mask& a, const Mask& b) {
  if (a.channels != 1 || b.channels != 1 || a.height != b.height || a.width != b.width) {
    throw ContractError("iou: mask shapes differ (" + std::to_string(a.height) + "x" + std::to_string(a.width) +
                        " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  }
  long inter = 0, uni = 0;
  for (std::size_t p = 0; p < a.data.size(); ++p) {
    const bool x = a.data[p] != 0, y = b.data[p] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double chamfer_dir(const std::vector<Point>& a, const std::vector<Point>& b) {
  if (a.empty() || b.empty()) throw ContractError("chamfer_dir: point sets must be non-empty");
  double total = 0.0;
  for (const Point& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const Point& q : b) best = std::min(best, (p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y));
    total += std::sqrt(best);
  }
  return total / static_cast<double>(a.size());
}

double chamfer(const std::vector<Point>& a, const std::vector<Point>& b) {
  return chamfer_dir(a, b) + chamfer_dir(b, a);
}

std::vector<Point> densify(const std::vector<Point>& points, double spacing) {
  if (spacing <= 0.0) throw ConfigError("densify: spacing must be positive");
  if (points.size() < 2) return points;
  std::vector<Point> out{points.front()};
  for (std::size_t i = 1; i < points.size(); ++i) {
    const Point& a = points[i - 1];
    const Point& b = points[i];
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    const int pieces = std::max(1, static_cast<int>(std::ceil(len / spacing - 1e-9)));
    for (int k = 1; k < pieces; ++k) {
      const double t = static_cast<double>(k) / pieces;
      out.push_back({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)});
    }
    out.push_back(b);
  }
  return out;
}

void MatchResult::append(const MatchResult& other) {
  predictions.insert(predictions.end(), other.predictions.begin(), other.predictions.end());
  n_gt += other.n_gt;
}

MatchResult match_instances(const std::vector<EvalInstance>& preds, const std::vector<EvalInstance>& gts,
                            const MatchConfig& config) {
  std::vector<std::size_t> order(preds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].confidence > preds[b].confidence; });

  MatchResult result;
  result.n_gt = static_cast<int>(gts.size());
  std::vector<std::uint8_t> taken(gts.size(), 0);
  for (std::size_t i : order) {
    const EvalInstance& p = preds[i];
    PredictionMatch m;
    m.confidence = p.confidence;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(p.mask, gts[g].mask);
      if (!(v > config.iou_threshold) || !(v > best_iou)) continue;
      if (p.points.empty() || gts[g].points.empty()) continue;
      const double cd = chamfer(p.points, gts[g].points);
      if (!(cd < config.cd_threshold)) continue;
      best_iou = v;
      m.true_positive = true;
      m.gt_index = static_cast<int>(g);
      m.chamfer = cd;
    }
    if (m.true_positive) taken[m.gt_index] = 1;
    result.predictions.push_back(m);
  }
  return result;
}

double average_precision(const MatchResult& match) {
  if (match.n_gt == 0) return match.predictions.empty() ? 1.0 : 0.0;
  std::vector<PredictionMatch> preds = match.predictions;
  std::stable_sort(preds.begin(), preds.end(),
                   [](const PredictionMatch& a, const PredictionMatch& b) { return a.confidence > b.confidence; });
  std::vector<long> tp_at;
  std::vector<double> precision_at;
  long tp = 0;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    tp += preds[k].true_positive;
    tp_at.push_back(tp);
    precision_at.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
  }
  double total = 0.0;
  for (int r = 1; r <= 10; ++r) {
    double best = 0.0;
    for (std::size_t k = 0; k < tp_at.size(); ++k)
      if (tp_at[k] * 10 >= static_cast<long>(r) * match.n_gt) best = std::max(best, precision_at[k]);
    total += best;
  }
  return total / 10.0;
}

std::string Interval::label() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g-%g", lo, hi);
  return buf;
}

std::vector<Interval> intervals_from_cuts(const std::vector<double>& cuts) {
  if (cuts.size() < 2) throw ConfigError("intervals need at least two cut points");
  std::vector<Interval> out;
  for (std::size_t i = 1; i < cuts.size(); ++i) {
    if (!(cuts[i] > cuts[i - 1])) throw ConfigError("interval cuts must be strictly increasing");
    out.push_back({cuts[i - 1], cuts[i]});
  }
  return out;
}

std::vector<std::vector<Point>> clip_polyline(const std::vector<Point>& points, const Interval& iv) {
  std::vector<std::vector<Point>> pieces;
  if (points.size() == 1) {
    if (points[0].x >= iv.lo && points[0].x <= iv.hi) pieces.push_back(points);
    return pieces;
  }
  std::vector<Point> current;
  bool open = false;  // current piece ends at the previous vertex
  for (std::size_t i = 1; i < points.size(); ++i) {
    const Point& a = points[i - 1];
    const Point& b = points[i];
    const double dx = b.x - a.x;
    double t0 = 0.0, t1 = 1.0;
    if (dx == 0.0) {
      if (a.x < iv.lo || a.x > iv.hi) t0 = 1.0, t1 = 0.0;
    } else {
      double ta = (iv.lo - a.x) / dx, tb = (iv.hi - a.x) / dx;
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(0.0, ta);
      t1 = std::min(1.0, tb);
    }
    auto at = [&](double t) -> Point {
      if (t == 0.0) return a;
      if (t == 1.0) return b;
      return {a.x + t * dx, a.y + t * (b.y - a.y)};
    };
    const bool has_length = t1 > t0;
    if (!(t1 >= t0) || !has_length) {
      if (open) pieces.push_back(std::move(current));
      current.clear();
      open = false;
      continue;
    }
    if (open && t0 == 0.0) {
      current.push_back(at(t1));
    } else {
      if (open) pieces.push_back(std::move(current));
      current = {at(t0), at(t1)};
    }
    open = t1 == 1.0;
    if (!open) {
      pieces.push_back(std::move(current));
      current.clear();
    }
  }
  if (open) pieces.push_back(std::move(current));
  return pieces;
}

void CellTally::add(const CellTally& other) {
  intersection += other.intersection;
  unite += other.unite;
  match.append(other.match);
}

CellMetrics finalize(const CellTally& tally) {
  CellMetrics m;
  if (tally.unite == 0 && tally.match.n_gt == 0 && tally.match.predictions.empty()) return m;
  m.iou = tally.unite == 0 ? 1.0 : static_cast<double>(tally.intersection) / static_cast<double>(tally.unite);
  m.ap = average_precision(tally.match);
  double cd = 0.0;
  int tps = 0;
  for (const auto& p : tally.match.predictions) {
    if (!p.true_positive) continue;
    cd += p.chamfer;
    ++tps;
  }
  if (tps > 0) m.cd = cd / tps;
  return m;
}

namespace {

void check_compatible(const EvalMap& pred, const EvalMap& gt) {
  if (!(pred.map.grid == gt.map.grid)) throw ContractError("evaluation: prediction and gt grids differ");
}

// Rows whose pixel centres fall in [lo, hi), or every row when clip is false.
struct RowRange {
  int begin = 0;
  int end = 0;
};

RowRange rows_for(const mapforge::GridSpec& grid, const Interval* iv) {
  if (!iv) return {0, grid.height_px};
  RowRange r{grid.height_px, grid.height_px};
  for (int row = 0; row < grid.height_px; ++row) {
    const double x = grid.pixel_center(row, 0).x;
    if (x >= iv->lo && x < iv->hi) {
      r.begin = std::min(r.begin, row);
      r.end = row + 1;
    }
  }
  if (r.begin >= r.end) r = {0, 0};
  return r;
}

std::vector<EvalInstance> instances_of(const EvalMap& m, int cls, const Interval* iv, RowRange rows,
                                       const EvalConfig& cfg) {
  std::vector<EvalInstance> out;
  const auto& grid = m.map.grid;
  for (const auto& line : m.lines) {
    if (line.class_id != cls || line.points.empty()) continue;
    std::vector<std::vector<Point>> pieces;
    if (iv) {
      pieces = clip_polyline(line.points, *iv);
    } else {
      pieces.push_back(line.points);
    }
    for (auto& piece : pieces) {
      EvalInstance inst;
      inst.confidence = line.confidence;
      inst.mask = mapforge::rasterize_polyline(piece, cfg.stroke_px[cls], grid);
      for (int r = 0; r < grid.height_px; ++r)
        if (r < rows.begin || r >= rows.end)
          for (int c = 0; c < grid.width_px; ++c) inst.mask.at(r, c) = 0;
      inst.points = densify(piece, cfg.densify_spacing);
      out.push_back(std::move(inst));
    }
  }
  return out;
}

std::vector<CellTally> tally_region(const EvalMap& pred, const EvalMap& gt, const Interval* iv,
                                    const EvalConfig& cfg) {
  check_compatible(pred, gt);
  const RowRange rows = rows_for(gt.map.grid, iv);
  const int w = gt.map.grid.width_px;
  std::vector<CellTally> out(mapforge::kNumClasses);
  for (int cls = 0; cls < mapforge::kNumClasses; ++cls) {
    CellTally& t = out[cls];
    for (int r = rows.begin; r < rows.end; ++r) {
      for (int c = 0; c < w; ++c) {
        const bool a = pred.map.semantic.at(cls, r, c) != 0;
        const bool b = gt.map.semantic.at(cls, r, c) != 0;
        t.intersection += a && b;
        t.unite += a || b;
      }
    }
    t.match = match_instances(instances_of(pred, cls, iv, rows, cfg), instances_of(gt, cls, iv, rows, cfg),
                              cfg.match);
  }
  return out;
}

nlohmann::json metric_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::string fmt_metric(const std::optional<double>& v, double scale) {
  if (!v) return "   -  ";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%6.2f", *v * scale);
  return buf;
}

}  // namespace

std::vector<CellTally> tally_global(const EvalMap& pred, const EvalMap& gt, const EvalConfig& config) {
  return tally_region(pred, gt, nullptr, config);
}

std::vector<std::vector<CellTally>> tally_intervals(const EvalMap& pred, const EvalMap& gt,
                                                    const std::vector<Interval>& intervals,
                                                    const EvalConfig& config) {
  std::vector<std::vector<CellTally>> out;
  for (const Interval& iv : intervals) out.push_back(tally_region(pred, gt, &iv, config));
  return out;
}

Report make_report(const std::vector<Interval>& intervals, const std::vector<std::vector<CellTally>>& tallies,
                   int samples) {
  Report rep;
  rep.intervals = intervals;
  rep.samples = samples;
  for (const auto& row : tallies) {
    std::vector<CellMetrics> cells;
    CellMetrics mean;
    double sums[3] = {0, 0, 0};
    int counts[3] = {0, 0, 0};
    for (const CellTally& t : row) {
      cells.push_back(finalize(t));
      const CellMetrics& c = cells.back();
      const std::optional<double>* vals[3] = {&c.iou, &c.cd, &c.ap};
      for (int k = 0; k < 3; ++k)
        if (*vals[k]) sums[k] += **vals[k], ++counts[k];
    }
    if (counts[0]) mean.iou = sums[0] / counts[0];
    if (counts[1]) mean.cd = sums[1] / counts[1];
    if (counts[2]) mean.ap = sums[2] / counts[2];
    rep.cells.push_back(std::move(cells));
    rep.means.push_back(mean);
  }
  return rep;
}

Report interval_eval(const EvalMap& pred, const EvalMap& gt, const std::vector<Interval>& intervals,
                     const EvalConfig& config) {
  return make_report(intervals, tally_intervals(pred, gt, intervals, config), 1);
}

std::string Report::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["samples"] = samples;
  j["intervals"] = nlohmann::ordered_json::array();
  for (const Interval& iv : intervals) j["intervals"].push_back({{"label", iv.label()}, {"lo", iv.lo}, {"hi", iv.hi}});
  auto cell = [](const CellMetrics& c) {
    return nlohmann::ordered_json{{"iou", metric_json(c.iou)}, {"cd", metric_json(c.cd)}, {"ap", metric_json(c.ap)}};
  };
  nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
  for (int cls = 0; cls < mapforge::kNumClasses; ++cls) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < intervals.size(); ++i) rows[intervals[i].label()] = cell(cells[i][cls]);
    per_class[std::string(mapforge::kClassNames[cls])] = rows;
  }
  j["per_class"] = per_class;
  nlohmann::ordered_json means_j = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < intervals.size(); ++i) means_j[intervals[i].label()] = cell(means[i]);
  j["means"] = means_j;
  return j.dump(2) + "\n";
}

std::string Report::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "class,interval,iou,cd,ap\n";
  auto v = [](const std::optional<double>& x) {
    std::ostringstream s;
    s.precision(17);
    if (x) s << *x;
    return s.str();
  };
  for (std::size_t i = 0; i < intervals.size(); ++i) {
    for (int cls = 0; cls < mapforge::kNumClasses; ++cls) {
      const CellMetrics& c = cells[i][cls];
      out << mapforge::kClassNames[cls] << ',' << intervals[i].label() << ',' << v(c.iou) << ',' << v(c.cd) << ','
          << v(c.ap) << '\n';
    }
    out << "mean," << intervals[i].label() << ',' << v(means[i].iou) << ',' << v(means[i].cd) << ','
        << v(means[i].ap) << '\n';
  }
  return out.str();
}

std::string Report::to_table() const {
  std::ostringstream out;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-14s", "class");
  out << buf;
  for (const Interval& iv : intervals) {
    std::snprintf(buf, sizeof buf, " | %-22s", iv.label().c_str());
    out << buf;
  }
  out << "\n" << std::string(14, ' ');
  for (std::size_t i = 0; i < intervals.size(); ++i) out << " |  IoU     CD     AP  ";
  out << "\n";
  auto row = [&](const std::string& name, auto get) {
    std::snprintf(buf, sizeof buf, "%-14s", name.c_str());
    out << buf;
    for (std::size_t i = 0; i < intervals.size(); ++i) {
      const CellMetrics& c = get(i);
      out << " | " << fmt_metric(c.iou, 100) << ' ' << fmt_metric(c.cd, 1) << ' ' << fmt_metric(c.ap, 100);
    }
    out << "\n";
  };
  for (int cls = 0; cls < mapforge::kNumClasses; ++cls)
    row(std::string(mapforge::kClassNames[cls]), [&](std::size_t i) -> const CellMetrics& { return cells[i][cls]; });
  row("mean", [&](std::size_t i) -> const CellMetrics& { return means[i]; });
  return out.str();
}

}  // namespace diffmap::evalkit
