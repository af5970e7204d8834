#pragma once

// Brute-force reference implementations of the evaluation metrics and the
// randomized differential checks shared by the unit tests and the acceptance
// runner.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "diffmap/evalkit.hpp"
#include "diffmap/rng.hpp"

namespace oracle {

using diffmap::Rng;
using diffmap::evalkit::EvalInstance;
using diffmap::evalkit::MatchResult;
using diffmap::mapforge::Mask;
using diffmap::mapforge::Point;

inline double iou(const Mask& a, const Mask& b) {
  std::set<std::pair<int, int>> sa, sb, uni;
  for (int r = 0; r < a.height; ++r)
    for (int c = 0; c < a.width; ++c) {
      if (a.at(r, c)) sa.insert({r, c});
      if (b.at(r, c)) sb.insert({r, c});
    }
  long inter = 0;
  for (const auto& p : sa) inter += sb.count(p);
  uni.insert(sa.begin(), sa.end());
  uni.insert(sb.begin(), sb.end());
  if (uni.empty()) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni.size());
}

inline double chamfer_dir(const std::vector<Point>& a, const std::vector<Point>& b) {
  double total = 0.0;
  for (const Point& p : a) {
    std::vector<double> d;
    for (const Point& q : b) d.push_back(std::hypot(p.x - q.x, p.y - q.y));
    total += *std::min_element(d.begin(), d.end());
  }
  return total / a.size();
}

inline double chamfer(const std::vector<Point>& a, const std::vector<Point>& b) {
  return chamfer_dir(a, b) + chamfer_dir(b, a);
}

// Enumerates every partial one-to-one assignment of predictions to eligible
// gts and keeps the lexicographically best one when predictions are ranked by
// confidence and each picks (matched, higher IoU, lower gt index).
inline MatchResult match(const std::vector<EvalInstance>& preds, const std::vector<EvalInstance>& gts,
                         double iou_thr = 0.1, double cd_thr = 1.0) {
  const std::size_t np = preds.size(), ng = gts.size();
  std::vector<std::size_t> order(np);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].confidence > preds[b].confidence; });
  std::vector<std::vector<double>> pair_iou(np, std::vector<double>(ng)), pair_cd(np, std::vector<double>(ng));
  std::vector<std::vector<bool>> ok(np, std::vector<bool>(ng));
  for (std::size_t i = 0; i < np; ++i)
    for (std::size_t g = 0; g < ng; ++g) {
      pair_iou[i][g] = iou(preds[i].mask, gts[g].mask);
      pair_cd[i][g] = chamfer(preds[i].points, gts[g].points);
      ok[i][g] = pair_iou[i][g] > iou_thr && pair_cd[i][g] < cd_thr;
    }

  using Key = std::vector<std::tuple<int, double, int>>;
  Key best_key;
  std::vector<int> best_assign;
  std::vector<int> assign(np, -1);
  std::vector<bool> used(ng, false);
  const auto visit = [&](auto&& self, std::size_t k) -> void {
    if (k == np) {
      Key key;
      for (std::size_t i : order) {
        const int g = assign[i];
        key.emplace_back(g >= 0 ? 1 : 0, g >= 0 ? pair_iou[i][g] : 0.0, g >= 0 ? -g : 0);
      }
      if (best_assign.empty() || key > best_key) {
        best_key = key;
        best_assign = assign;
      }
      return;
    }
    assign[k] = -1;
    self(self, k + 1);
    for (std::size_t g = 0; g < ng; ++g) {
      if (used[g] || !ok[k][g]) continue;
      used[g] = true;
      assign[k] = static_cast<int>(g);
      self(self, k + 1);
      used[g] = false;
      assign[k] = -1;
    }
  };
  visit(visit, 0);

  MatchResult out;
  out.n_gt = static_cast<int>(ng);
  for (std::size_t i : order) {
    diffmap::evalkit::PredictionMatch m;
    m.confidence = preds[i].confidence;
    m.gt_index = best_assign.empty() ? -1 : best_assign[i];
    m.true_positive = m.gt_index >= 0;
    if (m.true_positive) m.chamfer = pair_cd[i][m.gt_index];
    out.predictions.push_back(m);
  }
  return out;
}

// Interpolated AP from confidence-threshold operating points.
inline double average_precision(const MatchResult& m) {
  if (m.n_gt == 0) return m.predictions.empty() ? 1.0 : 0.0;
  double total = 0.0;
  for (int r = 1; r <= 10; ++r) {
    double best = 0.0;
    for (const auto& op : m.predictions) {
      long kept = 0, tp = 0;
      for (const auto& p : m.predictions) {
        if (p.confidence < op.confidence) continue;
        ++kept;
        tp += p.true_positive;
      }
      if (tp * 10 >= static_cast<long>(r) * m.n_gt)
        best = std::max(best, static_cast<double>(tp) / static_cast<double>(kept));
    }
    total += best;
  }
  return total / 10.0;
}

struct Differential {
  int cases = 0;
  int failures = 0;
  std::string first_failure;
  void fail(const std::string& what) {
    if (failures++ == 0) first_failure = what;
  }
  bool ok() const { return failures == 0; }
};

inline Mask random_mask(Rng& rng, int h, int w, double density) {
  Mask m(1, h, w);
  for (auto& v : m.data) v = rng.bernoulli(density);
  return m;
}

inline std::vector<Point> random_points(Rng& rng, int max_n) {
  std::vector<Point> pts(rng.uniform_int(1, max_n));
  for (auto& p : pts) p = {rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)};
  return pts;
}

inline Differential iou_cases(int n, std::uint64_t seed) {
  Rng rng(seed);
  Differential d;
  for (int i = 0; i < n; ++i) {
    const int h = rng.uniform_int(1, 32), w = rng.uniform_int(1, 32);
    const double density = rng.uniform(0.0, 0.6);
    const Mask a = random_mask(rng, h, w, density), b = random_mask(rng, h, w, rng.uniform(0.0, 0.6));
    ++d.cases;
    const double got = diffmap::evalkit::iou(a, b), want = iou(a, b);
    if (got != want) d.fail("iou case " + std::to_string(i));
  }
  return d;
}

inline Differential chamfer_cases(int n, std::uint64_t seed) {
  Rng rng(seed);
  Differential d;
  for (int i = 0; i < n; ++i) {
    const auto a = random_points(rng, 20), b = random_points(rng, 20);
    ++d.cases;
    const double e1 = std::abs(diffmap::evalkit::chamfer_dir(a, b) - chamfer_dir(a, b));
    const double e2 = std::abs(diffmap::evalkit::chamfer(a, b) - chamfer(a, b));
    if (e1 > 1e-9 || e2 > 1e-9) d.fail("chamfer case " + std::to_string(i));
  }
  return d;
}

// Short polylines on a 6 m x 6 m grid; predictions are jittered copies of gts
// or unrelated strokes.
inline std::pair<std::vector<EvalInstance>, std::vector<EvalInstance>> random_instances(Rng& rng) {
  const auto grid = diffmap::mapforge::GridSpec::from_origin(24, 24, 0.25, 0.0, 0.0);
  const auto make = [&](std::vector<Point> pts) {
    EvalInstance inst;
    inst.confidence = rng.uniform();
    inst.mask = diffmap::mapforge::rasterize_polyline(pts, 3, grid);
    inst.points = diffmap::evalkit::densify(pts, 0.1);
    return inst;
  };
  const auto stroke = [&] {
    std::vector<Point> pts(rng.uniform_int(2, 3));
    for (auto& p : pts) p = {rng.uniform(0.0, 6.0), rng.uniform(0.0, 6.0)};
    return pts;
  };
  std::vector<std::vector<Point>> gt_lines(rng.uniform_int(0, 3));
  for (auto& l : gt_lines) l = stroke();
  std::vector<EvalInstance> gts, preds;
  for (const auto& l : gt_lines) gts.push_back(make(l));
  const int np = rng.uniform_int(0, 3);
  for (int i = 0; i < np; ++i) {
    if (!gt_lines.empty() && rng.bernoulli(0.7)) {
      auto pts = gt_lines[rng.uniform_int(0, static_cast<int>(gt_lines.size()) - 1)];
      const double s = rng.uniform(0.0, 0.8);
      for (auto& p : pts) p = {p.x + rng.uniform(-s, s), p.y + rng.uniform(-s, s)};
      preds.push_back(make(pts));
    } else {
      preds.push_back(make(stroke()));
    }
  }
  return {preds, gts};
}

inline bool same_match(const MatchResult& a, const MatchResult& b) {
  if (a.n_gt != b.n_gt || a.predictions.size() != b.predictions.size()) return false;
  for (std::size_t i = 0; i < a.predictions.size(); ++i) {
    const auto &x = a.predictions[i], &y = b.predictions[i];
    if (x.confidence != y.confidence || x.true_positive != y.true_positive || x.gt_index != y.gt_index) return false;
    if (x.true_positive && std::abs(x.chamfer - y.chamfer) > 1e-9) return false;
  }
  return true;
}

inline Differential match_cases(int n, std::uint64_t seed) {
  Rng rng(seed);
  Differential d;
  for (int i = 0; i < n; ++i) {
    const auto [preds, gts] = random_instances(rng);
    ++d.cases;
    if (!same_match(diffmap::evalkit::match_instances(preds, gts), match(preds, gts)))
      d.fail("match case " + std::to_string(i));
  }
  return d;
}

inline MatchResult random_match_result(Rng& rng) {
  MatchResult m;
  m.n_gt = rng.uniform_int(0, 3);
  const int np = rng.uniform_int(0, 4);
  int tps = 0;
  for (int i = 0; i < np; ++i) {
    diffmap::evalkit::PredictionMatch p;
    p.confidence = rng.uniform();
    p.true_positive = tps < m.n_gt && rng.bernoulli(0.6);
    tps += p.true_positive;
    m.predictions.push_back(p);
  }
  std::stable_sort(m.predictions.begin(), m.predictions.end(),
                   [](const auto& a, const auto& b) { return a.confidence > b.confidence; });
  return m;
}

inline Differential ap_cases(int n, std::uint64_t seed) {
  Rng rng(seed);
  Differential d;
  for (int i = 0; i < n; ++i) {
    // Half the cases come from real matchings, half from synthetic tallies.
    MatchResult m;
    if (i % 2 == 0) {
      const auto [preds, gts] = random_instances(rng);
      m = diffmap::evalkit::match_instances(preds, gts);
    } else {
      m = random_match_result(rng);
    }
    ++d.cases;
    if (diffmap::evalkit::average_precision(m) != oracle::average_precision(m)) d.fail("ap case " + std::to_string(i));
  }
  return d;
}

}  // namespace oracle
