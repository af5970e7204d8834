#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>

#include "diffmap/errors.hpp"
#include "diffmap/instancing.hpp"

namespace diffmap::instancing {

using mapforge::Point;

namespace {

constexpr std::array<int, 8> kDr = {-1, 0, 1, 0, -1, -1, 1, 1};  // 4-neighbors first
constexpr std::array<int, 8> kDc = {0, 1, 0, -1, -1, 1, 1, -1};

// Density clustering of the given pixels in embedding space. Returns a
// cluster index per pixel, or an empty vector when no core point exists.
std::vector<int> dbscan(const std::vector<std::size_t>& pixels, const Tensor& embedding, const ClusterConfig& cfg) {
  const int e_dim = embedding.dim(1);
  const std::size_t hw = static_cast<std::size_t>(embedding.dim(2)) * embedding.dim(3);
  const std::size_t n = pixels.size();
  std::vector<double> pts(n * e_dim);
  for (std::size_t i = 0; i < n; ++i)
    for (int e = 0; e < e_dim; ++e) pts[i * e_dim + e] = embedding[e * hw + pixels[i]];

  // Sort by the first coordinate so neighbor scans can stop early.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pts[a * e_dim] < pts[b * e_dim]; });
  std::vector<std::size_t> rank(n);
  for (std::size_t k = 0; k < n; ++k) rank[order[k]] = k;

  const double r2max = cfg.radius * cfg.radius;
  auto dist2 = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (int e = 0; e < e_dim; ++e) {
      const double d = pts[a * e_dim + e] - pts[b * e_dim + e];
      s += d * d;
    }
    return s;
  };
  auto for_neighbors = [&](std::size_t i, auto&& fn) {
    const double x0 = pts[i * e_dim];
    for (std::size_t k = rank[i] + 1; k-- > 0;) {
      const std::size_t j = order[k];
      if (x0 - pts[j * e_dim] > cfg.radius) break;
      if (dist2(i, j) <= r2max) fn(j);
    }
    for (std::size_t k = rank[i] + 1; k < n; ++k) {
      const std::size_t j = order[k];
      if (pts[j * e_dim] - x0 > cfg.radius) break;
      if (dist2(i, j) <= r2max) fn(j);
    }
  };

  std::vector<std::uint8_t> core(n, 0);
  bool any_core = false;
  for (std::size_t i = 0; i < n; ++i) {
    int count = 0;
    for_neighbors(i, [&](std::size_t) { ++count; });
    core[i] = count >= cfg.min_points;
    any_core = any_core || core[i];
  }
  if (!any_core) return {};

  std::vector<int> label(n, -1);
  int clusters = 0;
  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] >= 0 || !core[i]) continue;
    label[i] = clusters;
    queue.push_back(i);
    while (!queue.empty()) {
      const std::size_t q = queue.front();
      queue.pop_front();
      if (!core[q]) continue;
      for_neighbors(q, [&](std::size_t j) {
        if (label[j] < 0) {
          label[j] = clusters;
          queue.push_back(j);
        }
      });
    }
    ++clusters;
  }
  // Noise joins the cluster of its nearest core point.
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] >= 0) continue;
    double best = std::numeric_limits<double>::infinity();
    int best_label = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!core[j]) continue;
      const double d = dist2(i, j);
      if (d < best) {
        best = d;
        best_label = label[j];
      }
    }
    label[i] = best_label;
  }
  return label;
}

// 8-connected components over the given pixel set.
std::vector<int> pixel_components(const std::vector<std::size_t>& pixels, int h, int w) {
  std::vector<int> index(static_cast<std::size_t>(h) * w, -1);
  for (std::size_t i = 0; i < pixels.size(); ++i) index[pixels[i]] = static_cast<int>(i);
  std::vector<int> label(pixels.size(), -1);
  int count = 0;
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (label[i] >= 0) continue;
    label[i] = count;
    stack.push_back(i);
    while (!stack.empty()) {
      const std::size_t p = pixels[stack.back()];
      stack.pop_back();
      const int r = static_cast<int>(p) / w, c = static_cast<int>(p) % w;
      for (int k = 0; k < 8; ++k) {
        const int nr = r + kDr[k], nc = c + kDc[k];
        if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
        const int j = index[static_cast<std::size_t>(nr) * w + nc];
        if (j >= 0 && label[j] < 0) {
          label[j] = count;
          stack.push_back(j);
        }
      }
    }
    ++count;
  }
  return label;
}

double segment_distance(const Point& p, const Point& a, const Point& b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

int argmax_channel(const Tensor& logits, std::size_t pixel) {
  const int k = logits.dim(1);
  const std::size_t hw = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  int best = 0;
  for (int c = 1; c < k; ++c)
    if (logits[c * hw + pixel] > logits[best * hw + pixel]) best = c;
  return best;
}

double bin_heading(int bin) { return (bin - 0.5) * 2.0 * M_PI / mapforge::kNumDirectionBins; }

}  // namespace

InstanceMap cluster_instances(const Raster<std::uint8_t>& sem_mask, const Tensor& embedding,
                              const ClusterConfig& config) {
  const int h = sem_mask.height, w = sem_mask.width;
  if (embedding.rank() != 4 || embedding.dim(0) != 1 || embedding.dim(2) != h || embedding.dim(3) != w) {
    throw ContractError("cluster_instances: embedding " + shape_str(embedding.shape()) + " does not match mask " +
                        std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t hw = sem_mask.plane();
  std::vector<int> owner(hw, -1);
  for (int c = 0; c < sem_mask.channels; ++c)
    for (std::size_t p = 0; p < hw; ++p)
      if (sem_mask.data[c * hw + p]) owner[p] = c;

  // Provisional labels (class, cluster) packed per pixel.
  std::vector<long> provisional(hw, -1);
  for (int c = 0; c < sem_mask.channels; ++c) {
    std::vector<std::size_t> pixels;
    for (std::size_t p = 0; p < hw; ++p)
      if (owner[p] == c) pixels.push_back(p);
    if (pixels.empty()) continue;
    std::vector<int> label = dbscan(pixels, embedding, config);
    if (label.empty()) label = pixel_components(pixels, h, w);
    for (std::size_t i = 0; i < pixels.size(); ++i)
      provisional[pixels[i]] = static_cast<long>(c) * static_cast<long>(hw + 1) + label[i];
  }

  InstanceMap out;
  out.ids = Raster<std::uint16_t>(1, h, w);
  std::vector<std::pair<long, int>> seen;  // provisional -> final id
  for (std::size_t p = 0; p < hw; ++p) {
    if (provisional[p] < 0) continue;
    auto it = std::find_if(seen.begin(), seen.end(), [&](const auto& s) { return s.first == provisional[p]; });
    int id = 0;
    if (it == seen.end()) {
      id = static_cast<int>(seen.size()) + 1;
      seen.emplace_back(provisional[p], id);
      out.class_of.push_back(owner[p]);
    } else {
      id = it->second;
    }
    out.ids.data[p] = static_cast<std::uint16_t>(id);
  }
  return out;
}

Raster<std::uint8_t> skeletonize(const Raster<std::uint8_t>& mask) {
  const int h = mask.height, w = mask.width;
  Raster<std::uint8_t> img(1, h, w);
  for (std::size_t p = 0; p < mask.plane(); ++p) img.data[p] = mask.data[p] ? 1 : 0;
  auto px = [&](int r, int c) -> int { return (r < 0 || r >= h || c < 0 || c >= w) ? 0 : img.at(r, c); };

  bool changed = true;
  std::vector<std::size_t> removal;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      removal.clear();
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
          if (!img.at(r, c)) continue;
          // P2..P9 clockwise from north.
          const int n[8] = {px(r - 1, c), px(r - 1, c + 1), px(r, c + 1), px(r + 1, c + 1),
                            px(r + 1, c), px(r + 1, c - 1), px(r, c - 1), px(r - 1, c - 1)};
          int b = 0, a = 0;
          for (int k = 0; k < 8; ++k) {
            b += n[k];
            if (n[k] == 0 && n[(k + 1) % 8] == 1) ++a;
          }
          if (b < 2 || b > 6 || a != 1) continue;
          if (pass == 0) {
            if (n[0] * n[2] * n[4] != 0 || n[2] * n[4] * n[6] != 0) continue;
          } else {
            if (n[0] * n[2] * n[6] != 0 || n[0] * n[4] * n[6] != 0) continue;
          }
          removal.push_back(static_cast<std::size_t>(r) * w + c);
        }
      }
      for (std::size_t p : removal) img.data[p] = 0;
      changed = changed || !removal.empty();
    }
  }
  return img;
}

std::vector<Point> douglas_peucker(const std::vector<Point>& points, double tolerance) {
  if (points.size() <= 2) return points;
  std::vector<std::uint8_t> keep(points.size(), 0);
  keep.front() = keep.back() = 1;
  std::vector<std::pair<std::size_t, std::size_t>> stack{{0, points.size() - 1}};
  while (!stack.empty()) {
    const auto [lo, hi] = stack.back();
    stack.pop_back();
    double worst = -1.0;
    std::size_t split = lo;
    for (std::size_t i = lo + 1; i < hi; ++i) {
      const double d = segment_distance(points[i], points[lo], points[hi]);
      if (d > worst) {
        worst = d;
        split = i;
      }
    }
    if (worst > tolerance) {
      keep[split] = 1;
      stack.emplace_back(lo, split);
      stack.emplace_back(split, hi);
    }
  }
  std::vector<Point> out;
  for (std::size_t i = 0; i < points.size(); ++i)
    if (keep[i]) out.push_back(points[i]);
  return out;
}

PolylineSet trace_polylines(const InstanceMap& instances, const PixelHeads& heads, const GridSpec& grid,
                            const TraceConfig& config) {
  const int h = instances.ids.height, w = instances.ids.width;
  const std::size_t hw = instances.ids.plane();
  const bool have_dir = !heads.dir_logits.empty();
  const bool have_sem = !heads.sem_logits.empty();
  for (const Tensor* t : {&heads.dir_logits, &heads.sem_logits}) {
    if (!t->empty() && (t->rank() != 4 || t->dim(0) != 1 || t->dim(2) != h || t->dim(3) != w))
      throw ContractError("trace_polylines: head tensor " + shape_str(t->shape()) + " does not match instance map");
  }

  PolylineSet out;
  for (int id = 1; id <= instances.count(); ++id) {
    Raster<std::uint8_t> mask(1, h, w);
    double conf_sum = 0.0;
    int n_pix = 0;
    for (std::size_t p = 0; p < hw; ++p) {
      if (instances.ids.data[p] != id) continue;
      mask.data[p] = 1;
      ++n_pix;
      if (have_sem) {
        const Tensor& s = heads.sem_logits;
        const int k = s.dim(1);
        double mx = s[p];
        for (int c = 1; c < k; ++c) mx = std::max(mx, s[c * hw + p]);
        double z = 0.0;
        for (int c = 0; c < k; ++c) z += std::exp(s[c * hw + p] - mx);
        conf_sum += 1.0 - std::exp(s[p] - mx) / z;
      }
    }
    if (n_pix == 0) continue;

    const Raster<std::uint8_t> skel = skeletonize(mask);
    std::vector<std::size_t> pixels;
    for (std::size_t p = 0; p < hw; ++p)
      if (skel.data[p]) pixels.push_back(p);
    if (pixels.empty())
      for (std::size_t p = 0; p < hw; ++p)
        if (mask.data[p]) pixels.push_back(p);

    // Trace the largest skeleton component.
    const std::vector<int> comp = pixel_components(pixels, h, w);
    std::vector<int> sizes(*std::max_element(comp.begin(), comp.end()) + 1, 0);
    for (int c : comp) ++sizes[c];
    const int keep = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    std::vector<int> on(hw, 0);
    std::size_t first = hw;
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      if (comp[i] != keep) continue;
      on[pixels[i]] = 1;
      first = std::min(first, pixels[i]);
    }

    // BFS with neighbors ordered by adjacency, then by agreement with the
    // predicted direction at the current pixel.
    auto bfs = [&](std::size_t start, std::vector<long>& parent) {
      std::vector<int> depth(hw, -1);
      parent.assign(hw, -1);
      std::deque<std::size_t> queue{start};
      depth[start] = 0;
      std::size_t far = start;
      while (!queue.empty()) {
        const std::size_t p = queue.front();
        queue.pop_front();
        if (depth[p] > depth[far]) far = p;
        const int r = static_cast<int>(p / w), c = static_cast<int>(p % w);
        std::array<int, 8> nb{};
        std::iota(nb.begin(), nb.end(), 0);
        if (have_dir) {
          const int bin = argmax_channel(heads.dir_logits, p);
          if (bin > 0) {
            const double hx = std::cos(bin_heading(bin)), hy = std::sin(bin_heading(bin));
            auto score = [&](int k) { return std::abs(kDr[k] * hx + kDc[k] * hy) / std::hypot(kDr[k], kDc[k]); };
            std::stable_sort(nb.begin(), nb.begin() + 4, [&](int a, int b) { return score(a) > score(b); });
            std::stable_sort(nb.begin() + 4, nb.end(), [&](int a, int b) { return score(a) > score(b); });
          }
        }
        for (int k : nb) {
          const int nr = r + kDr[k], nc = c + kDc[k];
          if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
          const std::size_t q = static_cast<std::size_t>(nr) * w + nc;
          if (!on[q] || depth[q] >= 0) continue;
          depth[q] = depth[p] + 1;
          parent[q] = static_cast<long>(p);
          queue.push_back(q);
        }
      }
      return far;
    };

    std::vector<long> parent;
    const std::size_t start = bfs(first, parent);
    const std::size_t end = bfs(start, parent);
    std::vector<std::size_t> path;
    for (long p = static_cast<long>(end); p >= 0; p = parent[p]) path.push_back(static_cast<std::size_t>(p));
    std::reverse(path.begin(), path.end());

    std::vector<Point> pts;
    for (std::size_t p : path) pts.push_back(grid.pixel_center(static_cast<int>(p / w), static_cast<int>(p % w)));

    // Orient along the mean predicted heading when directions are available.
    if (have_dir && pts.size() > 1) {
      double hx = 0.0, hy = 0.0;
      for (std::size_t p : path) {
        const int bin = argmax_channel(heads.dir_logits, p);
        if (bin > 0) {
          hx += std::cos(bin_heading(bin));
          hy += std::sin(bin_heading(bin));
        }
      }
      const double dx = pts.back().x - pts.front().x, dy = pts.back().y - pts.front().y;
      if (dx * hx + dy * hy < 0.0) std::reverse(pts.begin(), pts.end());
    }

    mapforge::Polyline line;
    line.class_id = instances.class_of[id - 1];
    line.confidence = have_sem ? std::clamp(conf_sum / n_pix, 0.0, 1.0) : 1.0;
    line.points = douglas_peucker(pts, config.simplify_tolerance_m);
    out.push_back(std::move(line));
  }
  return out;
}

}  // namespace diffmap::instancing
