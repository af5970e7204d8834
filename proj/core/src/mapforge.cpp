#include "diffmap/mapforge.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <type_traits>

#include "diffmap/errors.hpp"
#include "diffmap/rng.hpp"

namespace diffmap::mapforge {

GridSpec GridSpec::from_origin(int height_px, int width_px, double resolution, double x_min, double y_min) {
  GridSpec g;
  g.height_px = height_px;
  g.width_px = width_px;
  g.resolution = resolution;
  g.x_min = x_min;
  g.y_min = y_min;
  g.x_max = x_min + height_px * resolution;
  g.y_max = y_min + width_px * resolution;
  return g;
}

GridSpec GridSpec::preset(std::string_view name) {
  if (name == "short") return from_origin(128, 64, 0.15, 0.0, -4.8);
  if (name == "long") return from_origin(448, 256, 0.15, 0.0, -19.2);
  throw ConfigError("unknown grid preset '" + std::string(name) + "' (expected short or long)");
}

void GridSpec::validate() const {
  if (height_px <= 0 || width_px <= 0) throw ConfigError("grid must have positive height and width");
  if (!(resolution > 0.0)) throw ConfigError("grid resolution must be > 0");
  if (std::abs(height_px * resolution - (x_max - x_min)) > resolution ||
      std::abs(width_px * resolution - (y_max - y_min)) > resolution) {
    throw ConfigError("grid pixel extent does not span x/y ranges within one pixel");
  }
}

int GridSpec::row_of(double x) const { return static_cast<int>(std::floor((x - x_min) / resolution)); }

SemanticMap SemanticMap::empty(const GridSpec& grid) {
  SemanticMap m;
  m.grid = grid;
  m.semantic = Raster<std::uint8_t>(kNumClasses, grid.height_px, grid.width_px);
  m.instance = Raster<std::uint16_t>(1, grid.height_px, grid.width_px);
  m.direction = Raster<std::uint8_t>(1, grid.height_px, grid.width_px);
  return m;
}

int SemanticMap::instance_count() const {
  int mx = 0;
  for (auto v : instance.data) mx = std::max<int>(mx, v);
  return mx;
}

std::vector<std::string> validate(const SemanticMap& map) {
  std::vector<std::string> problems;
  const int h = map.grid.height_px, w = map.grid.width_px;
  if (map.semantic.channels != kNumClasses || map.semantic.height != h || map.semantic.width != w)
    problems.push_back("semantic shape does not match grid");
  if (map.instance.height != h || map.instance.width != w) problems.push_back("instance shape does not match grid");
  if (map.direction.height != h || map.direction.width != w) problems.push_back("direction shape does not match grid");
  if (!problems.empty()) return problems;

  for (auto v : map.semantic.data) {
    if (v > 1) {
      problems.push_back("semantic mask is not {0,1}-valued");
      break;
    }
  }
  std::vector<bool> seen;
  std::size_t bad_support = 0, bad_direction = 0;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const int id = map.instance.at(r, c);
      const int dir = map.direction.at(r, c);
      if (id > 0) {
        if (static_cast<std::size_t>(id) >= seen.size()) seen.resize(id + 1, false);
        seen[id] = true;
        bool any = false;
        for (int k = 0; k < kNumClasses; ++k) any = any || map.semantic.at(k, r, c);
        if (!any) ++bad_support;
      }
      if (dir > kNumDirectionBins) ++bad_direction;
      if (dir > 0 && id == 0) ++bad_direction;
    }
  }
  if (bad_support) problems.push_back(std::to_string(bad_support) + " instance pixels outside semantic support");
  if (bad_direction) problems.push_back(std::to_string(bad_direction) + " invalid direction labels");
  for (std::size_t id = 1; id < seen.size(); ++id) {
    if (!seen[id]) {
      problems.push_back("instance IDs not contiguous: missing " + std::to_string(id));
      break;
    }
  }
  return problems;
}

double polyline_length(const std::vector<Point>& points) {
  double total = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) total += std::hypot(points[i].x - points[i - 1].x, points[i].y - points[i - 1].y);
  return total;
}

void CorruptionConfig::validate() const {
  auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!rate_ok(dropout_patch_rate) || !rate_ok(flip_label_rate)) throw ConfigError("corruption rates must lie in [0,1]");
  if (patch_size_px < 0 || jitter_px < 0 || erosion_dilation_px < 0 || blur_sigma_px < 0.0)
    throw ConfigError("corruption sizes must be >= 0");
  if (dropout_patch_rate > 0.0 && patch_size_px == 0) throw ConfigError("patch dropout needs patch_size_px >= 1");
}

SceneConfig SceneConfig::preset(std::string_view name) {
  SceneConfig cfg;
  cfg.grid = GridSpec::preset(name);
  if (name == "long") {
    cfg.max_bend_m = 0.8;
    cfg.max_lanes = 6;
  }
  return cfg;
}

void SceneConfig::validate() const {
  grid.validate();
  corruption.validate();
  if (p_ped < 0.0 || p_ped > 1.0) throw ConfigError("p_ped must lie in [0,1]");
  for (int s : stroke_px)
    if (s < 1) throw ConfigError("stroke widths must be >= 1 px");
  if (min_lanes < 2 || max_lanes < min_lanes) throw ConfigError("lane counts must satisfy 2 <= min_lanes <= max_lanes");
  if (!(lane_width_min_m > 0.0) || lane_width_max_m < lane_width_min_m) throw ConfigError("invalid lane width range");
  if (min_stripes < 1 || max_stripes < min_stripes) throw ConfigError("invalid stripe count range");
}

// --- rasterization ----------------------------------------------------------

namespace {

double point_segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

// Calls visit(row, col, distance, segment_index) for every pixel within radius of some segment.
template <class F>
void for_each_covered_pixel(const std::vector<Point>& pts, double radius, const GridSpec& grid, F&& visit) {
  if (pts.empty()) return;
  const std::size_t segments = pts.size() == 1 ? 1 : pts.size() - 1;
  for (std::size_t s = 0; s < segments; ++s) {
    const Point a = pts[s];
    const Point b = pts.size() == 1 ? pts[0] : pts[s + 1];
    const double lo_x = std::min(a.x, b.x) - radius, hi_x = std::max(a.x, b.x) + radius;
    const double lo_y = std::min(a.y, b.y) - radius, hi_y = std::max(a.y, b.y) + radius;
    const int r0 = std::max(0, static_cast<int>(std::floor((lo_x - grid.x_min) / grid.resolution)) - 1);
    const int r1 = std::min(grid.height_px - 1, static_cast<int>(std::floor((hi_x - grid.x_min) / grid.resolution)) + 1);
    const int c0 = std::max(0, static_cast<int>(std::floor((lo_y - grid.y_min) / grid.resolution)) - 1);
    const int c1 = std::min(grid.width_px - 1, static_cast<int>(std::floor((hi_y - grid.y_min) / grid.resolution)) + 1);
    for (int r = r0; r <= r1; ++r) {
      for (int c = c0; c <= c1; ++c) {
        const double d = point_segment_distance(grid.pixel_center(r, c), a, b);
        if (d <= radius) visit(r, c, d, s);
      }
    }
  }
}

}  // namespace

Mask rasterize_polyline(const std::vector<Point>& points, int width_px, const GridSpec& grid) {
  if (width_px < 1) throw ContractError("rasterize_polyline: width_px must be >= 1");
  Mask mask(1, grid.height_px, grid.width_px);
  const double radius = width_px * grid.resolution / 2.0;
  for_each_covered_pixel(points, radius, grid, [&](int r, int c, double, std::size_t) { mask.at(r, c) = 1; });
  return mask;
}

int direction_bin(double dx, double dy) {
  double angle = std::atan2(dy, dx);
  if (angle < 0.0) angle += 2.0 * M_PI;
  const int bin = static_cast<int>(angle / (2.0 * M_PI / kNumDirectionBins));
  return std::min(bin, kNumDirectionBins - 1) + 1;
}

void paint_instance(SemanticMap& map, const Polyline& line, int width_px, std::uint16_t instance_id) {
  const GridSpec& grid = map.grid;
  const double radius = width_px * grid.resolution / 2.0;
  std::vector<double> best(grid.pixels(), std::numeric_limits<double>::infinity());
  std::vector<int> best_seg(grid.pixels(), -1);
  for_each_covered_pixel(line.points, radius, grid, [&](int r, int c, double d, std::size_t s) {
    const std::size_t idx = static_cast<std::size_t>(r) * grid.width_px + c;
    if (d < best[idx]) {
      best[idx] = d;
      best_seg[idx] = static_cast<int>(s);
    }
  });
  for (int r = 0; r < grid.height_px; ++r) {
    for (int c = 0; c < grid.width_px; ++c) {
      const int s = best_seg[static_cast<std::size_t>(r) * grid.width_px + c];
      if (s < 0) continue;
      map.semantic.at(line.class_id, r, c) = 1;
      map.instance.at(r, c) = instance_id;
      int bin = 1;
      if (line.points.size() > 1) {
        const Point a = line.points[s], b = line.points[s + 1];
        bin = direction_bin(b.x - a.x, b.y - a.y);
      }
      map.direction.at(r, c) = static_cast<std::uint8_t>(bin);
    }
  }
}

// --- scene generation -------------------------------------------------------

namespace {

struct Road {
  double c0, c1, c2, x_mid, half_width, lane_width;
  int lanes;
  double center(double x) const {
    const double u = x - x_mid;
    return c0 + c1 * u + c2 * u * u;
  }
  double slope(double x) const { return c1 + 2.0 * c2 * (x - x_mid); }
};

std::vector<Point> lateral_curve(const Road& road, const GridSpec& grid, double offset) {
  const double step = 0.5;
  const double x0 = grid.x_min - 1.0, x1 = grid.x_max + 1.0;
  const int n = static_cast<int>(std::ceil((x1 - x0) / step));
  std::vector<Point> pts;
  for (int i = 0; i <= n; ++i) {
    const double x = x0 + (x1 - x0) * i / n;
    pts.push_back({x, road.center(x) + offset});
  }
  return pts;
}

}  // namespace

MapSample generate_scene(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  const GridSpec& grid = config.grid;
  Rng rng(mix_seed(seed, 0x5ce9e));

  Road road{};
  road.x_mid = 0.5 * (grid.x_min + grid.x_max);
  const double half_len = 0.5 * (grid.x_max - grid.x_min) + 1.0;
  road.c1 = rng.uniform(-config.max_heading, config.max_heading);
  road.c2 = rng.uniform(-1.0, 1.0) * config.max_bend_m / (half_len * half_len);
  const double deviation = std::abs(road.c1) * half_len + std::abs(road.c2) * half_len * half_len;
  const double y_half = 0.5 * (grid.y_max - grid.y_min);
  const double y_mid = 0.5 * (grid.y_max + grid.y_min);
  const double room = y_half - config.edge_margin_m - deviation;

  road.lane_width = rng.uniform(config.lane_width_min_m, config.lane_width_max_m);
  road.lanes = rng.uniform_int(config.min_lanes, config.max_lanes);
  while (road.lanes > config.min_lanes && road.lanes * road.lane_width / 2.0 > room) --road.lanes;
  if (road.lanes * road.lane_width / 2.0 > room) road.lane_width = 2.0 * room / road.lanes;
  if (road.lane_width <= 0.0) throw ConfigError("grid too narrow for the configured road");
  road.half_width = road.lanes * road.lane_width / 2.0;
  const double slack = std::max(0.0, room - road.half_width);
  road.c0 = y_mid + rng.uniform(-slack, slack);

  MapSample sample;
  sample.scene_seed = seed;
  sample.gt = SemanticMap::empty(grid);

  PolylineSet& lines = sample.vectors;
  for (int i = 1; i < road.lanes; ++i) {
    lines.push_back({kDivider, 1.0, lateral_curve(road, grid, -road.half_width + i * road.lane_width)});
  }
  const bool has_crossing = rng.bernoulli(config.p_ped);
  if (has_crossing) {
    const double span = grid.x_max - grid.x_min;
    const double xp = rng.uniform(grid.x_min + 0.25 * span, grid.x_max - 0.25 * span);
    const int stripes = rng.uniform_int(config.min_stripes, config.max_stripes);
    const double r_ped = config.stroke_px[kPedCrossing] * grid.resolution / 2.0;
    const double r_bnd = config.stroke_px[kBoundary] * grid.resolution / 2.0;
    const double reach = road.half_width - (r_ped + r_bnd + grid.resolution);
    for (int j = 0; j < stripes; ++j) {
      const double x = xp + (j - 0.5 * (stripes - 1)) * config.stripe_spacing_m;
      const double yc = road.center(x);
      // Unit normal to the road axis at x.
      const double sl = road.slope(x);
      const double norm = std::hypot(sl, 1.0);
      const double nx = -sl / norm, ny = 1.0 / norm;
      lines.push_back({kPedCrossing, 1.0, {{x - reach * nx, yc - reach * ny}, {x + reach * nx, yc + reach * ny}}});
    }
  }
  lines.push_back({kBoundary, 1.0, lateral_curve(road, grid, -road.half_width)});
  lines.push_back({kBoundary, 1.0, lateral_curve(road, grid, road.half_width)});

  std::uint16_t next_id = 1;
  for (const auto& line : lines) paint_instance(sample.gt, line, config.stroke_px[line.class_id], next_id++);

  // Instances fully covered by higher-priority strokes vanish from the ID grid; relabel to stay contiguous.
  std::vector<std::uint16_t> remap(next_id, 0);
  std::uint16_t compact = 0;
  for (auto v : sample.gt.instance.data)
    if (v && !remap[v]) remap[v] = 1;
  for (std::size_t id = 1; id < remap.size(); ++id)
    if (remap[id]) remap[id] = ++compact;
  for (auto& v : sample.gt.instance.data) v = remap[v];

  sample.observation = corrupt(sample.gt.semantic, config.corruption, seed);
  sample.meta["generator"] = "mapforge";
  sample.meta["lanes"] = std::to_string(road.lanes);
  sample.meta["ped_crossing"] = has_crossing ? "1" : "0";
  for (int k = 0; k < kNumClasses; ++k) sample.meta["stroke_px." + std::string(kClassNames[k])] = std::to_string(config.stroke_px[k]);
  return sample;
}

// --- corruption -------------------------------------------------------------

namespace {

void morph(Raster<float>& img, int channel, int radius, bool dilate) {
  const int h = img.height, w = img.width;
  std::vector<float> src(img.data.begin() + static_cast<std::ptrdiff_t>(channel * img.plane()),
                         img.data.begin() + static_cast<std::ptrdiff_t>((channel + 1) * img.plane()));
  std::vector<float> tmp(src.size());
  // Separable square structuring element; outside the grid counts as background.
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      float v = dilate ? 0.0f : 1.0f;
      for (int d = -radius; d <= radius; ++d) {
        const int cc = c + d;
        const float s = (cc >= 0 && cc < w) ? src[r * w + cc] : 0.0f;
        v = dilate ? std::max(v, s) : std::min(v, s);
      }
      tmp[r * w + c] = v;
    }
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      float v = dilate ? 0.0f : 1.0f;
      for (int d = -radius; d <= radius; ++d) {
        const int rr = r + d;
        const float s = (rr >= 0 && rr < h) ? tmp[rr * w + c] : 0.0f;
        v = dilate ? std::max(v, s) : std::min(v, s);
      }
      img.at(channel, r, c) = v;
    }
  }
}

void gaussian_blur(Raster<float>& img, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& k : kernel) k /= total;
  const int h = img.height, w = img.width;
  std::vector<double> tmp(img.plane());
  for (int ch = 0; ch < img.channels; ++ch) {
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double acc = 0.0;
        for (int d = -radius; d <= radius; ++d) {
          const int cc = c + d;
          if (cc >= 0 && cc < w) acc += kernel[d + radius] * img.at(ch, r, cc);
        }
        tmp[r * w + c] = acc;
      }
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double acc = 0.0;
        for (int d = -radius; d <= radius; ++d) {
          const int rr = r + d;
          if (rr >= 0 && rr < h) acc += kernel[d + radius] * tmp[rr * w + c];
        }
        img.at(ch, r, c) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
  }
}

}  // namespace

Raster<float> corrupt(const Raster<std::uint8_t>& gt_semantic, const CorruptionConfig& config, std::uint64_t seed) {
  config.validate();
  Raster<float> out(gt_semantic.channels, gt_semantic.height, gt_semantic.width);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = gt_semantic.data[i] ? 1.0f : 0.0f;
  const int h = out.height, w = out.width;

  if (config.dropout_patch_rate > 0.0) {
    Rng rng(mix_seed(seed, 1));
    const int p = config.patch_size_px;
    for (int pr = 0; pr < h; pr += p)
      for (int pc = 0; pc < w; pc += p) {
        if (!rng.bernoulli(config.dropout_patch_rate)) continue;
        for (int ch = 0; ch < out.channels; ++ch)
          for (int r = pr; r < std::min(h, pr + p); ++r)
            for (int c = pc; c < std::min(w, pc + p); ++c) out.at(ch, r, c) = 0.0f;
      }
  }
  if (config.erosion_dilation_px > 0) {
    Rng rng(mix_seed(seed, 2));
    for (int ch = 0; ch < out.channels; ++ch) morph(out, ch, config.erosion_dilation_px, rng.bernoulli(0.5));
  }
  if (config.jitter_px > 0) {
    Rng rng(mix_seed(seed, 3));
    constexpr int kBlock = 8;
    for (int ch = 0; ch < out.channels; ++ch) {
      for (int r0 = 0; r0 < h; r0 += kBlock) {
        const int shift = rng.uniform_int(-config.jitter_px, config.jitter_px);
        if (shift == 0) continue;
        for (int r = r0; r < std::min(h, r0 + kBlock); ++r) {
          std::vector<float> row(w, 0.0f);
          for (int c = 0; c < w; ++c) {
            const int src = c - shift;
            if (src >= 0 && src < w) row[c] = out.at(ch, r, src);
          }
          for (int c = 0; c < w; ++c) out.at(ch, r, c) = row[c];
        }
      }
    }
  }
  if (config.blur_sigma_px > 0.0) gaussian_blur(out, config.blur_sigma_px);
  if (config.flip_label_rate > 0.0) {
    Rng rng(mix_seed(seed, 5));
    for (auto& v : out.data)
      if (rng.bernoulli(config.flip_label_rate)) v = 1.0f - v;
  }
  return out;
}

// --- padding ----------------------------------------------------------------

int round_up(int value, int multiple) {
  if (multiple < 1) throw ContractError("pad multiple must be >= 1");
  return (value + multiple - 1) / multiple * multiple;
}

template <class T>
Padded<T> pad_to_multiple(const Raster<T>& in, int k) {
  Padded<T> out;
  out.original_height = in.height;
  out.original_width = in.width;
  out.raster = Raster<T>(in.channels, round_up(in.height, k), round_up(in.width, k));
  for (int ch = 0; ch < in.channels; ++ch)
    for (int r = 0; r < in.height; ++r)
      for (int c = 0; c < in.width; ++c) out.raster.at(ch, r, c) = in.at(ch, r, c);
  return out;
}

template <class T>
Raster<T> crop(const Padded<T>& padded) {
  Raster<T> out(padded.raster.channels, padded.original_height, padded.original_width);
  for (int ch = 0; ch < out.channels; ++ch)
    for (int r = 0; r < out.height; ++r)
      for (int c = 0; c < out.width; ++c)
        out.at(ch, r, c) = padded.raster.at(ch, r + padded.row_offset, c + padded.col_offset);
  return out;
}

template Padded<std::uint8_t> pad_to_multiple(const Raster<std::uint8_t>&, int);
template Padded<std::uint16_t> pad_to_multiple(const Raster<std::uint16_t>&, int);
template Padded<float> pad_to_multiple(const Raster<float>&, int);
template Raster<std::uint8_t> crop(const Padded<std::uint8_t>&);
template Raster<std::uint16_t> crop(const Padded<std::uint16_t>&);
template Raster<float> crop(const Padded<float>&);

PaddedMap pad_to_multiple(const SemanticMap& map, int k) {
  PaddedMap out;
  out.original_height = map.grid.height_px;
  out.original_width = map.grid.width_px;
  out.map.grid = GridSpec::from_origin(round_up(map.grid.height_px, k), round_up(map.grid.width_px, k),
                                       map.grid.resolution, map.grid.x_min, map.grid.y_min);
  out.map.semantic = pad_to_multiple(map.semantic, k).raster;
  out.map.instance = pad_to_multiple(map.instance, k).raster;
  out.map.direction = pad_to_multiple(map.direction, k).raster;
  return out;
}

SemanticMap crop(const PaddedMap& padded) {
  auto crop_one = [&](const auto& raster) {
    using T = typename std::decay_t<decltype(raster.data)>::value_type;
    Padded<T> p{raster, padded.row_offset, padded.col_offset, padded.original_height, padded.original_width};
    return crop(p);
  };
  SemanticMap out;
  out.grid = GridSpec::from_origin(padded.original_height, padded.original_width, padded.map.grid.resolution,
                                   padded.map.grid.x_min, padded.map.grid.y_min);
  out.semantic = crop_one(padded.map.semantic);
  out.instance = crop_one(padded.map.instance);
  out.direction = crop_one(padded.map.direction);
  return out;
}

// --- mask utilities ---------------------------------------------------------

int count_components(const Raster<std::uint8_t>& mask, int channel) {
  const int h = mask.height, w = mask.width;
  std::vector<std::uint8_t> seen(mask.plane(), 0);
  std::vector<int> stack;
  int count = 0;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!mask.at(channel, r, c) || seen[r * w + c]) continue;
      ++count;
      seen[r * w + c] = 1;
      stack.push_back(r * w + c);
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int pr = p / w, pc = p % w;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const int nr = pr + dr, nc = pc + dc;
            if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
            if (mask.at(channel, nr, nc) && !seen[nr * w + nc]) {
              seen[nr * w + nc] = 1;
              stack.push_back(nr * w + nc);
            }
          }
      }
    }
  }
  return count;
}

Raster<std::uint8_t> binarize(const Raster<float>& values, float threshold) {
  Raster<std::uint8_t> out(values.channels, values.height, values.width);
  for (std::size_t i = 0; i < values.data.size(); ++i) out.data[i] = values.data[i] > threshold ? 1 : 0;
  return out;
}

Mask class_mask(const SemanticMap& map, int class_id) {
  Mask m(1, map.grid.height_px, map.grid.width_px);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) m.at(r, c) = map.semantic.at(class_id, r, c);
  return m;
}

}  // namespace diffmap::mapforge
