#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace diffmap::mapforge {

inline constexpr int kNumClasses = 3;
inline constexpr int kNumDirectionBins = 36;

// Raster channel order; also the overlap priority (later wins).
enum MapClass : int { kDivider = 0, kPedCrossing = 1, kBoundary = 2 };
inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {"divider", "ped_crossing", "boundary"};

// Metric position: x is the forward axis (grid rows), y the lateral axis (grid columns).
struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

// Pixel (r, c) covers x in [x_min + r*res, x_min + (r+1)*res) and
// y in [y_min + c*res, y_min + (c+1)*res).
struct GridSpec {
  int height_px = 128;
  int width_px = 64;
  double resolution = 0.15;
  double x_min = 0.0;
  double x_max = 19.2;
  double y_min = -4.8;
  double y_max = 4.8;

  static GridSpec from_origin(int height_px, int width_px, double resolution, double x_min, double y_min);
  // "short": 128x64 toy grid; "long": 448x256 padded long-range grid.
  static GridSpec preset(std::string_view name);

  void validate() const;
  std::size_t pixels() const { return static_cast<std::size_t>(height_px) * width_px; }
  Point pixel_center(int row, int col) const {
    return {x_min + (row + 0.5) * resolution, y_min + (col + 0.5) * resolution};
  }
  int row_of(double x) const;  // may fall outside [0, height_px)
  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

template <class T>
struct Raster {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Raster() = default;
  Raster(int c, int h, int w, T fill = T{})
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  T& at(int c, int r, int col) { return data[(static_cast<std::size_t>(c) * height + r) * width + col]; }
  const T& at(int c, int r, int col) const { return data[(static_cast<std::size_t>(c) * height + r) * width + col]; }
  T& at(int r, int col) { return at(0, r, col); }
  const T& at(int r, int col) const { return at(0, r, col); }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  friend bool operator==(const Raster&, const Raster&) = default;
};

using Mask = Raster<std::uint8_t>;  // single channel {0,1}

struct SemanticMap {
  Raster<std::uint8_t> semantic;    // kNumClasses x H x W, {0,1}
  Raster<std::uint16_t> instance;   // 1 x H x W, 0 = background
  Raster<std::uint8_t> direction;   // 1 x H x W, 0 = background, 1..kNumDirectionBins
  GridSpec grid;

  static SemanticMap empty(const GridSpec& grid);
  int instance_count() const;
  friend bool operator==(const SemanticMap&, const SemanticMap&) = default;
};

// Returns human-readable invariant violations; empty when the map is valid.
std::vector<std::string> validate(const SemanticMap& map);

struct Polyline {
  int class_id = 0;
  double confidence = 1.0;
  std::vector<Point> points;
  friend bool operator==(const Polyline&, const Polyline&) = default;
};
using PolylineSet = std::vector<Polyline>;

double polyline_length(const std::vector<Point>& points);

struct MapSample {
  SemanticMap gt;
  Raster<float> observation;  // kNumClasses x H x W in [0,1]
  std::uint64_t scene_seed = 0;
  std::map<std::string, std::string> meta;
  PolylineSet vectors;  // ground-truth polylines the masks were rendered from
  friend bool operator==(const MapSample&, const MapSample&) = default;
};

struct CorruptionConfig {
  double dropout_patch_rate = 0.1;
  int patch_size_px = 8;
  double blur_sigma_px = 0.8;
  int jitter_px = 1;
  int erosion_dilation_px = 1;
  double flip_label_rate = 0.01;

  static CorruptionConfig identity() { return {0.0, 0, 0.0, 0, 0, 0.0}; }
  void validate() const;
};

struct SceneConfig {
  GridSpec grid;
  double p_ped = 0.5;
  std::array<int, kNumClasses> stroke_px = {3, 3, 3};
  int min_lanes = 2;
  int max_lanes = 4;
  double lane_width_min_m = 2.8;
  double lane_width_max_m = 3.6;
  double edge_margin_m = 0.4;
  double max_heading = 0.06;     // lateral drift per forward meter
  double max_bend_m = 0.25;      // quadratic bow at the grid ends
  int min_stripes = 3;
  int max_stripes = 5;
  double stripe_spacing_m = 0.75;
  CorruptionConfig corruption;

  static SceneConfig preset(std::string_view name);
  void validate() const;
};

MapSample generate_scene(std::uint64_t seed, const SceneConfig& config);

// Pixels whose centers lie within width_px * resolution / 2 of the polyline.
Mask rasterize_polyline(const std::vector<Point>& points, int width_px, const GridSpec& grid);

// Renders one instance into the map, overwriting instance/direction labels.
void paint_instance(SemanticMap& map, const Polyline& line, int width_px, std::uint16_t instance_id);

int direction_bin(double dx, double dy);

Raster<float> corrupt(const Raster<std::uint8_t>& gt_semantic, const CorruptionConfig& config, std::uint64_t seed);

template <class T>
struct Padded {
  Raster<T> raster;
  int row_offset = 0;
  int col_offset = 0;
  int original_height = 0;
  int original_width = 0;
};

int round_up(int value, int multiple);

template <class T>
Padded<T> pad_to_multiple(const Raster<T>& in, int k = 64);
template <class T>
Raster<T> crop(const Padded<T>& padded);

struct PaddedMap {
  SemanticMap map;
  int row_offset = 0;
  int col_offset = 0;
  int original_height = 0;
  int original_width = 0;
};
PaddedMap pad_to_multiple(const SemanticMap& map, int k = 64);
SemanticMap crop(const PaddedMap& padded);

// Connected components (8-connectivity) of one channel; returns the count.
int count_components(const Raster<std::uint8_t>& mask, int channel = 0);
// Per-pixel binarization at threshold (strictly greater).
Raster<std::uint8_t> binarize(const Raster<float>& values, float threshold = 0.5f);

// Single-channel mask of one semantic class.
Mask class_mask(const SemanticMap& map, int class_id);

// --- on-disk format ---------------------------------------------------------

namespace fs = std::filesystem;

void save_sample(const MapSample& sample, const fs::path& dir);
// Throws FormatError naming the offending manifest field.
MapSample load_sample(const fs::path& dir);

// PolylineSet JSON: [{"class_id", "confidence", "points": [[x_m, y_m], ...]}, ...]
std::string polylines_json_text(const PolylineSet& lines);
PolylineSet polylines_from_text(const std::string& text, const std::string& context);

struct DatasetIndex {
  std::vector<std::string> sample_ids;
  std::string preset;
  std::uint64_t seed = 0;
};

void write_dataset_index(const fs::path& dir, const DatasetIndex& index);
DatasetIndex read_dataset_index(const fs::path& dir);
std::string sample_id(int index);

// Generates `count` scenes with per-sample seeds derived from `seed`.
DatasetIndex generate_dataset(const fs::path& dir, int count, std::uint64_t seed, const SceneConfig& config,
                              const std::string& preset_name);

}  // namespace diffmap::mapforge
