#include <fstream>

#include "diffmap/checkpoint.hpp"
#include "diffmap/errors.hpp"
#include "diffmap/mapforge.hpp"
#include "diffmap/rng.hpp"
#include "json_util.hpp"

namespace diffmap::mapforge {

using detail::json;
using detail::require_field;

namespace {

constexpr int kSchemaVersion = 1;

json grid_to_json(const GridSpec& g) {
  return {{"height_px", g.height_px},
          {"width_px", g.width_px},
          {"resolution", g.resolution},
          {"x_range", {g.x_min, g.x_max}},
          {"y_range", {g.y_min, g.y_max}}};
}

GridSpec grid_from_json(const json& j) {
  const std::string ctx = "manifest.grid";
  GridSpec g;
  g.height_px = require_field<int>(j, "height_px", ctx);
  g.width_px = require_field<int>(j, "width_px", ctx);
  g.resolution = require_field<double>(j, "resolution", ctx);
  const auto xr = require_field<std::vector<double>>(j, "x_range", ctx);
  const auto yr = require_field<std::vector<double>>(j, "y_range", ctx);
  if (xr.size() != 2 || yr.size() != 2) throw FormatError(ctx + ": x_range/y_range must have two entries");
  g.x_min = xr[0];
  g.x_max = xr[1];
  g.y_min = yr[0];
  g.y_max = yr[1];
  try {
    g.validate();
  } catch (const ConfigError& e) {
    throw FormatError(ctx + ": " + e.what());
  }
  return g;
}

json polylines_to_json(const PolylineSet& lines) {
  json arr = json::array();
  for (const auto& l : lines) {
    json pts = json::array();
    for (const auto& p : l.points) pts.push_back({p.x, p.y});
    arr.push_back({{"class_id", l.class_id}, {"confidence", l.confidence}, {"points", pts}});
  }
  return arr;
}

PolylineSet polylines_from_json(const json& arr, const std::string& ctx) {
  if (!arr.is_array()) throw FormatError(ctx + ": expected a JSON array");
  PolylineSet out;
  for (const auto& item : arr) {
    Polyline l;
    l.class_id = require_field<int>(item, "class_id", ctx);
    l.confidence = require_field<double>(item, "confidence", ctx);
    for (const auto& p : require_field<std::vector<std::vector<double>>>(item, "points", ctx)) {
      if (p.size() != 2) throw FormatError(ctx + ": points must be [x, y] pairs");
      l.points.push_back({p[0], p[1]});
    }
    if (l.class_id < 0 || l.class_id >= kNumClasses) throw FormatError(ctx + ": class_id out of range");
    if (l.points.empty()) throw FormatError(ctx + ": polyline without points");
    out.push_back(std::move(l));
  }
  return out;
}

void check_shape(const json& shapes, const std::string& field, const std::vector<int>& expected) {
  const auto shape = require_field<std::vector<int>>(shapes, field, "manifest.shapes");
  if (shape != expected) {
    throw FormatError("manifest.shapes." + field + ": shape mismatch with grid (got " + shape_str(shape) +
                      ", expected " + shape_str(expected) + ")");
  }
}

}  // namespace

std::string polylines_json_text(const PolylineSet& lines) { return polylines_to_json(lines).dump(1); }
PolylineSet polylines_from_text(const std::string& text, const std::string& ctx) {
  return polylines_from_json(detail::parse_json(text, ctx), ctx);
}

void save_sample(const MapSample& sample, const fs::path& dir) {
  fs::create_directories(dir);
  const auto& g = sample.gt.grid;
  const int h = g.height_px, w = g.width_px;
  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["scene_seed"] = sample.scene_seed;
  manifest["grid"] = grid_to_json(g);
  manifest["class_names"] = std::vector<std::string>(kClassNames.begin(), kClassNames.end());
  manifest["n_dir"] = kNumDirectionBins;
  manifest["dtypes"] = {{"semantic", "u8"}, {"instance", "u16"}, {"direction", "u8"}, {"observation", "f32"}};
  manifest["shapes"] = {{"semantic", {kNumClasses, h, w}},
                        {"instance", {h, w}},
                        {"direction", {h, w}},
                        {"observation", {kNumClasses, h, w}}};
  manifest["endianness"] = "little";
  manifest["meta"] = sample.meta;
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  io::write_le<std::uint8_t>(dir / "semantic.u8.bin", sample.gt.semantic.data);
  io::write_le<std::uint16_t>(dir / "instance.u16.bin", sample.gt.instance.data);
  io::write_le<std::uint8_t>(dir / "direction.u8.bin", sample.gt.direction.data);
  io::write_le<float>(dir / "observation.f32.bin", sample.observation.data);
  io::write_text(dir / "polylines.json", polylines_to_json(sample.vectors).dump(1) + "\n");
}

MapSample load_sample(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw FormatError(dir.string() + ": missing manifest.json");
  const json manifest = detail::parse_json(io::read_text(dir / "manifest.json"), "manifest.json");
  const int version = require_field<int>(manifest, "schema_version", "manifest");
  if (version != kSchemaVersion) throw FormatError("manifest.schema_version: unsupported version " + std::to_string(version));

  MapSample s;
  s.scene_seed = require_field<std::uint64_t>(manifest, "scene_seed", "manifest");
  s.gt.grid = grid_from_json(require_field<json>(manifest, "grid", "manifest"));
  const auto names = require_field<std::vector<std::string>>(manifest, "class_names", "manifest");
  if (names != std::vector<std::string>(kClassNames.begin(), kClassNames.end()))
    throw FormatError("manifest.class_names: unexpected class list");
  if (require_field<int>(manifest, "n_dir", "manifest") != kNumDirectionBins)
    throw FormatError("manifest.n_dir: unsupported direction bin count");
  const auto dtypes = require_field<json>(manifest, "dtypes", "manifest");
  const std::map<std::string, std::string> expected_dtypes = {
      {"semantic", "u8"}, {"instance", "u16"}, {"direction", "u8"}, {"observation", "f32"}};
  for (const auto& [field, dtype] : expected_dtypes) {
    if (require_field<std::string>(dtypes, field, "manifest.dtypes") != dtype)
      throw FormatError("manifest.dtypes." + field + ": expected " + dtype);
  }
  const int h = s.gt.grid.height_px, w = s.gt.grid.width_px;
  const auto shapes = require_field<json>(manifest, "shapes", "manifest");
  check_shape(shapes, "semantic", {kNumClasses, h, w});
  check_shape(shapes, "instance", {h, w});
  check_shape(shapes, "direction", {h, w});
  check_shape(shapes, "observation", {kNumClasses, h, w});
  if (manifest.contains("meta")) s.meta = manifest["meta"].get<std::map<std::string, std::string>>();

  const std::size_t plane = static_cast<std::size_t>(h) * w;
  s.gt.semantic = Raster<std::uint8_t>(kNumClasses, h, w);
  s.gt.semantic.data = io::read_le<std::uint8_t>(dir / "semantic.u8.bin", kNumClasses * plane);
  s.gt.instance = Raster<std::uint16_t>(1, h, w);
  s.gt.instance.data = io::read_le<std::uint16_t>(dir / "instance.u16.bin", plane);
  s.gt.direction = Raster<std::uint8_t>(1, h, w);
  s.gt.direction.data = io::read_le<std::uint8_t>(dir / "direction.u8.bin", plane);
  s.observation = Raster<float>(kNumClasses, h, w);
  s.observation.data = io::read_le<float>(dir / "observation.f32.bin", kNumClasses * plane);
  if (fs::exists(dir / "polylines.json"))
    s.vectors = polylines_from_json(detail::parse_json(io::read_text(dir / "polylines.json"), "polylines.json"),
                                    "polylines.json");
  return s;
}

std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", index);
  return buf;
}

void write_dataset_index(const fs::path& dir, const DatasetIndex& index) {
  fs::create_directories(dir);
  json j;
  j["schema_version"] = kSchemaVersion;
  j["samples"] = index.sample_ids;
  j["preset"] = index.preset;
  j["seed"] = index.seed;
  io::write_text(dir / "dataset.json", j.dump(2) + "\n");
}

DatasetIndex read_dataset_index(const fs::path& dir) {
  if (!fs::exists(dir / "dataset.json")) throw FormatError(dir.string() + ": missing dataset.json");
  const json j = detail::parse_json(io::read_text(dir / "dataset.json"), "dataset.json");
  DatasetIndex idx;
  idx.sample_ids = require_field<std::vector<std::string>>(j, "samples", "dataset.json");
  idx.preset = j.value("preset", std::string());
  idx.seed = j.value("seed", std::uint64_t{0});
  return idx;
}

DatasetIndex generate_dataset(const fs::path& dir, int count, std::uint64_t seed, const SceneConfig& config,
                              const std::string& preset_name) {
  if (count < 1) throw ConfigError("dataset size must be >= 1");
  DatasetIndex idx;
  idx.preset = preset_name;
  idx.seed = seed;
  for (int i = 0; i < count; ++i) {
    const std::string id = sample_id(i);
    MapSample s = generate_scene(mix_seed(seed, static_cast<std::uint64_t>(i)), config);
    s.meta["sample_id"] = id;
    save_sample(s, dir / id);
    idx.sample_ids.push_back(id);
  }
  write_dataset_index(dir, idx);
  return idx;
}

}  // namespace diffmap::mapforge
