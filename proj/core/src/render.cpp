#include <algorithm>
#include <cstdio>
#include <memory>

#include <png.h>

#include "diffmap/errors.hpp"
#include "diffmap/pipeline.hpp"

namespace diffmap::pipeline {

namespace {

constexpr int kScale = 2;
constexpr int kGap = 4;
constexpr int kLegendHeight = 20;
constexpr int kSwatch = 12;

constexpr Rgb kPalette[mapforge::kNumClasses] = {{230, 159, 0}, {86, 180, 233}, {0, 158, 115}};
constexpr Rgb kBackground = {24, 24, 24};
constexpr Rgb kFrame = {96, 96, 96};

void put(Image& img, int x, int y, Rgb c) {
  const std::size_t o = (static_cast<std::size_t>(y) * img.width + x) * 3;
  img.rgb[o] = c.r;
  img.rgb[o + 1] = c.g;
  img.rgb[o + 2] = c.b;
}

Rgb lerp(Rgb a, Rgb b, double t) {
  auto mix = [t](int x, int y) { return static_cast<std::uint8_t>(x + (y - x) * t + 0.5); };
  return {mix(a.r, b.r), mix(a.g, b.g), mix(a.b, b.b)};
}

}  // namespace

Rgb class_color(int class_id) {
  if (class_id < 0 || class_id >= mapforge::kNumClasses) throw ContractError("class_color: bad class");
  return kPalette[class_id];
}

Rgb background_color() { return kBackground; }

Rgb Image::pixel(int x, int y) const {
  const std::size_t o = (static_cast<std::size_t>(y) * width + x) * 3;
  return {rgb[o], rgb[o + 1], rgb[o + 2]};
}

LegendProbe legend_swatch(const Image& image, int class_id) {
  return {kGap + class_id * (kSwatch + kGap) * 2 + kSwatch / 2, image.height - kLegendHeight + 4 + kSwatch / 2};
}

Image render_comparison(const mapforge::Raster<float>* observation, const mapforge::Raster<std::uint8_t>* baseline,
                        const mapforge::Raster<std::uint8_t>* prediction, const mapforge::Raster<std::uint8_t>* gt) {
  int h = 0, w = 0;
  for (const auto* r : {baseline, prediction, gt})
    if (r) h = r->height, w = r->width;
  if (observation) h = observation->height, w = observation->width;
  if (h == 0) throw ContractError("render_comparison: nothing to render");

  const int pw = w * kScale, ph = h * kScale;
  Image img;
  img.width = kGap + 4 * (pw + kGap);
  img.height = kGap + ph + kGap + kLegendHeight;
  img.rgb.assign(static_cast<std::size_t>(img.width) * img.height * 3, 0);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) put(img, x, y, kFrame);

  // Forward (grid rows) points up; lateral (grid columns) runs left to right.
  auto panel = [&](int index, auto&& color_of) {
    const int x0 = kGap + index * (pw + kGap);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const Rgb col = color_of(r, c);
        for (int dy = 0; dy < kScale; ++dy)
          for (int dx = 0; dx < kScale; ++dx) put(img, x0 + c * kScale + dx, kGap + (h - 1 - r) * kScale + dy, col);
      }
  };
  auto mask_panel = [&](int index, const mapforge::Raster<std::uint8_t>* m) {
    panel(index, [&](int r, int c) {
      Rgb col = kBackground;
      if (m)
        for (int k = 0; k < m->channels; ++k)
          if (m->at(k, r, c)) col = kPalette[k];
      return col;
    });
  };
  panel(0, [&](int r, int c) {
    Rgb col = kBackground;
    if (observation)
      for (int k = 0; k < observation->channels; ++k)
        col = lerp(col, kPalette[k], std::clamp(static_cast<double>(observation->at(k, r, c)), 0.0, 1.0));
    return col;
  });
  mask_panel(1, baseline);
  mask_panel(2, prediction);
  mask_panel(3, gt);

  for (int k = 0; k < mapforge::kNumClasses; ++k) {
    const LegendProbe p = legend_swatch(img, k);
    for (int y = p.y - kSwatch / 2; y < p.y + kSwatch / 2; ++y)
      for (int x = p.x - kSwatch / 2; x < p.x + kSwatch / 2; ++x) put(img, x, y, kPalette[k]);
  }
  return img;
}

void write_png(const Image& image, const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(file.c_str(), "wb"), &std::fclose);
  if (!fp) throw DataError("cannot open " + file.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng failed writing " + file.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y)
    png_write_row(png, const_cast<png_bytep>(image.rgb.data() + static_cast<std::size_t>(y) * image.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace diffmap::pipeline
