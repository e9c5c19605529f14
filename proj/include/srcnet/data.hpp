/*
 * Copyright (c) 2026 The srcnet Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "srcnet/config.hpp"
#include "srcnet/random.hpp"
#include "srcnet/tensor.hpp"

namespace srcnet {

namespace fs = std::filesystem;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Interleaved 8-bit raster, row-major, `channels` samples per pixel.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c = 3, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t ch) {
    return pixels[(y * width + x) * channels + ch];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t ch) const {
    return pixels[(y * width + x) * channels + ch];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Binary raster with values in {0, 1}.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), values(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](auto v) { return v != 0; }));
  }
  friend bool operator==(const Mask&, const Mask&) = default;
};

struct SamplePair {
  Image img1;
  Image img2;
  Mask mask;
  std::string id;

  void validate() const {
    if (img1.height != img2.height || img1.width != img2.width || img1.height != mask.height ||
        img1.width != mask.width) {
      throw DataError("sample " + id + ": rasters have different extents");
    }
    for (auto v : mask.values)
      if (v > 1) throw DataError("sample " + id + ": mask value outside {0,1}");
  }
};

// ---------------------------------------------------------------------------
// PNG I/O (libpng simplified API).

inline Image read_png(const std::string& path, std::size_t channels = 3) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError("cannot read PNG " + path + ": " + image.message);
  }
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image out(image.height, image.width, channels);
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("cannot decode PNG " + path + ": " + image.message);
  }
  return out;
}

inline void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw DataError("write_png: unsupported channel count");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path + ": " + image.message);
  }
}

/// Any non-zero gray level reads as 1.
inline Mask read_mask_png(const std::string& path) {
  const Image g = read_png(path, 1);
  Mask m(g.height, g.width);
  for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = g.pixels[i] ? 1 : 0;
  return m;
}

/// Stored as 0 / 255.
inline void write_mask_png(const std::string& path, const Mask& m) {
  Image g(m.height, m.width, 1);
  for (std::size_t i = 0; i < m.values.size(); ++i) g.pixels[i] = m.values[i] ? 255 : 0;
  write_png(path, g);
}

// ---------------------------------------------------------------------------
// Tiling.

inline Image crop(const Image& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Image out(h, w, img.channels);
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(img.pixels.begin() + ((y0 + y) * img.width + x0) * img.channels, w * img.channels,
                out.pixels.begin() + y * w * img.channels);
  return out;
}

inline Mask crop(const Mask& m, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Mask out(h, w);
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(m.values.begin() + (y0 + y) * m.width + x0, w, out.values.begin() + y * w);
  return out;
}

/// Non-overlapping tile x tile crops in row-major order; strips narrower
/// than a tile at the right/bottom edge are dropped. Ids are
/// "<id>_<row>_<col>".
inline std::vector<SamplePair> tile_pair(const SamplePair& pair, std::size_t tile) {
  pair.validate();
  if (tile == 0) throw DataError("tile size must be positive");
  std::vector<SamplePair> out;
  const std::size_t rows = pair.img1.height / tile;
  const std::size_t cols = pair.img1.width / tile;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      SamplePair t;
      t.img1 = crop(pair.img1, r * tile, c * tile, tile, tile);
      t.img2 = crop(pair.img2, r * tile, c * tile, tile, tile);
      t.mask = crop(pair.mask, r * tile, c * tile, tile, tile);
      t.id = pair.id + "_" + std::to_string(r) + "_" + std::to_string(c);
      out.push_back(std::move(t));
    }
  return out;
}

/// Reassembles row-major tiles of equal size into one mask.
inline Mask mosaic(const std::vector<Mask>& tiles, std::size_t rows, std::size_t cols) {
  if (tiles.size() != rows * cols || tiles.empty()) throw DataError("mosaic: tile count mismatch");
  const std::size_t th = tiles[0].height, tw = tiles[0].width;
  Mask out(rows * th, cols * tw);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      for (std::size_t y = 0; y < th; ++y)
        std::copy_n(tiles[r * cols + c].values.begin() + y * tw, tw,
                    out.values.begin() + (r * th + y) * out.width + c * tw);
  return out;
}

inline Image mosaic(const std::vector<Image>& tiles, std::size_t rows, std::size_t cols) {
  if (tiles.size() != rows * cols || tiles.empty()) throw DataError("mosaic: tile count mismatch");
  const std::size_t th = tiles[0].height, tw = tiles[0].width, ch = tiles[0].channels;
  Image out(rows * th, cols * tw, ch);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      for (std::size_t y = 0; y < th; ++y)
        std::copy_n(tiles[r * cols + c].pixels.begin() + y * tw * ch, tw * ch,
                    out.pixels.begin() + ((r * th + y) * out.width + c * tw) * ch);
  return out;
}

/// Seeded 85/15 train/val assignment by hashing the tile id.
inline std::string split_of(const std::string& id, std::uint64_t seed, double train_fraction = 0.85) {
  const std::uint64_t h = mix64(fnv1a(id, seed));
  return static_cast<double>(h % 10000) < train_fraction * 10000.0 ? "train" : "val";
}

struct ManifestEntry {
  std::string id;
  std::string split;
  std::string a;
  std::string b;
  std::string label;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path);
  for (const auto& e : entries) out << e.id << ' ' << e.split << ' ' << e.a << ' ' << e.b << ' ' << e.label << '\n';
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(ls >> e.id >> e.split >> e.a >> e.b >> e.label)) throw DataError("malformed manifest line: " + line);
    out.push_back(std::move(e));
  }
  return out;
}

/// Writes the rasters of a sample under <root>/{A,B,label}/<id>.png.
inline ManifestEntry write_sample(const std::string& root, const SamplePair& s, const std::string& split) {
  ManifestEntry e{s.id, split, "A/" + s.id + ".png", "B/" + s.id + ".png", "label/" + s.id + ".png"};
  write_png((fs::path(root) / e.a).string(), s.img1);
  write_png((fs::path(root) / e.b).string(), s.img2);
  write_mask_png((fs::path(root) / e.label).string(), s.mask);
  return e;
}

struct TilingReport {
  std::vector<SamplePair> tiles;
  std::vector<ManifestEntry> manifest;
  std::size_t source_pairs = 0;
  std::vector<std::string> errors;  // one line per skipped source file
};

/// Tiles every aligned A/B/label triple under `src_dir`. Sources are
/// visited in lexicographic order of file name; mismatched or unreadable
/// triples are skipped and reported. When `out_dir` is non-empty the tiles
/// and `tiles.txt` are written there.
inline TilingReport tile_dataset(const std::string& src_dir, std::size_t tile = 256,
                                 const std::string& out_dir = "", std::uint64_t split_seed = 0) {
  TilingReport report;
  const fs::path root(src_dir);
  if (!fs::is_directory(root / "A")) throw DataError("tile_dataset: " + src_dir + " has no A/ directory");
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(root / "A"))
    if (entry.is_regular_file() && entry.path().extension() == ".png") names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  for (const auto& name : names) {
    try {
      if (!fs::exists(root / "B" / name) || !fs::exists(root / "label" / name)) {
        throw DataError("missing B/ or label/ counterpart");
      }
      SamplePair pair;
      pair.img1 = read_png((root / "A" / name).string());
      pair.img2 = read_png((root / "B" / name).string());
      pair.mask = read_mask_png((root / "label" / name).string());
      pair.id = fs::path(name).stem().string();
      pair.validate();
      ++report.source_pairs;
      for (auto& t : tile_pair(pair, tile)) {
        const std::string split = split_of(t.id, split_seed);
        if (!out_dir.empty()) {
          report.manifest.push_back(write_sample(out_dir, t, split));
        } else {
          report.manifest.push_back({t.id, split, "A/" + t.id + ".png", "B/" + t.id + ".png", "label/" + t.id + ".png"});
        }
        report.tiles.push_back(std::move(t));
      }
    } catch (const std::exception& e) {
      report.errors.push_back(name + ": " + e.what());
    }
  }
  if (!out_dir.empty()) write_manifest((fs::path(out_dir) / "tiles.txt").string(), report.manifest);
  return report;
}

/// Loads a dataset directory. With a tiles.txt manifest, only entries whose
/// split matches `split` (all when empty) are read; otherwise every A/*.png.
inline std::vector<SamplePair> load_dataset(const std::string& dir, const std::string& split = "") {
  const fs::path root(dir);
  std::vector<SamplePair> out;
  if (fs::exists(root / "tiles.txt")) {
    for (const auto& e : read_manifest((root / "tiles.txt").string())) {
      if (!split.empty() && e.split != split) continue;
      SamplePair s{read_png((root / e.a).string()), read_png((root / e.b).string()),
                   read_mask_png((root / e.label).string()), e.id};
      s.validate();
      out.push_back(std::move(s));
    }
    return out;
  }
  if (!fs::is_directory(root / "A")) throw DataError("dataset " + dir + " has neither tiles.txt nor A/");
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(root / "A"))
    if (entry.path().extension() == ".png") names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  for (const auto& name : names) {
    SamplePair s{read_png((root / "A" / name).string()), read_png((root / "B" / name).string()),
                 read_mask_png((root / "label" / name).string()), fs::path(name).stem().string()};
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

/// FNV-1a over ids and raster bytes, in order.
inline std::uint64_t dataset_hash(const std::vector<SamplePair>& samples) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const std::vector<std::uint8_t>& v) {
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), v.size()), h);
  };
  for (const auto& s : samples) {
    h = fnv1a(s.id, h);
    feed(s.img1.pixels);
    feed(s.img2.pixels);
    feed(s.mask.values);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Synthetic bi-temporal scenes.

enum class ShapeKind { rectangle, ellipse, l_polygon };
enum class ChangeKind { none, appear, disappear, alter };

using Rgb = std::array<double, 3>;

struct SceneShape {
  ShapeKind kind = ShapeKind::rectangle;
  double top = 0, left = 0, height = 0, width = 0;
  int notch_corner = 0;  // L-polygon: which quarter is cut away (0..3)
  Rgb color1{};          // appearance at time 1
  Rgb color2{};          // appearance at time 2
  ChangeKind change = ChangeKind::none;

  bool present1() const { return change != ChangeKind::appear; }
  bool present2() const { return change != ChangeKind::disappear; }
  bool changed() const { return change != ChangeKind::none; }

  /// Pixel-center membership test.
  bool contains(std::size_t py, std::size_t px) const {
    const double y = static_cast<double>(py) + 0.5 - top;
    const double x = static_cast<double>(px) + 0.5 - left;
    if (y < 0 || x < 0 || y >= height || x >= width) return false;
    switch (kind) {
      case ShapeKind::rectangle:
        return true;
      case ShapeKind::ellipse: {
        const double dy = (y - height / 2) / (height / 2);
        const double dx = (x - width / 2) / (width / 2);
        return dy * dy + dx * dx <= 1.0;
      }
      case ShapeKind::l_polygon: {
        const bool lower = y >= height / 2;
        const bool right = x >= width / 2;
        const int quarter = (lower ? 2 : 0) + (right ? 1 : 0);
        return quarter != notch_corner;
      }
    }
    return false;
  }
};

struct Occluder {
  double cy = 0, cx = 0, radius = 0;
  double opacity = 0;
  int image = 1;  // 1 or 2
};

struct Scene {
  std::size_t size = 64;
  Rgb background{};
  std::array<double, 4> wave{};  // low-frequency texture: fy, fx, phase, amplitude
  double gain2 = 1.0;            // illumination change of the second image
  double offset2 = 0.0;
  std::vector<SceneShape> shapes;
  std::vector<Occluder> occluders;
};

struct SynthSpec {
  std::size_t image_size = 64;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 5;
  double min_extent = 8.0;
  double max_extent = 20.0;
  bool rectangles = true;
  bool ellipses = true;
  bool l_polygons = true;
  double p_appear = 0.2;
  double p_disappear = 0.2;
  double p_alter = 0.15;
  double texture_jitter = 6.0;       // per-pixel noise std, gray levels
  double illumination_jitter = 0.1;  // relative gain change of image 2
  double shape_color_jitter = 8.0;   // appearance drift of unchanged shapes
  double occluder_density = 0.3;     // expected occluders per image
  std::uint64_t seed = 7;
};

/// Rasterized footprint of one shape.
inline Mask rasterize(const SceneShape& s, std::size_t size) {
  Mask m(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) m.at(y, x) = s.contains(y, x) ? 1 : 0;
  return m;
}

inline Rgb random_color(Rng& rng) {
  return {rng.uniform(30, 225), rng.uniform(30, 225), rng.uniform(30, 225)};
}

inline double color_distance(const Rgb& a, const Rgb& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

/// Shapes are placed without overlap (1-pixel gap), so no changed shape is
/// ever hidden by another.
inline Scene generate_scene(const SynthSpec& spec, Rng& rng) {
  Scene scene;
  scene.size = spec.image_size;
  scene.background = {rng.uniform(60, 140), rng.uniform(70, 150), rng.uniform(50, 120)};
  scene.wave = {rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2), rng.uniform(0, 6.28), rng.uniform(5, 20)};
  scene.gain2 = 1.0 + rng.uniform(-spec.illumination_jitter, spec.illumination_jitter);
  scene.offset2 = rng.uniform(-10.0, 10.0) * (spec.illumination_jitter > 0 ? 1.0 : 0.0);
  std::vector<ShapeKind> kinds;
  if (spec.rectangles) kinds.push_back(ShapeKind::rectangle);
  if (spec.ellipses) kinds.push_back(ShapeKind::ellipse);
  if (spec.l_polygons) kinds.push_back(ShapeKind::l_polygon);
  if (kinds.empty()) throw DataError("synthetic spec enables no shape kinds");
  const auto target = static_cast<std::size_t>(
      rng.uniform_int(static_cast<long>(spec.min_shapes), static_cast<long>(spec.max_shapes)));
  const double size = static_cast<double>(spec.image_size);
  for (std::size_t attempt = 0; attempt < 200 && scene.shapes.size() < target; ++attempt) {
    SceneShape s;
    s.kind = kinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(kinds.size()) - 1))];
    s.height = std::round(rng.uniform(spec.min_extent, spec.max_extent));
    s.width = std::round(rng.uniform(spec.min_extent, spec.max_extent));
    if (s.height >= size || s.width >= size) continue;
    s.top = std::floor(rng.uniform(0, size - s.height));
    s.left = std::floor(rng.uniform(0, size - s.width));
    s.notch_corner = static_cast<int>(rng.uniform_int(0, 3));
    const bool overlaps = std::any_of(scene.shapes.begin(), scene.shapes.end(), [&](const SceneShape& o) {
      return s.top < o.top + o.height + 1 && o.top < s.top + s.height + 1 && s.left < o.left + o.width + 1 &&
             o.left < s.left + s.width + 1;
    });
    if (overlaps) continue;
    s.color1 = random_color(rng);
    while (color_distance(s.color1, scene.background) < 60) s.color1 = random_color(rng);
    const double u = rng.uniform();
    if (u < spec.p_appear) {
      s.change = ChangeKind::appear;
    } else if (u < spec.p_appear + spec.p_disappear) {
      s.change = ChangeKind::disappear;
    } else if (u < spec.p_appear + spec.p_disappear + spec.p_alter) {
      s.change = ChangeKind::alter;
    }
    if (s.change == ChangeKind::alter) {
      s.color2 = random_color(rng);
      while (color_distance(s.color2, s.color1) < 90) s.color2 = random_color(rng);
    } else {
      const double j = spec.shape_color_jitter;
      s.color2 = {s.color1[0] + rng.uniform(-j, j), s.color1[1] + rng.uniform(-j, j),
                  s.color1[2] + rng.uniform(-j, j)};
    }
    scene.shapes.push_back(s);
  }
  for (int image = 1; image <= 2; ++image) {
    const double expected = spec.occluder_density;
    auto count = static_cast<std::size_t>(expected);
    if (rng.uniform() < expected - static_cast<double>(count)) ++count;
    for (std::size_t i = 0; i < count; ++i)
      scene.occluders.push_back({rng.uniform(0, size), rng.uniform(0, size), rng.uniform(3, 8),
                                 rng.uniform(0.2, 0.45), image});
  }
  return scene;
}

/// Union of the footprints of all changed shapes.
inline Mask change_mask(const Scene& scene) {
  Mask m(scene.size, scene.size);
  for (const auto& s : scene.shapes) {
    if (!s.changed()) continue;
    for (std::size_t y = 0; y < scene.size; ++y)
      for (std::size_t x = 0; x < scene.size; ++x)
        if (s.contains(y, x)) m.at(y, x) = 1;
  }
  return m;
}

inline SamplePair render_scene(const Scene& scene, const SynthSpec& spec, Rng& rng, std::string id) {
  const std::size_t n = scene.size;
  SamplePair pair;
  pair.id = std::move(id);
  for (int image = 1; image <= 2; ++image) {
    Image img(n, n, 3);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        Rgb v = scene.background;
        const double wave = scene.wave[3] * std::sin(scene.wave[0] * static_cast<double>(y) +
                                                     scene.wave[1] * static_cast<double>(x) + scene.wave[2]);
        for (auto& ch : v) ch += wave;
        for (const auto& s : scene.shapes) {
          if ((image == 1 ? s.present1() : s.present2()) && s.contains(y, x)) v = image == 1 ? s.color1 : s.color2;
        }
        for (const auto& o : scene.occluders) {
          if (o.image != image) continue;
          const double dy = static_cast<double>(y) + 0.5 - o.cy;
          const double dx = static_cast<double>(x) + 0.5 - o.cx;
          if (dy * dy + dx * dx <= o.radius * o.radius)
            for (auto& ch : v) ch *= 1.0 - o.opacity;
        }
        for (std::size_t c = 0; c < 3; ++c) {
          double value = v[c] + rng.normal(0.0, spec.texture_jitter);
          if (image == 2) value = value * scene.gain2 + scene.offset2;
          img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(value), 0L, 255L));
        }
      }
    (image == 1 ? pair.img1 : pair.img2) = std::move(img);
  }
  pair.mask = change_mask(scene);
  return pair;
}

/// n samples; sample i depends only on (spec.seed, i).
inline std::vector<SamplePair> generate_synthetic(const SynthSpec& spec, std::size_t n,
                                                  const std::string& prefix = "synth") {
  std::vector<SamplePair> out;
  out.reserve(n);
  const Rng root(spec.seed);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = root.split(static_cast<std::uint64_t>(i));
    Scene scene = generate_scene(spec, rng);
    out.push_back(render_scene(scene, spec, rng, prefix + "_" + std::to_string(i)));
  }
  return out;
}

/// Opt-in augmentation: random horizontal/vertical flips and 90-degree
/// rotations applied identically to all three rasters (square inputs).
inline SamplePair augment(const SamplePair& s, Rng& rng) {
  const std::size_t n = s.img1.height;
  if (s.img1.width != n) return s;
  const bool flip_h = rng.bernoulli(0.5);
  const bool flip_v = rng.bernoulli(0.5);
  const long rot = rng.uniform_int(0, 3);
  auto src = [&](std::size_t y, std::size_t x) {
    for (long r = 0; r < rot; ++r) {
      const std::size_t ny = x, nx = n - 1 - y;
      y = ny;
      x = nx;
    }
    if (flip_h) x = n - 1 - x;
    if (flip_v) y = n - 1 - y;
    return std::pair{y, x};
  };
  SamplePair out = s;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const auto [sy, sx] = src(y, x);
      for (std::size_t c = 0; c < 3; ++c) {
        out.img1.at(y, x, c) = s.img1.at(sy, sx, c);
        out.img2.at(y, x, c) = s.img2.at(sy, sx, c);
      }
      out.mask.at(y, x) = s.mask.at(sy, sx);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering.

/// False positives red, false negatives green, true positives white, true
/// negatives the underlying image at half intensity.
inline Image render_overlay(const Mask& pred, const Mask& gt, const Image& img) {
  if (pred.height != gt.height || pred.width != gt.width || img.height != gt.height || img.width != gt.width) {
    throw DataError("render_overlay: raster extents differ");
  }
  Image out(gt.height, gt.width, 3);
  for (std::size_t y = 0; y < gt.height; ++y)
    for (std::size_t x = 0; x < gt.width; ++x) {
      const bool p = pred.at(y, x) != 0;
      const bool g = gt.at(y, x) != 0;
      std::array<std::uint8_t, 3> c;
      if (p && g) c = {255, 255, 255};
      else if (p) c = {255, 0, 0};
      else if (g) c = {0, 255, 0};
      else
        for (std::size_t ch = 0; ch < 3; ++ch)
          c[ch] = static_cast<std::uint8_t>(img.at(y, x, img.channels == 1 ? 0 : ch) / 2);
      for (std::size_t ch = 0; ch < 3; ++ch) out.at(y, x, ch) = c[ch];
    }
  return out;
}

// ---------------------------------------------------------------------------
// Tensor conversion.

template <typename T>
struct Batch {
  Tensor<T> img1;  // B x 3 x H x W, scaled to [0, 1]
  Tensor<T> img2;
  Tensor<T> gt;    // B x H x W in {0, 1}
};

template <typename T>
Batch<T> collate(const std::vector<const SamplePair*>& samples) {
  if (samples.empty()) throw DataError("collate: empty batch");
  const std::size_t B = samples.size(), H = samples[0]->img1.height, W = samples[0]->img1.width;
  Buffer<T> a(B * 3 * H * W), b(B * 3 * H * W), g(B * H * W);
  for (std::size_t n = 0; n < B; ++n) {
    const auto& s = *samples[n];
    if (s.img1.height != H || s.img1.width != W) throw DataError("collate: samples differ in size");
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t idx = ((n * 3 + c) * H + y) * W + x;
          a[idx] = static_cast<T>(s.img1.at(y, x, c)) / T{255};
          b[idx] = static_cast<T>(s.img2.at(y, x, c)) / T{255};
        }
    for (std::size_t i = 0; i < H * W; ++i) g[n * H * W + i] = static_cast<T>(s.mask.values[i]);
  }
  return {Tensor<T>({B, 3, H, W}, std::move(a)), Tensor<T>({B, 3, H, W}, std::move(b)),
          Tensor<T>({B, H, W}, std::move(g))};
}

/// Argmax over the two class channels of B x 2 x H x W; one mask per sample.
template <typename T>
std::vector<Mask> probs_to_masks(const Tensor<T>& probs) {
  const std::size_t B = probs.size(0), H = probs.size(2), W = probs.size(3);
  std::vector<Mask> out;
  const auto v = probs.data();
  for (std::size_t n = 0; n < B; ++n) {
    Mask m(H, W);
    for (std::size_t i = 0; i < H * W; ++i) m.values[i] = v[(n * 2 + 1) * H * W + i] > v[(n * 2) * H * W + i] ? 1 : 0;
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace srcnet
