#pragma once

// Labeled grayscale datasets: class-per-directory ingestion and a seeded
// generator of four seafloor-like texture classes (flat, ripple, rocky,
// crater). The generated textures are visual analogues only.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "tunescope/error.hpp"
#include "tunescope/image.hpp"
#include "tunescope/rng.hpp"

namespace tunescope {

struct LabeledImage {
  GrayImage image;
  std::size_t label = 0;
  std::string source;

  bool operator==(const LabeledImage&) const = default;
};

struct Dataset {
  std::vector<LabeledImage> images;
  std::vector<std::string> class_names;

  std::size_t class_count() const { return class_names.size(); }

  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    out.reserve(images.size());
    for (const auto& im : images) out.push_back(im.label);
    return out;
  }

  std::vector<std::size_t> census() const {
    std::vector<std::size_t> counts(class_names.size(), 0);
    for (const auto& im : images) {
      if (im.label >= counts.size()) throw Error("label " + std::to_string(im.label) + " out of range");
      ++counts[im.label];
    }
    return counts;
  }
};

// ---------------------------------------------------------------------------
// Directory ingestion
// ---------------------------------------------------------------------------

struct IngestResult {
  Dataset dataset;
  std::vector<std::string> warnings;
  std::size_t skipped = 0;
};

// Layout root/<class_name>/*.pgm. Classes sorted lexicographically give the
// label indices; images are ordered by class, then filename.
inline IngestResult ingest_directory(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw Error("dataset root \"" + root.string() + "\" is not a directory");

  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  if (class_dirs.empty()) throw Error("dataset root \"" + root.string() + "\" has no class directories");
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

  IngestResult result;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    const auto& dir = class_dirs[label];
    result.dataset.class_names.push_back(dir.filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".pgm") files.push_back(entry.path());
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    if (files.empty()) result.warnings.push_back("class \"" + dir.filename().string() + "\" has no images");
    for (const auto& file : files) {
      try {
        result.dataset.images.push_back({read_pgm(file.string()), label, file.string()});
      } catch (const Error& e) {
        result.warnings.push_back(std::string("skipped unreadable image: ") + e.what());
        ++result.skipped;
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic textures
// ---------------------------------------------------------------------------

enum class TextureClass : std::size_t { flat = 0, ripple = 1, rocky = 2, crater = 3 };

inline constexpr std::array<const char*, 4> kTextureClassNames{"flat", "ripple", "rocky", "crater"};

inline TextureClass parse_texture_class(const std::string& name) {
  for (std::size_t i = 0; i < kTextureClassNames.size(); ++i)
    if (name == kTextureClassNames[i]) return static_cast<TextureClass>(i);
  throw Error("unknown texture class \"" + name + "\"");
}

struct TextureParams {
  double base_gray = 128.0;
  double noise_sigma = 12.0;
  // ripple: sinusoidal grating, period in pixels
  double ripple_amplitude = 50.0;
  double ripple_period_min = 6.0;
  double ripple_period_max = 14.0;
  // rocky: value noise octaves, thresholded into rock / sediment
  std::size_t rocky_base_cells = 4;
  double rock_gray = 185.0;
  double sediment_gray = 95.0;
  // crater: dark disks with bright rims on a flat base
  std::size_t crater_min = 1;
  std::size_t crater_max = 3;
  double crater_radius_min = 0.10;  // fraction of image size
  double crater_radius_max = 0.22;
  double crater_floor_gray = 55.0;
  double crater_rim_gray = 215.0;
  double crater_rim_width = 2.5;
};

namespace detail {

// Bilinear value noise with smoothstep weights on a cells x cells lattice.
inline std::vector<double> value_noise(std::size_t size, std::size_t cells, Rng& rng) {
  std::vector<double> lattice((cells + 1) * (cells + 1));
  for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
  std::vector<double> out(size * size);
  const double scale = static_cast<double>(cells) / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) * scale;
      const double fy = static_cast<double>(y) * scale;
      const auto ix = std::min(static_cast<std::size_t>(fx), cells - 1);
      const auto iy = std::min(static_cast<std::size_t>(fy), cells - 1);
      double tx = fx - static_cast<double>(ix);
      double ty = fy - static_cast<double>(iy);
      tx = tx * tx * (3.0 - 2.0 * tx);
      ty = ty * ty * (3.0 - 2.0 * ty);
      auto L = [&](std::size_t i, std::size_t j) { return lattice[j * (cells + 1) + i]; };
      const double top = L(ix, iy) * (1 - tx) + L(ix + 1, iy) * tx;
      const double bot = L(ix, iy + 1) * (1 - tx) + L(ix + 1, iy + 1) * tx;
      out[y * size + x] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

}  // namespace detail

inline LabeledImage synthesize_texture(TextureClass cls, std::size_t size, std::uint64_t seed,
                                       const TextureParams& params = {}) {
  if (size < 32) throw Error("texture size must be at least 32, got " + std::to_string(size));
  Rng rng(seed);
  std::vector<double> field(size * size, params.base_gray);
  const double n = static_cast<double>(size);

  switch (cls) {
    case TextureClass::flat:
      break;
    case TextureClass::ripple: {
      const double theta = rng.uniform(0.0, std::numbers::pi);
      const double period = rng.uniform(params.ripple_period_min, params.ripple_period_max);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double kx = 2.0 * std::numbers::pi * std::cos(theta) / period;
      const double ky = 2.0 * std::numbers::pi * std::sin(theta) / period;
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          field[y * size + x] += params.ripple_amplitude * std::sin(kx * static_cast<double>(x) +
                                                                    ky * static_cast<double>(y) + phase);
      break;
    }
    case TextureClass::rocky: {
      std::vector<double> sum(size * size, 0.0);
      double amplitude = 1.0;
      std::size_t cells = params.rocky_base_cells;
      for (int octave = 0; octave < 3; ++octave) {
        const auto layer = detail::value_noise(size, cells, rng);
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += amplitude * layer[i];
        amplitude *= 0.5;
        cells *= 2;
      }
      for (std::size_t i = 0; i < sum.size(); ++i) field[i] = sum[i] > 0.0 ? params.rock_gray : params.sediment_gray;
      break;
    }
    case TextureClass::crater: {
      const std::size_t k = params.crater_min + rng.index(params.crater_max - params.crater_min + 1);
      for (std::size_t c = 0; c < k; ++c) {
        const double r = n * rng.uniform(params.crater_radius_min, params.crater_radius_max);
        const double cx = rng.uniform(r, n - r);
        const double cy = rng.uniform(r, n - r);
        for (std::size_t y = 0; y < size; ++y) {
          for (std::size_t x = 0; x < size; ++x) {
            const double d = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
            if (d <= r - params.crater_rim_width)
              field[y * size + x] = params.crater_floor_gray;
            else if (d <= r)
              field[y * size + x] = params.crater_rim_gray;
          }
        }
      }
      break;
    }
  }

  GrayImage img(size, size);
  for (std::size_t i = 0; i < field.size(); ++i) img.pixels[i] = clamp_u8(field[i] + params.noise_sigma * rng.normal());
  return {std::move(img), static_cast<std::size_t>(cls), "synthetic:" + std::to_string(seed)};
}

// Image i of the whole run (counted across classes in class order) uses
// seed mix_seed(master, i).
inline Dataset synthesize_dataset(const std::array<std::size_t, 4>& counts, std::size_t size, std::uint64_t seed,
                                  const TextureParams& params = {}) {
  if (std::all_of(counts.begin(), counts.end(), [](auto c) { return c == 0; }))
    throw Error("synthetic dataset needs at least one image");
  Dataset ds;
  for (const char* name : kTextureClassNames) ds.class_names.emplace_back(name);
  std::uint64_t counter = 0;
  for (std::size_t cls = 0; cls < counts.size(); ++cls)
    for (std::size_t i = 0; i < counts[cls]; ++i)
      ds.images.push_back(synthesize_texture(static_cast<TextureClass>(cls), size, mix_seed(seed, counter++), params));
  return ds;
}

// Writes root/<class>/<class>_NNNN.pgm and root/manifest.json. Returns the
// manifest {class_names, census, files:[{path, label, source}]} with paths relative to root.
inline nlohmann::json write_dataset_tree(const Dataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  nlohmann::json manifest;
  manifest["class_names"] = ds.class_names;
  const auto census = ds.census();
  manifest["census"] = nlohmann::json::object();
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) manifest["census"][ds.class_names[c]] = census[c];
  manifest["files"] = nlohmann::json::array();

  std::vector<std::size_t> next(ds.class_names.size(), 0);
  for (const auto& cls : ds.class_names) fs::create_directories(root / cls);
  for (const auto& im : ds.images) {
    char name[32];
    std::snprintf(name, sizeof(name), "_%04zu.pgm", next[im.label]++);
    const fs::path rel = fs::path(ds.class_names[im.label]) / (ds.class_names[im.label] + name);
    write_pgm((root / rel).string(), im.image);
    manifest["files"].push_back({{"path", rel.generic_string()}, {"label", im.label}, {"source", im.source}});
  }
  write_file_bytes((root / "manifest.json").string(), manifest.dump(2) + "\n");
  return manifest;
}

}  // namespace tunescope
