#pragma once

// Labeled image sets: a deterministic procedural generator (colored geometric
// shapes on textured backgrounds) and a directory loader (PPM files plus a
// "filename label" list).

#include <filesystem>
#include <sstream>

#include "odlc/image.hpp"
#include "odlc/rng.hpp"

namespace odlc {

struct LabeledImage {
  Image image;
  int label = 0;
};

using Dataset = std::vector<LabeledImage>;

enum class Split { train, val };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "val"; }

/// Shapes x fills. Classes are enumerated shape-major: label = shape * 2 + fill.
struct ShapesConfig {
  int resolution = 64;
  int classes = 10;  // up to kShapeCount * 2
};

inline constexpr int kShapeCount = 5;  // disk, square, triangle, cross, ring

namespace detail {

inline double smoothstep_edge(double d) { return std::clamp(0.5 - d, 0.0, 1.0); }

/// Signed distance-like value (negative inside) of the shape in its own frame,
/// measured in pixels.
inline double shape_distance(int shape, double u, double v, double r) {
  switch (shape) {
    case 0:
      return std::hypot(u, v) - r;
    case 1:
      return std::max(std::abs(u), std::abs(v)) - 0.8 * r;
    case 2: {
      // Equilateral triangle pointing up, circumradius r.
      const double k = std::sqrt(3.0);
      const double a = v - 0.5 * r;                          // base
      const double b = (-k * u - v) * 0.5 - 0.5 * r;        // left edge
      const double c = (k * u - v) * 0.5 - 0.5 * r;         // right edge
      return std::max({a, b, c});
    }
    case 3: {
      const double arm = 0.3 * r;
      const double h = std::max(std::abs(u), std::abs(v)) - r;
      const double bar = std::min(std::abs(u), std::abs(v)) - arm;
      return std::max(h, bar);
    }
    default: {
      const double d = std::hypot(u, v);
      return std::max(d - r, 0.55 * r - d);
    }
  }
}

}  // namespace detail

/// Deterministic sample `index` of the procedural set for the given seed.
inline LabeledImage generate_shape_image(uint64_t seed, uint64_t index, const ShapesConfig& cfg = {}) {
  require(cfg.classes >= 2 && cfg.classes <= 2 * kShapeCount,
          "shapes: class count must be in [2, " + std::to_string(2 * kShapeCount) + "]");
  require(cfg.resolution >= 16, "shapes: resolution must be >= 16");
  Rng rng = Rng::derive(seed, index);
  const int label = static_cast<int>(rng.below(static_cast<uint64_t>(cfg.classes)));
  const int shape = label / 2;
  const bool striped = label % 2 == 1;
  const int n = cfg.resolution;
  const double s = n / 64.0;

  // Background: two-color gradient plus smooth random texture.
  std::array<double, 3> bg0, bg1;
  for (int c = 0; c < 3; ++c) {
    bg0[c] = rng.uniform(0.15, 0.85);
    bg1[c] = std::clamp(bg0[c] + rng.uniform(-0.25, 0.25), 0.0, 1.0);
  }
  const double angle = rng.uniform(0, 6.283185307179586);
  const double gx = std::cos(angle), gy = std::sin(angle);
  struct Blob {
    double x, y, r, amp;
  };
  std::vector<Blob> blobs(6);
  for (auto& b : blobs) b = {rng.uniform(0, n), rng.uniform(0, n), rng.uniform(4, 12) * s, rng.uniform(-0.12, 0.12)};

  // Foreground color kept away from the background mean.
  std::array<double, 3> fg;
  double dist = 0;
  do {
    dist = 0;
    for (int c = 0; c < 3; ++c) {
      fg[c] = rng.uniform(0.05, 0.95);
      const double m = 0.5 * (bg0[c] + bg1[c]);
      dist += (fg[c] - m) * (fg[c] - m);
    }
  } while (std::sqrt(dist) < 0.35);
  std::array<double, 3> fg_alt;
  for (int c = 0; c < 3; ++c) fg_alt[c] = fg[c] > 0.5 ? fg[c] - 0.4 : fg[c] + 0.4;

  const double radius = rng.uniform(11, 18) * s;
  const double cx = rng.uniform(radius + 3 * s, n - radius - 3 * s);
  const double cy = rng.uniform(radius + 3 * s, n - radius - 3 * s);
  const double rot = rng.uniform(0, 6.283185307179586);
  const double cr = std::cos(rot), sr = std::sin(rot);
  const double stripe_angle = rng.uniform(0, 3.141592653589793);
  const double sx = std::cos(stripe_angle), sy = std::sin(stripe_angle);
  const double period = 4.0 * s;

  Image img({3, n, n});
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      std::array<double, 3> acc{0, 0, 0};
      // 2x2 supersampling for anti-aliased edges and stripes.
      for (int sub = 0; sub < 4; ++sub) {
        const double px = x + 0.25 + 0.5 * (sub % 2), py = y + 0.25 + 0.5 * (sub / 2);
        const double t = std::clamp(0.5 + ((px - n / 2.0) * gx + (py - n / 2.0) * gy) / n, 0.0, 1.0);
        double tex = 0;
        for (const auto& b : blobs) {
          const double d2 = ((px - b.x) * (px - b.x) + (py - b.y) * (py - b.y)) / (b.r * b.r);
          tex += b.amp * std::exp(-d2);
        }
        const double u = (px - cx) * cr + (py - cy) * sr;
        const double v = -(px - cx) * sr + (py - cy) * cr;
        const double cover = detail::smoothstep_edge(detail::shape_distance(shape, u, v, radius));
        bool alt = false;
        if (striped) {
          const double ph = (px * sx + py * sy) / period;
          alt = (ph - std::floor(ph)) < 0.5;
        }
        for (int c = 0; c < 3; ++c) {
          const double back = bg0[c] * (1 - t) + bg1[c] * t + tex;
          const double front = alt ? fg_alt[c] : fg[c];
          acc[c] += cover * front + (1 - cover) * back;
        }
      }
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(std::clamp(acc[c] / 4, 0.0, 1.0));
    }
  return {std::move(img), label};
}

/// Where a dataset comes from. Procedural splits use disjoint seeds derived
/// from (seed, split), so train and val never share a sample stream.
struct DatasetSpec {
  enum class Source { procedural, directory };
  Source source = Source::procedural;
  Split split = Split::train;
  size_t size = 0;
  uint64_t seed = 0;
  ShapesConfig shapes;
  std::string directory;    // directory source only
  std::string labels_file;  // "filename label" per line, relative to directory

  uint64_t stream_seed() const { return Rng::mix(seed * 2 + (split == Split::train ? 0 : 1)); }
};

inline Dataset load_directory(const std::string& dir, const std::string& labels_file, size_t limit) {
  const auto labels_path = std::filesystem::path(dir) / labels_file;
  const auto bytes = read_file(labels_path.string());
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  Dataset out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string name;
    int label;
    if (!(ls >> name >> label) || label < 0)
      throw Error(labels_path.string() + ":" + std::to_string(lineno) + ": expected 'filename label'");
    out.push_back({read_ppm((std::filesystem::path(dir) / name).string()), label});
    if (limit && out.size() >= limit) break;
  }
  return out;
}

inline Dataset make_dataset(const DatasetSpec& spec) {
  if (spec.source == DatasetSpec::Source::directory)
    return load_directory(spec.directory, spec.labels_file, spec.size);
  require(spec.size > 0, "dataset: size must be positive");
  Dataset out;
  out.reserve(spec.size);
  const uint64_t s = spec.stream_seed();
  for (size_t i = 0; i < spec.size; ++i) out.push_back(generate_shape_image(s, i, spec.shapes));
  return out;
}

inline std::vector<Image> images_of(const Dataset& d) {
  std::vector<Image> out;
  out.reserve(d.size());
  for (const auto& s : d) out.push_back(s.image);
  return out;
}

}  // namespace odlc
