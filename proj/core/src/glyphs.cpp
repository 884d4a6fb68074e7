// SPDX-License-Identifier: Apache-2.0
#include "csn/glyphs.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <vector>

#include "csn/rng.hpp"
#include "csn/tensor_io.hpp"

namespace csn {

namespace {

struct Point {
  double x, y;
};

// Quadratic Bezier strokes in unit coordinates.
std::vector<std::array<Point, 3>> class_strokes(std::size_t class_id, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 1000 + class_id));
  const std::size_t n = 2 + rng.index(3);
  std::vector<std::array<Point, 3>> strokes;
  Point pen{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
  for (std::size_t s = 0; s < n; ++s) {
    // Strokes often continue from the previous end point, like a pen.
    Point a = rng.bernoulli(0.6) ? pen : Point{rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)};
    Point b{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
    Point c{rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)};
    strokes.push_back({a, b, c});
    pen = c;
  }
  return strokes;
}

}  // namespace

Tensor render_glyph(std::size_t class_id, std::uint64_t dataset_seed, std::uint64_t example_seed,
                    std::size_t size) {
  auto strokes = class_strokes(class_id, dataset_seed);
  Rng rng(example_seed);
  const double angle = rng.uniform(-0.2, 0.2);
  const double scale = rng.uniform(0.85, 1.1);
  const double shear = rng.uniform(-0.15, 0.15);
  const double tx = rng.uniform(-0.06, 0.06), ty = rng.uniform(-0.06, 0.06);
  const double width = rng.uniform(0.035, 0.06);
  auto warp = [&](Point p) {
    const double x = p.x - 0.5 + rng.normal(0.0, 0.025), y = p.y - 0.5 + rng.normal(0.0, 0.025);
    const double xs = x + shear * y;
    return Point{0.5 + tx + scale * (std::cos(angle) * xs - std::sin(angle) * y),
                 0.5 + ty + scale * (std::sin(angle) * xs + std::cos(angle) * y)};
  };
  std::vector<Point> samples;
  for (auto& s : strokes) {
    const Point a = warp(s[0]), b = warp(s[1]), c = warp(s[2]);
    for (int k = 0; k <= 48; ++k) {
      const double t = k / 48.0, u = 1.0 - t;
      samples.push_back({u * u * a.x + 2 * u * t * b.x + t * t * c.x,
                         u * u * a.y + 2 * u * t * b.y + t * t * c.y});
    }
  }
  Tensor img({size, size});
  for (std::size_t i = 0; i < size; ++i) {
    for (std::size_t j = 0; j < size; ++j) {
      const double py = (double(i) + 0.5) / double(size), px = (double(j) + 0.5) / double(size);
      double d2 = 1e9;
      for (const auto& p : samples) d2 = std::min(d2, (p.x - px) * (p.x - px) + (p.y - py) * (p.y - py));
      const double d = std::sqrt(d2);
      img.at(i, j) = std::clamp(1.0 - (d - width) / (0.5 / double(size)), 0.0, 1.0);
    }
  }
  return img;
}

void write_glyph_dataset(const std::filesystem::path& dir, const GlyphOptions& o) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw Error("cannot write " + (dir / "manifest.csv").string());
  manifest << "class_id,relative_path\n";
  for (std::size_t c = 0; c < o.classes; ++c) {
    const std::string cls = "glyph" + std::to_string(c);
    std::filesystem::create_directories(dir / cls);
    for (std::size_t e = 0; e < o.examples; ++e) {
      const std::string rel = cls + "/" + std::to_string(e) + ".csnt";
      csnt::save(dir / rel, render_glyph(c, o.seed, derive_seed(derive_seed(o.seed, c), e), o.size));
      manifest << cls << "," << rel << "\n";
    }
  }
}

}  // namespace csn
