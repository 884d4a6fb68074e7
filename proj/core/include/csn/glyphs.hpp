// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>

#include "csn/tensor.hpp"

// Procedural handwritten-glyph dataset in the manifest layout read by
// load_omniglot. Each class is a random set of pen strokes; each example
// redraws them with jittered control points, a small random affine warp and
// a varying pen width.
namespace csn {

struct GlyphOptions {
  std::size_t classes = 50;
  std::size_t examples = 20;
  std::size_t size = 28;
  std::uint64_t seed = 1;
};

/// Writes dir/manifest.csv and dir/<class>/<index>.csnt (f32 CSNT).
void write_glyph_dataset(const std::filesystem::path& dir, const GlyphOptions& options);

/// One rendered example of a class, values in [0, 1].
Tensor render_glyph(std::size_t class_id, std::uint64_t dataset_seed, std::uint64_t example_seed,
                    std::size_t size);

}  // namespace csn
