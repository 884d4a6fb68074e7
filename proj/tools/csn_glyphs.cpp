// SPDX-License-Identifier: Apache-2.0
// csn_glyphs: writes a procedural handwritten-glyph dataset in manifest layout.
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "csn/glyphs.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a procedural glyph dataset (manifest.csv + CSNT images)"};
  std::string dir;
  csn::GlyphOptions o;
  app.add_option("dir", dir, "output directory")->required();
  app.add_option("--classes", o.classes, "glyph classes")->capture_default_str();
  app.add_option("--examples", o.examples, "examples per class")->capture_default_str();
  app.add_option("--size", o.size, "image side in pixels")->capture_default_str();
  app.add_option("--seed", o.seed, "dataset seed")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  try {
    csn::write_glyph_dataset(dir, o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  std::cout << "wrote " << o.classes << " classes x " << o.examples << " examples to " << dir << '\n';
  return 0;
}
