#pragma once

#include <string>

#include "msdiff/grid.hpp"

namespace msdiff {

// Binary PPM/PGM readers and writers, 8-bit. Values are clamped to [0,1]
// before quantization.
void write_ppm(const std::string& path, const Grid& rgb);
void write_pgm(const std::string& path, const Grid& gray);
Grid read_ppm(const std::string& path);
Grid read_pgm(const std::string& path);

// Non-overlapping p x p patchify: (H, W, C) -> (H/p, W/p, p*p*C), channel
// order (dy, dx, c). Stands in for a learned autoencoder.
Grid patchify(const Grid& image, int patch);
Grid unpatchify(const Grid& grid, int patch, int channels);

Grid clamp01(const Grid& g);

}  // namespace msdiff
