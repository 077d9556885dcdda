#pragma once

#include <vector>

#include "msdiff/grid.hpp"

namespace msdiff::synth {

struct DetectionBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive pixel bounds
    int area = 0;
    double centroid_x = 0, centroid_y = 0;
};

struct Detection {
    DetectionBox box;
    std::vector<int> pixels;  // flat y*w+x indices of component pixels
};

struct DetectorConfig {
    double background = 0.10;
    double threshold = 0.12;  // per-channel deviation from background
    int min_area = 256;       // 4 token cells at the default 8px patch
};

// Connected components (4-neighborhood) of pixels deviating from the uniform
// background, smallest-x0 first for a deterministic order.
std::vector<Detection> detect_components(const Grid& image, const DetectorConfig& cfg);

// Unit-norm descriptor: 4x4x4 color histogram over component pixels plus
// log-scaled Hu moments of the component mask.
std::vector<double> embed_component(const Grid& image, const Detection& det);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace msdiff::synth
