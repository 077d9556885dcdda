#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace msdiff {

// Dense H x W x C array of doubles. Used for latent grids, velocity fields
// and RGB canvases (c=3).
struct Grid {
    int h = 0;
    int w = 0;
    int c = 0;
    std::vector<double> v;

    Grid() = default;
    Grid(int h_, int w_, int c_) : h(h_), w(w_), c(c_), v((size_t)h_ * w_ * c_, 0.0) {}

    double& at(int y, int x, int ch) { return v[((size_t)y * w + x) * c + ch]; }
    double at(int y, int x, int ch) const { return v[((size_t)y * w + x) * c + ch]; }

    size_t size() const { return v.size(); }
    bool same_shape(const Grid& o) const { return h == o.h && w == o.w && c == o.c; }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }
};

inline void require_same_shape(const Grid& a, const Grid& b, const char* where) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(where) + ": shape mismatch (" +
                                    std::to_string(a.h) + "x" + std::to_string(a.w) + "x" + std::to_string(a.c) +
                                    " vs " +
                                    std::to_string(b.h) + "x" + std::to_string(b.w) + "x" + std::to_string(b.c) + ")");
    }
}

}  // namespace msdiff
