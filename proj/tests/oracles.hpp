#pragma once

// Test-only reference implementations, independent of the library code paths
// they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "msdiff/linalg.hpp"

namespace oracles {

// Exhaustive maximum over full-cardinality matchings (min(rows, cols) pairs).
inline double brute_force_assignment(const msdiff::Mat& C) {
    const int nr = C.rows, ng = C.cols;
    if (nr == 0 || ng == 0) return 0.0;
    if (nr <= ng) {
        // map each row to a distinct column
        std::vector<int> cols(ng);
        for (int j = 0; j < ng; ++j) cols[j] = j;
        double best = -1e300;
        std::sort(cols.begin(), cols.end());
        do {
            double s = 0;
            for (int i = 0; i < nr; ++i) s += C.at(i, cols[i]);
            best = std::max(best, s);
        } while (std::next_permutation(cols.begin(), cols.end()));
        return best;
    }
    std::vector<int> rows(nr);
    for (int i = 0; i < nr; ++i) rows[i] = i;
    double best = -1e300;
    do {
        double s = 0;
        for (int j = 0; j < ng; ++j) s += C.at(rows[j], j);
        best = std::max(best, s);
    } while (std::next_permutation(rows.begin(), rows.end()));
    return best;
}

// Literal simulation of the sliding-window shift rule: start at l = 0; after
// iteration m, if m mod tau == 0, l <- min(l + s, T - w). Returns the window
// position in effect DURING iteration m.
inline int simulate_window(int64_t m, int T, int w, int tau, int s) {
    int l = 0;
    for (int64_t it = 1; it < m; ++it) {
        if (it % tau == 0) l = std::min(l + s, T - w);
    }
    return l;
}

// Composite-trapezoid quadrature of f over [lo, hi].
inline double quadrature(const std::function<double(double)>& f, double lo, double hi, int n) {
    double h = (hi - lo) / n;
    double acc = 0.5 * (f(lo) + f(hi));
    for (int i = 1; i < n; ++i) acc += f(lo + i * h);
    return acc * h;
}

// Central finite difference of a scalar function of one coordinate.
inline double central_diff(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace oracles
