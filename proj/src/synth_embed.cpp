#include "msdiff/synth_embed.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

namespace msdiff::synth {

static bool is_foreground(const Grid& img, int y, int x, const DetectorConfig& cfg) {
    for (int ch = 0; ch < img.c; ++ch) {
        if (std::abs(img.at(y, x, ch) - cfg.background) > cfg.threshold) return true;
    }
    return false;
}

std::vector<Detection> detect_components(const Grid& image, const DetectorConfig& cfg) {
    const int h = image.h, w = image.w;
    std::vector<int> label((size_t)h * w, -1);
    std::vector<Detection> out;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (label[(size_t)y * w + x] != -1 || !is_foreground(image, y, x, cfg)) continue;
            Detection det;
            det.box = {x, y, x, y, 0, 0.0, 0.0};
            std::queue<int> q;
            q.push(y * w + x);
            label[(size_t)y * w + x] = (int)out.size();
            while (!q.empty()) {
                int p = q.front();
                q.pop();
                int py = p / w, px = p % w;
                det.pixels.push_back(p);
                det.box.x0 = std::min(det.box.x0, px);
                det.box.x1 = std::max(det.box.x1, px);
                det.box.y0 = std::min(det.box.y0, py);
                det.box.y1 = std::max(det.box.y1, py);
                det.box.centroid_x += px;
                det.box.centroid_y += py;
                const int ny[4] = {py - 1, py + 1, py, py};
                const int nx[4] = {px, px, px - 1, px + 1};
                for (int k = 0; k < 4; ++k) {
                    if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
                    int np = ny[k] * w + nx[k];
                    if (label[(size_t)np] != -1 || !is_foreground(image, ny[k], nx[k], cfg)) continue;
                    label[(size_t)np] = (int)out.size();
                    q.push(np);
                }
            }
            det.box.area = (int)det.pixels.size();
            det.box.centroid_x /= det.box.area;
            det.box.centroid_y /= det.box.area;
            out.push_back(std::move(det));
        }
    }
    out.erase(std::remove_if(out.begin(), out.end(),
                             [&](const Detection& d) { return d.box.area < cfg.min_area; }),
              out.end());
    std::sort(out.begin(), out.end(),
              [](const Detection& a, const Detection& b) { return a.box.x0 < b.box.x0; });
    return out;
}

// Hu invariants of the binary component mask.
static void hu_moments(const Detection& det, int img_w, double hu[7]) {
    const double n = (double)det.pixels.size();
    double cx = det.box.centroid_x, cy = det.box.centroid_y;
    double mu[4][4] = {};
    for (int p : det.pixels) {
        double dx = (p % img_w) - cx;
        double dy = (p / img_w) - cy;
        double xp[4] = {1, dx, dx * dx, dx * dx * dx};
        double yp[4] = {1, dy, dy * dy, dy * dy * dy};
        for (int i = 0; i <= 3; ++i)
            for (int j = 0; j + i <= 3; ++j) mu[i][j] += xp[i] * yp[j];
    }
    auto eta = [&](int p, int q) { return mu[p][q] / std::pow(n, 1.0 + (p + q) / 2.0); };
    double n20 = eta(2, 0), n02 = eta(0, 2), n11 = eta(1, 1);
    double n30 = eta(3, 0), n03 = eta(0, 3), n21 = eta(2, 1), n12 = eta(1, 2);
    hu[0] = n20 + n02;
    hu[1] = (n20 - n02) * (n20 - n02) + 4 * n11 * n11;
    hu[2] = (n30 - 3 * n12) * (n30 - 3 * n12) + (3 * n21 - n03) * (3 * n21 - n03);
    hu[3] = (n30 + n12) * (n30 + n12) + (n21 + n03) * (n21 + n03);
    hu[4] = (n30 - 3 * n12) * (n30 + n12) * ((n30 + n12) * (n30 + n12) - 3 * (n21 + n03) * (n21 + n03)) +
            (3 * n21 - n03) * (n21 + n03) * (3 * (n30 + n12) * (n30 + n12) - (n21 + n03) * (n21 + n03));
    hu[5] = (n20 - n02) * ((n30 + n12) * (n30 + n12) - (n21 + n03) * (n21 + n03)) +
            4 * n11 * (n30 + n12) * (n21 + n03);
    hu[6] = (3 * n21 - n03) * (n30 + n12) * ((n30 + n12) * (n30 + n12) - 3 * (n21 + n03) * (n21 + n03)) -
            (n30 - 3 * n12) * (n21 + n03) * (3 * (n30 + n12) * (n30 + n12) - (n21 + n03) * (n21 + n03));
}

std::vector<double> embed_component(const Grid& image, const Detection& det) {
    // 4x4x4 RGB histogram over component pixels
    std::vector<double> hist(64, 0.0);
    for (int p : det.pixels) {
        int y = p / image.w, x = p % image.w;
        int b[3];
        for (int ch = 0; ch < 3; ++ch) {
            double v = std::clamp(image.at(y, x, ch), 0.0, 1.0);
            b[ch] = std::min(3, (int)(v * 4.0));
        }
        hist[(size_t)b[0] * 16 + b[1] * 4 + b[2]] += 1.0;
    }
    double hn = 0.0;
    for (double v : hist) hn += v * v;
    hn = std::sqrt(std::max(hn, 1e-30));

    double hu[7];
    hu_moments(det, image.w, hu);
    double mom[7];
    double mn = 0.0;
    for (int i = 0; i < 7; ++i) {
        double s = hu[i] >= 0 ? 1.0 : -1.0;
        mom[i] = s * std::log1p(std::abs(hu[i]) * 1e6);
        mn += mom[i] * mom[i];
    }
    mn = std::sqrt(std::max(mn, 1e-30));

    // color dominates, shape refines
    const double w_hist = std::sqrt(0.85), w_mom = std::sqrt(0.15);
    std::vector<double> e;
    e.reserve(71);
    for (double v : hist) e.push_back(w_hist * v / hn);
    for (int i = 0; i < 7; ++i) e.push_back(w_mom * mom[i] / mn);
    return e;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        num += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0 || nb <= 0) return 0.0;
    return num / std::sqrt(na * nb);
}

}  // namespace msdiff::synth
