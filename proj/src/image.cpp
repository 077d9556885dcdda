#include "msdiff/image.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace msdiff {

static uint8_t quantize(double x) {
    double c = std::clamp(x, 0.0, 1.0);
    return (uint8_t)(c * 255.0 + 0.5);
}

void write_ppm(const std::string& path, const Grid& rgb) {
    if (rgb.c != 3) throw std::invalid_argument("write_ppm: expected 3 channels");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    f << "P6\n" << rgb.w << " " << rgb.h << "\n255\n";
    std::vector<uint8_t> buf((size_t)rgb.h * rgb.w * 3);
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = quantize(rgb.v[i]);
    f.write((const char*)buf.data(), (std::streamsize)buf.size());
}

void write_pgm(const std::string& path, const Grid& gray) {
    if (gray.c != 1) throw std::invalid_argument("write_pgm: expected 1 channel");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
    f << "P5\n" << gray.w << " " << gray.h << "\n255\n";
    std::vector<uint8_t> buf((size_t)gray.h * gray.w);
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = quantize(gray.v[i]);
    f.write((const char*)buf.data(), (std::streamsize)buf.size());
}

static void read_header(std::ifstream& f, const char* magic, int& w, int& h) {
    std::string m;
    f >> m;
    if (m != magic) throw std::runtime_error("image read: bad magic");
    int maxval = 0;
    f >> w >> h >> maxval;
    if (maxval != 255) throw std::runtime_error("image read: unsupported maxval");
    f.get();  // single whitespace after header
}

Grid read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
    int w = 0, h = 0;
    read_header(f, "P6", w, h);
    Grid g(h, w, 3);
    std::vector<uint8_t> buf((size_t)h * w * 3);
    f.read((char*)buf.data(), (std::streamsize)buf.size());
    if (!f) throw std::runtime_error("read_ppm: truncated file " + path);
    for (size_t i = 0; i < buf.size(); ++i) g.v[i] = buf[i] / 255.0;
    return g;
}

Grid read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_pgm: cannot open " + path);
    int w = 0, h = 0;
    read_header(f, "P5", w, h);
    Grid g(h, w, 1);
    std::vector<uint8_t> buf((size_t)h * w);
    f.read((char*)buf.data(), (std::streamsize)buf.size());
    if (!f) throw std::runtime_error("read_pgm: truncated file " + path);
    for (size_t i = 0; i < buf.size(); ++i) g.v[i] = buf[i] / 255.0;
    return g;
}

Grid patchify(const Grid& image, int patch) {
    if (patch < 1 || image.h % patch != 0 || image.w % patch != 0)
        throw std::invalid_argument("patchify: image dims not divisible by patch");
    const int gh = image.h / patch, gw = image.w / patch;
    Grid out(gh, gw, patch * patch * image.c);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            int idx = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    for (int ch = 0; ch < image.c; ++ch)
                        out.at(gy, gx, idx++) = image.at(gy * patch + dy, gx * patch + dx, ch);
        }
    return out;
}

Grid unpatchify(const Grid& grid, int patch, int channels) {
    if (grid.c != patch * patch * channels)
        throw std::invalid_argument("unpatchify: channel count does not match patch size");
    Grid out(grid.h * patch, grid.w * patch, channels);
    for (int gy = 0; gy < grid.h; ++gy)
        for (int gx = 0; gx < grid.w; ++gx) {
            int idx = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    for (int ch = 0; ch < channels; ++ch)
                        out.at(gy * patch + dy, gx * patch + dx, ch) = grid.at(gy, gx, idx++);
        }
    return out;
}

Grid clamp01(const Grid& g) {
    Grid out = g;
    for (auto& x : out.v) x = std::clamp(x, 0.0, 1.0);
    return out;
}

}  // namespace msdiff
