#include "msdiff/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "msdiff/image.hpp"
#include "msdiff/synth_embed.hpp"

namespace msdiff::synth {

namespace fs = std::filesystem;
using json = nlohmann::json;

static constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------------------
// glyph geometry
// ---------------------------------------------------------------------------

// Point-in-shape test in glyph coordinates (unit circumradius).
static bool inside_glyph(const IdentitySpec& id, double u, double v) {
    double r2 = u * u + v * v;
    switch (id.family) {
        case 0: {  // regular polygon; squares get a radius boost to keep area up
            int n = (int)id.shape_p0;
            double radius = (n == 4) ? 1.15 : 1.0;
            if (r2 > radius * radius) return false;
            double apothem = radius * std::cos(kPi / n);
            for (int k = 0; k < n; ++k) {
                double a = id.rot + (2.0 * kPi * k + kPi) / n;
                if (u * std::cos(a) + v * std::sin(a) > apothem) return false;
            }
            return true;
        }
        case 1: {  // ring
            double inner = id.shape_p0;
            return r2 <= 1.0 && r2 >= inner * inner;
        }
        case 2: {  // two crossing bars
            double w = id.shape_p0;
            double ca = std::cos(id.rot), sa = std::sin(id.rot);
            double a = u * ca + v * sa, b = -u * sa + v * ca;
            bool bar1 = std::abs(a) <= 1.0 && std::abs(b) <= w;
            bool bar2 = std::abs(b) <= 1.0 && std::abs(a) <= w;
            return bar1 || bar2;
        }
        case 3: {  // disk with an angular notch removed
            if (r2 > 1.0) return false;
            double ang = std::atan2(v, u) - id.rot;
            while (ang > kPi) ang -= 2 * kPi;
            while (ang < -kPi) ang += 2 * kPi;
            return std::abs(ang) > id.shape_p0 / 2.0;
        }
        default:
            return false;
    }
}

static void glyph_color(const IdentitySpec& id, double u, double v, double out[3]) {
    double t = std::sin(id.stripe_freq * kPi * (u * std::cos(id.stripe_dir) + v * std::sin(id.stripe_dir)) +
                        id.stripe_phase);
    const double* c = (t >= 0) ? id.color_a : id.color_b;
    out[0] = c[0];
    out[1] = c[1];
    out[2] = c[2];
}

static void hsv_to_rgb(double h, double s, double v, double out[3]) {
    h = h - std::floor(h);
    double i = std::floor(h * 6.0);
    double f = h * 6.0 - i;
    double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
    switch ((int)i % 6) {
        case 0: out[0] = v; out[1] = t; out[2] = p; break;
        case 1: out[0] = q; out[1] = v; out[2] = p; break;
        case 2: out[0] = p; out[1] = v; out[2] = t; break;
        case 3: out[0] = p; out[1] = q; out[2] = v; break;
        case 4: out[0] = t; out[1] = p; out[2] = v; break;
        default: out[0] = v; out[1] = p; out[2] = q; break;
    }
}

static void draw_glyph(Grid& canvas, const IdentitySpec& id, const Placement& pl, Grid* mask) {
    int x0 = std::max(0, (int)std::floor(pl.cx - 1.3 * pl.scale));
    int x1 = std::min(canvas.w - 1, (int)std::ceil(pl.cx + 1.3 * pl.scale));
    int y0 = std::max(0, (int)std::floor(pl.cy - 1.3 * pl.scale));
    int y1 = std::min(canvas.h - 1, (int)std::ceil(pl.cy + 1.3 * pl.scale));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            double u = (x + 0.5 - pl.cx) / pl.scale;
            double v = (y + 0.5 - pl.cy) / pl.scale;
            if (!inside_glyph(id, u, v)) continue;
            double c[3];
            glyph_color(id, u, v, c);
            for (int ch = 0; ch < 3; ++ch) canvas.at(y, x, ch) = c[ch];
            if (mask) mask->at(y, x, 0) = 1.0;
        }
}

// ---------------------------------------------------------------------------
// identities
// ---------------------------------------------------------------------------

IdentitySpec sample_identity(int64_t identity_id, Rng& rng) {
    IdentitySpec id;
    id.identity_id = identity_id;
    id.family = (int)rng.uniform_int(0, 3);
    switch (id.family) {
        case 0: id.shape_p0 = (double)rng.uniform_int(4, 8); break;   // vertices
        case 1: id.shape_p0 = rng.uniform(0.30, 0.50); break;         // inner radius
        case 2: id.shape_p0 = rng.uniform(0.40, 0.55); break;         // bar half-width
        default: id.shape_p0 = rng.uniform(0.8, 1.6); break;          // notch angle (rad)
    }
    id.rot = rng.uniform(0.0, 2 * kPi);
    id.stripe_freq = (double)rng.uniform_int(2, 4);
    id.stripe_phase = rng.uniform(0.0, 2 * kPi);
    id.stripe_dir = rng.uniform(0.0, kPi);
    double hue = rng.uniform(0.0, 1.0);
    double hue2 = hue + rng.uniform(0.18, 0.45) * (rng.uniform() < 0.5 ? 1.0 : -1.0);
    hsv_to_rgb(hue, rng.uniform(0.85, 1.0), rng.uniform(0.85, 1.0), id.color_a);
    hsv_to_rgb(hue2, rng.uniform(0.85, 1.0), rng.uniform(0.70, 0.95), id.color_b);
    return id;
}

Grid render_reference(const IdentitySpec& id, const GeneratorConfig& gen) {
    Grid ref(gen.ref_canvas, gen.ref_canvas, 3);
    ref.fill(gen.background);
    Placement pl{gen.ref_canvas / 2.0, gen.ref_canvas / 2.0, gen.ref_scale};
    draw_glyph(ref, id, pl, nullptr);
    return ref;
}

std::vector<IdentitySpec> make_identity_pool(uint64_t seed, int size, const GeneratorConfig& gen) {
    Rng rng(seed);
    DetectorConfig det_cfg;
    det_cfg.background = gen.background;
    det_cfg.min_area = std::max(8, gen.ref_canvas * gen.ref_canvas / 16);
    std::vector<IdentitySpec> pool;
    std::vector<std::vector<double>> embeddings;
    int64_t next_id = (int64_t)(seed % 100000) * 1000;
    int attempts = 0;
    while ((int)pool.size() < size) {
        if (++attempts > 200 * size)
            throw std::runtime_error("make_identity_pool: separation rejection did not converge");
        IdentitySpec cand = sample_identity(next_id, rng);
        Grid ref = render_reference(cand, gen);
        auto dets = detect_components(ref, det_cfg);
        if (dets.size() != 1) continue;
        auto emb = embed_component(ref, dets[0]);
        bool ok = true;
        for (const auto& other : embeddings) {
            if (cosine(emb, other) > 0.45) {
                ok = false;
                break;
            }
        }
        if (!ok) continue;
        pool.push_back(cand);
        embeddings.push_back(std::move(emb));
        ++next_id;
    }
    return pool;
}

// ---------------------------------------------------------------------------
// scenes
// ---------------------------------------------------------------------------

std::vector<int> encode_prompt(const SceneSpec& scene) {
    if (scene.subjects.empty()) throw std::invalid_argument("encode_prompt: empty scene");
    std::vector<int> tokens;
    tokens.push_back(kTokenCountBase + (int)scene.subjects.size() - 1);
    for (const auto& s : scene.subjects)
        tokens.push_back(identity_token(s.identity.identity_id, scene.gen.vocab_size));
    tokens.push_back(kTokenLayoutRow);
    while ((int)tokens.size() < scene.gen.max_subjects + 2) tokens.push_back(kTokenPad);
    return tokens;
}

PromptConstraints decode_prompt(const std::vector<int>& tokens) {
    PromptConstraints pc;
    if (tokens.empty()) throw std::invalid_argument("decode_prompt: empty token sequence");
    pc.count = tokens[0] - kTokenCountBase + 1;
    if (pc.count < 1 || pc.count > kMaxCount) throw std::invalid_argument("decode_prompt: bad count token");
    if ((int)tokens.size() < pc.count + 2) throw std::invalid_argument("decode_prompt: truncated sequence");
    for (int i = 0; i < pc.count; ++i) pc.identity_tokens.push_back(tokens[1 + i]);
    if (tokens[1 + pc.count] != kTokenLayoutRow)
        throw std::invalid_argument("decode_prompt: missing layout token");
    return pc;
}

int identity_token(int64_t identity_id, int vocab_size) {
    int span = vocab_size - kTokenIdentityBase;
    if (span < 1) throw std::invalid_argument("identity_token: vocabulary too small");
    return kTokenIdentityBase + (int)(((identity_id % span) + span) % span);
}

SceneSpec make_scene(int n_subjects, const std::vector<IdentitySpec>& pool, LayoutRule rule,
                     Rng& rng, const GeneratorConfig& gen) {
    if (n_subjects < 1) throw std::invalid_argument("make_scene: need at least one subject");
    if (n_subjects > gen.max_subjects) throw std::invalid_argument("make_scene: more subjects than capacity");
    if ((int)pool.size() < n_subjects) throw std::invalid_argument("make_scene: pool too small");
    if (rule != LayoutRule::kRow) throw std::invalid_argument("make_scene: unknown layout rule");

    SceneSpec scene;
    scene.gen = gen;
    scene.seed = rng.next_u64();
    Rng srng(scene.seed);

    // distinct identities
    std::vector<int> picked;
    while ((int)picked.size() < n_subjects) {
        int k = (int)srng.uniform_int(0, (int64_t)pool.size() - 1);
        if (std::find(picked.begin(), picked.end(), k) == picked.end()) picked.push_back(k);
    }

    // one column per subject; jitter stays inside the column so masks are
    // disjoint by construction, verified after rendering anyway
    const double canvas = gen.canvas;
    const double col_w = canvas / n_subjects;
    const int max_retries = 64;
    for (int attempt = 0;; ++attempt) {
        scene.subjects.clear();
        bool ok = true;
        for (int i = 0; i < n_subjects; ++i) {
            Subject s;
            s.identity = pool[picked[i]];
            double scale = srng.uniform(gen.scale_min, gen.scale_max);
            double extent = 1.3 * scale;
            double cx_lo = i * col_w + extent, cx_hi = (i + 1) * col_w - extent;
            double cy_lo = extent, cy_hi = canvas - extent;
            if (cx_hi < cx_lo || cy_hi < cy_lo) {
                ok = false;
                break;
            }
            double jx = std::min(1.5, (cx_hi - cx_lo) / 2.0);
            double cx_mid = (cx_lo + cx_hi) / 2.0;
            s.placement.cx = srng.uniform(cx_mid - jx, cx_mid + jx);
            s.placement.cy = srng.uniform(cy_lo, cy_hi);
            s.placement.scale = scale;
            scene.subjects.push_back(s);
        }
        if (ok) break;
        if (attempt >= max_retries)
            throw std::runtime_error("make_scene: could not place subjects without overlap");
    }
    std::sort(scene.subjects.begin(), scene.subjects.end(),
              [](const Subject& a, const Subject& b) { return a.placement.cx < b.placement.cx; });
    scene.prompt_tokens = encode_prompt(scene);
    return scene;
}

RenderedScene render_scene(const SceneSpec& scene) {
    RenderedScene out;
    out.target = Grid(scene.gen.canvas, scene.gen.canvas, 3);
    out.target.fill(scene.gen.background);
    for (const auto& s : scene.subjects) {
        Grid mask(scene.gen.canvas, scene.gen.canvas, 1);
        draw_glyph(out.target, s.identity, s.placement, &mask);
        out.pixel_masks.push_back(std::move(mask));
        out.references.push_back(render_reference(s.identity, scene.gen));
    }
    // masks of distinct subjects must be disjoint
    for (size_t i = 0; i < out.pixel_masks.size(); ++i)
        for (size_t j = i + 1; j < out.pixel_masks.size(); ++j) {
            for (size_t p = 0; p < out.pixel_masks[i].v.size(); ++p)
                if (out.pixel_masks[i].v[p] > 0 && out.pixel_masks[j].v[p] > 0)
                    throw std::runtime_error("render_scene: overlapping subject masks");
        }
    return out;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

static json identity_to_json(const IdentitySpec& id) {
    return json{{"identity_id", id.identity_id},
                {"family", id.family},
                {"shape_p0", id.shape_p0},
                {"rot", id.rot},
                {"stripe_freq", id.stripe_freq},
                {"stripe_phase", id.stripe_phase},
                {"stripe_dir", id.stripe_dir},
                {"color_a", {id.color_a[0], id.color_a[1], id.color_a[2]}},
                {"color_b", {id.color_b[0], id.color_b[1], id.color_b[2]}}};
}

static IdentitySpec identity_from_json(const json& j) {
    IdentitySpec id;
    id.identity_id = j.at("identity_id").get<int64_t>();
    id.family = j.at("family").get<int>();
    id.shape_p0 = j.at("shape_p0").get<double>();
    id.rot = j.at("rot").get<double>();
    id.stripe_freq = j.at("stripe_freq").get<double>();
    id.stripe_phase = j.at("stripe_phase").get<double>();
    id.stripe_dir = j.at("stripe_dir").get<double>();
    for (int c = 0; c < 3; ++c) {
        id.color_a[c] = j.at("color_a").at(c).get<double>();
        id.color_b[c] = j.at("color_b").at(c).get<double>();
    }
    return id;
}

std::string scene_to_json(const SceneSpec& scene) {
    json j;
    j["seed"] = scene.seed;
    j["canvas"] = scene.gen.canvas;
    j["ref_canvas"] = scene.gen.ref_canvas;
    j["max_subjects"] = scene.gen.max_subjects;
    j["vocab_size"] = scene.gen.vocab_size;
    j["background"] = scene.gen.background;
    j["scale_min"] = scene.gen.scale_min;
    j["scale_max"] = scene.gen.scale_max;
    j["ref_scale"] = scene.gen.ref_scale;
    j["prompt_tokens"] = scene.prompt_tokens;
    j["subjects"] = json::array();
    for (const auto& s : scene.subjects) {
        j["subjects"].push_back(json{{"identity", identity_to_json(s.identity)},
                                     {"cx", s.placement.cx},
                                     {"cy", s.placement.cy},
                                     {"scale", s.placement.scale}});
    }
    return j.dump(2);
}

SceneSpec scene_from_json(const std::string& text) {
    json j = json::parse(text);
    SceneSpec scene;
    scene.seed = j.at("seed").get<uint64_t>();
    scene.gen.canvas = j.at("canvas").get<int>();
    scene.gen.ref_canvas = j.at("ref_canvas").get<int>();
    scene.gen.max_subjects = j.at("max_subjects").get<int>();
    scene.gen.vocab_size = j.at("vocab_size").get<int>();
    scene.gen.background = j.at("background").get<double>();
    scene.gen.scale_min = j.at("scale_min").get<double>();
    scene.gen.scale_max = j.at("scale_max").get<double>();
    scene.gen.ref_scale = j.at("ref_scale").get<double>();
    scene.prompt_tokens = j.at("prompt_tokens").get<std::vector<int>>();
    for (const auto& js : j.at("subjects")) {
        Subject s;
        s.identity = identity_from_json(js.at("identity"));
        s.placement.cx = js.at("cx").get<double>();
        s.placement.cy = js.at("cy").get<double>();
        s.placement.scale = js.at("scale").get<double>();
        scene.subjects.push_back(s);
    }
    return scene;
}

void write_dataset(const std::string& dir, const std::vector<SceneSpec>& scenes) {
    fs::create_directories(dir);
    json index;
    index["records"] = json::array();
    for (size_t i = 0; i < scenes.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%05zu", i);
        fs::path sub = fs::path(dir) / name;
        fs::create_directories(sub);
        RenderedScene r = render_scene(scenes[i]);
        write_ppm((sub / "target.ppm").string(), r.target);
        for (size_t k = 0; k < r.references.size(); ++k) {
            write_ppm((sub / ("ref_" + std::to_string(k) + ".ppm")).string(), r.references[k]);
            write_pgm((sub / ("mask_" + std::to_string(k) + ".pgm")).string(), r.pixel_masks[k]);
        }
        std::ofstream mf(sub / "scene.json");
        mf << scene_to_json(scenes[i]) << "\n";
        index["records"].push_back(json{{"name", name},
                                        {"subjects", scenes[i].subjects.size()},
                                        {"seed", scenes[i].seed}});
    }
    std::ofstream f(fs::path(dir) / "manifest.json");
    f << index.dump(2) << "\n";
}

}  // namespace msdiff::synth
