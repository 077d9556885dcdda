#include "msdiff/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "msdiff/attention_reg.hpp"
#include "msdiff/flow.hpp"
#include "msdiff/image.hpp"

namespace msdiff::evalkit {

using json = nlohmann::json;

double identity_fidelity(const std::vector<synth::SceneSpec>& scenes,
                         const std::vector<Grid>& sampled_images,
                         const synth::DetectorConfig& det) {
    if (scenes.size() != sampled_images.size() || scenes.empty())
        throw std::invalid_argument("identity_fidelity: empty or mismatched inputs");
    double acc = 0;
    for (size_t i = 0; i < scenes.size(); ++i) {
        auto refs = rewards::embed_references(scenes[i]);
        acc += rewards::id_reward(refs, sampled_images[i], det).first;
    }
    return acc / (double)scenes.size();
}

std::pair<std::vector<double>, double> attention_overlap_and_leakage(
    const AttentionRecordSet& records, const synth::SceneSpec& scene, int grid_h, int grid_w) {
    const int n_sub = (int)scene.subjects.size();
    if (records.n_subjects() != n_sub)
        throw std::invalid_argument("attention_overlap_and_leakage: subject count mismatch");
    synth::RenderedScene rendered = synth::render_scene(scene);
    std::vector<attn::SubjectMap> maps;
    std::vector<attn::SubjectMask> masks;
    for (int i = 0; i < n_sub; ++i) {
        maps.push_back(attn::aggregate_subject_map(records, i, grid_h, grid_w));
        masks.push_back(attn::rasterize_mask(rendered.pixel_masks[i], i, grid_h, grid_w));
    }
    std::vector<double> dice;
    for (int i = 0; i < n_sub; ++i) {
        double inter = 0, s1 = 0, s2 = 0;
        for (size_t j = 0; j < maps[i].values.v.size(); ++j) {
            inter += maps[i].values.v[j] * masks[i].values.v[j];
            s1 += maps[i].values.v[j];
            s2 += masks[i].values.v[j];
        }
        dice.push_back(s1 + s2 > 0 ? 2.0 * inter / (s1 + s2) : 0.0);
    }
    double cross = 0, total = 0;
    for (int i = 0; i < n_sub; ++i) {
        for (size_t j = 0; j < maps[i].values.v.size(); ++j) total += maps[i].values.v[j];
        for (int o = 0; o < n_sub; ++o) {
            if (o == i) continue;
            for (size_t j = 0; j < maps[i].values.v.size(); ++j)
                cross += maps[i].values.v[j] * masks[o].values.v[j];
        }
    }
    return {dice, total > 0 ? cross / total : 0.0};
}

EvalReport evaluate_model(const Model& model, const AdapterSet* adapters, const EvalSettings& s,
                          std::vector<synth::SceneSpec>* out_scenes, std::vector<Grid>* out_images) {
    auto pool = synth::make_identity_pool(s.pool_seed, s.pool_size, s.gen);
    Rng rng(s.scene_seed);
    flow::SampleSchedule schedule(s.sample_steps, 0.7);

    EvalReport report;
    report.n_scenes = s.n_scenes;
    std::vector<synth::SceneSpec> scenes;
    std::vector<Grid> images;
    double dice_acc = 0, leak_acc = 0, prompt_acc = 0, fid_acc = 0;
    for (int k = 0; k < s.n_scenes; ++k) {
        synth::SceneSpec scene = synth::make_scene(s.n_subjects, pool, synth::LayoutRule::kRow, rng, s.gen);
        Rng srng(scene.seed ^ 0xE5A1u);

        // pure ODE sampling for reproducible metrics
        flow::Trajectory traj = flow::mixed_sample(model, scene, schedule, std::nullopt, srng, adapters);
        Grid image = clamp01(unpatchify(traj.final_state(), s.patch, 3));

        auto refs = rewards::embed_references(scene);
        fid_acc += rewards::id_reward(refs, image).first;
        prompt_acc += rewards::synthetic_text_score(image, scene);

        // attention metrics probed on the ground-truth interpolation
        synth::RenderedScene rendered = synth::render_scene(scene);
        Grid z0 = patchify(rendered.target, s.patch);
        Grid eps = z0;
        for (auto& v : eps.v) v = srng.gaussian();
        Grid zt = flow::interpolate(z0, eps, s.attention_probe_t);
        TokenBatch batch = assemble_tokens(scene, zt, model.cfg);
        ForwardResult res = forward(model, batch, s.attention_probe_t, true, adapters);
        auto [dice, leak] = attention_overlap_and_leakage(*res.records, scene, model.cfg.grid_h,
                                                          model.cfg.grid_w);
        double dmean = 0;
        for (double d : dice) dmean += d / dice.size();
        dice_acc += dmean;
        leak_acc += leak;

        if (out_scenes || out_images) {
            scenes.push_back(scene);
            images.push_back(std::move(image));
        }
    }
    report.identity_fidelity = fid_acc / s.n_scenes;
    report.prompt_score = prompt_acc / s.n_scenes;
    report.attention_dice = dice_acc / s.n_scenes;
    report.leakage = leak_acc / s.n_scenes;
    if (out_scenes) *out_scenes = std::move(scenes);
    if (out_images) *out_images = std::move(images);
    return report;
}

EvalReport evaluate_model(const Model& model, const AdapterSet* adapters, const EvalSettings& s) {
    return evaluate_model(model, adapters, s, nullptr, nullptr);
}

AblationTable ablation_report(const std::vector<AblationRow>& rows) {
    if (rows.size() < 2) throw std::invalid_argument("ablation_report: need at least 2 runs");
    AblationTable t;
    t.rows = rows;
    t.ordering_holds = true;
    for (size_t i = 1; i < rows.size(); ++i)
        if (rows[i].report.identity_fidelity < rows[i - 1].report.identity_fidelity)
            t.ordering_holds = false;
    return t;
}

std::string ablation_to_csv(const AblationTable& table) {
    std::ostringstream os;
    os << "label,identity_fidelity,prompt_score,attention_dice,leakage,n_scenes\n";
    for (const auto& r : table.rows) {
        os << r.label << "," << r.report.identity_fidelity << "," << r.report.prompt_score << ","
           << r.report.attention_dice << "," << r.report.leakage << "," << r.report.n_scenes << "\n";
    }
    return os.str();
}

std::string ablation_to_text(const AblationTable& table) {
    std::ostringstream os;
    os << "ablation summary (" << table.rows.size() << " runs)\n";
    std::vector<AblationRow> sorted = table.rows;
    std::stable_sort(sorted.begin(), sorted.end(), [](const AblationRow& a, const AblationRow& b) {
        return a.report.identity_fidelity < b.report.identity_fidelity;
    });
    for (const auto& r : sorted) {
        os << "  " << r.label << ": identity_fidelity=" << r.report.identity_fidelity
           << " prompt=" << r.report.prompt_score << " dice=" << r.report.attention_dice
           << " leakage=" << r.report.leakage << "\n";
    }
    os << "chain ordering (identity_fidelity nondecreasing in run order): "
       << (table.ordering_holds ? "holds" : "violated") << "\n";
    return os.str();
}

void write_attention_panel(const std::string& path, const std::vector<Mat>& maps,
                           const std::vector<Mat>& masks) {
    if (maps.empty() || maps.size() != masks.size())
        throw std::invalid_argument("write_attention_panel: mismatched maps/masks");
    const int gh = maps[0].rows, gw = maps[0].cols;
    const int cell = 8, pad = 2;
    const int panel_w = (int)maps.size() * (2 * gw * cell + 3 * pad);
    const int panel_h = gh * cell + 2 * pad;
    Grid img(panel_h, panel_w, 3);
    img.fill(0.05);
    int x_off = pad;
    for (size_t i = 0; i < maps.size(); ++i) {
        for (int pass = 0; pass < 2; ++pass) {
            const Mat& src = pass == 0 ? maps[i] : masks[i];
            for (int y = 0; y < gh; ++y)
                for (int x = 0; x < gw; ++x) {
                    double v = src.at(y, x);
                    for (int dy = 0; dy < cell; ++dy)
                        for (int dx = 0; dx < cell; ++dx) {
                            int py = pad + y * cell + dy, px = x_off + x * cell + dx;
                            img.at(py, px, 0) = pass == 0 ? v : 0.1;
                            img.at(py, px, 1) = pass == 0 ? v * 0.6 : v;
                            img.at(py, px, 2) = pass == 0 ? 0.1 : 0.1;
                        }
                }
            x_off += gw * cell + pad;
        }
        x_off += pad;
    }
    write_ppm(path, img);
}

void render_metric_curve(const std::string& metrics_jsonl, const std::string& field,
                         const std::string& out_ppm) {
    std::ifstream f(metrics_jsonl);
    if (!f) throw std::runtime_error("render_metric_curve: cannot open " + metrics_jsonl);
    std::vector<double> values;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        if (j.contains(field)) values.push_back(j.at(field).get<double>());
    }
    if (values.empty()) throw std::runtime_error("render_metric_curve: field '" + field + "' not found");
    const int W = 320, H = 160;
    Grid img(H, W, 3);
    img.fill(1.0);
    double lo = *std::min_element(values.begin(), values.end());
    double hi = *std::max_element(values.begin(), values.end());
    if (hi - lo < 1e-12) hi = lo + 1.0;
    for (size_t k = 0; k + 1 < values.size(); ++k) {
        double x0 = (double)k / (values.size() - 1) * (W - 1);
        double x1 = (double)(k + 1) / (values.size() - 1) * (W - 1);
        double y0 = (H - 1) * (1.0 - (values[k] - lo) / (hi - lo));
        double y1 = (H - 1) * (1.0 - (values[k + 1] - lo) / (hi - lo));
        int steps = std::max(1, (int)std::abs(x1 - x0) + (int)std::abs(y1 - y0));
        for (int s = 0; s <= steps; ++s) {
            double u = (double)s / steps;
            int px = (int)std::lround(x0 + u * (x1 - x0));
            int py = (int)std::lround(y0 + u * (y1 - y0));
            if (px >= 0 && px < W && py >= 0 && py < H) {
                img.at(py, px, 0) = 0.8;
                img.at(py, px, 1) = 0.1;
                img.at(py, px, 2) = 0.1;
            }
        }
    }
    write_ppm(out_ppm, img);
}

}  // namespace msdiff::evalkit
