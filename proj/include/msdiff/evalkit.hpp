#pragma once

#include <string>
#include <utility>
#include <vector>

#include "msdiff/adapters.hpp"
#include "msdiff/model.hpp"
#include "msdiff/rewards.hpp"
#include "msdiff/synthdata.hpp"

namespace msdiff::evalkit {

struct EvalReport {
    double identity_fidelity = 0;  // mean matched similarity (Hungarian)
    double prompt_score = 0;       // mean text-constraint satisfaction
    double attention_dice = 0;     // mean per-subject dice coefficient
    double leakage = 0;            // mean cross-subject attention mass
    int n_scenes = 0;
};

// Mean over scenes of the Hungarian-matched similarity reward.
double identity_fidelity(const std::vector<synth::SceneSpec>& scenes,
                         const std::vector<Grid>& sampled_images,
                         const synth::DetectorConfig& det = {});

// Per-subject dice between the aggregated attention map and the rasterized
// ground-truth mask, plus the cross-subject leakage fraction
// sum_{i != i'} sum_j Mhat_i,j M_i',j / sum_i sum_j Mhat_i,j.
std::pair<std::vector<double>, double> attention_overlap_and_leakage(
    const AttentionRecordSet& records, const synth::SceneSpec& scene, int grid_h, int grid_w);

struct EvalSettings {
    int n_scenes = 32;
    uint64_t scene_seed = 1234;
    int pool_size = 32;
    uint64_t pool_seed = 99;  // separate pool: unseen identities
    int n_subjects = 2;
    int sample_steps = 16;
    int patch = 8;
    double attention_probe_t = 0.5;
    synth::GeneratorConfig gen;
};

// Deterministic evaluation: pure-ODE sampling for images, one recorded
// forward pass at the probe time for attention metrics.
EvalReport evaluate_model(const Model& model, const AdapterSet* adapters, const EvalSettings& s);

// Also returns the sampled images (callers reuse them for reward scoring).
EvalReport evaluate_model(const Model& model, const AdapterSet* adapters, const EvalSettings& s,
                          std::vector<synth::SceneSpec>* out_scenes, std::vector<Grid>* out_images);

struct AblationRow {
    std::string label;
    EvalReport report;
};

struct AblationTable {
    std::vector<AblationRow> rows;   // in the order given (training chain order)
    bool ordering_holds = false;     // identity_fidelity nondecreasing along rows
};

AblationTable ablation_report(const std::vector<AblationRow>& rows);
std::string ablation_to_csv(const AblationTable& table);
std::string ablation_to_text(const AblationTable& table);

// Side-by-side heatmap panel (attention map / mask per subject) for one scene.
void write_attention_panel(const std::string& path, const std::vector<Mat>& maps,
                           const std::vector<Mat>& masks);

// Metric-vs-step curve from a JSONL metrics log, rendered to a PPM image.
void render_metric_curve(const std::string& metrics_jsonl, const std::string& field,
                         const std::string& out_ppm);

}  // namespace msdiff::evalkit
