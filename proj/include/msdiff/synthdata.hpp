#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msdiff/grid.hpp"
#include "msdiff/rng.hpp"

namespace msdiff::synth {

// Prompt token layout. Identity tokens start at kTokenIdentityBase and wrap
// modulo the remaining vocabulary.
constexpr int kTokenPad = 0;
constexpr int kTokenCountBase = 1;   // count n -> token kTokenCountBase + n - 1
constexpr int kTokenLayoutRow = 9;   // subjects arranged left-to-right
constexpr int kTokenIdentityBase = 16;
constexpr int kMaxCount = 8;

// A procedural identity: glyph family + shape parameters + two-tone palette.
// Rendering the same identity anywhere yields the same colors and shape.
struct IdentitySpec {
    int64_t identity_id = 0;
    int family = 0;        // 0 polygon, 1 ring, 2 cross, 3 notched disk
    double shape_p0 = 0;   // polygon vertex count / inner radius / bar half-width / notch angle
    double rot = 0;        // base orientation
    double stripe_freq = 2;
    double stripe_phase = 0;
    double stripe_dir = 0;
    double color_a[3] = {0, 0, 0};
    double color_b[3] = {0, 0, 0};
};

struct Placement {
    double cx = 0;     // pixel center (x)
    double cy = 0;     // pixel center (y)
    double scale = 0;  // glyph radius in pixels
};

struct Subject {
    IdentitySpec identity;
    Placement placement;
};

enum class LayoutRule {
    kRow,  // subjects in disjoint columns, listed left to right
};

struct GeneratorConfig {
    int canvas = 64;
    int ref_canvas = 32;
    int max_subjects = 2;
    double scale_min = 11.5;
    double scale_max = 13.0;
    double ref_scale = 12.0;
    int vocab_size = 256;
    double background = 0.10;  // neutral gray level, all channels
};

struct SceneSpec {
    GeneratorConfig gen;
    std::vector<Subject> subjects;         // left-to-right order
    std::vector<int> prompt_tokens;        // fixed length max_subjects + 2
    uint64_t seed = 0;
};

// Constraint set decoded from prompt tokens; consumed by the text reward.
struct PromptConstraints {
    int count = 0;
    std::vector<int> identity_tokens;  // left-to-right
};

// Identity pool with validated pairwise embedder separation.
std::vector<IdentitySpec> make_identity_pool(uint64_t seed, int size, const GeneratorConfig& gen = {});

// Single identity from raw parameters (no separation check). Used by the pool
// and by tests that need specific glyphs.
IdentitySpec sample_identity(int64_t identity_id, Rng& rng);

SceneSpec make_scene(int n_subjects, const std::vector<IdentitySpec>& pool, LayoutRule rule,
                     Rng& rng, const GeneratorConfig& gen = {});

// target canvas (canvas x canvas x 3), one reference per subject
// (ref_canvas x ref_canvas x 3), one binary pixel mask per subject
// (canvas x canvas x 1). Pure function of the scene.
struct RenderedScene {
    Grid target;
    std::vector<Grid> references;
    std::vector<Grid> pixel_masks;
};
RenderedScene render_scene(const SceneSpec& scene);

// Renders one identity alone: canonical pose on the reference canvas.
Grid render_reference(const IdentitySpec& id, const GeneratorConfig& gen);

std::vector<int> encode_prompt(const SceneSpec& scene);
PromptConstraints decode_prompt(const std::vector<int>& tokens);

int identity_token(int64_t identity_id, int vocab_size);

// Dataset directory: scene_%05d/{target.ppm, ref_i.ppm, mask_i.pgm, scene.json}
// plus manifest.json at the root.
void write_dataset(const std::string& dir, const std::vector<SceneSpec>& scenes);

// Round-trips a scene through its JSON manifest representation.
std::string scene_to_json(const SceneSpec& scene);
SceneSpec scene_from_json(const std::string& text);

}  // namespace msdiff::synth
