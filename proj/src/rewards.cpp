#include "msdiff/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace msdiff::rewards {

// ---------------------------------------------------------------------------
// assignment
// ---------------------------------------------------------------------------

// Jonker-Volgenant style shortest augmenting path on the square min-cost
// problem. Rectangular inputs are padded with zero-cost slack rows/columns so
// every real row on the smaller side ends up matched.
MatchResult hungarian_match(const Mat& C) {
    MatchResult res;
    const int nr = C.rows, ng = C.cols;
    if (nr == 0 || ng == 0) return res;
    for (double v : C.v)
        if (!std::isfinite(v)) throw std::invalid_argument("hungarian_match: non-finite similarity");
    const int n = std::max(nr, ng);
    auto cost = [&](int i, int j) -> double {
        return (i < nr && j < ng) ? -C.at(i, j) : 0.0;
    };

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            int i0 = p[j0], j1 = 0;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    for (int j = 1; j <= n; ++j) {
        int i = p[j];
        if (i >= 1 && i <= nr && j <= ng) {
            res.pairs.push_back({i - 1, j - 1});
            res.total += C.at(i - 1, j - 1);
        }
    }
    std::sort(res.pairs.begin(), res.pairs.end());
    return res;
}

// ---------------------------------------------------------------------------
// detection + identity reward
// ---------------------------------------------------------------------------

std::vector<Detection> detect_and_embed(const Grid& image, const synth::DetectorConfig& cfg) {
    std::vector<Detection> out;
    for (const auto& comp : synth::detect_components(image, cfg)) {
        Detection d;
        d.box = comp.box;
        d.embedding = synth::embed_component(image, comp);
        out.push_back(std::move(d));
    }
    return out;
}

std::vector<std::vector<double>> embed_references(const synth::SceneSpec& scene) {
    synth::DetectorConfig cfg;
    cfg.background = scene.gen.background;
    cfg.min_area = std::max(8, scene.gen.ref_canvas * scene.gen.ref_canvas / 16);
    std::vector<std::vector<double>> out;
    for (const auto& s : scene.subjects) {
        Grid ref = synth::render_reference(s.identity, scene.gen);
        auto dets = synth::detect_components(ref, cfg);
        if (dets.size() != 1)
            throw RewardError("embed_references: reference render has no unique component");
        out.push_back(synth::embed_component(ref, dets[0]));
    }
    return out;
}

std::pair<double, std::vector<std::pair<int, int>>> id_reward(
    const std::vector<std::vector<double>>& ref_embeddings, const Grid& image,
    const synth::DetectorConfig& cfg) {
    if (ref_embeddings.empty()) throw std::invalid_argument("id_reward: need at least one reference");
    auto dets = detect_and_embed(image, cfg);
    if (dets.empty()) return {0.0, {}};
    Mat C((int)ref_embeddings.size(), (int)dets.size());
    for (int i = 0; i < C.rows; ++i)
        for (int j = 0; j < C.cols; ++j)
            C.at(i, j) = synth::cosine(ref_embeddings[i], dets[j].embedding);
    MatchResult m = hungarian_match(C);
    double sum = 0;
    for (auto [i, j] : m.pairs) sum += std::max(0.0, C.at(i, j));
    return {sum / (double)ref_embeddings.size(), m.pairs};
}

// ---------------------------------------------------------------------------
// providers
// ---------------------------------------------------------------------------

double synthetic_text_score(const Grid& image, const synth::SceneSpec& scene,
                            const synth::DetectorConfig& cfg) {
    synth::PromptConstraints pc = synth::decode_prompt(scene.prompt_tokens);
    auto dets = detect_and_embed(image, cfg);
    auto refs = embed_references(scene);

    int satisfied = 0;
    int total = 1 + pc.count + (pc.count >= 2 ? 1 : 0);
    if ((int)dets.size() == pc.count) ++satisfied;

    std::vector<int> matched_det(refs.size(), -1);
    if (!dets.empty()) {
        Mat C((int)refs.size(), (int)dets.size());
        for (int i = 0; i < C.rows; ++i)
            for (int j = 0; j < C.cols; ++j) C.at(i, j) = synth::cosine(refs[i], dets[j].embedding);
        MatchResult m = hungarian_match(C);
        for (auto [i, j] : m.pairs) {
            if (C.at(i, j) >= 0.5) {
                matched_det[i] = j;
                ++satisfied;  // identity present
            }
        }
    }
    if (pc.count >= 2) {
        // prompt lists identities left-to-right; matched detections must
        // appear in that x order
        bool all_matched = true;
        bool ordered = true;
        double prev_x = -1e9;
        for (size_t i = 0; i < matched_det.size(); ++i) {
            if (matched_det[i] < 0) {
                all_matched = false;
                break;
            }
            double x = dets[matched_det[i]].box.centroid_x;
            if (x < prev_x) ordered = false;
            prev_x = x;
        }
        if (all_matched && ordered) ++satisfied;
    }
    return (double)satisfied / total;
}

double synthetic_aes_score(const Grid& image, const synth::SceneSpec&) {
    // 1 - normalized high-frequency energy (mean squared 4-neighbor Laplacian)
    double energy = 0;
    int count = 0;
    for (int ch = 0; ch < image.c; ++ch)
        for (int y = 1; y + 1 < image.h; ++y)
            for (int x = 1; x + 1 < image.w; ++x) {
                double lap = 4.0 * image.at(y, x, ch) - image.at(y - 1, x, ch) - image.at(y + 1, x, ch) -
                             image.at(y, x - 1, ch) - image.at(y, x + 1, ch);
                energy += lap * lap;
                ++count;
            }
    energy /= std::max(1, count);
    return std::clamp(1.0 - energy / 0.5, 0.0, 1.0);
}

ProviderRegistry::ProviderRegistry() {
    providers_["synthetic_text"] = [](const Grid& img, const synth::SceneSpec& sc) {
        return synthetic_text_score(img, sc);
    };
    providers_["synthetic_aes"] = [](const Grid& img, const synth::SceneSpec& sc) {
        return synthetic_aes_score(img, sc);
    };
}

ProviderRegistry& ProviderRegistry::instance() {
    static ProviderRegistry reg;
    return reg;
}

void ProviderRegistry::register_provider(const std::string& name, Provider p) {
    providers_[name] = std::move(p);
}

Provider ProviderRegistry::get(const std::string& name) const {
    auto it = providers_.find(name);
    if (it == providers_.end()) throw RewardError("unknown reward provider '" + name + "'");
    return it->second;
}

// ---------------------------------------------------------------------------
// composite
// ---------------------------------------------------------------------------

RewardBreakdown composite_reward(const Grid& image, const synth::SceneSpec& scene,
                                 const RewardWeights& weights, const RewardProviders& providers) {
    if (weights.w_text < 0 || weights.w_aes < 0 || weights.w_id < 0)
        throw std::invalid_argument("composite_reward: negative weight");
    RewardBreakdown rb;
    rb.r_text = providers.text ? providers.text(image, scene) : 0.0;
    rb.r_aes = providers.aes ? providers.aes(image, scene) : 0.0;
    if (rb.r_text < 0 || rb.r_text > 1 || rb.r_aes < 0 || rb.r_aes > 1 ||
        !std::isfinite(rb.r_text) || !std::isfinite(rb.r_aes))
        throw RewardError("composite_reward: provider score outside [0,1]");
    auto [rid, matching] = id_reward(embed_references(scene), image, providers.detector);
    rb.r_id = rid;
    rb.matching = std::move(matching);
    rb.total = weights.w_text * rb.r_text + weights.w_aes * rb.r_aes + weights.w_id * rb.r_id;
    return rb;
}

}  // namespace msdiff::rewards
