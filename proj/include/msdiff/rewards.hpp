#pragma once

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msdiff/grid.hpp"
#include "msdiff/linalg.hpp"
#include "msdiff/synth_embed.hpp"
#include "msdiff/synthdata.hpp"

namespace msdiff::rewards {

struct RewardError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RewardWeights {
    double w_text = 1.4;
    double w_aes = 0.7;
    double w_id = 0.5;  // human preset; object preset uses 1.0
};

struct RewardBreakdown {
    double r_text = 0, r_aes = 0, r_id = 0, total = 0;
    std::vector<std::pair<int, int>> matching;  // (ref_index, detection_index)
};

struct MatchResult {
    std::vector<std::pair<int, int>> pairs;  // unique in both coordinates
    double total = 0;
};

// Maximum-similarity assignment with cardinality min(n_ref, n_gen),
// O(n^3) augmenting-path solver. C: n_ref x n_gen.
MatchResult hungarian_match(const Mat& C);

struct Detection {
    synth::DetectionBox box;
    std::vector<double> embedding;
};

// Connected components over the uniform background, each embedded with the
// histogram + shape-moment descriptor. Empty list if nothing qualifies.
std::vector<Detection> detect_and_embed(const Grid& image, const synth::DetectorConfig& cfg = {});

// Embeddings of a scene's reference renders, in subject order.
std::vector<std::vector<double>> embed_references(const synth::SceneSpec& scene);

// Mean matched similarity over references; negatives clip to 0. Matching is
// computed on the raw similarity matrix.
std::pair<double, std::vector<std::pair<int, int>>> id_reward(
    const std::vector<std::vector<double>>& ref_embeddings, const Grid& image,
    const synth::DetectorConfig& cfg = {});

// (image, scene) -> score in [0,1]
using Provider = std::function<double(const Grid&, const synth::SceneSpec&)>;

struct RewardProviders {
    Provider text;
    Provider aes;
    synth::DetectorConfig detector;
};

// Named provider registry; "synthetic_text" and "synthetic_aes" are built in.
class ProviderRegistry {
  public:
    static ProviderRegistry& instance();
    void register_provider(const std::string& name, Provider p);
    Provider get(const std::string& name) const;

  private:
    ProviderRegistry();
    std::map<std::string, Provider> providers_;
};

// Deterministic stand-ins for learned scorers.
double synthetic_text_score(const Grid& image, const synth::SceneSpec& scene,
                            const synth::DetectorConfig& cfg = {});
double synthetic_aes_score(const Grid& image, const synth::SceneSpec& scene);

RewardBreakdown composite_reward(const Grid& image, const synth::SceneSpec& scene,
                                 const RewardWeights& weights, const RewardProviders& providers);

}  // namespace msdiff::rewards
