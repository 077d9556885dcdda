#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msdiff/adapters.hpp"
#include "msdiff/flow.hpp"
#include "msdiff/model.hpp"
#include "msdiff/rewards.hpp"

namespace msdiff::ippo {

struct RLConfig {
    int total_steps = 16;    // sampling steps T
    int window_size = 2;     // w
    int shift_interval = 50; // tau, iterations between window moves
    int window_stride = 1;   // s
    int group_size = 8;      // N trajectories per prompt
    double clip_beta = 0.05;
    double noise_scale = 0.7;  // SDE a
    double lr = 1e-4;
    double weight_decay = 0.0;
    int iterations = 200;
    int n_subjects = 2;
    rewards::RewardWeights weights;

    void validate() const;
};

// Left boundary of the sliding window at training iteration m (1-based):
// l = min(s * floor((m-1)/tau), T-w), the closed form of the shift rule
// "every tau iterations move right by s, capped at T-w".
int window_position(int64_t m, const RLConfig& cfg);

// Group-standardized rewards (population std). Returns an empty vector when
// the reward spread is below 1e-8: the group is skipped rather than divided.
std::vector<double> advantages(const std::vector<double>& rewards);

// Geometric-mean likelihood ratio over the window steps:
// exp(mean(logp_new - logp_old)).
double gspo_ratio(const std::vector<double>& logp_new, const std::vector<double>& logp_old);

// mean_i min(s_i A_i, clip(s_i, 1-beta, 1+beta) A_i); advantages are constants.
double gspo_objective(const std::vector<double>& ratios, const std::vector<double>& advantages,
                      double beta);

// d objective / d logp_new[i][t], with |S| window steps per trajectory.
// Zero wherever the clipped branch is active and saturated.
std::vector<std::vector<double>> gspo_objective_grad(const std::vector<double>& ratios,
                                                     const std::vector<double>& advantages,
                                                     double beta, int window_steps);

// Environment glue shared by rollouts and reward evaluation.
struct RolloutEnv {
    synth::GeneratorConfig gen;
    int patch = 8;
    rewards::RewardProviders providers;
};

struct RolloutGroup {
    synth::SceneSpec scene;
    Grid initial_noise;
    std::vector<flow::Trajectory> trajectories;
    std::vector<rewards::RewardBreakdown> rewards;
    std::vector<double> advantage;  // empty when degenerate
    bool degenerate = false;
};

// N trajectories from one shared initial noise; SDE transitions exactly at
// window steps; ODE prefix computed once since it is identical for the group.
RolloutGroup rollout_group(const Model& policy, const AdapterSet* adapters,
                           const synth::SceneSpec& scene, const RLConfig& cfg,
                           const flow::WindowState& window, const RolloutEnv& env, Rng& rng);

struct IterationMetrics {
    int64_t iteration = 0;
    int window_left = 0;
    double reward_mean = 0, reward_std = 0;
    double r_text = 0, r_aes = 0, r_id = 0;
    double ratio_min = 1, ratio_mean = 1, ratio_max = 1;
    double objective = 0;
    bool skipped = false;
    bool nonfinite = false;
    std::string to_json_line() const;
};

struct IppoOptions {
    std::string metrics_path;  // JSONL, one record per iteration
    uint64_t data_seed = 1;
    int pool_size = 64;
    uint64_t pool_seed = 7;
    int threads = 1;
};

struct IppoResult {
    std::vector<IterationMetrics> metrics;
    int64_t completed_iterations = 0;
};

// Algorithm: snapshot the old policy each iteration, roll out a group,
// normalize rewards, take one clipped-objective ascent step on the adapter
// parameters over the window transitions, shift the window on schedule.
IppoResult ippo_train(const Model& base, AdapterSet& adapters, const RLConfig& cfg,
                      const RolloutEnv& env, int64_t iterations, Rng& rng,
                      const IppoOptions& opts);

}  // namespace msdiff::ippo
