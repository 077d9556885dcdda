#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msdiff/adapters.hpp"
#include "msdiff/model.hpp"
#include "msdiff/synthdata.hpp"

namespace msdiff::train {

struct StageConfig {
    std::string stage = "multi";  // "pretrain" (diffusion loss only) or "multi"
    int steps = 5000;
    int batch = 2;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double lambda = 0.3;     // attention loss weight; ignored in pretrain
    double dice_eps = 1e-6;
    int n_subjects = 2;      // pretrain always uses 1
    int log_every = 50;
    uint64_t seed = 1;
    int threads = 2;
};

struct TrainEnv {
    synth::GeneratorConfig gen;
    int patch = 8;
    int pool_size = 64;
    uint64_t pool_seed = 7;
};

struct StepMetrics {
    int64_t step = 0;
    double loss = 0, l_diff = 0, l_attn = 0;
};

struct TrainResult {
    std::vector<StepMetrics> history;
    double final_loss = 0;
};

// Flow-matching training: sample scene / t / noise, regress the velocity,
// optionally add the attention dice regularizer at the double blocks.
// When `adapters` is given, the base stays frozen and only adapter (and gate)
// parameters receive updates.
TrainResult train_stage(Model& model, AdapterSet* adapters, const StageConfig& cfg,
                        const TrainEnv& env, const std::string& metrics_path);

}  // namespace msdiff::train
