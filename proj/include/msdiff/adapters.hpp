#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msdiff/linalg.hpp"

namespace msdiff {

struct Model;

// LoRA expert bank with a sparse top-k softmax gate.
struct ExpertBank {
    int n_experts = 4;
    int top_k = 1;
    int rank = 8;
    double alpha = 8.0;
    Mat gate;            // n_experts x d_in
    std::vector<Mat> a;  // rank x d_in, per expert
    std::vector<Mat> b;  // d_out x rank, per expert (zero-initialized)
};

// Routing vector: softmax over the k largest gate logits, zeros elsewhere.
// Ties resolve to the lowest expert index.
std::vector<double> gate_route(const Mat& gate_w, const double* h, int top_k);

// ffn_out + sum_e p_e * (alpha/rank) * B_e A_e h, single token.
std::vector<double> moe_lora_forward(const std::vector<double>& ffn_out, const ExpertBank& bank,
                                     const std::vector<double>& h);

struct LoraSite {
    std::string name;
    int block = 0;
    int proj = 0;  // 0..3 = q,k,v,o
    int rank = 8;
    double alpha = 8.0;
    Mat a;  // rank x d_in
    Mat b;  // d_out x rank (zero-initialized)
};

struct MoeSite {
    std::string name;
    int block = 0;
    ExpertBank bank;
};

struct AdapterPlacement {
    std::vector<std::string> sites;  // empty = default placement (all blocks)
    int rank = 8;
    double alpha = 8.0;
    int n_experts = 4;
    int top_k = 1;
    uint64_t seed = 1;
};

// Trainable adapter parameters over a frozen base model. MoE-LoRA on FFN
// sites, plain LoRA on attention projections.
struct AdapterSet {
    std::vector<LoraSite> lora;
    std::vector<MoeSite> moe;

    bool empty() const { return lora.empty() && moe.empty(); }
    size_t n_params() const;
};

// Site names: "block{k}.attn.{q|k|v|o}" and "block{k}.ffn".
std::vector<std::string> default_adapter_sites(const Model& m);
AdapterSet attach_adapters(const Model& m, const AdapterPlacement& placement);
AdapterSet zeros_like(const AdapterSet& s);

struct AdapterParamView {
    std::string name;
    std::vector<double>* data;
};
std::vector<AdapterParamView> param_views(AdapterSet& s);

}  // namespace msdiff
