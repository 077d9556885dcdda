#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "msdiff/grid.hpp"
#include "msdiff/linalg.hpp"
#include "msdiff/synthdata.hpp"

namespace msdiff {

struct ModelConfig {
    int grid_h = 8;
    int grid_w = 8;
    int channels = 192;  // patch*patch*3 for the identity patchify map
    int d_model = 64;
    int n_heads = 4;
    int k_double = 2;
    int k_single = 2;
    int max_subjects = 2;
    int vocab_size = 256;
    int ref_h = 4;
    int ref_w = 4;

    int d_ff() const { return 4 * d_model; }
    int latent_tokens() const { return grid_h * grid_w; }
    int ref_tokens() const { return ref_h * ref_w; }
    void validate() const;
};

// Assembled sequence: [text | latent | ref_1 | ... | ref_N]. Reference i's 2D
// positions are shifted by (i+1)*(grid_h, grid_w) so they never collide with
// the latent grid.
struct TokenBatch {
    std::vector<int> text_tokens;
    Grid latent;             // (grid_h, grid_w, channels) noisy latent
    std::vector<Grid> refs;  // per subject (ref_h, ref_w, channels)
    std::vector<std::array<int, 2>> positions;  // (row, col) per token
    std::vector<int> segment_ids;               // 0 text, 1 latent, 2+i ref_i

    int seq_len() const { return (int)positions.size(); }
    int text_offset() const { return 0; }
    int latent_offset() const { return (int)text_tokens.size(); }
    int ref_offset(int i, const ModelConfig& cfg) const {
        return (int)text_tokens.size() + cfg.latent_tokens() + i * cfg.ref_tokens();
    }
};

// Head-averaged attention from each subject's reference queries to the noisy
// latent keys, one map per double block per subject.
struct AttentionRecordSet {
    // maps[k][i]: (ref_tokens x latent_tokens)
    std::vector<std::vector<Mat>> maps;
    int n_blocks() const { return (int)maps.size(); }
    int n_subjects() const { return maps.empty() ? 0 : (int)maps[0].size(); }
};

struct Linear {
    Mat w;                  // out x in
    std::vector<double> b;  // out
};

struct LayerNorm {
    std::vector<double> gamma, beta;
};

struct Block {
    LayerNorm ln1, ln2;
    Linear wq, wk, wv, wo;
    Linear w1, w2;  // FFN in / out
};

struct Model {
    ModelConfig cfg;
    uint64_t seed = 0;
    Mat text_embed;     // vocab x d_model
    Mat segment_embed;  // 3 x d_model (text / latent / ref)
    Linear input_proj;  // d_model x channels, shared by latent and ref patches
    Linear time_mlp1, time_mlp2;
    std::vector<Block> blocks;  // k_double double blocks first, then singles
    LayerNorm ln_f;
    Linear output_proj;  // channels x d_model

    int n_blocks() const { return (int)blocks.size(); }
    bool is_double_block(int k) const { return k < cfg.k_double; }
};

// Named view over every parameter array, in a fixed order. Shared by the
// optimizer and the checkpoint writer.
struct ParamView {
    std::string name;
    std::vector<double>* data;
};
std::vector<ParamView> param_views(Model& m);

Model build_model(const ModelConfig& cfg, uint64_t seed);
Model zeros_like(const Model& m);

TokenBatch assemble_tokens(const synth::SceneSpec& scene, const Grid& z_t, const ModelConfig& cfg);
// Token-level assembly for callers that already hold patchified references.
TokenBatch assemble_tokens(const std::vector<int>& text_tokens, const Grid& z_t,
                           const std::vector<Grid>& ref_latents, const ModelConfig& cfg);

struct AdapterSet;  // adapters.hpp

// Per-block activations retained for backprop. Reused across calls to avoid
// reallocation in training loops.
struct BlockCache {
    Mat x_in, ln1_out, q, k, v, attn_concat, x_mid, ln2_out, ffn_pre, ffn_act, ffn_out;
    std::vector<double> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
    std::vector<Mat> probs;  // per head, seq x seq
    // adapter intermediates (per MoE site: chosen experts / routing / A*h)
    std::vector<int> moe_sel;        // seq * top_k expert ids
    std::vector<double> moe_p;       // seq * top_k routing weights
    std::vector<double> moe_ah;      // seq * top_k * rank
    std::vector<Mat> lora_ax;        // per attention lora site in block order
};

struct ForwardCache {
    Mat embeds;  // seq x d_model
    std::vector<double> time_feat, time_h1, time_h1_act, time_emb;
    std::vector<BlockCache> blocks;
    Mat final_in, final_ln;
    std::vector<double> lnf_mean, lnf_rstd;
};

struct ForwardResult {
    Grid velocity;
    std::optional<AttentionRecordSet> records;
};

ForwardResult forward(const Model& m, const TokenBatch& batch, double t, bool record_attention,
                      const AdapterSet* adapters = nullptr, ForwardCache* cache = nullptr);

// Gradient of a scalar loss with upstream gradients d_velocity (w.r.t. the
// velocity output) and d_probs_extra (w.r.t. the recorded double-block
// attention maps; may be empty). Accumulates into grads / adapter_grads.
struct BackwardOptions {
    bool train_base = true;
    bool train_adapters = false;
};
void backward(const Model& m, const TokenBatch& batch, const ForwardCache& cache,
              const Grid& d_velocity, const std::vector<std::vector<Mat>>& d_probs_extra,
              const AdapterSet* adapters, Model* grads, AdapterSet* adapter_grads,
              const BackwardOptions& opts);

}  // namespace msdiff
