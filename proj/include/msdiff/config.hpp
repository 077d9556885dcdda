#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msdiff/evalkit.hpp"
#include "msdiff/ippo.hpp"
#include "msdiff/model.hpp"
#include "msdiff/synthdata.hpp"
#include "msdiff/trainer.hpp"

namespace msdiff::config {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct AdapterConfig {
    bool enabled = false;
    int rank = 8;
    double alpha = 8.0;
    int n_experts = 4;
    int top_k = 1;
    uint64_t seed = 1;
    std::vector<std::string> sites;  // empty = all blocks
};

// Declarative run description. Unknown keys anywhere are errors, with the
// offending field path in the message.
struct RunConfig {
    uint64_t seed = 7;
    std::string out_dir;
    std::string stage = "multi";  // pretrain | multi | rl

    ModelConfig model;
    synth::GeneratorConfig gen;
    int pool_size = 64;
    uint64_t pool_seed = 7;

    AdapterConfig adapters;
    train::StageConfig train_cfg;
    ippo::RLConfig rl;
    std::string text_provider = "synthetic_text";
    std::string aes_provider = "synthetic_aes";
    evalkit::EvalSettings eval;

    int patch() const { return gen.canvas / model.grid_h; }
    void validate() const;  // cross-field consistency + stage block presence
};

RunConfig default_config();
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
std::string dump_config(const RunConfig& cfg);  // canonical echo

// "a.b.c=value" applied on the JSON representation before parsing; value is
// parsed as a JSON literal, falling back to a string.
std::string apply_overrides(const std::string& json_text, const std::vector<std::string>& sets);

uint64_t config_hash(const std::string& canonical_dump);

}  // namespace msdiff::config
