#include "msdiff/checkpoint.hpp"

#include <cstdint>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace msdiff {

using json = nlohmann::json;

static const char kMagic[] = "MSDIFFCK1\n";

static json model_config_to_json(const ModelConfig& c) {
    return json{{"grid_h", c.grid_h},   {"grid_w", c.grid_w},   {"channels", c.channels},
                {"d_model", c.d_model}, {"n_heads", c.n_heads}, {"k_double", c.k_double},
                {"k_single", c.k_single}, {"max_subjects", c.max_subjects},
                {"vocab_size", c.vocab_size}, {"ref_h", c.ref_h}, {"ref_w", c.ref_w}};
}

static ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.grid_h = j.at("grid_h").get<int>();
    c.grid_w = j.at("grid_w").get<int>();
    c.channels = j.at("channels").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.k_double = j.at("k_double").get<int>();
    c.k_single = j.at("k_single").get<int>();
    c.max_subjects = j.at("max_subjects").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.ref_h = j.at("ref_h").get<int>();
    c.ref_w = j.at("ref_w").get<int>();
    return c;
}

void save_checkpoint(const std::string& path, Model& model, AdapterSet* adapters,
                     const AdapterPlacement* placement, const std::string& stage, int64_t step) {
    json manifest;
    manifest["format"] = 1;
    manifest["stage"] = stage;
    manifest["step"] = step;
    manifest["seed"] = model.seed;
    manifest["config"] = model_config_to_json(model.cfg);
    if (adapters && placement) {
        json sites = json::array();
        for (const auto& s : adapters->lora) sites.push_back(s.name);
        for (const auto& s : adapters->moe) sites.push_back(s.name);
        manifest["adapters"] = json{{"rank", placement->rank},       {"alpha", placement->alpha},
                                    {"n_experts", placement->n_experts}, {"top_k", placement->top_k},
                                    {"seed", placement->seed},       {"sites", sites}};
    } else {
        manifest["adapters"] = nullptr;
    }

    std::vector<std::pair<std::string, std::vector<double>*>> arrays;
    for (auto& v : param_views(model)) arrays.push_back({v.name, v.data});
    if (adapters)
        for (auto& v : param_views(*adapters)) arrays.push_back({v.name, v.data});
    json dir = json::array();
    for (auto& [name, data] : arrays) dir.push_back(json{{"name", name}, {"size", data->size()}});
    manifest["arrays"] = dir;

    std::string mtext = manifest.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(kMagic, sizeof(kMagic) - 1);
    uint64_t mlen = mtext.size();
    f.write((const char*)&mlen, sizeof(mlen));
    f.write(mtext.data(), (std::streamsize)mtext.size());
    for (auto& [name, data] : arrays)
        f.write((const char*)data->data(), (std::streamsize)(data->size() * sizeof(double)));
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[sizeof(kMagic) - 1];
    f.read(magic, sizeof(magic));
    if (!f || std::string(magic, sizeof(magic)) != std::string(kMagic, sizeof(magic)))
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    uint64_t mlen = 0;
    f.read((char*)&mlen, sizeof(mlen));
    std::string mtext(mlen, '\0');
    f.read(mtext.data(), (std::streamsize)mlen);
    if (!f) throw std::runtime_error("load_checkpoint: truncated manifest in " + path);
    json manifest = json::parse(mtext);

    LoadedCheckpoint out;
    out.stage = manifest.at("stage").get<std::string>();
    out.step = manifest.at("step").get<int64_t>();
    ModelConfig cfg = model_config_from_json(manifest.at("config"));
    out.model = build_model(cfg, manifest.at("seed").get<uint64_t>());
    if (!manifest.at("adapters").is_null()) {
        const json& ja = manifest.at("adapters");
        out.placement.rank = ja.at("rank").get<int>();
        out.placement.alpha = ja.at("alpha").get<double>();
        out.placement.n_experts = ja.at("n_experts").get<int>();
        out.placement.top_k = ja.at("top_k").get<int>();
        out.placement.seed = ja.at("seed").get<uint64_t>();
        out.placement.sites = ja.at("sites").get<std::vector<std::string>>();
        out.adapters = attach_adapters(out.model, out.placement);
    }

    std::vector<std::pair<std::string, std::vector<double>*>> arrays;
    for (auto& v : param_views(out.model)) arrays.push_back({v.name, v.data});
    if (out.adapters)
        for (auto& v : param_views(*out.adapters)) arrays.push_back({v.name, v.data});

    const json& dir = manifest.at("arrays");
    if (dir.size() != arrays.size())
        throw std::runtime_error("load_checkpoint: array count mismatch in " + path);
    for (size_t i = 0; i < arrays.size(); ++i) {
        const std::string name = dir.at(i).at("name").get<std::string>();
        const size_t size = dir.at(i).at("size").get<size_t>();
        if (name != arrays[i].first || size != arrays[i].second->size())
            throw std::runtime_error("load_checkpoint: shape mismatch for array '" + name + "'");
        f.read((char*)arrays[i].second->data(), (std::streamsize)(size * sizeof(double)));
    }
    if (!f) throw std::runtime_error("load_checkpoint: truncated payload in " + path);
    return out;
}

}  // namespace msdiff
