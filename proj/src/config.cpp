#include "msdiff/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace msdiff::config {

using json = nlohmann::json;

static void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& path) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key()))
            throw ConfigError("unknown config key '" + (path.empty() ? it.key() : path + "." + it.key()) + "'");
    }
}

template <typename T>
static void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

RunConfig default_config() {
    RunConfig c;
    c.model.grid_h = 8;
    c.model.grid_w = 8;
    c.model.d_model = 64;
    c.model.n_heads = 4;
    c.model.k_double = 2;
    c.model.k_single = 2;
    c.model.max_subjects = 2;
    c.model.vocab_size = 256;
    c.model.ref_h = 4;
    c.model.ref_w = 4;
    c.model.channels = 0;  // derived in validate()
    return c;
}

void RunConfig::validate() const {
    if (stage != "pretrain" && stage != "multi" && stage != "rl")
        throw ConfigError("stage: must be one of pretrain|multi|rl");
    if (model.grid_h != model.grid_w) throw ConfigError("model.grid_h/grid_w: latent grid must be square");
    if (gen.canvas % model.grid_h != 0)
        throw ConfigError("data.canvas: not divisible by model.grid_h");
    int p = gen.canvas / model.grid_h;
    if (gen.ref_canvas != p * model.ref_h || gen.ref_canvas != p * model.ref_w)
        throw ConfigError("data.ref_canvas: reference grid patch differs from latent patch");
    if (model.channels != p * p * 3)
        throw ConfigError("model.channels: must equal patch*patch*3 (derived from canvas/grid)");
    if (gen.max_subjects != model.max_subjects)
        throw ConfigError("data/model max_subjects mismatch");
    if (gen.vocab_size != model.vocab_size) throw ConfigError("data/model vocab_size mismatch");
    if (train_cfg.lambda < 0) throw ConfigError("train.lambda: must be nonnegative");
    model.validate();
    if (stage == "rl") rl.validate();
}

static RunConfig from_json(const json& j) {
    RunConfig c = default_config();
    check_keys(j, {"seed", "out", "stage", "model", "data", "adapters", "train", "rl", "eval"}, "");
    get_if(j, "seed", c.seed);
    get_if(j, "out", c.out_dir);
    get_if(j, "stage", c.stage);

    if (j.contains("model")) {
        const json& jm = j.at("model");
        check_keys(jm,
                   {"grid_h", "grid_w", "d_model", "n_heads", "k_double", "k_single",
                    "max_subjects", "vocab_size", "ref_h", "ref_w"},
                   "model");
        get_if(jm, "grid_h", c.model.grid_h);
        get_if(jm, "grid_w", c.model.grid_w);
        get_if(jm, "d_model", c.model.d_model);
        get_if(jm, "n_heads", c.model.n_heads);
        get_if(jm, "k_double", c.model.k_double);
        get_if(jm, "k_single", c.model.k_single);
        get_if(jm, "max_subjects", c.model.max_subjects);
        get_if(jm, "vocab_size", c.model.vocab_size);
        get_if(jm, "ref_h", c.model.ref_h);
        get_if(jm, "ref_w", c.model.ref_w);
    }
    if (j.contains("data")) {
        const json& jd = j.at("data");
        check_keys(jd,
                   {"canvas", "ref_canvas", "background", "scale_min", "scale_max", "ref_scale",
                    "pool_size", "pool_seed"},
                   "data");
        get_if(jd, "canvas", c.gen.canvas);
        get_if(jd, "ref_canvas", c.gen.ref_canvas);
        get_if(jd, "background", c.gen.background);
        get_if(jd, "scale_min", c.gen.scale_min);
        get_if(jd, "scale_max", c.gen.scale_max);
        get_if(jd, "ref_scale", c.gen.ref_scale);
        get_if(jd, "pool_size", c.pool_size);
        get_if(jd, "pool_seed", c.pool_seed);
    }
    if (j.contains("adapters")) {
        const json& ja = j.at("adapters");
        check_keys(ja, {"enabled", "rank", "alpha", "n_experts", "top_k", "seed", "sites"}, "adapters");
        get_if(ja, "enabled", c.adapters.enabled);
        get_if(ja, "rank", c.adapters.rank);
        get_if(ja, "alpha", c.adapters.alpha);
        get_if(ja, "n_experts", c.adapters.n_experts);
        get_if(ja, "top_k", c.adapters.top_k);
        get_if(ja, "seed", c.adapters.seed);
        get_if(ja, "sites", c.adapters.sites);
    }
    if (j.contains("train")) {
        const json& jt = j.at("train");
        check_keys(jt,
                   {"steps", "batch", "lr", "weight_decay", "lambda", "dice_eps", "n_subjects",
                    "log_every", "seed", "threads"},
                   "train");
        get_if(jt, "steps", c.train_cfg.steps);
        get_if(jt, "batch", c.train_cfg.batch);
        get_if(jt, "lr", c.train_cfg.lr);
        get_if(jt, "weight_decay", c.train_cfg.weight_decay);
        get_if(jt, "lambda", c.train_cfg.lambda);
        get_if(jt, "dice_eps", c.train_cfg.dice_eps);
        get_if(jt, "n_subjects", c.train_cfg.n_subjects);
        get_if(jt, "log_every", c.train_cfg.log_every);
        get_if(jt, "seed", c.train_cfg.seed);
        get_if(jt, "threads", c.train_cfg.threads);
    }
    if (j.contains("rl")) {
        const json& jr = j.at("rl");
        check_keys(jr,
                   {"total_steps", "window_size", "shift_interval", "window_stride", "group_size",
                    "clip_beta", "noise_scale", "lr", "weight_decay", "iterations", "n_subjects",
                    "weights", "text_provider", "aes_provider"},
                   "rl");
        get_if(jr, "total_steps", c.rl.total_steps);
        get_if(jr, "window_size", c.rl.window_size);
        get_if(jr, "shift_interval", c.rl.shift_interval);
        get_if(jr, "window_stride", c.rl.window_stride);
        get_if(jr, "group_size", c.rl.group_size);
        get_if(jr, "clip_beta", c.rl.clip_beta);
        get_if(jr, "noise_scale", c.rl.noise_scale);
        get_if(jr, "lr", c.rl.lr);
        get_if(jr, "weight_decay", c.rl.weight_decay);
        get_if(jr, "iterations", c.rl.iterations);
        get_if(jr, "n_subjects", c.rl.n_subjects);
        if (jr.contains("weights")) {
            const json& jw = jr.at("weights");
            check_keys(jw, {"w_text", "w_aes", "w_id"}, "rl.weights");
            get_if(jw, "w_text", c.rl.weights.w_text);
            get_if(jw, "w_aes", c.rl.weights.w_aes);
            get_if(jw, "w_id", c.rl.weights.w_id);
        }
        get_if(jr, "text_provider", c.text_provider);
        get_if(jr, "aes_provider", c.aes_provider);
    }
    if (j.contains("eval")) {
        const json& je = j.at("eval");
        check_keys(je,
                   {"n_scenes", "scene_seed", "pool_size", "pool_seed", "n_subjects",
                    "sample_steps", "attention_probe_t"},
                   "eval");
        get_if(je, "n_scenes", c.eval.n_scenes);
        get_if(je, "scene_seed", c.eval.scene_seed);
        get_if(je, "pool_size", c.eval.pool_size);
        get_if(je, "pool_seed", c.eval.pool_seed);
        get_if(je, "n_subjects", c.eval.n_subjects);
        get_if(je, "sample_steps", c.eval.sample_steps);
        get_if(je, "attention_probe_t", c.eval.attention_probe_t);
    }

    // derived fields
    c.gen.max_subjects = c.model.max_subjects;
    c.gen.vocab_size = c.model.vocab_size;
    int p = c.model.grid_h > 0 ? c.gen.canvas / c.model.grid_h : 0;
    c.model.channels = p * p * 3;
    c.eval.gen = c.gen;
    c.eval.patch = p;
    c.eval.n_subjects = std::min(c.eval.n_subjects, c.model.max_subjects);
    c.train_cfg.stage = c.stage == "rl" ? "multi" : c.stage;
    return c;
}

RunConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c = from_json(j);
    c.validate();
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

std::string dump_config(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["out"] = c.out_dir;
    j["stage"] = c.stage;
    j["model"] = {{"grid_h", c.model.grid_h},     {"grid_w", c.model.grid_w},
                  {"d_model", c.model.d_model},   {"n_heads", c.model.n_heads},
                  {"k_double", c.model.k_double}, {"k_single", c.model.k_single},
                  {"max_subjects", c.model.max_subjects}, {"vocab_size", c.model.vocab_size},
                  {"ref_h", c.model.ref_h},       {"ref_w", c.model.ref_w}};
    j["data"] = {{"canvas", c.gen.canvas},       {"ref_canvas", c.gen.ref_canvas},
                 {"background", c.gen.background}, {"scale_min", c.gen.scale_min},
                 {"scale_max", c.gen.scale_max}, {"ref_scale", c.gen.ref_scale},
                 {"pool_size", c.pool_size},     {"pool_seed", c.pool_seed}};
    j["adapters"] = {{"enabled", c.adapters.enabled}, {"rank", c.adapters.rank},
                     {"alpha", c.adapters.alpha},     {"n_experts", c.adapters.n_experts},
                     {"top_k", c.adapters.top_k},     {"seed", c.adapters.seed},
                     {"sites", c.adapters.sites}};
    j["train"] = {{"steps", c.train_cfg.steps},       {"batch", c.train_cfg.batch},
                  {"lr", c.train_cfg.lr},             {"weight_decay", c.train_cfg.weight_decay},
                  {"lambda", c.train_cfg.lambda},     {"dice_eps", c.train_cfg.dice_eps},
                  {"n_subjects", c.train_cfg.n_subjects}, {"log_every", c.train_cfg.log_every},
                  {"seed", c.train_cfg.seed},         {"threads", c.train_cfg.threads}};
    j["rl"] = {{"total_steps", c.rl.total_steps},
               {"window_size", c.rl.window_size},
               {"shift_interval", c.rl.shift_interval},
               {"window_stride", c.rl.window_stride},
               {"group_size", c.rl.group_size},
               {"clip_beta", c.rl.clip_beta},
               {"noise_scale", c.rl.noise_scale},
               {"lr", c.rl.lr},
               {"weight_decay", c.rl.weight_decay},
               {"iterations", c.rl.iterations},
               {"n_subjects", c.rl.n_subjects},
               {"weights", {{"w_text", c.rl.weights.w_text}, {"w_aes", c.rl.weights.w_aes}, {"w_id", c.rl.weights.w_id}}},
               {"text_provider", c.text_provider},
               {"aes_provider", c.aes_provider}};
    j["eval"] = {{"n_scenes", c.eval.n_scenes},   {"scene_seed", c.eval.scene_seed},
                 {"pool_size", c.eval.pool_size}, {"pool_seed", c.eval.pool_seed},
                 {"n_subjects", c.eval.n_subjects}, {"sample_steps", c.eval.sample_steps},
                 {"attention_probe_t", c.eval.attention_probe_t}};
    return j.dump(2);
}

std::string apply_overrides(const std::string& json_text, const std::vector<std::string>& sets) {
    json j = json::parse(json_text);
    for (const auto& s : sets) {
        auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + s + "' is not key=value");
        std::string path = s.substr(0, eq);
        std::string value = s.substr(eq + 1);
        json* node = &j;
        size_t start = 0;
        while (true) {
            size_t dot = path.find('.', start);
            std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
            if (key.empty()) throw ConfigError("override '" + s + "' has an empty path segment");
            if (dot == std::string::npos) {
                json parsed;
                try {
                    parsed = json::parse(value);
                } catch (const json::parse_error&) {
                    parsed = value;  // plain string
                }
                (*node)[key] = parsed;
                break;
            }
            node = &(*node)[key];
            start = dot + 1;
        }
    }
    return j.dump();
}

uint64_t config_hash(const std::string& canonical_dump) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : canonical_dump) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace msdiff::config
