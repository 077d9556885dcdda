#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "msdiff/attention_reg.hpp"
#include "msdiff/checkpoint.hpp"
#include "msdiff/config.hpp"
#include "msdiff/evalkit.hpp"
#include "msdiff/flow.hpp"
#include "msdiff/image.hpp"
#include "msdiff/ippo.hpp"
#include "msdiff/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace msdiff;

namespace {

constexpr const char* kVersion = "msdiff 0.1.0";

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out;
    std::string init_from;
    std::optional<uint64_t> seed;
    std::string stage;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_stage = false) {
    cmd->add_option("--config", args.config_path, "run configuration file (JSON)");
    cmd->add_option("--set", args.sets, "dotted-path override, e.g. train.lambda=0.25");
    cmd->add_option("--out", args.out, "output directory");
    cmd->add_option("--init-from", args.init_from, "checkpoint to initialize from");
    cmd->add_option("--seed", args.seed, "seed override");
    if (with_stage) cmd->add_option("--stage", args.stage, "training stage: pretrain | multi");
}

std::string resolve_out(const std::string& out, const std::string& fallback) {
    std::string o = out.empty() ? fallback : out;
    const char* root = std::getenv("MSDIFF_OUT_ROOT");
    fs::path p(o);
    if (root && *root && p.is_relative()) p = fs::path(root) / p;
    fs::create_directories(p);
    return p.string();
}

config::RunConfig load_effective_config(const CommonArgs& args) {
    std::string text = "{}";
    if (!args.config_path.empty()) {
        std::ifstream f(args.config_path);
        if (!f) throw config::ConfigError("cannot open config file " + args.config_path);
        std::stringstream ss;
        ss << f.rdbuf();
        text = ss.str();
    }
    text = config::apply_overrides(text, args.sets);
    config::RunConfig cfg = config::parse_config(text);
    if (args.seed) cfg.seed = *args.seed;
    if (!args.stage.empty()) cfg.stage = args.stage;
    if (!args.out.empty()) cfg.out_dir = args.out;
    cfg.validate();
    return cfg;
}

void write_manifest(const std::string& out_dir, const std::string& command,
                    const config::RunConfig& cfg) {
    std::string echo = config::dump_config(cfg);
    json m{{"command", command},
           {"version", kVersion},
           {"seed", cfg.seed},
           {"config_hash", config::config_hash(echo)},
           {"config", json::parse(echo)}};
    std::ofstream f(fs::path(out_dir) / "manifest.json");
    f << m.dump(2) << "\n";
}

rewards::RewardProviders make_providers(const config::RunConfig& cfg) {
    rewards::RewardProviders p;
    p.text = rewards::ProviderRegistry::instance().get(cfg.text_provider);
    p.aes = rewards::ProviderRegistry::instance().get(cfg.aes_provider);
    p.detector.background = cfg.gen.background;
    p.detector.min_area = 4 * cfg.patch() * cfg.patch();
    return p;
}

int cmd_gen_data(const CommonArgs& args, int count) {
    config::RunConfig cfg = load_effective_config(args);
    std::string out = resolve_out(cfg.out_dir.empty() ? args.out : cfg.out_dir, "dataset");
    auto pool = synth::make_identity_pool(cfg.pool_seed, cfg.pool_size, cfg.gen);
    Rng rng(cfg.seed);
    std::vector<synth::SceneSpec> scenes;
    for (int i = 0; i < count; ++i)
        scenes.push_back(synth::make_scene(cfg.train_cfg.n_subjects, pool, synth::LayoutRule::kRow,
                                           rng, cfg.gen));
    synth::write_dataset(out, scenes);
    write_manifest(out, "gen-data", cfg);
    std::cout << "wrote " << count << " scenes to " << out << "\n";
    return 0;
}

int cmd_train(const CommonArgs& args) {
    config::RunConfig cfg = load_effective_config(args);
    if (cfg.stage != "pretrain" && cfg.stage != "multi")
        throw config::ConfigError("train: stage must be pretrain or multi (use rl-train for rl)");
    std::string out = resolve_out(cfg.out_dir, "runs/train");

    Model model;
    std::optional<AdapterSet> adapters;
    AdapterPlacement placement;
    if (!args.init_from.empty()) {
        LoadedCheckpoint ck = load_checkpoint(args.init_from);
        model = std::move(ck.model);
        adapters = std::move(ck.adapters);
        placement = ck.placement;
    } else {
        model = build_model(cfg.model, cfg.seed);
    }
    if (cfg.adapters.enabled && !adapters) {
        placement.rank = cfg.adapters.rank;
        placement.alpha = cfg.adapters.alpha;
        placement.n_experts = cfg.adapters.n_experts;
        placement.top_k = cfg.adapters.top_k;
        placement.seed = cfg.adapters.seed;
        placement.sites = cfg.adapters.sites;
        adapters = attach_adapters(model, placement);
    }

    train::StageConfig sc = cfg.train_cfg;
    sc.stage = cfg.stage;
    train::TrainEnv env;
    env.gen = cfg.gen;
    env.patch = cfg.patch();
    env.pool_size = cfg.pool_size;
    env.pool_seed = cfg.pool_seed;

    train::TrainResult res = train_stage(model, cfg.adapters.enabled ? &*adapters : nullptr, sc, env,
                                         (fs::path(out) / "metrics.jsonl").string());
    save_checkpoint((fs::path(out) / "checkpoint.ckpt").string(), model,
                    adapters ? &*adapters : nullptr, adapters ? &placement : nullptr, cfg.stage,
                    sc.steps);
    write_manifest(out, "train", cfg);
    std::cout << "stage " << cfg.stage << " done, final loss " << res.final_loss << ", checkpoint at "
              << out << "/checkpoint.ckpt\n";
    return 0;
}

int cmd_rl_train(const CommonArgs& args) {
    CommonArgs a = args;
    a.stage = "rl";
    config::RunConfig cfg = load_effective_config(a);
    if (args.init_from.empty())
        throw config::ConfigError("rl-train: --init-from <stage-2 checkpoint> is required");
    std::string out = resolve_out(cfg.out_dir, "runs/rl");

    LoadedCheckpoint ck = load_checkpoint(args.init_from);
    Model model = std::move(ck.model);
    AdapterPlacement placement = ck.placement;
    AdapterSet adapters;
    if (ck.adapters) {
        adapters = std::move(*ck.adapters);
    } else {
        placement.rank = cfg.adapters.rank;
        placement.alpha = cfg.adapters.alpha;
        placement.n_experts = cfg.adapters.n_experts;
        placement.top_k = cfg.adapters.top_k;
        placement.seed = cfg.adapters.seed;
        placement.sites = cfg.adapters.sites;
        adapters = attach_adapters(model, placement);
    }

    ippo::RolloutEnv env;
    env.gen = cfg.gen;
    env.patch = cfg.patch();
    env.providers = make_providers(cfg);
    ippo::IppoOptions opts;
    opts.metrics_path = (fs::path(out) / "metrics.jsonl").string();
    opts.pool_size = cfg.pool_size;
    opts.pool_seed = cfg.pool_seed;
    Rng rng(cfg.seed);
    ippo::IppoResult res = ippo::ippo_train(model, adapters, cfg.rl, env, cfg.rl.iterations, rng, opts);
    save_checkpoint((fs::path(out) / "checkpoint.ckpt").string(), model, &adapters, &placement, "rl",
                    cfg.rl.iterations);
    write_manifest(out, "rl-train", cfg);
    double last_reward = res.metrics.empty() ? 0.0 : res.metrics.back().reward_mean;
    std::cout << "rl stage done, " << res.completed_iterations << " updates, last mean reward "
              << last_reward << ", checkpoint at " << out << "/checkpoint.ckpt\n";
    return 0;
}

int cmd_sample(const CommonArgs& args, int count) {
    config::RunConfig cfg = load_effective_config(args);
    if (args.init_from.empty()) throw config::ConfigError("sample: --init-from <checkpoint> is required");
    std::string out = resolve_out(cfg.out_dir, "runs/sample");
    LoadedCheckpoint ck = load_checkpoint(args.init_from);
    const AdapterSet* adapters = ck.adapters ? &*ck.adapters : nullptr;

    auto pool = synth::make_identity_pool(cfg.eval.pool_seed, cfg.eval.pool_size, cfg.gen);
    Rng rng(cfg.seed);
    flow::SampleSchedule schedule(cfg.eval.sample_steps, cfg.rl.noise_scale);
    for (int i = 0; i < count; ++i) {
        synth::SceneSpec scene =
            synth::make_scene(cfg.eval.n_subjects, pool, synth::LayoutRule::kRow, rng, cfg.gen);
        Rng srng(scene.seed ^ 0xE5A1u);
        flow::Trajectory traj = flow::mixed_sample(ck.model, scene, schedule, std::nullopt, srng, adapters);
        Grid image = clamp01(unpatchify(traj.final_state(), cfg.patch(), 3));
        char name[64];
        std::snprintf(name, sizeof(name), "sample_%03d", i);
        write_ppm((fs::path(out) / (std::string(name) + ".ppm")).string(), image);
        std::ofstream sf(fs::path(out) / (std::string(name) + ".json"));
        sf << synth::scene_to_json(scene) << "\n";
    }
    write_manifest(out, "sample", cfg);
    std::cout << "wrote " << count << " samples to " << out << "\n";
    return 0;
}

evalkit::EvalReport eval_checkpoint(const config::RunConfig& cfg, const std::string& ckpt_path) {
    LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    evalkit::EvalSettings s = cfg.eval;
    s.gen = cfg.gen;
    s.patch = cfg.patch();
    return evalkit::evaluate_model(ck.model, ck.adapters ? &*ck.adapters : nullptr, s);
}

int cmd_eval(const CommonArgs& args) {
    config::RunConfig cfg = load_effective_config(args);
    if (args.init_from.empty()) throw config::ConfigError("eval: --init-from <checkpoint> is required");
    std::string out = resolve_out(cfg.out_dir, "runs/eval");
    evalkit::EvalReport r = eval_checkpoint(cfg, args.init_from);
    json jr{{"identity_fidelity", r.identity_fidelity},
            {"prompt_score", r.prompt_score},
            {"attention_dice", r.attention_dice},
            {"leakage", r.leakage},
            {"n_scenes", r.n_scenes}};
    std::ofstream jf(fs::path(out) / "report.json");
    jf << jr.dump(2) << "\n";
    std::ofstream cf(fs::path(out) / "report.csv");
    cf << "identity_fidelity,prompt_score,attention_dice,leakage,n_scenes\n"
       << r.identity_fidelity << "," << r.prompt_score << "," << r.attention_dice << "," << r.leakage
       << "," << r.n_scenes << "\n";

    // attention heatmap panel for the first eval scene
    LoadedCheckpoint ck = load_checkpoint(args.init_from);
    auto pool = synth::make_identity_pool(cfg.eval.pool_seed, cfg.eval.pool_size, cfg.gen);
    Rng rng(cfg.eval.scene_seed);
    synth::SceneSpec scene = synth::make_scene(cfg.eval.n_subjects, pool, synth::LayoutRule::kRow, rng, cfg.gen);
    synth::RenderedScene rendered = synth::render_scene(scene);
    Grid z0 = patchify(rendered.target, cfg.patch());
    Rng srng(scene.seed ^ 0xE5A1u);
    Grid eps = z0;
    for (auto& v : eps.v) v = srng.gaussian();
    Grid zt = flow::interpolate(z0, eps, cfg.eval.attention_probe_t);
    TokenBatch batch = assemble_tokens(scene, zt, ck.model.cfg);
    ForwardResult res = forward(ck.model, batch, cfg.eval.attention_probe_t, true,
                                ck.adapters ? &*ck.adapters : nullptr);
    std::vector<Mat> maps, masks;
    for (int i = 0; i < (int)scene.subjects.size(); ++i) {
        maps.push_back(attn::aggregate_subject_map(*res.records, i, ck.model.cfg.grid_h, ck.model.cfg.grid_w).values);
        masks.push_back(attn::rasterize_mask(rendered.pixel_masks[i], i, ck.model.cfg.grid_h, ck.model.cfg.grid_w).values);
    }
    evalkit::write_attention_panel((fs::path(out) / "attention_panel.ppm").string(), maps, masks);

    write_manifest(out, "eval", cfg);
    std::cout << jr.dump(2) << "\n";
    return 0;
}

int cmd_report(const CommonArgs& args, const std::vector<std::string>& runs,
               const std::string& metrics_path, const std::string& metrics_field) {
    config::RunConfig cfg = load_effective_config(args);
    std::string out = resolve_out(cfg.out_dir, "runs/report");
    std::vector<evalkit::AblationRow> rows;
    for (const auto& spec : runs) {
        auto eq = spec.find('=');
        if (eq == std::string::npos)
            throw config::ConfigError("report: --run expects label=checkpoint, got '" + spec + "'");
        evalkit::AblationRow row;
        row.label = spec.substr(0, eq);
        row.report = eval_checkpoint(cfg, spec.substr(eq + 1));
        rows.push_back(std::move(row));
    }
    evalkit::AblationTable table = evalkit::ablation_report(rows);
    std::ofstream cf(fs::path(out) / "ablation.csv");
    cf << evalkit::ablation_to_csv(table);
    std::ofstream tf(fs::path(out) / "summary.txt");
    std::string text = evalkit::ablation_to_text(table);
    tf << text;
    if (!metrics_path.empty())
        evalkit::render_metric_curve(metrics_path, metrics_field,
                                     (fs::path(out) / (metrics_field + "_curve.ppm")).string());
    write_manifest(out, "report", cfg);
    std::cout << text;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-subject in-context diffusion trainer"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, rl_args, sample_args, eval_args, report_args;
    int gen_count = 100, sample_count = 8;
    std::vector<std::string> report_runs;
    std::string report_metrics, report_field = "reward_mean";

    auto* gen = app.add_subcommand("gen-data", "write a procedural scene dataset");
    add_common(gen, gen_args);
    gen->add_option("--count", gen_count, "number of scenes");

    auto* tr = app.add_subcommand("train", "flow-matching training (stages: pretrain, multi)");
    add_common(tr, train_args, true);

    auto* rl = app.add_subcommand("rl-train", "preference optimization from a stage-2 checkpoint");
    add_common(rl, rl_args);

    auto* smp = app.add_subcommand("sample", "ODE sampling from a checkpoint");
    add_common(smp, sample_args);
    smp->add_option("--count", sample_count, "number of scenes to sample");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the synthetic benchmark");
    add_common(ev, eval_args);

    auto* rep = app.add_subcommand("report", "ablation table over labeled checkpoints");
    add_common(rep, report_args);
    rep->add_option("--run", report_runs, "label=checkpoint (repeatable)");
    rep->add_option("--metrics", report_metrics, "metrics JSONL to plot");
    rep->add_option("--field", report_field, "metrics field for the curve");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_args, gen_count);
        if (tr->parsed()) return cmd_train(train_args);
        if (rl->parsed()) return cmd_rl_train(rl_args);
        if (smp->parsed()) return cmd_sample(sample_args, sample_count);
        if (ev->parsed()) return cmd_eval(eval_args);
        if (rep->parsed()) return cmd_report(report_args, report_runs, report_metrics, report_field);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
