#include "msdiff/trainer.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "msdiff/attention_reg.hpp"
#include "msdiff/flow.hpp"
#include "msdiff/image.hpp"
#include "msdiff/optim.hpp"
#include "msdiff/rng.hpp"

namespace msdiff::train {

using json = nlohmann::json;

namespace {

struct Sample {
    synth::SceneSpec scene;
    uint64_t noise_seed = 0;
};

struct WorkerAccum {
    Model grads;
    AdapterSet adapter_grads;
    double l_diff = 0, l_attn = 0;
};

}  // namespace

TrainResult train_stage(Model& model, AdapterSet* adapters, const StageConfig& cfg,
                        const TrainEnv& env, const std::string& metrics_path) {
    if (cfg.stage != "pretrain" && cfg.stage != "multi")
        throw std::invalid_argument("train_stage: stage must be 'pretrain' or 'multi'");
    if (cfg.batch < 1 || cfg.steps < 0) throw std::invalid_argument("train_stage: bad batch/steps");
    const int n_subjects = cfg.stage == "pretrain" ? 1 : cfg.n_subjects;
    const double lambda = cfg.stage == "pretrain" ? 0.0 : cfg.lambda;
    const bool record = lambda > 0.0;
    const ModelConfig& mc = model.cfg;

    auto pool = synth::make_identity_pool(env.pool_seed, env.pool_size, env.gen);
    Rng rng(cfg.seed);

    AdamW opt(cfg.lr, cfg.weight_decay);
    auto base_views = param_views(model);
    std::vector<AdapterParamView> adapter_views;
    if (adapters) adapter_views = param_views(*adapters);
    const bool train_base = adapters == nullptr;

    std::ofstream metrics_file;
    if (!metrics_path.empty()) {
        metrics_file.open(metrics_path);
        if (!metrics_file) throw std::runtime_error("train_stage: cannot open metrics log");
    }

    const int n_threads = std::max(1, std::min(cfg.threads, cfg.batch));
    std::vector<WorkerAccum> acc(n_threads);
    for (auto& a : acc) {
        a.grads = zeros_like(model);
        if (adapters) a.adapter_grads = zeros_like(*adapters);
    }
    Model step_grads = zeros_like(model);
    AdapterSet step_adapter_grads;
    if (adapters) step_adapter_grads = zeros_like(*adapters);

    TrainResult result;
    for (int64_t step = 1; step <= cfg.steps; ++step) {
        // draw the batch sequentially so the stream is independent of threading
        std::vector<Sample> batch(cfg.batch);
        for (int b = 0; b < cfg.batch; ++b) {
            batch[b].scene = synth::make_scene(n_subjects, pool, synth::LayoutRule::kRow, rng, env.gen);
            batch[b].noise_seed = rng.next_u64();
        }

        for (auto& a : acc) {
            auto gv = param_views(a.grads);
            for (auto& v : gv) std::fill(v.data->begin(), v.data->end(), 0.0);
            if (adapters) {
                auto av = param_views(a.adapter_grads);
                for (auto& v : av) std::fill(v.data->begin(), v.data->end(), 0.0);
            }
            a.l_diff = 0;
            a.l_attn = 0;
        }

        auto process = [&](int worker, int b) {
            WorkerAccum& a = acc[worker];
            Sample& smp = batch[b];
            synth::RenderedScene rendered = synth::render_scene(smp.scene);
            Grid z0 = patchify(rendered.target, env.patch);
            Rng srng(smp.noise_seed);
            Grid eps = z0;
            for (auto& v : eps.v) v = srng.gaussian();
            double t = srng.uniform();
            Grid zt = flow::interpolate(z0, eps, t);
            Grid target = flow::velocity_target(z0, eps);
            TokenBatch tokens = assemble_tokens(smp.scene, zt, mc);

            ForwardCache cache;
            ForwardResult res = forward(model, tokens, t, record, adapters, &cache);
            a.l_diff += flow::diffusion_loss(res.velocity, target) / cfg.batch;
            Grid dvel = flow::diffusion_loss_grad(res.velocity, target);
            for (auto& v : dvel.v) v /= cfg.batch;

            std::vector<std::vector<Mat>> dprobs;
            if (record) {
                std::vector<attn::SubjectMap> maps;
                std::vector<attn::SubjectMask> masks;
                for (int i = 0; i < (int)smp.scene.subjects.size(); ++i) {
                    maps.push_back(attn::aggregate_subject_map(*res.records, i, mc.grid_h, mc.grid_w));
                    masks.push_back(attn::rasterize_mask(rendered.pixel_masks[i], i, mc.grid_h, mc.grid_w));
                }
                a.l_attn += attn::dice_loss(maps, masks, cfg.dice_eps) / cfg.batch;
                dprobs = attn::attention_loss_backward(*res.records, maps, masks, cfg.dice_eps,
                                                       lambda / cfg.batch);
            }
            BackwardOptions opts;
            opts.train_base = train_base;
            opts.train_adapters = adapters != nullptr;
            backward(model, tokens, cache, dvel, dprobs, adapters, &a.grads,
                     adapters ? &a.adapter_grads : nullptr, opts);
        };

        if (n_threads > 1) {
            std::vector<std::thread> workers;
            for (int w = 0; w < n_threads; ++w)
                workers.emplace_back([&, w] {
                    for (int b = w; b < cfg.batch; b += n_threads) process(w, b);
                });
            for (auto& th : workers) th.join();
        } else {
            for (int b = 0; b < cfg.batch; ++b) process(0, b);
        }

        // deterministic reduction in worker order
        double l_diff = 0, l_attn = 0;
        auto sg = param_views(step_grads);
        for (auto& v : sg) std::fill(v.data->begin(), v.data->end(), 0.0);
        std::vector<AdapterParamView> sag;
        if (adapters) {
            sag = param_views(step_adapter_grads);
            for (auto& v : sag) std::fill(v.data->begin(), v.data->end(), 0.0);
        }
        for (auto& a : acc) {
            l_diff += a.l_diff;
            l_attn += a.l_attn;
            auto gv = param_views(a.grads);
            for (size_t k = 0; k < gv.size(); ++k)
                for (size_t j = 0; j < gv[k].data->size(); ++j)
                    (*sg[k].data)[j] += (*gv[k].data)[j];
            if (adapters) {
                auto av = param_views(a.adapter_grads);
                for (size_t k = 0; k < av.size(); ++k)
                    for (size_t j = 0; j < av[k].data->size(); ++j)
                        (*sag[k].data)[j] += (*av[k].data)[j];
            }
        }

        if (train_base) {
            opt.step(base_views, sg);
        } else {
            opt.step(adapter_views, sag);
        }

        double loss = l_diff + lambda * l_attn;
        result.final_loss = loss;
        if (step % cfg.log_every == 0 || step == cfg.steps) {
            StepMetrics sm{step, loss, l_diff, l_attn};
            result.history.push_back(sm);
            if (metrics_file) {
                metrics_file << json{{"step", step}, {"loss", loss}, {"l_diff", l_diff}, {"l_attn", l_attn}}
                                    .dump()
                             << "\n";
            }
        }
    }
    return result;
}

}  // namespace msdiff::train
