#include "msdiff/ippo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include "json.hpp"
#include "msdiff/image.hpp"
#include "msdiff/optim.hpp"

namespace msdiff::ippo {

using json = nlohmann::json;

void RLConfig::validate() const {
    if (total_steps < 2) throw std::invalid_argument("RLConfig: total_steps must be >= 2");
    if (window_size < 1 || window_size > total_steps)
        throw std::invalid_argument("RLConfig: window_size outside [1, T]");
    if (window_stride < 1) throw std::invalid_argument("RLConfig: window_stride must be >= 1");
    if (shift_interval < 1) throw std::invalid_argument("RLConfig: shift_interval must be >= 1");
    if (group_size < 2) throw std::invalid_argument("RLConfig: group_size must be >= 2");
    if (clip_beta <= 0) throw std::invalid_argument("RLConfig: clip_beta must be positive");
    if (noise_scale <= 0) throw std::invalid_argument("RLConfig: noise_scale must be positive");
}

int window_position(int64_t m, const RLConfig& cfg) {
    if (m < 1) throw std::invalid_argument("window_position: iterations are 1-based");
    int64_t shifts = (m - 1) / cfg.shift_interval;
    int64_t l = (int64_t)cfg.window_stride * shifts;
    int64_t cap = cfg.total_steps - cfg.window_size;
    return (int)std::min(l, cap);
}

std::vector<double> advantages(const std::vector<double>& rewards) {
    const size_t n = rewards.size();
    if (n < 2) throw std::invalid_argument("advantages: need a group of at least 2");
    double mean = 0;
    for (double r : rewards) mean += r;
    mean /= (double)n;
    double var = 0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    double std_dev = std::sqrt(var / (double)n);  // population std
    if (std_dev < 1e-8) return {};                // degenerate group: skip
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = (rewards[i] - mean) / std_dev;
    return out;
}

double gspo_ratio(const std::vector<double>& logp_new, const std::vector<double>& logp_old) {
    if (logp_new.size() != logp_old.size() || logp_new.empty())
        throw std::invalid_argument("gspo_ratio: mismatched window lengths");
    double s = 0;
    for (size_t i = 0; i < logp_new.size(); ++i) s += logp_new[i] - logp_old[i];
    return std::exp(s / (double)logp_new.size());
}

double gspo_objective(const std::vector<double>& ratios, const std::vector<double>& adv,
                      double beta) {
    if (ratios.size() != adv.size() || ratios.empty())
        throw std::invalid_argument("gspo_objective: length mismatch");
    double acc = 0;
    for (size_t i = 0; i < ratios.size(); ++i) {
        double clipped = std::clamp(ratios[i], 1.0 - beta, 1.0 + beta);
        acc += std::min(ratios[i] * adv[i], clipped * adv[i]);
    }
    return acc / (double)ratios.size();
}

std::vector<std::vector<double>> gspo_objective_grad(const std::vector<double>& ratios,
                                                     const std::vector<double>& adv, double beta,
                                                     int window_steps) {
    if (ratios.size() != adv.size()) throw std::invalid_argument("gspo_objective_grad: length mismatch");
    const size_t n = ratios.size();
    std::vector<std::vector<double>> out(n, std::vector<double>(window_steps, 0.0));
    for (size_t i = 0; i < n; ++i) {
        double s = ratios[i];
        double clipped = std::clamp(s, 1.0 - beta, 1.0 + beta);
        double raw = s * adv[i], clip_v = clipped * adv[i];
        double d_s;  // d min / d s
        if (raw <= clip_v) {
            d_s = adv[i];  // unclipped branch selected
        } else {
            d_s = (s > 1.0 - beta && s < 1.0 + beta) ? adv[i] : 0.0;
        }
        // ds/dlogp_new[t] = s / |S|
        double g = d_s * s / (double)window_steps / (double)n;
        for (int t = 0; t < window_steps; ++t) out[i][t] = g;
    }
    return out;
}

// ---------------------------------------------------------------------------
// rollouts
// ---------------------------------------------------------------------------

static Grid decode_image(const Grid& latent, const RolloutEnv& env) {
    return clamp01(unpatchify(latent, env.patch, 3));
}

RolloutGroup rollout_group(const Model& policy, const AdapterSet* adapters,
                           const synth::SceneSpec& scene, const RLConfig& cfg,
                           const flow::WindowState& window, const RolloutEnv& env, Rng& rng) {
    cfg.validate();
    if (window.left < 0 || window.left + window.width > cfg.total_steps)
        throw std::invalid_argument("rollout_group: window outside schedule");
    const ModelConfig& mc = policy.cfg;
    flow::SampleSchedule schedule(cfg.total_steps, cfg.noise_scale);

    RolloutGroup group;
    group.scene = scene;
    group.initial_noise = Grid(mc.grid_h, mc.grid_w, mc.channels);
    for (auto& v : group.initial_noise.v) v = rng.gaussian();

    // shared deterministic prefix: identical for every member
    std::vector<Grid> prefix;
    prefix.push_back(group.initial_noise);
    {
        ForwardCache cache;
        Grid x = group.initial_noise;
        for (int s = 0; s < window.left; ++s) {
            TokenBatch batch = assemble_tokens(scene, x, mc);
            ForwardResult res = forward(policy, batch, schedule.t_at(s), false, adapters, &cache);
            x = flow::ode_step(res.velocity, x, schedule.dt());
            prefix.push_back(x);
        }
    }

    std::vector<Rng> member_rng;
    for (int i = 0; i < cfg.group_size; ++i) member_rng.push_back(rng.fork(i + 1));

    group.trajectories.resize(cfg.group_size);
    group.rewards.resize(cfg.group_size);
    std::vector<std::string> errors(cfg.group_size);
    auto run_member = [&](int i) {
        try {
            flow::Trajectory traj;
            traj.states = prefix;
            ForwardCache cache;
            Grid x = prefix.back();
            for (int s = window.left; s < cfg.total_steps; ++s) {
                TokenBatch batch = assemble_tokens(scene, x, mc);
                ForwardResult res = forward(policy, batch, schedule.t_at(s), false, adapters, &cache);
                if (window.contains(s)) {
                    flow::Transition tr =
                        flow::sde_step(res.velocity, x, schedule.t_at(s), schedule.dt(),
                                       cfg.noise_scale, member_rng[i]);
                    tr.step_index = s;
                    x = tr.next_state;
                    traj.transitions.push_back(std::move(tr));
                } else {
                    x = flow::ode_step(res.velocity, x, schedule.dt());
                }
                traj.states.push_back(x);
            }
            group.rewards[i] = rewards::composite_reward(decode_image(traj.final_state(), env),
                                                         scene, cfg.weights, env.providers);
            group.trajectories[i] = std::move(traj);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    };
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    if (hw >= 2 && cfg.group_size >= 2) {
        std::vector<std::thread> workers;
        const int n_workers = (int)std::min<unsigned>(hw, cfg.group_size);
        for (int w = 0; w < n_workers; ++w)
            workers.emplace_back([&, w] {
                for (int i = w; i < cfg.group_size; i += n_workers) run_member(i);
            });
        for (auto& t : workers) t.join();
    } else {
        for (int i = 0; i < cfg.group_size; ++i) run_member(i);
    }
    for (const auto& e : errors)
        if (!e.empty()) throw rewards::RewardError(e);

    std::vector<double> totals;
    for (const auto& r : group.rewards) totals.push_back(r.total);
    group.advantage = advantages(totals);
    group.degenerate = group.advantage.empty();
    return group;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

std::string IterationMetrics::to_json_line() const {
    json j{{"iteration", iteration},   {"window_left", window_left}, {"reward_mean", reward_mean},
           {"reward_std", reward_std}, {"r_text", r_text},           {"r_aes", r_aes},
           {"r_id", r_id},             {"ratio_min", ratio_min},     {"ratio_mean", ratio_mean},
           {"ratio_max", ratio_max},   {"objective", objective},     {"skipped", skipped},
           {"nonfinite", nonfinite}};
    return j.dump();
}

IppoResult ippo_train(const Model& base, AdapterSet& adapters, const RLConfig& cfg,
                      const RolloutEnv& env, int64_t iterations, Rng& rng,
                      const IppoOptions& opts) {
    cfg.validate();
    if (adapters.empty()) throw std::invalid_argument("ippo_train: policy has no trainable adapters");
    auto pool = synth::make_identity_pool(opts.pool_seed, opts.pool_size, env.gen);
    flow::SampleSchedule schedule(cfg.total_steps, cfg.noise_scale);

    AdamW opt(cfg.lr, cfg.weight_decay);
    auto pviews = param_views(adapters);

    std::ofstream metrics_file;
    if (!opts.metrics_path.empty()) {
        metrics_file.open(opts.metrics_path);
        if (!metrics_file) throw std::runtime_error("ippo_train: cannot open metrics log");
    }

    IppoResult result;
    const double dt = schedule.dt();
    for (int64_t m = 1; m <= iterations; ++m) {
        IterationMetrics im;
        im.iteration = m;
        im.window_left = window_position(m, cfg);
        flow::WindowState window{im.window_left, cfg.window_size};

        // The group is sampled under the pre-update parameters; with one
        // gradient step per iteration this is exactly the old policy.
        RolloutGroup group;
        bool built = false;
        for (int attempt = 0; attempt < 8 && !built; ++attempt) {
            synth::SceneSpec scene = synth::make_scene(cfg.n_subjects, pool, synth::LayoutRule::kRow,
                                                       rng, env.gen);
            try {
                group = rollout_group(base, &adapters, scene, cfg, window, env, rng);
                built = true;
            } catch (const rewards::RewardError&) {
                continue;  // rebuild with a fresh scene
            }
        }
        if (!built) throw std::runtime_error("ippo_train: reward provider kept failing");

        double rsum = 0, rsq = 0;
        for (const auto& r : group.rewards) {
            rsum += r.total;
            im.r_text += r.r_text / cfg.group_size;
            im.r_aes += r.r_aes / cfg.group_size;
            im.r_id += r.r_id / cfg.group_size;
        }
        im.reward_mean = rsum / cfg.group_size;
        for (const auto& r : group.rewards)
            rsq += (r.total - im.reward_mean) * (r.total - im.reward_mean);
        im.reward_std = std::sqrt(rsq / cfg.group_size);

        if (group.degenerate) {
            im.skipped = true;
            result.metrics.push_back(im);
            if (metrics_file) metrics_file << im.to_json_line() << "\n";
            continue;
        }

        // recompute transition log-probs under the current parameters
        const int N = cfg.group_size, W = cfg.window_size;
        std::vector<std::vector<double>> logp_new(N), logp_old(N);
        std::vector<std::vector<Grid>> means_new(N);
        for (int i = 0; i < N; ++i) {
            const auto& traj = group.trajectories[i];
            for (const auto& tr : traj.transitions) {
                const Grid& x = traj.states[tr.step_index];
                TokenBatch batch = assemble_tokens(group.scene, x, base.cfg);
                ForwardCache cache;
                ForwardResult res = forward(base, batch, tr.t, false, &adapters, &cache);
                Grid mean = x;
                const double corr = cfg.noise_scale * cfg.noise_scale / (2.0 * tr.t);
                for (size_t p = 0; p < x.v.size(); ++p) {
                    double noise_est = x.v[p] - (1.0 - tr.t) * res.velocity.v[p];
                    mean.v[p] = x.v[p] + (res.velocity.v[p] - corr * noise_est) * dt;
                }
                logp_new[i].push_back(flow::gaussian_log_prob(tr.next_state, mean, tr.std));
                logp_old[i].push_back(tr.log_prob);
                means_new[i].push_back(std::move(mean));
            }
        }
        std::vector<double> ratios(N);
        for (int i = 0; i < N; ++i) ratios[i] = gspo_ratio(logp_new[i], logp_old[i]);
        im.ratio_min = *std::min_element(ratios.begin(), ratios.end());
        im.ratio_max = *std::max_element(ratios.begin(), ratios.end());
        for (double r : ratios) im.ratio_mean += r / N;
        im.objective = gspo_objective(ratios, group.advantage, cfg.clip_beta);

        if (!std::isfinite(im.objective)) {
            im.nonfinite = true;
            result.metrics.push_back(im);
            if (metrics_file) metrics_file << im.to_json_line() << "\n";
            continue;  // abort this iteration, keep training from last good state
        }

        auto dlogp = gspo_objective_grad(ratios, group.advantage, cfg.clip_beta, W);
        AdapterSet grads = zeros_like(adapters);
        BackwardOptions bopts;
        bopts.train_base = false;
        bopts.train_adapters = true;
        for (int i = 0; i < N; ++i) {
            const auto& traj = group.trajectories[i];
            for (int wi = 0; wi < (int)traj.transitions.size(); ++wi) {
                const auto& tr = traj.transitions[wi];
                if (dlogp[i][wi] == 0.0) continue;
                const Grid& x = traj.states[tr.step_index];
                TokenBatch batch = assemble_tokens(group.scene, x, base.cfg);
                ForwardCache cache;
                ForwardResult res = forward(base, batch, tr.t, false, &adapters, &cache);
                const Grid& mean = means_new[i][wi];
                const double corr = cfg.noise_scale * cfg.noise_scale / (2.0 * tr.t);
                const double dmean_dvel = dt * (1.0 + corr * (1.0 - tr.t));
                const double inv_var = 1.0 / (tr.std * tr.std);
                Grid dvel = mean;
                // ascent on J: accumulate gradients of -J
                for (size_t p = 0; p < dvel.v.size(); ++p) {
                    double dmean = -dlogp[i][wi] * (tr.next_state.v[p] - mean.v[p]) * inv_var;
                    dvel.v[p] = dmean * dmean_dvel;
                }
                backward(base, batch, cache, dvel, {}, &adapters, nullptr, &grads, bopts);
            }
        }
        bool finite = true;
        auto gviews = param_views(grads);
        for (auto& g : gviews)
            for (double v : *g.data)
                if (!std::isfinite(v)) {
                    finite = false;
                    break;
                }
        if (!finite) {
            im.nonfinite = true;
        } else {
            opt.step(pviews, gviews);
            result.completed_iterations++;
        }
        result.metrics.push_back(im);
        if (metrics_file) metrics_file << im.to_json_line() << "\n";
    }
    return result;
}

}  // namespace msdiff::ippo
