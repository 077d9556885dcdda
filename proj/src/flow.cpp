#include "msdiff/flow.hpp"

#include <cmath>
#include <stdexcept>

namespace msdiff::flow {

static constexpr double kLog2Pi = 1.8378770664093454836;

Grid interpolate(const Grid& z0, const Grid& eps, double t) {
    require_same_shape(z0, eps, "interpolate");
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("interpolate: t outside [0,1]");
    Grid out = z0;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = (1.0 - t) * z0.v[i] + t * eps.v[i];
    return out;
}

Grid velocity_target(const Grid& z0, const Grid& eps) {
    require_same_shape(z0, eps, "velocity_target");
    Grid out = z0;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = z0.v[i] - eps.v[i];
    return out;
}

double diffusion_loss(const Grid& pred, const Grid& target) {
    require_same_shape(pred, target, "diffusion_loss");
    double s = 0;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        double d = pred.v[i] - target.v[i];
        s += d * d;
    }
    return s / (double)pred.v.size();
}

Grid diffusion_loss_grad(const Grid& pred, const Grid& target) {
    require_same_shape(pred, target, "diffusion_loss_grad");
    Grid g = pred;
    const double inv = 2.0 / (double)pred.v.size();
    for (size_t i = 0; i < g.v.size(); ++i) g.v[i] = inv * (pred.v[i] - target.v[i]);
    return g;
}

Grid ode_step(const Grid& velocity, const Grid& x_t, double dt) {
    require_same_shape(velocity, x_t, "ode_step");
    if (dt <= 0) throw std::invalid_argument("ode_step: dt must be positive");
    Grid out = x_t;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = x_t.v[i] + velocity.v[i] * dt;
    return out;
}

double gaussian_log_prob(const Grid& state, const Grid& mean, double std) {
    require_same_shape(state, mean, "gaussian_log_prob");
    if (std <= 0) throw std::invalid_argument("gaussian_log_prob: std must be positive");
    const double n = (double)state.v.size();
    double q = 0;
    for (size_t i = 0; i < state.v.size(); ++i) {
        double d = state.v[i] - mean.v[i];
        q += d * d;
    }
    return -0.5 * n * kLog2Pi - n * std::log(std) - 0.5 * q / (std * std);
}

Transition sde_step(const Grid& velocity, const Grid& x_t, double t, double dt, double a, Rng& rng) {
    require_same_shape(velocity, x_t, "sde_step");
    if (a <= 0) throw std::invalid_argument("sde_step: stochasticity required (a > 0); use ode_step");
    if (t <= 0 || t > 1) throw std::invalid_argument("sde_step: t must lie in (0, 1]");
    if (dt <= 0) throw std::invalid_argument("sde_step: dt must be positive");
    Transition tr;
    tr.t = t;
    tr.std = a * std::sqrt(dt);
    tr.mean = x_t;
    const double corr = a * a / (2.0 * t);
    for (size_t i = 0; i < x_t.v.size(); ++i) {
        double noise_est = x_t.v[i] - (1.0 - t) * velocity.v[i];
        tr.mean.v[i] = x_t.v[i] + (velocity.v[i] - corr * noise_est) * dt;
    }
    tr.next_state = tr.mean;
    for (size_t i = 0; i < tr.next_state.v.size(); ++i)
        tr.next_state.v[i] += tr.std * rng.gaussian();
    tr.log_prob = gaussian_log_prob(tr.next_state, tr.mean, tr.std);
    return tr;
}

Trajectory mixed_sample(const Model& model, const synth::SceneSpec& scene,
                        const SampleSchedule& schedule, const std::optional<WindowState>& window,
                        Rng& rng, const AdapterSet* adapters, const Grid* initial_noise) {
    const ModelConfig& cfg = model.cfg;
    const int T = schedule.steps;
    if (window) {
        if (window->left < 0 || window->width < 1 || window->left + window->width > T)
            throw std::invalid_argument("mixed_sample: window outside schedule");
    }
    Grid x(cfg.grid_h, cfg.grid_w, cfg.channels);
    if (initial_noise) {
        require_same_shape(*initial_noise, x, "mixed_sample");
        x = *initial_noise;
    } else {
        for (auto& v : x.v) v = rng.gaussian();
    }

    Trajectory traj;
    traj.states.push_back(x);
    ForwardCache cache;
    const double dt = schedule.dt();
    for (int s = 0; s < T; ++s) {
        double t = schedule.t_at(s);
        TokenBatch batch = assemble_tokens(scene, x, cfg);
        ForwardResult res = forward(model, batch, t, false, adapters, &cache);
        if (window && window->contains(s)) {
            Transition tr = sde_step(res.velocity, x, t, dt, schedule.noise_scale, rng);
            tr.step_index = s;
            x = tr.next_state;
            traj.transitions.push_back(std::move(tr));
        } else {
            x = ode_step(res.velocity, x, dt);
        }
        traj.states.push_back(x);
    }
    return traj;
}

}  // namespace msdiff::flow
