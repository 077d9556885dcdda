#pragma once

#include <optional>
#include <set>
#include <vector>

#include "msdiff/grid.hpp"
#include "msdiff/model.hpp"
#include "msdiff/rng.hpp"

namespace msdiff::flow {

// Uniform descending schedule t: 1 -> 0 in T Euler steps.
struct SampleSchedule {
    int steps = 16;
    double noise_scale = 0.7;  // SDE stochasticity coefficient a

    SampleSchedule() = default;
    SampleSchedule(int T, double a) : steps(T), noise_scale(a) {
        if (T < 1) throw std::invalid_argument("SampleSchedule: need at least 1 step");
        if (a < 0) throw std::invalid_argument("SampleSchedule: negative noise scale");
    }
    double dt() const { return 1.0 / steps; }
    // time at the start of step index s (s = 0 leaves t = 1)
    double t_at(int s) const { return 1.0 - (double)s / steps; }
};

// One stochastic denoising transition x_t -> x_{t-dt}: a diagonal Gaussian
// with shared scalar std, plus its log-density at the sampled next state.
struct Transition {
    int step_index = 0;
    double t = 0;
    Grid mean;
    double std = 0;
    Grid next_state;
    double log_prob = 0;
};

// z_t = (1-t) z0 + t eps
Grid interpolate(const Grid& z0, const Grid& eps, double t);

// v = z0 - eps (the quantity the network regresses)
Grid velocity_target(const Grid& z0, const Grid& eps);

// mean squared error over all elements
double diffusion_loss(const Grid& pred, const Grid& target);
Grid diffusion_loss_grad(const Grid& pred, const Grid& target);

// Euler step toward data: x_{t-dt} = x_t + v * dt, with v the model's
// predicted (z0 - eps)-direction velocity.
Grid ode_step(const Grid& velocity, const Grid& x_t, double dt);

// Stochastic step with drift correction; std = a*sqrt(dt). The correction
// term (x - (1-t) v) estimates the noise component of x_t.
Transition sde_step(const Grid& velocity, const Grid& x_t, double t, double dt, double a, Rng& rng);

// Log-density of `state` under the transition's diagonal Gaussian, summed
// over latent dimensions.
double gaussian_log_prob(const Grid& state, const Grid& mean, double std);

struct WindowState {
    int left = 0;
    int width = 0;
    bool contains(int step) const { return step >= left && step < left + width; }
};

struct Trajectory {
    std::vector<Grid> states;  // T+1 states, from noise (t=1) to data (t=0)
    std::vector<Transition> transitions;  // one per window step, ascending step index
    const Grid& final_state() const { return states.back(); }
};

// SDE inside the window, ODE elsewhere. No window -> pure ODE, no transitions.
Trajectory mixed_sample(const Model& model, const synth::SceneSpec& scene,
                        const SampleSchedule& schedule, const std::optional<WindowState>& window,
                        Rng& rng, const AdapterSet* adapters = nullptr,
                        const Grid* initial_noise = nullptr);

}  // namespace msdiff::flow
