#include "doctest.h"

#include <cmath>

#include "msdiff/flow.hpp"
#include "oracles.hpp"

using namespace msdiff;

static Grid const_grid(int h, int w, int c, double v) {
    Grid g(h, w, c);
    g.fill(v);
    return g;
}

static Grid random_grid(int h, int w, int c, Rng& rng) {
    Grid g(h, w, c);
    for (auto& v : g.v) v = rng.gaussian();
    return g;
}

TEST_CASE("interpolation endpoints and affine path") {
    Rng rng(1);
    Grid z0 = random_grid(3, 3, 2, rng);
    Grid eps = random_grid(3, 3, 2, rng);
    Grid at0 = flow::interpolate(z0, eps, 0.0);
    Grid at1 = flow::interpolate(z0, eps, 1.0);
    for (size_t i = 0; i < z0.v.size(); ++i) {
        CHECK(at0.v[i] == z0.v[i]);
        CHECK(at1.v[i] == eps.v[i]);
    }
    // affine in t: midpoint equals average of quarter points
    Grid a = flow::interpolate(z0, eps, 0.25);
    Grid b = flow::interpolate(z0, eps, 0.75);
    Grid mid = flow::interpolate(z0, eps, 0.5);
    for (size_t i = 0; i < z0.v.size(); ++i)
        CHECK(mid.v[i] == doctest::Approx(0.5 * (a.v[i] + b.v[i])).epsilon(1e-12));

    Grid two = const_grid(2, 2, 1, 2.0), zero = const_grid(2, 2, 1, 0.0);
    CHECK(flow::interpolate(two, zero, 0.25).v[0] == doctest::Approx(1.5));
}

TEST_CASE("velocity target and its relation to the path derivative") {
    Rng rng(2);
    Grid z0 = random_grid(2, 3, 2, rng);
    Grid eps = random_grid(2, 3, 2, rng);
    SUBCASE("identity case") {
        Grid v = flow::velocity_target(z0, z0);
        for (double x : v.v) CHECK(x == 0.0);
    }
    SUBCASE("arithmetic") {
        Grid a = const_grid(1, 2, 1, 1.0), b = const_grid(1, 2, 1, -1.0);
        CHECK(flow::velocity_target(a, b).v[0] == doctest::Approx(2.0));
    }
    SUBCASE("d/dt interpolate = -velocity_target") {
        Grid v = flow::velocity_target(z0, eps);
        for (int idx : {0, 3, 7}) {
            auto f = [&](double t) { return flow::interpolate(z0, eps, t).v[idx]; };
            double fd = oracles::central_diff(f, 0.5, 1e-6);
            CHECK(fd == doctest::Approx(-v.v[idx]).epsilon(1e-6));
        }
    }
}

TEST_CASE("diffusion loss values and gradient") {
    Rng rng(3);
    Grid a = random_grid(2, 2, 3, rng);
    CHECK(flow::diffusion_loss(a, a) == 0.0);
    Grid b = a;
    for (auto& v : b.v) v += 2.0;
    CHECK(flow::diffusion_loss(b, a) == doctest::Approx(4.0));

    Grid pred = random_grid(2, 2, 3, rng);
    Grid target = random_grid(2, 2, 3, rng);
    Grid g = flow::diffusion_loss_grad(pred, target);
    for (int trial = 0; trial < 25; ++trial) {
        size_t i = (size_t)rng.uniform_int(0, (int64_t)pred.v.size() - 1);
        auto f = [&](double x) {
            Grid p = pred;
            p.v[i] = x;
            return flow::diffusion_loss(p, target);
        };
        double fd = oracles::central_diff(f, pred.v[i], 1e-6);
        CHECK(std::abs(fd - g.v[i]) / std::max(std::abs(fd), 1e-10) < 1e-6);
    }
    CHECK_THROWS(flow::diffusion_loss(Grid(1, 2, 1), Grid(2, 1, 1)));
}

TEST_CASE("euler recovery along the linear path") {
    Rng rng(4);
    Grid z0 = random_grid(3, 2, 2, rng);
    Grid eps = random_grid(3, 2, 2, rng);
    Grid v = flow::velocity_target(z0, eps);
    SUBCASE("zero velocity leaves state unchanged") {
        Grid x = flow::ode_step(const_grid(3, 2, 2, 0.0), eps, 0.25);
        for (size_t i = 0; i < x.v.size(); ++i) CHECK(x.v[i] == eps.v[i]);
    }
    for (int T : {1, 4, 16}) {
        Grid x = eps;
        for (int s = 0; s < T; ++s) x = flow::ode_step(v, x, 1.0 / T);
        for (size_t i = 0; i < x.v.size(); ++i) CHECK(x.v[i] == doctest::Approx(z0.v[i]).epsilon(1e-6));
    }
}

TEST_CASE("sde step distributional contracts") {
    SUBCASE("deterministic given the rng seed") {
        Rng r1(7), r2(7);
        Grid x(2, 2, 1), v(2, 2, 1);
        x.fill(0.3);
        v.fill(-0.2);
        auto t1 = flow::sde_step(v, x, 0.5, 0.25, 1.0, r1);
        auto t2 = flow::sde_step(v, x, 0.5, 0.25, 1.0, r2);
        CHECK(t1.log_prob == t2.log_prob);
        for (size_t i = 0; i < t1.next_state.v.size(); ++i)
            CHECK(t1.next_state.v[i] == t2.next_state.v[i]);
    }
    SUBCASE("scalar case: mean, std and log-density by hand") {
        // x=0, v=0, a=1, dt=0.25, t=0.5 -> mean 0, std 0.5
        Grid x(1, 1, 1), v(1, 1, 1);
        Rng rng(9);
        auto tr = flow::sde_step(v, x, 0.5, 0.25, 1.0, rng);
        CHECK(tr.std == doctest::Approx(0.5));
        CHECK(tr.mean.v[0] == doctest::Approx(0.0));
        double lp_mode = flow::gaussian_log_prob(tr.mean, tr.mean, tr.std);
        CHECK(lp_mode == doctest::Approx(-std::log(0.5 * std::sqrt(2 * M_PI))));
        // the sampled state can never beat the mode
        CHECK(tr.log_prob <= lp_mode);
    }
    SUBCASE("log-density integrates to 1 on a 1D slice") {
        Grid mean(1, 1, 1);
        mean.v[0] = 0.37;
        double std = 0.42;
        auto density = [&](double x) {
            Grid s(1, 1, 1);
            s.v[0] = x;
            return std::exp(flow::gaussian_log_prob(s, mean, std));
        };
        double mass = oracles::quadrature(density, mean.v[0] - 8 * std, mean.v[0] + 8 * std, 4000);
        CHECK(mass == doctest::Approx(1.0).epsilon(1e-4));
    }
    SUBCASE("a=0 and t=0 rejected") {
        Grid x(1, 1, 1), v(1, 1, 1);
        Rng rng(3);
        CHECK_THROWS(flow::sde_step(v, x, 0.5, 0.25, 0.0, rng));
        CHECK_THROWS(flow::sde_step(v, x, 0.0, 0.25, 1.0, rng));
    }
}

TEST_CASE("mixed sampling window mechanics") {
    ModelConfig cfg;
    cfg.grid_h = cfg.grid_w = 4;
    cfg.channels = 12;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.k_double = 1;
    cfg.k_single = 1;
    cfg.ref_h = cfg.ref_w = 2;
    Model model = build_model(cfg, 5);
    synth::GeneratorConfig gen;
    gen.canvas = 8, gen.ref_canvas = 4;
    gen.scale_min = 1.2, gen.scale_max = 1.6, gen.ref_scale = 1.5;
    auto pool = synth::make_identity_pool(11, 2, gen);
    Rng srng(13);
    auto scene = synth::make_scene(1, pool, synth::LayoutRule::kRow, srng, gen);
    // patch = 2 on an 8px canvas -> 4x4 grid with 12 channels
    flow::SampleSchedule schedule(16, 0.7);

    SUBCASE("pure ODE is deterministic and records nothing") {
        Grid noise(4, 4, 12);
        Rng nre(21);
        for (auto& v : noise.v) v = nre.gaussian();
        Rng r1(1), r2(2);  // different rng streams must not matter without a window
        auto tr1 = flow::mixed_sample(model, scene, schedule, std::nullopt, r1, nullptr, &noise);
        auto tr2 = flow::mixed_sample(model, scene, schedule, std::nullopt, r2, nullptr, &noise);
        CHECK(tr1.transitions.empty());
        for (size_t i = 0; i < tr1.final_state().v.size(); ++i)
            CHECK(tr1.final_state().v[i] == tr2.final_state().v[i]);
    }
    SUBCASE("window membership decides the transition count and divergence point") {
        Grid noise(4, 4, 12);
        Rng nre(22);
        for (auto& v : noise.v) v = nre.gaussian();
        flow::WindowState window{3, 2};
        Rng r1(100), r2(200);
        auto tr1 = flow::mixed_sample(model, scene, schedule, window, r1, nullptr, &noise);
        auto tr2 = flow::mixed_sample(model, scene, schedule, window, r2, nullptr, &noise);
        CHECK(tr1.transitions.size() == 2);
        CHECK(tr1.transitions[0].step_index == 3);
        CHECK(tr1.transitions[1].step_index == 4);
        // identical through state 3 (pre-window), different afterwards
        for (int s = 0; s <= 3; ++s)
            for (size_t i = 0; i < noise.v.size(); ++i)
                CHECK(tr1.states[s].v[i] == tr2.states[s].v[i]);
        double diff = 0;
        for (size_t i = 0; i < noise.v.size(); ++i)
            diff += std::abs(tr1.states[4].v[i] - tr2.states[4].v[i]);
        CHECK(diff > 0);
    }
}
