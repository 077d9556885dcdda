#include "doctest.h"

#include <cmath>

#include "msdiff/ippo.hpp"
#include "oracles.hpp"

using namespace msdiff;
using namespace msdiff::ippo;

static RLConfig paper_rl() {
    RLConfig cfg;
    cfg.total_steps = 16;
    cfg.window_size = 2;
    cfg.shift_interval = 50;
    cfg.window_stride = 1;
    return cfg;
}

TEST_CASE("window position closed form") {
    RLConfig cfg = paper_rl();
    CHECK(window_position(1, cfg) == 0);
    CHECK(window_position(50, cfg) == 0);
    CHECK(window_position(51, cfg) == 1);
    CHECK(window_position(10000, cfg) == 14);  // capped at T - w
    CHECK_THROWS(window_position(0, cfg));

    SUBCASE("matches the literal shift-rule simulation") {
        for (int64_t m = 1; m <= 10 * cfg.shift_interval * cfg.total_steps; m += 7)
            CHECK(window_position(m, cfg) ==
                  oracles::simulate_window(m, cfg.total_steps, cfg.window_size, cfg.shift_interval,
                                           cfg.window_stride));
    }
    SUBCASE("other strides and intervals") {
        RLConfig c2 = cfg;
        c2.window_stride = 3;
        c2.shift_interval = 7;
        c2.window_size = 4;
        for (int64_t m = 1; m <= 500; ++m)
            CHECK(window_position(m, c2) ==
                  oracles::simulate_window(m, c2.total_steps, c2.window_size, c2.shift_interval,
                                           c2.window_stride));
    }
}

TEST_CASE("advantage normalization") {
    SUBCASE("hand value for {1,2,3} with population std") {
        auto a = advantages({1, 2, 3});
        REQUIRE(a.size() == 3);
        CHECK(a[0] == doctest::Approx(-1.2247).epsilon(1e-4));
        CHECK(a[1] == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(a[2] == doctest::Approx(1.2247).epsilon(1e-4));
    }
    SUBCASE("equal rewards skip the group") {
        CHECK(advantages({0.7, 0.7, 0.7, 0.7}).empty());
    }
    SUBCASE("mean 0 and population std 1 for any non-degenerate input") {
        Rng rng(5);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<double> r(4 + trial % 5);
            for (auto& v : r) v = rng.uniform(0, 3);
            auto a = advantages(r);
            if (a.empty()) continue;
            double mean = 0, var = 0;
            for (double v : a) mean += v;
            mean /= a.size();
            for (double v : a) var += (v - mean) * (v - mean);
            var /= a.size();
            CHECK(std::abs(mean) < 1e-9);
            CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-9);
        }
    }
    CHECK_THROWS(advantages({1.0}));
}

TEST_CASE("gspo ratio") {
    CHECK(gspo_ratio({-3.1, 0.2}, {-3.1, 0.2}) == 1.0);
    CHECK(gspo_ratio({0.2, -0.1}, {0.0, 0.0}) == doctest::Approx(std::exp(0.05)).epsilon(1e-9));
    CHECK(gspo_ratio({-0.2, -0.2}, {0.0, 0.0}) == doctest::Approx(std::exp(-0.2)).epsilon(1e-9));
    CHECK_THROWS(gspo_ratio({0.1}, {0.1, 0.2}));
}

TEST_CASE("gspo objective and clipping") {
    SUBCASE("hand values") {
        CHECK(gspo_objective({1.2}, {1.0}, 0.1) == doctest::Approx(1.1));
        CHECK(gspo_objective({0.8}, {-1.0}, 0.1) == doctest::Approx(-0.9));
    }
    SUBCASE("identity ratios collapse to the advantage mean") {
        auto a = advantages({0.3, 0.9, 1.8, 0.1});
        std::vector<double> ones(a.size(), 1.0);
        CHECK(gspo_objective(ones, a, 0.05) == doctest::Approx(0.0).epsilon(1e-9));
    }
    SUBCASE("gradient matches finite differences in the unclipped regime") {
        Rng rng(9);
        const int N = 4, W = 3;
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<std::vector<double>> lp_new(N, std::vector<double>(W)), lp_old = lp_new;
            std::vector<double> adv(N);
            for (int i = 0; i < N; ++i) {
                adv[i] = rng.gaussian();
                for (int t = 0; t < W; ++t) {
                    lp_old[i][t] = rng.gaussian();
                    lp_new[i][t] = lp_old[i][t] + 0.01 * rng.gaussian();  // near ratio 1
                }
            }
            auto ratios_of = [&](const std::vector<std::vector<double>>& lp) {
                std::vector<double> r(N);
                for (int i = 0; i < N; ++i) r[i] = gspo_ratio(lp[i], lp_old[i]);
                return r;
            };
            const double beta = 0.5;  // wide clip: stay unclipped
            auto g = gspo_objective_grad(ratios_of(lp_new), adv, beta, W);
            int i = (int)rng.uniform_int(0, N - 1), t = (int)rng.uniform_int(0, W - 1);
            auto f = [&](double x) {
                auto lp = lp_new;
                lp[i][t] = x;
                return gspo_objective(ratios_of(lp), adv, beta);
            };
            double fd = oracles::central_diff(f, lp_new[i][t], 1e-6);
            double rel = std::abs(fd - g[i][t]) / std::max({std::abs(fd), std::abs(g[i][t]), 1e-10});
            CHECK(rel < 1e-5);
        }
    }
    SUBCASE("saturated clip zeroes the gradient") {
        auto g = gspo_objective_grad({1.5}, {1.0}, 0.1, 2);
        CHECK(g[0][0] == 0.0);
        // but a ratio below 1-beta with positive advantage keeps the raw branch
        auto g2 = gspo_objective_grad({0.5}, {1.0}, 0.1, 2);
        CHECK(g2[0][0] != 0.0);
    }
}

static RolloutEnv tiny_env() {
    RolloutEnv env;
    env.gen.canvas = 16;
    env.gen.ref_canvas = 8;
    env.gen.scale_min = 2.5;
    env.gen.scale_max = 3.0;
    env.gen.ref_scale = 2.8;
    env.patch = 4;
    env.providers.text = [](const Grid&, const synth::SceneSpec&) { return 0.5; };
    env.providers.aes = [](const Grid& g, const synth::SceneSpec&) {
        double m = 0;
        for (double v : g.v) m += v;
        return std::clamp(m / g.v.size(), 0.0, 1.0);
    };
    env.providers.detector.min_area = 8;
    return env;
}

static ModelConfig tiny_rl_model() {
    ModelConfig cfg;
    cfg.grid_h = cfg.grid_w = 4;
    cfg.channels = 48;  // patch 4, rgb
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.k_double = 1;
    cfg.k_single = 1;
    cfg.ref_h = cfg.ref_w = 2;
    cfg.max_subjects = 2;
    return cfg;
}

TEST_CASE("rollout group structure") {
    ModelConfig mc = tiny_rl_model();
    Model model = build_model(mc, 3);
    RolloutEnv env = tiny_env();
    RLConfig cfg = paper_rl();
    cfg.group_size = 4;
    cfg.total_steps = 8;
    auto pool = synth::make_identity_pool(7, 4, env.gen);
    Rng rng(11);
    auto scene = synth::make_scene(1, pool, synth::LayoutRule::kRow, rng, env.gen);

    SUBCASE("transition counts and shared prefix") {
        flow::WindowState window{3, 2};
        Rng gr(21);
        auto group = rollout_group(model, nullptr, scene, cfg, window, env, gr);
        CHECK(group.trajectories.size() == 4);
        int total_transitions = 0;
        for (const auto& t : group.trajectories) total_transitions += (int)t.transitions.size();
        CHECK(total_transitions == 8);  // N=4 x w=2
        // all members agree bitwise through the pre-window states
        for (int s = 0; s <= 3; ++s)
            for (size_t i = 0; i < group.trajectories[0].states[s].v.size(); ++i)
                for (int k = 1; k < 4; ++k)
                    CHECK(group.trajectories[0].states[s].v[i] == group.trajectories[k].states[s].v[i]);
        // they diverge after the first window step
        double diff = 0;
        for (size_t i = 0; i < group.trajectories[0].states[4].v.size(); ++i)
            diff += std::abs(group.trajectories[0].states[4].v[i] - group.trajectories[1].states[4].v[i]);
        CHECK(diff > 0);
    }
    SUBCASE("window at the first step diverges immediately") {
        flow::WindowState window{0, 2};
        Rng gr(22);
        auto group = rollout_group(model, nullptr, scene, cfg, window, env, gr);
        double diff = 0;
        for (size_t i = 0; i < group.trajectories[0].states[1].v.size(); ++i)
            diff += std::abs(group.trajectories[0].states[1].v[i] - group.trajectories[1].states[1].v[i]);
        CHECK(diff > 0);
        // shared initial noise regardless
        for (size_t i = 0; i < group.initial_noise.v.size(); ++i)
            CHECK(group.trajectories[0].states[0].v[i] == group.trajectories[1].states[0].v[i]);
    }
}

TEST_CASE("ippo smoke: ratios start at 1 and a monotone reward improves") {
    ModelConfig mc = tiny_rl_model();
    Model model = build_model(mc, 5);
    RolloutEnv env = tiny_env();
    // toy reward: mean canvas intensity (through the aes provider only)
    RLConfig cfg;
    cfg.total_steps = 8;
    cfg.window_size = 2;
    cfg.shift_interval = 10;
    cfg.window_stride = 1;
    cfg.group_size = 6;
    cfg.noise_scale = 0.7;
    cfg.lr = 2e-3;
    cfg.n_subjects = 1;
    cfg.weights.w_text = 0.0;
    cfg.weights.w_aes = 1.0;
    cfg.weights.w_id = 0.0;

    AdapterPlacement pl;
    pl.rank = 4;
    pl.alpha = 4;
    pl.n_experts = 2;
    pl.top_k = 1;
    AdapterSet adapters = attach_adapters(model, pl);

    IppoOptions opts;
    opts.pool_size = 4;
    opts.pool_seed = 7;
    Rng rng(13);
    IppoResult res = ippo_train(model, adapters, cfg, env, 50, rng, opts);
    REQUIRE((int)res.metrics.size() == 50);

    // snapshot semantics: before any update the policy equals the old policy
    CHECK(res.metrics[0].ratio_min == 1.0);
    CHECK(res.metrics[0].ratio_max == 1.0);
    CHECK(std::abs(res.metrics[0].objective) < 1e-9);

    double first = 0, last = 0;
    for (int i = 0; i < 10; ++i) {
        first += res.metrics[i].reward_mean / 10;
        last += res.metrics[40 + i].reward_mean / 10;
    }
    CHECK(last > first);  // the toy reward goes up
    for (const auto& im : res.metrics) CHECK(!im.nonfinite);
}
