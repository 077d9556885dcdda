#include "doctest.h"

#include <cmath>

#include "msdiff/adapters.hpp"
#include "msdiff/model.hpp"
#include "msdiff/rng.hpp"

using namespace msdiff;

static ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.grid_h = cfg.grid_w = 4;
    cfg.channels = 8;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.k_double = 1;
    cfg.k_single = 1;
    cfg.ref_h = cfg.ref_w = 2;
    cfg.max_subjects = 2;
    cfg.vocab_size = 32;
    return cfg;
}

static TokenBatch tiny_batch(const ModelConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    Grid z(cfg.grid_h, cfg.grid_w, cfg.channels);
    for (auto& v : z.v) v = rng.gaussian();
    std::vector<Grid> refs(2, Grid(cfg.ref_h, cfg.ref_w, cfg.channels));
    for (auto& r : refs)
        for (auto& v : r.v) v = rng.gaussian();
    return assemble_tokens({1, 17}, z, refs, cfg);
}

TEST_CASE("gate routing") {
    Mat gate(4, 4);
    // logits equal to h with this identity-ish gate
    for (int i = 0; i < 4; ++i) gate.at(i, i) = 1.0;
    SUBCASE("k=1 softmax of a singleton") {
        double h[4] = {2.0, 1.0, 0.5, -1.0};
        auto p = gate_route(gate, h, 1);
        CHECK(p[0] == 1.0);
        CHECK(p[1] == 0.0);
        CHECK(p[2] == 0.0);
        CHECK(p[3] == 0.0);
    }
    SUBCASE("k=2 softmax over the two kept logits") {
        double h[4] = {2.0, 1.0, 0.5, -1.0};
        auto p = gate_route(gate, h, 2);
        CHECK(p[0] == doctest::Approx(0.7311).epsilon(1e-3));
        CHECK(p[1] == doctest::Approx(0.2689).epsilon(1e-3));
        CHECK(p[2] == 0.0);
        CHECK(p[3] == 0.0);
        CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("ties resolve to the lowest index") {
        double h[4] = {1.0, 1.0, 0.0, 0.0};
        auto p = gate_route(gate, h, 1);
        CHECK(p[0] == 1.0);
        CHECK(p[1] == 0.0);
    }
    SUBCASE("k out of range") {
        double h[4] = {0, 0, 0, 0};
        CHECK_THROWS(gate_route(gate, h, 5));
    }
    SUBCASE("sparsity and normalization over random inputs") {
        Rng rng(5);
        Mat g(4, 8);
        for (auto& v : g.v) v = rng.gaussian();
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<double> h(8);
            for (auto& v : h) v = rng.gaussian();
            int k = 1 + (int)(trial % 3);
            auto p = gate_route(g, h.data(), k);
            int nonzero = 0;
            double sum = 0;
            for (double v : p) {
                if (v != 0.0) ++nonzero;
                sum += v;
            }
            CHECK(nonzero == k);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("moe lora forward formula") {
    SUBCASE("zero-initialized bank is the identity on the FFN output") {
        ExpertBank bank;
        bank.n_experts = 2;
        bank.top_k = 1;
        bank.rank = 2;
        bank.alpha = 2.0;
        bank.gate = Mat(2, 3);
        bank.gate.at(0, 0) = 0.3;
        bank.a.assign(2, Mat(2, 3));
        bank.b.assign(2, Mat(3, 2));
        Rng rng(3);
        for (auto& m : bank.a)
            for (auto& v : m.v) v = rng.gaussian();
        std::vector<double> ffn = {0.5, -1.25, 3.0}, h = {1.0, 2.0, 3.0};
        auto out = moe_lora_forward(ffn, bank, h);
        for (size_t i = 0; i < ffn.size(); ++i) CHECK(out[i] == ffn[i]);
    }
    SUBCASE("scalar hand value: FFN 1 + 0.5 adapter delta") {
        ExpertBank bank;
        bank.n_experts = 1;
        bank.top_k = 1;
        bank.rank = 1;
        bank.alpha = 1.0;  // alpha/r = 1
        bank.gate = Mat(1, 1);
        bank.gate.at(0, 0) = 1.0;
        bank.a.assign(1, Mat(1, 1));
        bank.b.assign(1, Mat(1, 1));
        bank.a[0].at(0, 0) = 0.5;
        bank.b[0].at(0, 0) = 1.0;
        auto out = moe_lora_forward({1.0}, bank, {1.0});  // B A h = 0.5
        CHECK(out[0] == doctest::Approx(1.5));
    }
    SUBCASE("masked experts contribute nothing") {
        ExpertBank bank;
        bank.n_experts = 2;
        bank.top_k = 1;
        bank.rank = 1;
        bank.alpha = 1.0;
        bank.gate = Mat(2, 1);
        bank.gate.at(0, 0) = 5.0;   // expert 0 always wins
        bank.gate.at(1, 0) = -5.0;
        bank.a.assign(2, Mat(1, 1));
        bank.b.assign(2, Mat(1, 1));
        bank.a[1].at(0, 0) = 100.0;  // would dominate if routed
        bank.b[1].at(0, 0) = 100.0;
        auto out = moe_lora_forward({1.0}, bank, {1.0});
        CHECK(out[0] == 1.0);
    }
}

TEST_CASE("adapter attachment") {
    ModelConfig cfg = tiny_config();
    Model m = build_model(cfg, 7);
    AdapterPlacement pl;
    pl.rank = 4;
    pl.alpha = 4.0;
    pl.n_experts = 4;
    pl.top_k = 1;
    pl.seed = 2;

    SUBCASE("zero-init adapted forward equals base forward bitwise") {
        AdapterSet set = attach_adapters(m, pl);
        TokenBatch batch = tiny_batch(cfg, 21);
        auto base = forward(m, batch, 0.7, false);
        auto adapted = forward(m, batch, 0.7, false, &set);
        for (size_t i = 0; i < base.velocity.v.size(); ++i)
            CHECK(base.velocity.v[i] == adapted.velocity.v[i]);
    }
    SUBCASE("trainable parameter count matches the closed form") {
        AdapterSet set = attach_adapters(m, pl);
        // per block: 4 attention loras (2*r*d each) + 1 moe site
        // (gate n_e*d + n_e*(2*r*d))
        const size_t d = cfg.d_model, r = pl.rank, ne = pl.n_experts;
        const size_t per_block = 4 * (2 * r * d) + ne * d + ne * 2 * r * d;
        CHECK(set.n_params() == 2 * per_block);
    }
    SUBCASE("named site subsets and typo rejection") {
        pl.sites = {"block0.ffn", "block1.attn.q"};
        AdapterSet set = attach_adapters(m, pl);
        CHECK(set.moe.size() == 1);
        CHECK(set.lora.size() == 1);
        pl.sites = {"block0.ffnn"};
        CHECK_THROWS(attach_adapters(m, pl));
        pl.sites = {"block7.ffn"};
        CHECK_THROWS(attach_adapters(m, pl));
    }
    SUBCASE("doubling alpha doubles the adapter delta exactly") {
        AdapterSet set = attach_adapters(m, pl);
        Rng rng(31);
        for (auto& s : set.lora)
            for (auto& v : s.b.v) v = 0.1 * rng.gaussian();
        for (auto& s : set.moe)
            for (auto& b : s.bank.b)
                for (auto& v : b.v) v = 0.1 * rng.gaussian();
        AdapterSet doubled = set;
        for (auto& s : doubled.lora) s.alpha *= 2;
        for (auto& s : doubled.moe) s.bank.alpha *= 2;
        TokenBatch batch = tiny_batch(cfg, 33);
        auto base = forward(m, batch, 0.4, false);
        auto one = forward(m, batch, 0.4, false, &set);
        auto two = forward(m, batch, 0.4, false, &doubled);
        for (size_t i = 0; i < base.velocity.v.size(); ++i) {
            double d1 = one.velocity.v[i] - base.velocity.v[i];
            double d2 = two.velocity.v[i] - base.velocity.v[i];
            CHECK(d2 == doctest::Approx(2 * d1).epsilon(1e-9));
        }
    }
    SUBCASE("attachment is deterministic given the seed") {
        AdapterSet s1 = attach_adapters(m, pl);
        AdapterSet s2 = attach_adapters(m, pl);
        auto v1 = param_views(s1), v2 = param_views(s2);
        REQUIRE(v1.size() == v2.size());
        for (size_t i = 0; i < v1.size(); ++i)
            for (size_t j = 0; j < v1[i].data->size(); ++j)
                CHECK((*v1[i].data)[j] == (*v2[i].data)[j]);
    }
}
