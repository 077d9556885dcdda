#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "msdiff/checkpoint.hpp"
#include "msdiff/config.hpp"

using namespace msdiff;
namespace fs = std::filesystem;

TEST_CASE("config parsing and validation") {
    SUBCASE("empty config parses to defaults") {
        auto cfg = config::parse_config("{}");
        CHECK(cfg.model.channels == 192);  // 64px canvas / 8 grid -> patch 8
        CHECK(cfg.patch() == 8);
        CHECK(cfg.stage == "multi");
    }
    SUBCASE("unknown keys are rejected with their path") {
        CHECK_THROWS_WITH_AS(config::parse_config(R"({"train": {"lambdaa": 0.3}})"),
                             doctest::Contains("train.lambdaa"), config::ConfigError);
        CHECK_THROWS_AS(config::parse_config(R"({"tau": 50})"), config::ConfigError);
    }
    SUBCASE("stage must be known") {
        CHECK_THROWS_AS(config::parse_config(R"({"stage": "warmup"})"), config::ConfigError);
    }
    SUBCASE("negative lambda rejected") {
        CHECK_THROWS_AS(config::parse_config(R"({"train": {"lambda": -0.1}})"), config::ConfigError);
    }
    SUBCASE("geometry consistency enforced") {
        CHECK_THROWS_AS(config::parse_config(R"({"data": {"canvas": 60}})"), config::ConfigError);
        CHECK_THROWS_AS(config::parse_config(R"({"data": {"ref_canvas": 16}})"), config::ConfigError);
    }
    SUBCASE("overrides take precedence and echo canonically") {
        std::string text = config::apply_overrides("{}", {"train.lambda=0.25", "rl.group_size=4"});
        auto cfg = config::parse_config(text);
        CHECK(cfg.train_cfg.lambda == 0.25);
        CHECK(cfg.rl.group_size == 4);
        auto echo = config::dump_config(cfg);
        auto cfg2 = config::parse_config(echo);
        CHECK(config::dump_config(cfg2) == echo);
        CHECK(config::config_hash(echo) == config::config_hash(config::dump_config(cfg)));
        CHECK(config::config_hash(echo) != config::config_hash(config::dump_config(config::default_config())));
    }
    SUBCASE("bad override shapes") {
        CHECK_THROWS_AS(config::apply_overrides("{}", {"no_equals"}), config::ConfigError);
    }
}

TEST_CASE("checkpoint round trip") {
    ModelConfig mc;
    mc.grid_h = mc.grid_w = 4;
    mc.channels = 12;
    mc.d_model = 32;
    mc.n_heads = 4;
    mc.k_double = 1;
    mc.k_single = 1;
    mc.ref_h = mc.ref_w = 2;
    Model m = build_model(mc, 77);
    AdapterPlacement pl;
    pl.rank = 2;
    pl.alpha = 2;
    pl.n_experts = 2;
    pl.top_k = 1;
    AdapterSet ad = attach_adapters(m, pl);
    Rng rng(5);
    for (auto& v : param_views(ad))
        for (auto& x : *v.data) x = rng.gaussian();

    fs::path p = fs::temp_directory_path() / "msdiff_ck_test.ckpt";
    save_checkpoint(p.string(), m, &ad, &pl, "multi", 123);
    LoadedCheckpoint ck = load_checkpoint(p.string());
    CHECK(ck.stage == "multi");
    CHECK(ck.step == 123);
    REQUIRE(ck.adapters.has_value());

    auto va = param_views(m), vb = param_views(ck.model);
    REQUIRE(va.size() == vb.size());
    for (size_t i = 0; i < va.size(); ++i)
        for (size_t j = 0; j < va[i].data->size(); ++j)
            CHECK((*va[i].data)[j] == (*vb[i].data)[j]);
    auto aa = param_views(ad), ab = param_views(*ck.adapters);
    REQUIRE(aa.size() == ab.size());
    for (size_t i = 0; i < aa.size(); ++i)
        for (size_t j = 0; j < aa[i].data->size(); ++j)
            CHECK((*aa[i].data)[j] == (*ab[i].data)[j]);

    SUBCASE("corrupt magic is rejected") {
        fs::path bad = fs::temp_directory_path() / "msdiff_ck_bad.ckpt";
        std::ofstream f(bad, std::ios::binary);
        f << "NOTACKPT__garbage";
        f.close();
        CHECK_THROWS(load_checkpoint(bad.string()));
        fs::remove(bad);
    }
    fs::remove(p);
}
