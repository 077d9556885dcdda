#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "msdiff/image.hpp"
#include "msdiff/synth_embed.hpp"
#include "msdiff/synthdata.hpp"

using namespace msdiff;
using namespace msdiff::synth;
namespace fs = std::filesystem;

TEST_CASE("scene generation determinism and contracts") {
    GeneratorConfig gen;
    auto pool = make_identity_pool(3, 8, gen);

    SUBCASE("same rng state, same scene") {
        Rng r1(9), r2(9);
        auto s1 = make_scene(2, pool, LayoutRule::kRow, r1, gen);
        auto s2 = make_scene(2, pool, LayoutRule::kRow, r2, gen);
        CHECK(scene_to_json(s1) == scene_to_json(s2));
    }
    SUBCASE("single-subject scenes for the pretraining stage") {
        Rng rng(4);
        auto s = make_scene(1, pool, LayoutRule::kRow, rng, gen);
        CHECK(s.subjects.size() == 1);
        CHECK(s.prompt_tokens[0] == kTokenCountBase);  // count = 1
    }
    SUBCASE("distinct identities and disjoint masks") {
        Rng rng(5);
        for (int trial = 0; trial < 8; ++trial) {
            auto s = make_scene(2, pool, LayoutRule::kRow, rng, gen);
            CHECK(s.subjects[0].identity.identity_id != s.subjects[1].identity.identity_id);
            auto r = render_scene(s);
            double overlap = 0;
            for (size_t p = 0; p < r.pixel_masks[0].v.size(); ++p)
                overlap += r.pixel_masks[0].v[p] * r.pixel_masks[1].v[p];
            CHECK(overlap == 0.0);
        }
    }
    SUBCASE("capacity and pool preconditions") {
        Rng rng(6);
        CHECK_THROWS(make_scene(3, pool, LayoutRule::kRow, rng, gen));  // max_subjects = 2
        std::vector<IdentitySpec> tiny(pool.begin(), pool.begin() + 1);
        CHECK_THROWS(make_scene(2, tiny, LayoutRule::kRow, rng, gen));
        CHECK_THROWS(make_scene(0, pool, LayoutRule::kRow, rng, gen));
    }
}

TEST_CASE("rendering purity and mask alignment") {
    GeneratorConfig gen;
    auto pool = make_identity_pool(13, 4, gen);
    Rng rng(14);
    auto scene = make_scene(2, pool, LayoutRule::kRow, rng, gen);
    auto r1 = render_scene(scene);
    auto r2 = render_scene(scene);
    SUBCASE("bit-identical re-render") {
        for (size_t i = 0; i < r1.target.v.size(); ++i) CHECK(r1.target.v[i] == r2.target.v[i]);
        for (size_t i = 0; i < r1.references[0].v.size(); ++i)
            CHECK(r1.references[0].v[i] == r2.references[0].v[i]);
    }
    SUBCASE("mask pixels are exactly the non-background glyph pixels") {
        // each masked pixel differs from background; each unmasked pixel of
        // the union complement is background
        for (int i = 0; i < 2; ++i) {
            int mask_count = 0;
            for (int y = 0; y < r1.target.h; ++y)
                for (int x = 0; x < r1.target.w; ++x) {
                    if (r1.pixel_masks[i].at(y, x, 0) > 0) {
                        ++mask_count;
                        bool off_bg = false;
                        for (int c = 0; c < 3; ++c)
                            if (r1.target.at(y, x, c) != gen.background) off_bg = true;
                        CHECK(off_bg);
                    }
                }
            CHECK(mask_count > 0);
        }
    }
    SUBCASE("references re-embed close to the subject's target crop") {
        DetectorConfig det;
        auto dets = detect_components(r1.target, det);
        REQUIRE(dets.size() == 2);
        for (int i = 0; i < 2; ++i) {
            DetectorConfig ref_det;
            ref_det.min_area = 64;
            auto ref_comps = detect_components(r1.references[i], ref_det);
            REQUIRE(ref_comps.size() == 1);
            auto ref_emb = embed_component(r1.references[i], ref_comps[0]);
            auto tgt_emb = embed_component(r1.target, dets[i]);
            CHECK(cosine(ref_emb, tgt_emb) >= 0.9);
        }
    }
}

TEST_CASE("prompt encoding round-trips the constraint set") {
    GeneratorConfig gen;
    auto pool = make_identity_pool(23, 6, gen);
    Rng rng(24);
    auto scene = make_scene(2, pool, LayoutRule::kRow, rng, gen);

    SUBCASE("decode recovers count and left-to-right identities") {
        auto pc = decode_prompt(scene.prompt_tokens);
        CHECK(pc.count == 2);
        REQUIRE(pc.identity_tokens.size() == 2);
        CHECK(pc.identity_tokens[0] ==
              identity_token(scene.subjects[0].identity.identity_id, gen.vocab_size));
        CHECK(pc.identity_tokens[1] ==
              identity_token(scene.subjects[1].identity.identity_id, gen.vocab_size));
        CHECK((int)scene.prompt_tokens.size() == gen.max_subjects + 2);
    }
    SUBCASE("swapping placements swaps the order tokens") {
        SceneSpec swapped = scene;
        std::swap(swapped.subjects[0].placement, swapped.subjects[1].placement);
        std::sort(swapped.subjects.begin(), swapped.subjects.end(),
                  [](const Subject& a, const Subject& b) { return a.placement.cx < b.placement.cx; });
        swapped.prompt_tokens = encode_prompt(swapped);
        auto pa = decode_prompt(scene.prompt_tokens);
        auto pb = decode_prompt(swapped.prompt_tokens);
        CHECK(pa.identity_tokens[0] == pb.identity_tokens[1]);
        CHECK(pa.identity_tokens[1] == pb.identity_tokens[0]);
    }
    SUBCASE("empty scenes are not encodable") {
        SceneSpec empty;
        empty.gen = gen;
        CHECK_THROWS(encode_prompt(empty));
    }
}

TEST_CASE("scene json round trip") {
    GeneratorConfig gen;
    auto pool = make_identity_pool(33, 4, gen);
    Rng rng(34);
    auto scene = make_scene(2, pool, LayoutRule::kRow, rng, gen);
    auto back = scene_from_json(scene_to_json(scene));
    CHECK(scene_to_json(back) == scene_to_json(scene));
    auto r1 = render_scene(scene), r2 = render_scene(back);
    for (size_t i = 0; i < r1.target.v.size(); ++i) CHECK(r1.target.v[i] == r2.target.v[i]);
}

TEST_CASE("dataset writing is byte-deterministic") {
    GeneratorConfig gen;
    auto pool = make_identity_pool(43, 4, gen);
    auto make_scenes = [&] {
        Rng rng(44);
        std::vector<SceneSpec> scenes;
        for (int i = 0; i < 3; ++i) scenes.push_back(make_scene(2, pool, LayoutRule::kRow, rng, gen));
        return scenes;
    };
    fs::path d1 = fs::temp_directory_path() / "msdiff_ds1";
    fs::path d2 = fs::temp_directory_path() / "msdiff_ds2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    write_dataset(d1.string(), make_scenes());
    write_dataset(d2.string(), make_scenes());
    int compared = 0;
    for (auto& e : fs::recursive_directory_iterator(d1)) {
        if (!e.is_regular_file()) continue;
        fs::path rel = fs::relative(e.path(), d1);
        std::ifstream f1(e.path(), std::ios::binary), f2(d2 / rel, std::ios::binary);
        REQUIRE(f2.good());
        std::stringstream s1, s2;
        s1 << f1.rdbuf();
        s2 << f2.rdbuf();
        CHECK(s1.str() == s2.str());
        ++compared;
    }
    CHECK(compared >= 3 * 6 + 1);  // per scene: target + 2 refs + 2 masks + json, plus manifest
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("image io round trip") {
    Grid img(8, 8, 3);
    Rng rng(3);
    for (auto& v : img.v) v = rng.uniform();
    fs::path p = fs::temp_directory_path() / "msdiff_io_test.ppm";
    write_ppm(p.string(), img);
    Grid back = read_ppm(p.string());
    REQUIRE(back.h == 8);
    for (size_t i = 0; i < img.v.size(); ++i) CHECK(std::abs(back.v[i] - img.v[i]) <= 0.5 / 255 + 1e-9);
    fs::remove(p);

    Grid patched = patchify(img, 4);
    CHECK(patched.h == 2);
    CHECK(patched.c == 48);
    Grid restored = unpatchify(patched, 4, 3);
    for (size_t i = 0; i < img.v.size(); ++i) CHECK(restored.v[i] == img.v[i]);
}
