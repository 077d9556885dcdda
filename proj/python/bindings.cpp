#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "msdiff/adapters.hpp"
#include "msdiff/attention_reg.hpp"
#include "msdiff/checkpoint.hpp"
#include "msdiff/evalkit.hpp"
#include "msdiff/flow.hpp"
#include "msdiff/image.hpp"
#include "msdiff/ippo.hpp"
#include "msdiff/model.hpp"
#include "msdiff/rewards.hpp"
#include "msdiff/synthdata.hpp"

namespace py = pybind11;
using namespace msdiff;

namespace {

Grid grid_from_array(py::array_t<double, py::array::c_style | py::array::forcecast> arr) {
    if (arr.ndim() != 3) throw std::invalid_argument("expected a (h, w, c) array");
    Grid g((int)arr.shape(0), (int)arr.shape(1), (int)arr.shape(2));
    std::copy(arr.data(), arr.data() + g.v.size(), g.v.begin());
    return g;
}

py::array_t<double> array_from_grid(const Grid& g) {
    py::array_t<double> arr({g.h, g.w, g.c});
    std::copy(g.v.begin(), g.v.end(), arr.mutable_data());
    return arr;
}

Mat mat_from_array(py::array_t<double, py::array::c_style | py::array::forcecast> arr) {
    if (arr.ndim() != 2) throw std::invalid_argument("expected a 2D array");
    Mat m((int)arr.shape(0), (int)arr.shape(1));
    std::copy(arr.data(), arr.data() + m.v.size(), m.v.begin());
    return m;
}

py::array_t<double> array_from_mat(const Mat& m) {
    py::array_t<double> arr({m.rows, m.cols});
    std::copy(m.v.begin(), m.v.end(), arr.mutable_data());
    return arr;
}

}  // namespace

PYBIND11_MODULE(_msdiff, m) {
    m.doc() = "multi-subject in-context diffusion training stack";

    // --- flow ---
    m.def("interpolate", [](py::array_t<double> z0, py::array_t<double> eps, double t) {
        return array_from_grid(flow::interpolate(grid_from_array(z0), grid_from_array(eps), t));
    });
    m.def("velocity_target", [](py::array_t<double> z0, py::array_t<double> eps) {
        return array_from_grid(flow::velocity_target(grid_from_array(z0), grid_from_array(eps)));
    });
    m.def("diffusion_loss", [](py::array_t<double> pred, py::array_t<double> target) {
        return flow::diffusion_loss(grid_from_array(pred), grid_from_array(target));
    });
    m.def("ode_step", [](py::array_t<double> v, py::array_t<double> x, double dt) {
        return array_from_grid(flow::ode_step(grid_from_array(v), grid_from_array(x), dt));
    });
    m.def("sde_step",
          [](py::array_t<double> v, py::array_t<double> x, double t, double dt, double a,
             uint64_t seed) {
              Rng rng(seed);
              auto tr = flow::sde_step(grid_from_array(v), grid_from_array(x), t, dt, a, rng);
              return py::make_tuple(array_from_grid(tr.mean), tr.std,
                                    array_from_grid(tr.next_state), tr.log_prob);
          },
          py::arg("velocity"), py::arg("x"), py::arg("t"), py::arg("dt"), py::arg("a"),
          py::arg("seed") = 0);

    // --- assignment / rewards ---
    m.def("hungarian_match", [](py::array_t<double> c) {
        auto res = rewards::hungarian_match(mat_from_array(c));
        return py::make_tuple(res.pairs, res.total);
    });
    m.def("dice_loss", [](std::vector<py::array_t<double>> maps, std::vector<py::array_t<double>> masks,
                          double eps) {
        std::vector<attn::SubjectMap> sm;
        std::vector<attn::SubjectMask> sk;
        for (auto& a : maps) {
            attn::SubjectMap x;
            x.values = mat_from_array(a);
            sm.push_back(std::move(x));
        }
        for (auto& a : masks) {
            attn::SubjectMask x;
            x.values = mat_from_array(a);
            sk.push_back(std::move(x));
        }
        return attn::dice_loss(sm, sk, eps);
    }, py::arg("maps"), py::arg("masks"), py::arg("eps") = 1e-6);

    // --- moe ---
    m.def("gate_route", [](py::array_t<double> gate_w, std::vector<double> h, int k) {
        return gate_route(mat_from_array(gate_w), h.data(), k);
    });

    // --- group policy math ---
    m.def("window_position", [](int64_t iter, int T, int w, int tau, int s) {
        ippo::RLConfig cfg;
        cfg.total_steps = T;
        cfg.window_size = w;
        cfg.shift_interval = tau;
        cfg.window_stride = s;
        return ippo::window_position(iter, cfg);
    });
    m.def("advantages", &ippo::advantages);
    m.def("gspo_ratio", &ippo::gspo_ratio);
    m.def("gspo_objective", &ippo::gspo_objective);

    // --- synthetic data ---
    py::class_<synth::SceneSpec>(m, "SceneSpec")
        .def_property_readonly("prompt_tokens", [](const synth::SceneSpec& s) { return s.prompt_tokens; })
        .def_property_readonly("n_subjects", [](const synth::SceneSpec& s) { return s.subjects.size(); })
        .def("to_json", &synth::scene_to_json);
    m.def("scene_from_json", &synth::scene_from_json);
    m.def("make_scene", [](int n_subjects, uint64_t pool_seed, int pool_size, uint64_t scene_seed) {
        synth::GeneratorConfig gen;
        auto pool = synth::make_identity_pool(pool_seed, pool_size, gen);
        Rng rng(scene_seed);
        return synth::make_scene(n_subjects, pool, synth::LayoutRule::kRow, rng, gen);
    }, py::arg("n_subjects") = 2, py::arg("pool_seed") = 7, py::arg("pool_size") = 8,
       py::arg("scene_seed") = 1);
    m.def("render_scene", [](const synth::SceneSpec& scene) {
        auto r = synth::render_scene(scene);
        std::vector<py::array_t<double>> refs, masks;
        for (auto& g : r.references) refs.push_back(array_from_grid(g));
        for (auto& g : r.pixel_masks) masks.push_back(array_from_grid(g));
        return py::make_tuple(array_from_grid(r.target), refs, masks);
    });
    m.def("detect_and_embed", [](py::array_t<double> image) {
        auto dets = rewards::detect_and_embed(grid_from_array(image));
        py::list out;
        for (auto& d : dets) {
            py::dict item;
            item["box"] = py::make_tuple(d.box.x0, d.box.y0, d.box.x1, d.box.y1);
            item["area"] = d.box.area;
            item["embedding"] = d.embedding;
            out.append(item);
        }
        return out;
    });
    m.def("id_reward", [](const synth::SceneSpec& scene, py::array_t<double> image) {
        auto refs = rewards::embed_references(scene);
        auto [r, match] = rewards::id_reward(refs, grid_from_array(image));
        return py::make_tuple(r, match);
    });

    // --- model ---
    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("grid_h", &ModelConfig::grid_h)
        .def_readwrite("grid_w", &ModelConfig::grid_w)
        .def_readwrite("channels", &ModelConfig::channels)
        .def_readwrite("d_model", &ModelConfig::d_model)
        .def_readwrite("n_heads", &ModelConfig::n_heads)
        .def_readwrite("k_double", &ModelConfig::k_double)
        .def_readwrite("k_single", &ModelConfig::k_single)
        .def_readwrite("max_subjects", &ModelConfig::max_subjects)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("ref_h", &ModelConfig::ref_h)
        .def_readwrite("ref_w", &ModelConfig::ref_w);

    py::class_<Model>(m, "Model")
        .def_property_readonly("config", [](const Model& mod) { return mod.cfg; })
        .def("n_params", [](Model& mod) {
            size_t n = 0;
            for (auto& v : param_views(mod)) n += v.data->size();
            return n;
        });
    m.def("build_model", &build_model, py::arg("config"), py::arg("seed"));
    m.def("forward", [](Model& mod, const synth::SceneSpec& scene, py::array_t<double> z_t, double t,
                        bool record) {
        TokenBatch batch = assemble_tokens(scene, grid_from_array(z_t), mod.cfg);
        auto res = forward(mod, batch, t, record);
        py::list maps;
        if (res.records) {
            for (auto& per_block : res.records->maps) {
                py::list inner;
                for (auto& mat : per_block) inner.append(array_from_mat(mat));
                maps.append(inner);
            }
        }
        return py::make_tuple(array_from_grid(res.velocity), maps);
    }, py::arg("model"), py::arg("scene"), py::arg("z_t"), py::arg("t"), py::arg("record") = false);
    m.def("sample_ode", [](Model& mod, const synth::SceneSpec& scene, int steps, uint64_t seed,
                           int patch) {
        flow::SampleSchedule schedule(steps, 0.7);
        Rng rng(seed);
        auto traj = flow::mixed_sample(mod, scene, schedule, std::nullopt, rng);
        return array_from_grid(clamp01(unpatchify(traj.final_state(), patch, 3)));
    }, py::arg("model"), py::arg("scene"), py::arg("steps") = 16, py::arg("seed") = 0,
       py::arg("patch") = 8);
    m.def("load_checkpoint_info", [](const std::string& path) {
        LoadedCheckpoint ck = load_checkpoint(path);
        py::dict d;
        d["stage"] = ck.stage;
        d["step"] = ck.step;
        d["has_adapters"] = ck.adapters.has_value();
        d["d_model"] = ck.model.cfg.d_model;
        return d;
    });
}
