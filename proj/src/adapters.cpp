#include "msdiff/adapters.hpp"

#include <algorithm>
#include <stdexcept>

#include "msdiff/model.hpp"
#include "msdiff/rng.hpp"

namespace msdiff {

size_t AdapterSet::n_params() const {
    size_t n = 0;
    for (const auto& s : lora) n += s.a.size() + s.b.size();
    for (const auto& s : moe) {
        n += s.bank.gate.size();
        for (const auto& a : s.bank.a) n += a.size();
        for (const auto& b : s.bank.b) n += b.size();
    }
    return n;
}

std::vector<std::string> default_adapter_sites(const Model& m) {
    std::vector<std::string> sites;
    const char* projs[4] = {"q", "k", "v", "o"};
    for (int k = 0; k < m.n_blocks(); ++k) {
        for (const char* p : projs)
            sites.push_back("block" + std::to_string(k) + ".attn." + p);
        sites.push_back("block" + std::to_string(k) + ".ffn");
    }
    return sites;
}

static bool parse_site(const std::string& name, int n_blocks, int& block, int& proj, bool& is_ffn) {
    if (name.rfind("block", 0) != 0) return false;
    size_t dot = name.find('.');
    if (dot == std::string::npos) return false;
    try {
        block = std::stoi(name.substr(5, dot - 5));
    } catch (...) {
        return false;
    }
    if (block < 0 || block >= n_blocks) return false;
    std::string rest = name.substr(dot + 1);
    if (rest == "ffn") {
        is_ffn = true;
        return true;
    }
    is_ffn = false;
    if (rest == "attn.q") proj = 0;
    else if (rest == "attn.k") proj = 1;
    else if (rest == "attn.v") proj = 2;
    else if (rest == "attn.o") proj = 3;
    else return false;
    return true;
}

AdapterSet attach_adapters(const Model& m, const AdapterPlacement& placement) {
    if (placement.rank < 1) throw std::invalid_argument("attach_adapters: rank must be >= 1");
    if (placement.top_k < 1 || placement.top_k > placement.n_experts)
        throw std::invalid_argument("attach_adapters: top_k out of range");
    std::vector<std::string> sites = placement.sites.empty() ? default_adapter_sites(m) : placement.sites;
    Rng rng(placement.seed);
    AdapterSet set;
    const int d = m.cfg.d_model;
    auto init_a = [&](Mat& a, int rows, int cols) {
        a = Mat(rows, cols);
        for (auto& x : a.v) x = 0.01 * rng.gaussian();
    };
    for (const auto& name : sites) {
        int block = 0, proj = 0;
        bool is_ffn = false;
        if (!parse_site(name, m.n_blocks(), block, proj, is_ffn))
            throw std::invalid_argument("attach_adapters: unknown site '" + name + "'");
        if (is_ffn) {
            MoeSite site;
            site.name = name;
            site.block = block;
            ExpertBank& bank = site.bank;
            bank.n_experts = placement.n_experts;
            bank.top_k = placement.top_k;
            bank.rank = placement.rank;
            bank.alpha = placement.alpha;
            init_a(bank.gate, bank.n_experts, d);
            bank.a.resize(bank.n_experts);
            bank.b.resize(bank.n_experts);
            for (int e = 0; e < bank.n_experts; ++e) {
                init_a(bank.a[e], bank.rank, d);
                bank.b[e] = Mat(d, bank.rank);  // zeros
            }
            set.moe.push_back(std::move(site));
        } else {
            LoraSite site;
            site.name = name;
            site.block = block;
            site.proj = proj;
            site.rank = placement.rank;
            site.alpha = placement.alpha;
            init_a(site.a, site.rank, d);
            site.b = Mat(d, site.rank);  // zeros
            set.lora.push_back(std::move(site));
        }
    }
    return set;
}

AdapterSet zeros_like(const AdapterSet& src) {
    AdapterSet s = src;
    for (auto& site : s.lora) {
        site.a.zero();
        site.b.zero();
    }
    for (auto& site : s.moe) {
        site.bank.gate.zero();
        for (auto& a : site.bank.a) a.zero();
        for (auto& b : site.bank.b) b.zero();
    }
    return s;
}

std::vector<AdapterParamView> param_views(AdapterSet& s) {
    std::vector<AdapterParamView> out;
    for (auto& site : s.lora) {
        out.push_back({"adapter." + site.name + ".a", &site.a.v});
        out.push_back({"adapter." + site.name + ".b", &site.b.v});
    }
    for (auto& site : s.moe) {
        out.push_back({"adapter." + site.name + ".gate", &site.bank.gate.v});
        for (int e = 0; e < site.bank.n_experts; ++e) {
            out.push_back({"adapter." + site.name + ".expert" + std::to_string(e) + ".a", &site.bank.a[e].v});
            out.push_back({"adapter." + site.name + ".expert" + std::to_string(e) + ".b", &site.bank.b[e].v});
        }
    }
    return out;
}

}  // namespace msdiff
