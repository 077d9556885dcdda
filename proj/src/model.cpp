#include "msdiff/model.hpp"

#include <cmath>
#include <stdexcept>

#include "msdiff/adapters.hpp"
#include "msdiff/image.hpp"
#include "msdiff/rng.hpp"

namespace msdiff {

void ModelConfig::validate() const {
    if (d_model % n_heads != 0)
        throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
    if (d_model % 4 != 0)
        throw std::invalid_argument("ModelConfig: d_model must be divisible by 4 (2D sincos positions)");
    if (grid_h < 2 || grid_w < 2 || ref_h < 2 || ref_w < 2)
        throw std::invalid_argument("ModelConfig: grids must be at least 2x2");
    if (k_double < 1) throw std::invalid_argument("ModelConfig: need at least one double block");
    if (k_single < 0) throw std::invalid_argument("ModelConfig: negative single block count");
    if (max_subjects < 1) throw std::invalid_argument("ModelConfig: max_subjects must be >= 1");
    if (channels < 1 || vocab_size < synth::kTokenIdentityBase + 1)
        throw std::invalid_argument("ModelConfig: bad channels/vocab_size");
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

static void init_mat(Mat& m, int rows, int cols, Rng& rng, double scale) {
    m = Mat(rows, cols);
    for (auto& x : m.v) x = scale * rng.gaussian();
}

static void init_linear(Linear& l, int out, int in, Rng& rng, double scale) {
    init_mat(l.w, out, in, rng, scale);
    l.b.assign(out, 0.0);
}

static void init_ln(LayerNorm& ln, int d) {
    ln.gamma.assign(d, 1.0);
    ln.beta.assign(d, 0.0);
}

Model build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.seed = seed;
    Rng rng(seed);
    const int d = cfg.d_model;
    init_mat(m.text_embed, cfg.vocab_size, d, rng, 0.02);
    init_mat(m.segment_embed, 3, d, rng, 0.02);
    init_linear(m.input_proj, d, cfg.channels, rng, 0.02);
    init_linear(m.time_mlp1, d, d, rng, 0.02);
    init_linear(m.time_mlp2, d, d, rng, 0.02);
    m.blocks.resize(cfg.k_double + cfg.k_single);
    for (auto& blk : m.blocks) {
        init_ln(blk.ln1, d);
        init_ln(blk.ln2, d);
        init_linear(blk.wq, d, d, rng, 0.02);
        init_linear(blk.wk, d, d, rng, 0.02);
        init_linear(blk.wv, d, d, rng, 0.02);
        init_linear(blk.wo, d, d, rng, 0.02);
        init_linear(blk.w1, cfg.d_ff(), d, rng, 0.02);
        init_linear(blk.w2, d, cfg.d_ff(), rng, 0.02);
    }
    init_ln(m.ln_f, d);
    init_linear(m.output_proj, cfg.channels, d, rng, 0.001);
    return m;
}

Model zeros_like(const Model& src) {
    Model m = src;
    auto views = param_views(m);
    for (auto& v : views) std::fill(v.data->begin(), v.data->end(), 0.0);
    return m;
}

std::vector<ParamView> param_views(Model& m) {
    std::vector<ParamView> out;
    auto add = [&](const std::string& name, std::vector<double>& v) { out.push_back({name, &v}); };
    add("text_embed", m.text_embed.v);
    add("segment_embed", m.segment_embed.v);
    add("input_proj.w", m.input_proj.w.v);
    add("input_proj.b", m.input_proj.b);
    add("time_mlp1.w", m.time_mlp1.w.v);
    add("time_mlp1.b", m.time_mlp1.b);
    add("time_mlp2.w", m.time_mlp2.w.v);
    add("time_mlp2.b", m.time_mlp2.b);
    for (int k = 0; k < m.n_blocks(); ++k) {
        Block& blk = m.blocks[k];
        std::string p = "block" + std::to_string(k) + ".";
        add(p + "ln1.gamma", blk.ln1.gamma);
        add(p + "ln1.beta", blk.ln1.beta);
        add(p + "wq.w", blk.wq.w.v);
        add(p + "wq.b", blk.wq.b);
        add(p + "wk.w", blk.wk.w.v);
        add(p + "wk.b", blk.wk.b);
        add(p + "wv.w", blk.wv.w.v);
        add(p + "wv.b", blk.wv.b);
        add(p + "wo.w", blk.wo.w.v);
        add(p + "wo.b", blk.wo.b);
        add(p + "ln2.gamma", blk.ln2.gamma);
        add(p + "ln2.beta", blk.ln2.beta);
        add(p + "w1.w", blk.w1.w.v);
        add(p + "w1.b", blk.w1.b);
        add(p + "w2.w", blk.w2.w.v);
        add(p + "w2.b", blk.w2.b);
    }
    add("ln_f.gamma", m.ln_f.gamma);
    add("ln_f.beta", m.ln_f.beta);
    add("output_proj.w", m.output_proj.w.v);
    add("output_proj.b", m.output_proj.b);
    return out;
}

// ---------------------------------------------------------------------------
// token assembly
// ---------------------------------------------------------------------------

TokenBatch assemble_tokens(const std::vector<int>& text_tokens, const Grid& z_t,
                           const std::vector<Grid>& ref_latents, const ModelConfig& cfg) {
    if ((int)ref_latents.size() > cfg.max_subjects)
        throw std::invalid_argument("assemble_tokens: more subjects than model capacity");
    if (z_t.h != cfg.grid_h || z_t.w != cfg.grid_w || z_t.c != cfg.channels)
        throw std::invalid_argument("assemble_tokens: latent does not match latent_grid");
    for (int tok : text_tokens)
        if (tok < 0 || tok >= cfg.vocab_size)
            throw std::invalid_argument("assemble_tokens: text token out of vocabulary");
    TokenBatch b;
    b.text_tokens = text_tokens;
    b.latent = z_t;
    b.refs = ref_latents;
    for (int j = 0; j < (int)text_tokens.size(); ++j) {
        b.positions.push_back({0, j});
        b.segment_ids.push_back(0);
    }
    for (int y = 0; y < cfg.grid_h; ++y)
        for (int x = 0; x < cfg.grid_w; ++x) {
            b.positions.push_back({y, x});
            b.segment_ids.push_back(1);
        }
    for (int i = 0; i < (int)ref_latents.size(); ++i) {
        const Grid& r = ref_latents[i];
        if (r.h != cfg.ref_h || r.w != cfg.ref_w || r.c != cfg.channels)
            throw std::invalid_argument("assemble_tokens: reference does not match ref_grid");
        for (int y = 0; y < cfg.ref_h; ++y)
            for (int x = 0; x < cfg.ref_w; ++x) {
                b.positions.push_back({y + (i + 1) * cfg.grid_h, x + (i + 1) * cfg.grid_w});
                b.segment_ids.push_back(2 + i);
            }
    }
    return b;
}

TokenBatch assemble_tokens(const synth::SceneSpec& scene, const Grid& z_t, const ModelConfig& cfg) {
    if ((int)scene.subjects.size() > cfg.max_subjects)
        throw std::invalid_argument("assemble_tokens: scene has more subjects than model capacity");
    int patch = scene.gen.ref_canvas / cfg.ref_h;
    std::vector<Grid> refs;
    for (const auto& s : scene.subjects)
        refs.push_back(patchify(synth::render_reference(s.identity, scene.gen), patch));
    return assemble_tokens(scene.prompt_tokens, z_t, refs, cfg);
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

static double gelu(double x) {
    const double c = 0.7978845608028654;  // sqrt(2/pi)
    double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

static double gelu_grad(double x) {
    const double c = 0.7978845608028654;
    double u = c * (x + 0.044715 * x * x * x);
    double th = std::tanh(u);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

static void pos_features(int row, int col, int d, double* out) {
    // first half encodes the row index, second half the column index
    const int half = d / 2;
    const int pairs = half / 2;
    for (int axis = 0; axis < 2; ++axis) {
        double p = axis == 0 ? (double)row : (double)col;
        double* dst = out + axis * half;
        for (int j = 0; j < pairs; ++j) {
            double omega = std::pow(10000.0, -2.0 * j / half);
            dst[2 * j] = std::sin(p * omega);
            dst[2 * j + 1] = std::cos(p * omega);
        }
    }
}

static void time_features(double t, int d, double* out) {
    const int pairs = d / 2;
    for (int j = 0; j < pairs; ++j) {
        double freq = std::pow(1000.0, pairs > 1 ? (double)j / (pairs - 1) : 0.0);
        out[2 * j] = std::sin(t * freq);
        out[2 * j + 1] = std::cos(t * freq);
    }
}

static void layer_norm_forward(const Mat& x, const LayerNorm& ln, Mat& y,
                               std::vector<double>& mean, std::vector<double>& rstd) {
    const int rows = x.rows, d = x.cols;
    y.rows = rows;
    y.cols = d;
    y.v.resize((size_t)rows * d);
    mean.resize(rows);
    rstd.resize(rows);
    for (int i = 0; i < rows; ++i) {
        const double* xr = x.row(i);
        double mu = 0;
        for (int j = 0; j < d; ++j) mu += xr[j];
        mu /= d;
        double var = 0;
        for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= d;
        double rs = 1.0 / std::sqrt(var + 1e-6);
        mean[i] = mu;
        rstd[i] = rs;
        double* yr = y.row(i);
        for (int j = 0; j < d; ++j) yr[j] = ln.gamma[j] * (xr[j] - mu) * rs + ln.beta[j];
    }
}

static void linear_forward(const Mat& x, const Linear& l, Mat& y) {
    matmul_nt(x, l.w, y);
    for (int i = 0; i < y.rows; ++i) {
        double* yr = y.row(i);
        for (int j = 0; j < y.cols; ++j) yr[j] += l.b[j];
    }
}

// y += (alpha/rank) * (x A^T) B^T ; caches x A^T
static void lora_forward(const Mat& x, const LoraSite& site, Mat& y, Mat& ax_cache) {
    matmul_nt(x, site.a, ax_cache);
    const double s = site.alpha / site.rank;
    // y += s * ax * B^T
    for (int i = 0; i < x.rows; ++i) {
        const double* axr = ax_cache.row(i);
        double* yr = y.row(i);
        for (int o = 0; o < site.b.rows; ++o) {
            const double* br = site.b.row(o);
            double acc = 0;
            for (int r = 0; r < site.rank; ++r) acc += br[r] * axr[r];
            yr[o] += s * acc;
        }
    }
}

static void softmax_row(double* p, int n) {
    double mx = p[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, p[j]);
    double sum = 0;
    for (int j = 0; j < n; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
    }
    double inv = 1.0 / sum;
    for (int j = 0; j < n; ++j) p[j] *= inv;
}

std::vector<double> gate_route(const Mat& gate_w, const double* h, int top_k) {
    const int n = gate_w.rows;
    if (top_k < 1 || top_k > n) throw std::invalid_argument("gate_route: top_k out of range");
    std::vector<double> logits(n);
    for (int e = 0; e < n; ++e) {
        const double* gr = gate_w.row(e);
        double s = 0;
        for (int j = 0; j < gate_w.cols; ++j) s += gr[j] * h[j];
        logits[e] = s;
    }
    // top-k by value, ties to the lowest index
    std::vector<int> sel;
    std::vector<char> used(n, 0);
    for (int k = 0; k < top_k; ++k) {
        int best = -1;
        for (int e = 0; e < n; ++e) {
            if (used[e]) continue;
            if (best < 0 || logits[e] > logits[best]) best = e;
        }
        used[best] = 1;
        sel.push_back(best);
    }
    std::vector<double> vals(top_k);
    for (int k = 0; k < top_k; ++k) vals[k] = logits[sel[k]];
    softmax_row(vals.data(), top_k);
    std::vector<double> p(n, 0.0);
    for (int k = 0; k < top_k; ++k) p[sel[k]] = vals[k];
    return p;
}

std::vector<double> moe_lora_forward(const std::vector<double>& ffn_out, const ExpertBank& bank,
                                     const std::vector<double>& h) {
    if ((int)h.size() != bank.gate.cols)
        throw std::invalid_argument("moe_lora_forward: input dimension mismatch");
    std::vector<double> p = gate_route(bank.gate, h.data(), bank.top_k);
    std::vector<double> out = ffn_out;
    const double s = bank.alpha / bank.rank;
    std::vector<double> ah(bank.rank);
    for (int e = 0; e < bank.n_experts; ++e) {
        if (p[e] == 0.0) continue;
        matvec(bank.a[e], h.data(), ah.data());
        for (int o = 0; o < bank.b[e].rows; ++o) {
            const double* br = bank.b[e].row(o);
            double acc = 0;
            for (int r = 0; r < bank.rank; ++r) acc += br[r] * ah[r];
            out[o] += p[e] * s * acc;
        }
    }
    return out;
}

ForwardResult forward(const Model& m, const TokenBatch& batch, double t, bool record_attention,
                      const AdapterSet* adapters, ForwardCache* cache) {
    const ModelConfig& cfg = m.cfg;
    if (!std::isfinite(t)) throw std::invalid_argument("forward: non-finite time");
    const int S = batch.seq_len();
    const int D = cfg.d_model;
    const int H = cfg.n_heads;
    const int Dh = D / H;
    const int n_text = (int)batch.text_tokens.size();
    const int lt = cfg.latent_tokens();
    const int lr = cfg.ref_tokens();
    const int n_sub = (int)batch.refs.size();
    if (S != n_text + lt + n_sub * lr) throw std::invalid_argument("forward: inconsistent batch layout");

    ForwardCache local;
    ForwardCache& cc = cache ? *cache : local;
    cc.blocks.resize(m.n_blocks());

    // time embedding
    cc.time_feat.resize(D);
    time_features(t, D, cc.time_feat.data());
    cc.time_h1.resize(D);
    matvec(m.time_mlp1.w, cc.time_feat.data(), cc.time_h1.data());
    for (int j = 0; j < D; ++j) cc.time_h1[j] += m.time_mlp1.b[j];
    cc.time_h1_act.resize(D);
    for (int j = 0; j < D; ++j) cc.time_h1_act[j] = gelu(cc.time_h1[j]);
    cc.time_emb.resize(D);
    matvec(m.time_mlp2.w, cc.time_h1_act.data(), cc.time_emb.data());
    for (int j = 0; j < D; ++j) cc.time_emb[j] += m.time_mlp2.b[j];

    // token embeddings
    cc.embeds.rows = S;
    cc.embeds.cols = D;
    cc.embeds.v.assign((size_t)S * D, 0.0);
    std::vector<double> pos(D);
    for (int s = 0; s < S; ++s) {
        double* row = cc.embeds.row(s);
        int sid = batch.segment_ids[s];
        if (sid == 0) {
            const double* te = m.text_embed.row(batch.text_tokens[s]);
            for (int j = 0; j < D; ++j) row[j] = te[j];
        } else if (sid == 1) {
            int li = s - n_text;
            const double* z = &batch.latent.v[(size_t)li * cfg.channels];
            matvec(m.input_proj.w, z, row);
            for (int j = 0; j < D; ++j) row[j] += m.input_proj.b[j];
        } else {
            int i = sid - 2;
            int ri = s - batch.ref_offset(i, cfg);
            const double* z = &batch.refs[i].v[(size_t)ri * cfg.channels];
            matvec(m.input_proj.w, z, row);
            for (int j = 0; j < D; ++j) row[j] += m.input_proj.b[j];
        }
        int seg_type = sid == 0 ? 0 : (sid == 1 ? 1 : 2);
        const double* se = m.segment_embed.row(seg_type);
        pos_features(batch.positions[s][0], batch.positions[s][1], D, pos.data());
        for (int j = 0; j < D; ++j) row[j] += se[j] + pos[j] + cc.time_emb[j];
    }

    AttentionRecordSet records;
    if (record_attention) records.maps.assign(cfg.k_double, std::vector<Mat>(n_sub));

    Mat x = cc.embeds;
    const double scale = 1.0 / std::sqrt((double)Dh);
    for (int k = 0; k < m.n_blocks(); ++k) {
        const Block& blk = m.blocks[k];
        BlockCache& bc = cc.blocks[k];
        bc.x_in = x;
        layer_norm_forward(bc.x_in, blk.ln1, bc.ln1_out, bc.ln1_mean, bc.ln1_rstd);

        linear_forward(bc.ln1_out, blk.wq, bc.q);
        linear_forward(bc.ln1_out, blk.wk, bc.k);
        linear_forward(bc.ln1_out, blk.wv, bc.v);
        bc.lora_ax.assign(4, Mat());
        if (adapters) {
            const auto& slots = adapters->lora;
            for (size_t si = 0; si < slots.size(); ++si) {
                const LoraSite& site = slots[si];
                if (site.block != k) continue;
                Mat* target = site.proj == 0 ? &bc.q : site.proj == 1 ? &bc.k : site.proj == 2 ? &bc.v : nullptr;
                if (target) lora_forward(bc.ln1_out, site, *target, bc.lora_ax[site.proj]);
            }
        }

        // attention per head
        bc.probs.assign(H, Mat());
        bc.attn_concat.rows = S;
        bc.attn_concat.cols = D;
        bc.attn_concat.v.assign((size_t)S * D, 0.0);
        Mat qh(S, Dh), kh(S, Dh), vh(S, Dh), oh;
        for (int h = 0; h < H; ++h) {
            for (int s = 0; s < S; ++s) {
                const double* qr = bc.q.row(s);
                const double* kr = bc.k.row(s);
                const double* vr = bc.v.row(s);
                double* qd = qh.row(s);
                double* kd = kh.row(s);
                double* vd = vh.row(s);
                for (int j = 0; j < Dh; ++j) {
                    qd[j] = qr[h * Dh + j];
                    kd[j] = kr[h * Dh + j];
                    vd[j] = vr[h * Dh + j];
                }
            }
            Mat& probs = bc.probs[h];
            matmul_nt(qh, kh, probs);
            for (auto& pv : probs.v) pv *= scale;
            for (int s = 0; s < S; ++s) softmax_row(probs.row(s), S);
            matmul(probs, vh, oh);
            for (int s = 0; s < S; ++s) {
                const double* orow = oh.row(s);
                double* crow = bc.attn_concat.row(s);
                for (int j = 0; j < Dh; ++j) crow[h * Dh + j] = orow[j];
            }
        }

        if (record_attention && m.is_double_block(k)) {
            for (int i = 0; i < n_sub; ++i) {
                Mat map(lr, lt);
                int r0 = batch.ref_offset(i, cfg);
                int c0 = batch.latent_offset();
                for (int h = 0; h < H; ++h) {
                    const Mat& probs = bc.probs[h];
                    for (int r = 0; r < lr; ++r) {
                        const double* pr = probs.row(r0 + r);
                        double* mr = map.row(r);
                        for (int c = 0; c < lt; ++c) mr[c] += pr[c0 + c];
                    }
                }
                for (auto& mv : map.v) mv /= H;
                records.maps[k][i] = std::move(map);
            }
        }

        Mat attn_out;
        linear_forward(bc.attn_concat, blk.wo, attn_out);
        if (adapters) {
            for (const LoraSite& site : adapters->lora) {
                if (site.block == k && site.proj == 3)
                    lora_forward(bc.attn_concat, site, attn_out, bc.lora_ax[3]);
            }
        }
        bc.x_mid = bc.x_in;
        for (size_t j = 0; j < bc.x_mid.v.size(); ++j) bc.x_mid.v[j] += attn_out.v[j];

        layer_norm_forward(bc.x_mid, blk.ln2, bc.ln2_out, bc.ln2_mean, bc.ln2_rstd);
        linear_forward(bc.ln2_out, blk.w1, bc.ffn_pre);
        bc.ffn_act.rows = bc.ffn_pre.rows;
        bc.ffn_act.cols = bc.ffn_pre.cols;
        bc.ffn_act.v.resize(bc.ffn_pre.v.size());
        for (size_t j = 0; j < bc.ffn_pre.v.size(); ++j) bc.ffn_act.v[j] = gelu(bc.ffn_pre.v[j]);
        linear_forward(bc.ffn_act, blk.w2, bc.ffn_out);

        x = bc.x_mid;
        for (size_t j = 0; j < x.v.size(); ++j) x.v[j] += bc.ffn_out.v[j];

        // MoE-LoRA on the FFN output site: x += sum_e p_e (alpha/r) B_e A_e h
        if (adapters) {
            for (const MoeSite& site : adapters->moe) {
                if (site.block != k) continue;
                const ExpertBank& bank = site.bank;
                bc.moe_sel.assign((size_t)S * bank.top_k, -1);
                bc.moe_p.assign((size_t)S * bank.top_k, 0.0);
                bc.moe_ah.assign((size_t)S * bank.top_k * bank.rank, 0.0);
                const double sc = bank.alpha / bank.rank;
                for (int s = 0; s < S; ++s) {
                    const double* h = bc.ln2_out.row(s);
                    std::vector<double> p = gate_route(bank.gate, h, bank.top_k);
                    int slot = 0;
                    for (int e = 0; e < bank.n_experts && slot < bank.top_k; ++e) {
                        if (p[e] == 0.0) continue;
                        size_t base = ((size_t)s * bank.top_k + slot) * bank.rank;
                        bc.moe_sel[(size_t)s * bank.top_k + slot] = e;
                        bc.moe_p[(size_t)s * bank.top_k + slot] = p[e];
                        matvec(bank.a[e], h, &bc.moe_ah[base]);
                        double* xr = x.row(s);
                        for (int o = 0; o < bank.b[e].rows; ++o) {
                            const double* br = bank.b[e].row(o);
                            double acc = 0;
                            for (int r = 0; r < bank.rank; ++r) acc += br[r] * bc.moe_ah[base + r];
                            xr[o] += p[e] * sc * acc;
                        }
                        ++slot;
                    }
                }
            }
        }
    }

    cc.final_in = x;
    layer_norm_forward(cc.final_in, m.ln_f, cc.final_ln, cc.lnf_mean, cc.lnf_rstd);

    ForwardResult res;
    res.velocity = Grid(cfg.grid_h, cfg.grid_w, cfg.channels);
    for (int li = 0; li < lt; ++li) {
        const double* hrow = cc.final_ln.row(n_text + li);
        double* out = &res.velocity.v[(size_t)li * cfg.channels];
        matvec(m.output_proj.w, hrow, out);
        for (int ch = 0; ch < cfg.channels; ++ch) out[ch] += m.output_proj.b[ch];
    }
    if (record_attention) res.records = std::move(records);
    return res;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

static void layer_norm_backward(const Mat& x, const LayerNorm& ln, const std::vector<double>& mean,
                                const std::vector<double>& rstd, const Mat& dy, Mat& dx,
                                std::vector<double>* dgamma, std::vector<double>* dbeta) {
    const int rows = x.rows, d = x.cols;
    dx.rows = rows;
    dx.cols = d;
    dx.v.assign((size_t)rows * d, 0.0);
    for (int i = 0; i < rows; ++i) {
        const double* xr = x.row(i);
        const double* dyr = dy.row(i);
        double* dxr = dx.row(i);
        double mu = mean[i], rs = rstd[i];
        double sum_g = 0, sum_gx = 0;
        for (int j = 0; j < d; ++j) {
            double xhat = (xr[j] - mu) * rs;
            double g = dyr[j] * ln.gamma[j];
            sum_g += g;
            sum_gx += g * xhat;
            if (dgamma) (*dgamma)[j] += dyr[j] * xhat;
            if (dbeta) (*dbeta)[j] += dyr[j];
        }
        for (int j = 0; j < d; ++j) {
            double xhat = (xr[j] - mu) * rs;
            double g = dyr[j] * ln.gamma[j];
            dxr[j] = rs * (g - sum_g / d - xhat * sum_gx / d);
        }
    }
}

// dx += dy W ; dW += dy^T x ; db += colsum(dy)
static void linear_backward(const Mat& x, const Linear& l, const Mat& dy, Mat* dx_acc,
                            Linear* dl, bool train) {
    if (train && dl) {
        matmul_tn_acc(dy, x, dl->w);
        for (int i = 0; i < dy.rows; ++i) {
            const double* dyr = dy.row(i);
            for (int j = 0; j < dy.cols; ++j) dl->b[j] += dyr[j];
        }
    }
    if (dx_acc) {
        Mat tmp;
        matmul(dy, l.w, tmp);
        if (dx_acc->v.empty()) {
            *dx_acc = tmp;
        } else {
            for (size_t i = 0; i < tmp.v.size(); ++i) dx_acc->v[i] += tmp.v[i];
        }
    }
}

static void lora_backward(const Mat& x, const LoraSite& site, const Mat& ax, const Mat& dy,
                          Mat* dx_acc, LoraSite* dsite) {
    const double s = site.alpha / site.rank;
    // d_ax = s * dy * B
    Mat dax;
    matmul(dy, site.b, dax);
    for (auto& v : dax.v) v *= s;
    if (dsite) {
        // dB += s * dy^T * ax
        Mat tmp(site.b.rows, site.b.cols);
        matmul_tn_acc(dy, ax, tmp);
        for (size_t i = 0; i < tmp.v.size(); ++i) dsite->b.v[i] += s * tmp.v[i];
        matmul_tn_acc(dax, x, dsite->a);
    }
    if (dx_acc) {
        Mat tmp;
        matmul(dax, site.a, tmp);
        for (size_t i = 0; i < tmp.v.size(); ++i) dx_acc->v[i] += tmp.v[i];
    }
}

void backward(const Model& m, const TokenBatch& batch, const ForwardCache& cc,
              const Grid& d_velocity, const std::vector<std::vector<Mat>>& d_probs_extra,
              const AdapterSet* adapters, Model* grads, AdapterSet* adapter_grads,
              const BackwardOptions& opts) {
    const ModelConfig& cfg = m.cfg;
    const int S = batch.seq_len();
    const int D = cfg.d_model;
    const int H = cfg.n_heads;
    const int Dh = D / H;
    const int n_text = (int)batch.text_tokens.size();
    const int lt = cfg.latent_tokens();
    const int lr = cfg.ref_tokens();
    const bool tb = opts.train_base && grads != nullptr;
    const bool ta = opts.train_adapters && adapters != nullptr && adapter_grads != nullptr;

    // velocity -> final layer norm rows (latent tokens only)
    Mat d_final_ln(S, D);
    {
        Mat d_out_rows(lt, cfg.channels);
        for (int li = 0; li < lt; ++li)
            for (int ch = 0; ch < cfg.channels; ++ch)
                d_out_rows.at(li, ch) = d_velocity.v[(size_t)li * cfg.channels + ch];
        if (tb) {
            Mat latent_ln(lt, D);
            for (int li = 0; li < lt; ++li)
                for (int j = 0; j < D; ++j) latent_ln.at(li, j) = cc.final_ln.at(n_text + li, j);
            matmul_tn_acc(d_out_rows, latent_ln, grads->output_proj.w);
            for (int li = 0; li < lt; ++li)
                for (int ch = 0; ch < cfg.channels; ++ch)
                    grads->output_proj.b[ch] += d_out_rows.at(li, ch);
        }
        Mat dl;
        matmul(d_out_rows, m.output_proj.w, dl);
        for (int li = 0; li < lt; ++li)
            for (int j = 0; j < D; ++j) d_final_ln.at(n_text + li, j) = dl.at(li, j);
    }

    Mat dx;
    layer_norm_backward(cc.final_in, m.ln_f, cc.lnf_mean, cc.lnf_rstd, d_final_ln, dx,
                        tb ? &grads->ln_f.gamma : nullptr, tb ? &grads->ln_f.beta : nullptr);

    const double scale = 1.0 / std::sqrt((double)Dh);
    for (int k = m.n_blocks() - 1; k >= 0; --k) {
        const Block& blk = m.blocks[k];
        const BlockCache& bc = cc.blocks[k];
        Block* gblk = tb ? &grads->blocks[k] : nullptr;

        // dx = d x_out. MoE site first (parallel to FFN, input ln2_out).
        Mat d_ln2(S, D);
        d_ln2.zero();
        if (adapters) {
            for (size_t msi = 0; msi < adapters->moe.size(); ++msi) {
                const MoeSite& site = adapters->moe[msi];
                if (site.block != k) continue;
                const ExpertBank& bank = site.bank;
                ExpertBank* gbank = ta ? &adapter_grads->moe[msi].bank : nullptr;
                const double sc = bank.alpha / bank.rank;
                std::vector<double> dah(bank.rank), bah(bank.b.empty() ? 0 : bank.b[0].rows);
                for (int s = 0; s < S; ++s) {
                    const double* h = bc.ln2_out.row(s);
                    const double* dxr = dx.row(s);
                    double* dhr = d_ln2.row(s);
                    // gather selected slots
                    int nsel = 0;
                    double dp[16];  // d objective / d routing weight, per slot
                    double pv[16];
                    int eid[16];
                    for (int slot = 0; slot < bank.top_k; ++slot) {
                        int e = bc.moe_sel[(size_t)s * bank.top_k + slot];
                        if (e < 0) continue;
                        double p = bc.moe_p[(size_t)s * bank.top_k + slot];
                        const double* ah = &bc.moe_ah[((size_t)s * bank.top_k + slot) * bank.rank];
                        // bah = B_e ah
                        double dpe = 0;
                        for (int o = 0; o < bank.b[e].rows; ++o) {
                            const double* br = bank.b[e].row(o);
                            double acc = 0;
                            for (int r = 0; r < bank.rank; ++r) acc += br[r] * ah[r];
                            dpe += dxr[o] * sc * acc;
                        }
                        // expert path gradients
                        for (int r = 0; r < bank.rank; ++r) {
                            double acc = 0;
                            for (int o = 0; o < bank.b[e].rows; ++o) acc += bank.b[e].at(o, r) * dxr[o];
                            dah[r] = p * sc * acc;
                        }
                        if (gbank) {
                            for (int o = 0; o < bank.b[e].rows; ++o) {
                                double go = p * sc * dxr[o];
                                double* gb = gbank->b[e].row(o);
                                for (int r = 0; r < bank.rank; ++r) gb[r] += go * ah[r];
                            }
                            for (int r = 0; r < bank.rank; ++r) {
                                double* ga = gbank->a[e].row(r);
                                for (int j = 0; j < D; ++j) ga[j] += dah[r] * h[j];
                            }
                        }
                        for (int j = 0; j < D; ++j) {
                            double acc = 0;
                            for (int r = 0; r < bank.rank; ++r) acc += bank.a[e].at(r, j) * dah[r];
                            dhr[j] += acc;
                        }
                        dp[nsel] = dpe;
                        pv[nsel] = p;
                        eid[nsel] = e;
                        ++nsel;
                    }
                    // softmax over selected logits
                    if (nsel > 0) {
                        double dot = 0;
                        for (int q = 0; q < nsel; ++q) dot += dp[q] * pv[q];
                        for (int q = 0; q < nsel; ++q) {
                            double dlogit = pv[q] * (dp[q] - dot);
                            if (gbank) {
                                double* gg = gbank->gate.row(eid[q]);
                                for (int j = 0; j < D; ++j) gg[j] += dlogit * h[j];
                            }
                            const double* gw = bank.gate.row(eid[q]);
                            for (int j = 0; j < D; ++j) dhr[j] += dlogit * gw[j];
                        }
                    }
                }
            }
        }

        // FFN backward
        Mat d_act;
        linear_backward(bc.ffn_act, blk.w2, dx, &d_act, gblk ? &gblk->w2 : nullptr, tb);
        for (size_t j = 0; j < d_act.v.size(); ++j) d_act.v[j] *= gelu_grad(bc.ffn_pre.v[j]);
        {
            Mat d_ln2_ffn;
            linear_backward(bc.ln2_out, blk.w1, d_act, &d_ln2_ffn, gblk ? &gblk->w1 : nullptr, tb);
            for (size_t j = 0; j < d_ln2.v.size(); ++j) d_ln2.v[j] += d_ln2_ffn.v[j];
        }
        Mat d_mid;
        layer_norm_backward(bc.x_mid, blk.ln2, bc.ln2_mean, bc.ln2_rstd, d_ln2, d_mid,
                            gblk ? &gblk->ln2.gamma : nullptr, gblk ? &gblk->ln2.beta : nullptr);
        for (size_t j = 0; j < d_mid.v.size(); ++j) d_mid.v[j] += dx.v[j];  // residual

        // attention output projection
        Mat d_concat;
        linear_backward(bc.attn_concat, blk.wo, d_mid, &d_concat, gblk ? &gblk->wo : nullptr, tb);
        if (adapters) {
            for (size_t si = 0; si < adapters->lora.size(); ++si) {
                const LoraSite& site = adapters->lora[si];
                if (site.block == k && site.proj == 3)
                    lora_backward(bc.attn_concat, site, bc.lora_ax[3], d_mid, &d_concat,
                                  ta ? &adapter_grads->lora[si] : nullptr);
            }
        }

        // per-head attention backward
        Mat dq(S, D), dk(S, D), dv(S, D);
        dq.zero();
        dk.zero();
        dv.zero();
        Mat qh(S, Dh), kh(S, Dh), vh(S, Dh), doh(S, Dh);
        for (int h = 0; h < H; ++h) {
            for (int s = 0; s < S; ++s) {
                const double* qr = bc.q.row(s);
                const double* kr = bc.k.row(s);
                const double* vr = bc.v.row(s);
                const double* dcr = d_concat.row(s);
                for (int j = 0; j < Dh; ++j) {
                    qh.at(s, j) = qr[h * Dh + j];
                    kh.at(s, j) = kr[h * Dh + j];
                    vh.at(s, j) = vr[h * Dh + j];
                    doh.at(s, j) = dcr[h * Dh + j];
                }
            }
            const Mat& probs = bc.probs[h];
            // dV_h += P^T dO ; dP = dO V^T
            Mat dprobs;
            matmul_nt(doh, vh, dprobs);
            {
                Mat dvh2(S, Dh);
                dvh2.zero();
                matmul_tn_acc(probs, doh, dvh2);
                for (int s = 0; s < S; ++s)
                    for (int j = 0; j < Dh; ++j) dv.at(s, h * Dh + j) += dvh2.at(s, j);
            }
            // attention-map regularization gradient (double blocks only)
            if (!d_probs_extra.empty() && m.is_double_block(k) && k < (int)d_probs_extra.size()) {
                const auto& per_sub = d_probs_extra[k];
                for (int i = 0; i < (int)per_sub.size(); ++i) {
                    const Mat& dmap = per_sub[i];
                    if (dmap.v.empty()) continue;
                    int r0 = batch.ref_offset(i, cfg);
                    int c0 = batch.latent_offset();
                    for (int r = 0; r < lr; ++r) {
                        const double* dmr = dmap.row(r);
                        double* dpr = dprobs.row(r0 + r);
                        for (int c = 0; c < lt; ++c) dpr[c0 + c] += dmr[c] / H;
                    }
                }
            }
            // softmax rows backward
            for (int s = 0; s < S; ++s) {
                const double* pr = probs.row(s);
                double* dpr = dprobs.row(s);
                double dot = 0;
                for (int j = 0; j < S; ++j) dot += dpr[j] * pr[j];
                for (int j = 0; j < S; ++j) dpr[j] = pr[j] * (dpr[j] - dot);
            }
            // dQ_h = scale * dL K ; dK_h = scale * dL^T Q
            Mat dqh, dkh(S, Dh);
            matmul(dprobs, kh, dqh);
            dkh.zero();
            matmul_tn_acc(dprobs, qh, dkh);
            for (int s = 0; s < S; ++s)
                for (int j = 0; j < Dh; ++j) {
                    dq.at(s, h * Dh + j) += scale * dqh.at(s, j);
                    dk.at(s, h * Dh + j) += scale * dkh.at(s, j);
                }
        }

        Mat d_ln1(S, D);
        d_ln1.zero();
        linear_backward(bc.ln1_out, blk.wq, dq, &d_ln1, gblk ? &gblk->wq : nullptr, tb);
        linear_backward(bc.ln1_out, blk.wk, dk, &d_ln1, gblk ? &gblk->wk : nullptr, tb);
        linear_backward(bc.ln1_out, blk.wv, dv, &d_ln1, gblk ? &gblk->wv : nullptr, tb);
        if (adapters) {
            for (size_t si = 0; si < adapters->lora.size(); ++si) {
                const LoraSite& site = adapters->lora[si];
                if (site.block != k || site.proj == 3) continue;
                const Mat& dy = site.proj == 0 ? dq : site.proj == 1 ? dk : dv;
                lora_backward(bc.ln1_out, site, bc.lora_ax[site.proj], dy, &d_ln1,
                              ta ? &adapter_grads->lora[si] : nullptr);
            }
        }
        Mat d_in;
        layer_norm_backward(bc.x_in, blk.ln1, bc.ln1_mean, bc.ln1_rstd, d_ln1, d_in,
                            gblk ? &gblk->ln1.gamma : nullptr, gblk ? &gblk->ln1.beta : nullptr);
        for (size_t j = 0; j < d_in.v.size(); ++j) d_in.v[j] += d_mid.v[j];  // residual
        dx = std::move(d_in);
    }

    if (!tb) return;

    // embedding backward
    std::vector<double> d_time(D, 0.0);
    for (int s = 0; s < S; ++s) {
        const double* dr = dx.row(s);
        int sid = batch.segment_ids[s];
        int seg_type = sid == 0 ? 0 : (sid == 1 ? 1 : 2);
        double* ser = grads->segment_embed.row(seg_type);
        for (int j = 0; j < D; ++j) {
            ser[j] += dr[j];
            d_time[j] += dr[j];
        }
        if (sid == 0) {
            double* ter = grads->text_embed.row(batch.text_tokens[s]);
            for (int j = 0; j < D; ++j) ter[j] += dr[j];
        } else {
            const double* z = nullptr;
            if (sid == 1) {
                z = &batch.latent.v[(size_t)(s - n_text) * cfg.channels];
            } else {
                int i = sid - 2;
                z = &batch.refs[i].v[(size_t)(s - batch.ref_offset(i, cfg)) * cfg.channels];
            }
            for (int j = 0; j < D; ++j) {
                double g = dr[j];
                grads->input_proj.b[j] += g;
                double* wr = grads->input_proj.w.row(j);
                for (int ch = 0; ch < cfg.channels; ++ch) wr[ch] += g * z[ch];
            }
        }
    }
    // time MLP backward
    {
        std::vector<double> d_act(D);
        for (int j = 0; j < D; ++j) {
            grads->time_mlp2.b[j] += d_time[j];
            double* wr = grads->time_mlp2.w.row(j);
            for (int i = 0; i < D; ++i) wr[i] += d_time[j] * cc.time_h1_act[i];
        }
        for (int i = 0; i < D; ++i) {
            double acc = 0;
            for (int j = 0; j < D; ++j) acc += m.time_mlp2.w.at(j, i) * d_time[j];
            d_act[i] = acc * gelu_grad(cc.time_h1[i]);
        }
        for (int j = 0; j < D; ++j) {
            grads->time_mlp1.b[j] += d_act[j];
            double* wr = grads->time_mlp1.w.row(j);
            for (int i = 0; i < D; ++i) wr[i] += d_act[j] * cc.time_feat[i];
        }
    }
}

}  // namespace msdiff
