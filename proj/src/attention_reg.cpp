#include "msdiff/attention_reg.hpp"

#include <cmath>
#include <stdexcept>

namespace msdiff::attn {

SubjectMap aggregate_subject_map(const AttentionRecordSet& records, int subject, int grid_h, int grid_w) {
    const int K = records.n_blocks();
    if (K < 1) throw std::invalid_argument("aggregate_subject_map: no recorded blocks");
    if (subject < 0 || subject >= records.n_subjects())
        throw std::invalid_argument("aggregate_subject_map: subject index out of range");
    const int lt = grid_h * grid_w;
    const Mat& first = records.maps[0][subject];
    if (first.cols != lt)
        throw std::invalid_argument("aggregate_subject_map: map width does not match latent grid");
    const int rows = first.rows;

    SubjectMap out;
    out.subject_index = subject;
    out.raw = Mat(grid_h, grid_w);
    for (int k = 0; k < K; ++k) {
        const Mat& mk = records.maps[k][subject];
        if (mk.rows != rows || mk.cols != lt)
            throw std::invalid_argument("aggregate_subject_map: inconsistent map shapes across blocks");
        for (int r = 0; r < rows; ++r) {
            const double* mr = mk.row(r);
            for (int j = 0; j < lt; ++j) out.raw.v[j] += mr[j];
        }
    }
    const double inv = 1.0 / ((double)K * rows);
    for (auto& v : out.raw.v) v *= inv;

    out.argmin = 0;
    out.argmax = 0;
    for (int j = 1; j < lt; ++j) {
        if (out.raw.v[j] < out.raw.v[out.argmin]) out.argmin = j;
        if (out.raw.v[j] > out.raw.v[out.argmax]) out.argmax = j;
    }
    double mn = out.raw.v[out.argmin], mx = out.raw.v[out.argmax];
    out.values = Mat(grid_h, grid_w);
    if (mx - mn <= 0.0) {
        out.constant = true;  // degenerate map -> all zeros
    } else {
        double inv_range = 1.0 / (mx - mn);
        for (int j = 0; j < lt; ++j) out.values.v[j] = (out.raw.v[j] - mn) * inv_range;
    }
    return out;
}

SubjectMask rasterize_mask(const Grid& pixel_mask, int subject, int grid_h, int grid_w) {
    if (pixel_mask.c != 1) throw std::invalid_argument("rasterize_mask: expected single-channel mask");
    if (pixel_mask.h % grid_h != 0 || pixel_mask.w % grid_w != 0)
        throw std::invalid_argument("rasterize_mask: canvas not divisible by token grid");
    const int ph = pixel_mask.h / grid_h, pw = pixel_mask.w / grid_w;
    SubjectMask out;
    out.subject_index = subject;
    out.values = Mat(grid_h, grid_w);
    for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx) {
            double cover = 0;
            for (int dy = 0; dy < ph; ++dy)
                for (int dx = 0; dx < pw; ++dx) cover += pixel_mask.at(gy * ph + dy, gx * pw + dx, 0);
            out.values.at(gy, gx) = (cover / (ph * pw) >= 0.5) ? 1.0 : 0.0;
        }
    return out;
}

SubjectMask rasterize_mask(const synth::SceneSpec& scene, int subject, int grid_h, int grid_w) {
    if (subject < 0 || subject >= (int)scene.subjects.size())
        throw std::invalid_argument("rasterize_mask: unknown subject");
    synth::RenderedScene r = synth::render_scene(scene);
    return rasterize_mask(r.pixel_masks[subject], subject, grid_h, grid_w);
}

double dice_loss(const std::vector<SubjectMap>& maps, const std::vector<SubjectMask>& masks, double eps) {
    if (maps.size() != masks.size()) throw std::invalid_argument("dice_loss: length mismatch");
    if (eps <= 0) throw std::invalid_argument("dice_loss: eps must be positive");
    double total = 0;
    for (size_t i = 0; i < maps.size(); ++i) {
        const Mat& mh = maps[i].values;
        const Mat& mk = masks[i].values;
        if (mh.rows != mk.rows || mh.cols != mk.cols)
            throw std::invalid_argument("dice_loss: grid mismatch");
        double inter = 0, sum_h = 0, sum_m = 0;
        for (size_t j = 0; j < mh.v.size(); ++j) {
            inter += mh.v[j] * mk.v[j];
            sum_h += mh.v[j];
            sum_m += mk.v[j];
        }
        total += 1.0 - (2.0 * inter + eps) / (sum_h + sum_m + eps);
    }
    return total;
}

std::vector<Mat> dice_loss_grad(const std::vector<SubjectMap>& maps,
                                const std::vector<SubjectMask>& masks, double eps) {
    if (maps.size() != masks.size()) throw std::invalid_argument("dice_loss_grad: length mismatch");
    std::vector<Mat> grads;
    for (size_t i = 0; i < maps.size(); ++i) {
        const Mat& mh = maps[i].values;
        const Mat& mk = masks[i].values;
        double inter = 0, sum_h = 0, sum_m = 0;
        for (size_t j = 0; j < mh.v.size(); ++j) {
            inter += mh.v[j] * mk.v[j];
            sum_h += mh.v[j];
            sum_m += mk.v[j];
        }
        double A = 2.0 * inter + eps;
        double B = sum_h + sum_m + eps;
        Mat g(mh.rows, mh.cols);
        for (size_t j = 0; j < mh.v.size(); ++j)
            g.v[j] = -(2.0 * mk.v[j] * B - A) / (B * B);
        grads.push_back(std::move(g));
    }
    return grads;
}

double combined_loss(double l_diff, double l_attn, double lambda) {
    if (lambda < 0) throw std::invalid_argument("combined_loss: lambda must be nonnegative");
    return l_diff + lambda * l_attn;
}

std::vector<std::vector<Mat>> attention_loss_backward(const AttentionRecordSet& records,
                                                      const std::vector<SubjectMap>& maps,
                                                      const std::vector<SubjectMask>& masks,
                                                      double eps, double weight) {
    const int K = records.n_blocks();
    const int n_sub = records.n_subjects();
    std::vector<Mat> dvals = dice_loss_grad(maps, masks, eps);
    std::vector<std::vector<Mat>> out(K, std::vector<Mat>(n_sub));
    for (int i = 0; i < n_sub; ++i) {
        const SubjectMap& map = maps[i];
        const int lt = (int)map.raw.v.size();
        std::vector<double> draw(lt, 0.0);
        if (!map.constant) {
            double mn = map.raw.v[map.argmin], mx = map.raw.v[map.argmax];
            double inv_range = 1.0 / (mx - mn);
            double sum_g = 0, sum_gm = 0;
            for (int j = 0; j < lt; ++j) {
                sum_g += dvals[i].v[j];
                sum_gm += dvals[i].v[j] * map.values.v[j];
            }
            for (int j = 0; j < lt; ++j) draw[j] = dvals[i].v[j] * inv_range;
            draw[map.argmin] += (-sum_g + sum_gm) * inv_range;
            draw[map.argmax] += -sum_gm * inv_range;
        }
        const int rows = records.maps[0][i].rows;
        const double inv = weight / ((double)K * rows);
        for (int k = 0; k < K; ++k) {
            Mat g(rows, lt);
            for (int r = 0; r < rows; ++r) {
                double* gr = g.row(r);
                for (int j = 0; j < lt; ++j) gr[j] = draw[j] * inv;
            }
            out[k][i] = std::move(g);
        }
    }
    return out;
}

}  // namespace msdiff::attn
