#pragma once

#include <vector>

#include "msdiff/linalg.hpp"
#include "msdiff/model.hpp"
#include "msdiff/synthdata.hpp"

namespace msdiff::attn {

// Normalized mean attention map for one subject on the latent grid.
struct SubjectMap {
    Mat values;  // grid_h x grid_w, in [0,1]
    Mat raw;     // pre-normalization mean map, kept for gradient propagation
    int subject_index = 0;
    int argmin = 0, argmax = 0;  // flat extrema of raw (first occurrence)
    bool constant = false;       // constant raw map -> values all zero
};

struct SubjectMask {
    Mat values;  // grid_h x grid_w, binary
    int subject_index = 0;
};

// Mean over double blocks and reference-token rows, reshaped to the latent
// grid and min-max normalized to [0,1].
SubjectMap aggregate_subject_map(const AttentionRecordSet& records, int subject, int grid_h, int grid_w);

// Area-fraction pooling of a pixel mask onto the token grid; cells with
// coverage >= 0.5 become 1.
SubjectMask rasterize_mask(const Grid& pixel_mask, int subject, int grid_h, int grid_w);
SubjectMask rasterize_mask(const synth::SceneSpec& scene, int subject, int grid_h, int grid_w);

double dice_loss(const std::vector<SubjectMap>& maps, const std::vector<SubjectMask>& masks,
                 double eps = 1e-6);
// d dice_loss / d map values, one grid per subject
std::vector<Mat> dice_loss_grad(const std::vector<SubjectMap>& maps,
                                const std::vector<SubjectMask>& masks, double eps = 1e-6);

double combined_loss(double l_diff, double l_attn, double lambda);

// Chains dice_loss_grad through the min-max normalization and the
// block/row averaging, yielding gradients w.r.t. every recorded m_k^i.
// `weight` scales the result (the lambda of the combined loss).
std::vector<std::vector<Mat>> attention_loss_backward(const AttentionRecordSet& records,
                                                      const std::vector<SubjectMap>& maps,
                                                      const std::vector<SubjectMask>& masks,
                                                      double eps, double weight);

}  // namespace msdiff::attn
