#pragma once

#include <vector>

#include "organseg/tensor.hpp"

namespace organseg {

enum class LossReduction { mean, sum };

struct LossWeights {
    std::vector<double> alpha;  // per-class, length num_classes; empty = all ones
    double gamma = 2.0;
    double lambda_seg = 1.0;   // dice weight inside the segmentation loss
    double lambda1 = 5.0;      // shape-loss weight in the generator objective
    double lambda2 = 0.001;    // shape-loss weight in the discriminator objective
    LossReduction reduction = LossReduction::mean;
    double prob_clamp = 1e-7;
    double dice_smooth = 1e-5;
};

void validate_loss_weights(const LossWeights& w, std::int64_t num_classes);

// Per-class weights inversely proportional to average organ size, normalized
// so they sum to the class count (background included).
std::vector<double> alpha_from_voxel_counts(const std::vector<double>& mean_voxels_per_class);

// probs: (C,Z,Y,X) per-voxel class probabilities; targets_onehot: same shape,
// one-hot. Sum over classes of -alpha_t (1 - p_t)^gamma log(p_t) on target
// classes, reduced over voxels.
Tensor focal_loss(const Tensor& probs, const Tensor& targets_onehot, const LossWeights& w);

// Generalized dice over all classes including background:
// sum_t (1 - (2 sum(y p) + eps) / (sum y + sum p + eps)); the smoothing keeps
// absent-from-both classes at zero contribution.
Tensor dice_loss(const Tensor& probs, const Tensor& targets_onehot, const LossWeights& w);

// focal + lambda_seg * dice
Tensor seg_loss(const Tensor& probs, const Tensor& targets_onehot, const LossWeights& w);

// |D(y) - y|^2 + |D(G(x)) - G(x)|^2, each term mean-reduced; the predicted
// mask enters as a constant (detached internally).
Tensor recon_loss(const Tensor& aae_out_gt, const Tensor& gt_mask, const Tensor& aae_out_pred,
                  const Tensor& pred_mask);

// Sum over bundle parts (code + decoder feature volumes) of the mean squared
// difference between the two bundles.
Tensor shape_loss(const std::vector<Tensor>& latent_gt, const std::vector<Tensor>& latent_pred);

// L_G = L_seg + lambda1 * L_shape (minimized over segmentation weights).
Tensor generator_objective(const Tensor& seg_loss_val, const Tensor& shape_loss_val,
                           const LossWeights& w);

// Minimized form of the discriminator step: L_rec - lambda2 * L_shape.
Tensor discriminator_objective(const Tensor& recon_loss_val, const Tensor& shape_loss_val,
                               const LossWeights& w);

// Stacks a sigmoid foreground probability map (1,Z,Y,X) into two-class
// probabilities (2,Z,Y,X) = [1-p, p] so binary heads reuse the same losses.
Tensor binary_probs(const Tensor& fg_prob);

}  // namespace organseg
