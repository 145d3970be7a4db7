#include "organseg/objective.hpp"

#include <cmath>
#include <stdexcept>

#include "organseg/ops.hpp"

namespace organseg {

void validate_loss_weights(const LossWeights& w, std::int64_t num_classes) {
    if (w.gamma < 0.0 || !std::isfinite(w.gamma))
        throw std::invalid_argument("loss weights: gamma must be finite and >= 0");
    for (double v : {w.lambda_seg, w.lambda1, w.lambda2})
        if (v < 0.0 || !std::isfinite(v))
            throw std::invalid_argument("loss weights: lambda values must be finite and >= 0");
    if (!w.alpha.empty()) {
        if (static_cast<std::int64_t>(w.alpha.size()) != num_classes)
            throw std::invalid_argument("loss weights: alpha length != class count");
        for (double a : w.alpha)
            if (a < 0.0 || !std::isfinite(a))
                throw std::invalid_argument("loss weights: alpha entries must be finite and >= 0");
    }
}

std::vector<double> alpha_from_voxel_counts(const std::vector<double>& mean_voxels) {
    std::vector<double> alpha(mean_voxels.size());
    double total = 0.0;
    for (std::size_t i = 0; i < mean_voxels.size(); ++i) {
        if (mean_voxels[i] <= 0.0)
            throw std::invalid_argument("alpha_from_voxel_counts: class with no voxels");
        alpha[i] = 1.0 / mean_voxels[i];
        total += alpha[i];
    }
    const double norm = static_cast<double>(alpha.size()) / total;
    for (auto& a : alpha) a *= norm;
    return alpha;
}

namespace {

void require_probs_targets(const Tensor& probs, const Tensor& targets, const char* op) {
    if (probs.shape().size() != 4)
        throw std::invalid_argument(std::string(op) + ": probs must be (C,Z,Y,X)");
    if (probs.shape() != targets.shape())
        throw std::invalid_argument(std::string(op) + ": probs/targets shape mismatch " +
                                    shape_str(probs.shape()) + " vs " +
                                    shape_str(targets.shape()));
}

Tensor reduce_voxels(const Tensor& summed_over_classes_total, std::int64_t voxels,
                     LossReduction r) {
    if (r == LossReduction::sum) return summed_over_classes_total;
    return scalar_mul(summed_over_classes_total, 1.0 / static_cast<double>(voxels));
}

Tensor alpha_tensor(const LossWeights& w, std::int64_t C) {
    std::vector<double> a = w.alpha.empty() ? std::vector<double>(static_cast<std::size_t>(C), 1.0)
                                            : w.alpha;
    return Tensor::from_values({C}, std::move(a));
}

}  // namespace

Tensor focal_loss(const Tensor& probs, const Tensor& targets, const LossWeights& w) {
    require_probs_targets(probs, targets, "focal_loss");
    validate_loss_weights(w, probs.dim(0));
    const std::int64_t voxels = probs.numel() / probs.dim(0);
    const Tensor p = clamp(probs, w.prob_clamp, 1.0 - w.prob_clamp);
    // -(1-p)^gamma log(p) on target entries only
    Tensor term = mul(pow_scalar(scalar_add(scalar_mul(p, -1.0), 1.0), w.gamma),
                      scalar_mul(log_of(p), -1.0));
    term = mul(term, targets);
    term = scale_channels(term, alpha_tensor(w, probs.dim(0)));
    return reduce_voxels(sum_all(term), voxels, w.reduction);
}

Tensor dice_loss(const Tensor& probs, const Tensor& targets, const LossWeights& w) {
    require_probs_targets(probs, targets, "dice_loss");
    validate_loss_weights(w, probs.dim(0));
    const std::int64_t C = probs.dim(0);
    const Tensor inter = sum_spatial(mul(probs, targets));     // (C)
    const Tensor denom = scalar_add(add(sum_spatial(probs), sum_spatial(targets)), w.dice_smooth);
    const Tensor frac = divide(scalar_add(scalar_mul(inter, 2.0), w.dice_smooth), denom);
    const Tensor per_class = scalar_add(scalar_mul(frac, -1.0), 1.0);
    (void)C;
    return sum_all(per_class);
}

Tensor seg_loss(const Tensor& probs, const Tensor& targets, const LossWeights& w) {
    const Tensor f = focal_loss(probs, targets, w);
    if (w.lambda_seg == 0.0) return f;
    return add(f, scalar_mul(dice_loss(probs, targets, w), w.lambda_seg));
}

Tensor recon_loss(const Tensor& aae_out_gt, const Tensor& gt_mask, const Tensor& aae_out_pred,
                  const Tensor& pred_mask) {
    if (aae_out_gt.shape() != gt_mask.shape() || aae_out_pred.shape() != pred_mask.shape() ||
        aae_out_gt.shape() != aae_out_pred.shape())
        throw std::invalid_argument("recon_loss: all four volumes must share the ROI shape");
    const Tensor t1 = mse_loss(aae_out_gt, detach(gt_mask));
    const Tensor t2 = mse_loss(aae_out_pred, detach(pred_mask));
    return add(t1, t2);
}

Tensor shape_loss(const std::vector<Tensor>& latent_gt, const std::vector<Tensor>& latent_pred) {
    if (latent_gt.size() != latent_pred.size() || latent_gt.empty())
        throw std::invalid_argument("shape_loss: latent bundles must match and be non-empty");
    Tensor total;
    for (std::size_t i = 0; i < latent_gt.size(); ++i) {
        if (latent_gt[i].shape() != latent_pred[i].shape())
            throw std::invalid_argument("shape_loss: bundle part " + std::to_string(i) +
                                        " shape mismatch");
        const Tensor part = mse_loss(latent_gt[i], latent_pred[i]);
        total = total.defined() ? add(total, part) : part;
    }
    return total;
}

Tensor generator_objective(const Tensor& seg_loss_val, const Tensor& shape_loss_val,
                           const LossWeights& w) {
    if (w.lambda1 == 0.0) return seg_loss_val;
    return add(seg_loss_val, scalar_mul(shape_loss_val, w.lambda1));
}

Tensor discriminator_objective(const Tensor& recon_loss_val, const Tensor& shape_loss_val,
                               const LossWeights& w) {
    if (w.lambda2 == 0.0) return recon_loss_val;
    return sub(recon_loss_val, scalar_mul(shape_loss_val, w.lambda2));
}

Tensor binary_probs(const Tensor& fg_prob) {
    if (fg_prob.shape().size() != 4 || fg_prob.dim(0) != 1)
        throw std::invalid_argument("binary_probs: expected (1,Z,Y,X)");
    return concat_channels({scalar_add(scalar_mul(fg_prob, -1.0), 1.0), fg_prob});
}

}  // namespace organseg
