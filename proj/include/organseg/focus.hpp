#pragma once

#include <vector>

#include "organseg/grid.hpp"
#include "organseg/tensor.hpp"

namespace organseg {

// Fixed-size axis-aligned ROI around a small-structure center. Boxes are
// shifted to stay in bounds, never truncated, so start >= 0 and
// start + size <= volume shape always hold.
struct RoiBox {
    Vec3i start{0, 0, 0};
    Vec3i size{8, 64, 64};
};

// Gaussian center heatmap: value(v) = exp(-||v - centroid||^2 / (2 sigma^2))
// with distance measured in voxels, isotropic in index space. Peak value 1.
Volume make_heatmap(const Vec3d& centroid_voxel, Vec3i shape, const Vec3d& spacing,
                    double sigma_voxels = 5.0);

// Coordinate of the maximum; ties break to the smallest (z, then y, then x).
// NaN values never win; throws if every value is NaN.
Vec3i find_peak(const Volume& heatmap);

// Box of the given size centered on `center` (start = center - size/2,
// floor), shifted minimally per axis into [0, bounds).
RoiBox roi_box(const Vec3i& center, const Vec3i& size, const Vec3i& bounds);

// Exact sub-array copies, full-resolution index space.
Volume roi_pool(const Volume& v, const RoiBox& box);
LabelMap roi_pool(const LabelMap& l, const RoiBox& box);

struct SmallOrganPrediction {
    int class_id = 0;
    RoiBox box;
    Volume mask;  // probability volume at box size
};

// Writes small-organ masks over the large-organ labels inside their boxes.
// Voxels with mask >= threshold take the organ's class id; where two masks
// claim one voxel the higher probability wins, ties to the lower class id.
LabelMap overlay(const LabelMap& large_pred, const std::vector<SmallOrganPrediction>& small_preds,
                 const std::vector<int>& roster_class_ids, double threshold = 0.5);

// Adds a displacement of exactly `distance_mm` in a uniformly random
// direction, then clamps into the volume's physical bounds.
Vec3d jitter_centroid(const Vec3d& centroid_mm, double distance_mm, Rng& rng,
                      const Volume& bounds);

}  // namespace organseg
