#include "organseg/focus.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace organseg {

Volume make_heatmap(const Vec3d& c, Vec3i shape, const Vec3d& spacing, double sigma) {
    for (int a = 0; a < 3; ++a) {
        if (c[a] < 0.0 || c[a] > static_cast<double>(shape[a] - 1))
            throw std::invalid_argument("make_heatmap: centroid outside shape on axis " +
                                        std::to_string(a));
    }
    if (!(sigma > 0.0)) throw std::invalid_argument("make_heatmap: sigma must be positive");
    Volume h(shape, spacing);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (std::int64_t z = 0; z < shape[0]; ++z) {
        const double dz = static_cast<double>(z) - c[0];
        for (std::int64_t y = 0; y < shape[1]; ++y) {
            const double dy = static_cast<double>(y) - c[1];
            for (std::int64_t x = 0; x < shape[2]; ++x) {
                const double dx = static_cast<double>(x) - c[2];
                h.at(z, y, x) = std::exp(-(dz * dz + dy * dy + dx * dx) * inv);
            }
        }
    }
    return h;
}

Vec3i find_peak(const Volume& heatmap) {
    if (heatmap.data.empty()) throw std::invalid_argument("find_peak: empty volume");
    double best = -std::numeric_limits<double>::infinity();
    std::int64_t best_idx = -1;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(heatmap.data.size()); ++i) {
        if (heatmap.data[static_cast<std::size_t>(i)] > best) {
            best = heatmap.data[static_cast<std::size_t>(i)];
            best_idx = i;
        }
    }
    if (best_idx < 0) throw std::invalid_argument("find_peak: all values are NaN");
    const std::int64_t plane = heatmap.shape[1] * heatmap.shape[2];
    return {best_idx / plane, (best_idx / heatmap.shape[2]) % heatmap.shape[1],
            best_idx % heatmap.shape[2]};
}

RoiBox roi_box(const Vec3i& center, const Vec3i& size, const Vec3i& bounds) {
    RoiBox box;
    box.size = size;
    for (int a = 0; a < 3; ++a) {
        if (size[a] > bounds[a])
            throw std::invalid_argument("roi_box: size exceeds bounds on axis " +
                                        std::to_string(a));
        std::int64_t s = center[a] - size[a] / 2;
        s = std::clamp<std::int64_t>(s, 0, bounds[a] - size[a]);
        box.start[a] = s;
    }
    return box;
}

namespace {

template <typename GridT>
GridT roi_pool_impl(const GridT& g, const RoiBox& box) {
    for (int a = 0; a < 3; ++a) {
        if (box.start[a] < 0 || box.start[a] + box.size[a] > g.shape[a])
            throw std::invalid_argument("roi_pool: box out of bounds on axis " +
                                        std::to_string(a));
    }
    GridT out(box.size, g.spacing, {},
              g.to_mm({static_cast<double>(box.start[0]), static_cast<double>(box.start[1]),
                       static_cast<double>(box.start[2])}));
    for (std::int64_t z = 0; z < box.size[0]; ++z)
        for (std::int64_t y = 0; y < box.size[1]; ++y) {
            const auto* src =
                &g.data[g.index(box.start[0] + z, box.start[1] + y, box.start[2])];
            std::copy(src, src + box.size[2], &out.data[out.index(z, y, 0)]);
        }
    return out;
}

}  // namespace

Volume roi_pool(const Volume& v, const RoiBox& box) { return roi_pool_impl(v, box); }
LabelMap roi_pool(const LabelMap& l, const RoiBox& box) { return roi_pool_impl(l, box); }

LabelMap overlay(const LabelMap& large_pred, const std::vector<SmallOrganPrediction>& small_preds,
                 const std::vector<int>& roster_class_ids, double threshold) {
    LabelMap out = large_pred;
    // probability of the small-organ claim currently holding each voxel
    std::vector<double> claim(out.data.size(), -1.0);
    for (const auto& sp : small_preds) {
        if (std::find(roster_class_ids.begin(), roster_class_ids.end(), sp.class_id) ==
            roster_class_ids.end())
            throw std::invalid_argument("overlay: class id " + std::to_string(sp.class_id) +
                                        " not in roster");
        if (sp.mask.shape != sp.box.size)
            throw std::invalid_argument("overlay: mask shape does not match box size");
        for (int a = 0; a < 3; ++a)
            if (sp.box.start[a] < 0 || sp.box.start[a] + sp.box.size[a] > out.shape[a])
                throw std::invalid_argument("overlay: box out of bounds");
        for (std::int64_t z = 0; z < sp.box.size[0]; ++z)
            for (std::int64_t y = 0; y < sp.box.size[1]; ++y)
                for (std::int64_t x = 0; x < sp.box.size[2]; ++x) {
                    const double p = sp.mask.at(z, y, x);
                    if (p < threshold) continue;
                    const std::int64_t o = out.index(sp.box.start[0] + z, sp.box.start[1] + y,
                                                     sp.box.start[2] + x);
                    const double held = claim[static_cast<std::size_t>(o)];
                    if (p > held ||
                        (p == held && sp.class_id < static_cast<int>(out.data[o]))) {
                        out.data[o] = static_cast<std::uint16_t>(sp.class_id);
                        claim[static_cast<std::size_t>(o)] = p;
                    }
                }
    }
    return out;
}

Vec3d jitter_centroid(const Vec3d& centroid_mm, double distance_mm, Rng& rng,
                      const Volume& bounds) {
    if (distance_mm < 0.0) throw std::invalid_argument("jitter_centroid: negative distance");
    Vec3d out = centroid_mm;
    if (distance_mm > 0.0) {
        double u[3];
        double norm = 0.0;
        do {
            norm = 0.0;
            for (double& v : u) {
                v = rng.normal();
                norm += v * v;
            }
            norm = std::sqrt(norm);
        } while (norm < 1e-12);
        for (int a = 0; a < 3; ++a) out[a] += distance_mm * u[a] / norm;
    }
    for (int a = 0; a < 3; ++a) {
        const double lo = bounds.origin[a];
        const double hi =
            bounds.origin[a] + (static_cast<double>(bounds.shape[a]) - 1.0) * bounds.spacing[a];
        out[a] = std::clamp(out[a], lo, hi);
    }
    return out;
}

}  // namespace organseg
