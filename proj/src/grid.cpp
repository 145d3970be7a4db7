#include "organseg/grid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace organseg {

namespace {

void check_spacing(const Vec3d& s, const char* where) {
    for (int a = 0; a < 3; ++a) {
        if (!(s[a] > 0.0) || !std::isfinite(s[a]))
            throw std::invalid_argument(std::string(where) + ": spacing must be strictly positive");
    }
}

void check_shape(const Vec3i& s, const char* where) {
    for (int a = 0; a < 3; ++a) {
        if (s[a] < 1)
            throw std::invalid_argument(std::string(where) + ": shape components must be >= 1");
    }
}

// Nearest index for a continuous coordinate; exact half-voxel ties resolve
// toward the lower index.
std::int64_t nearest_index(double c, std::int64_t n) {
    const std::int64_t i = static_cast<std::int64_t>(std::ceil(c - 0.5));
    return std::clamp<std::int64_t>(i, 0, n - 1);
}

// Continuous input coordinate of output voxel j under center alignment.
inline double map_coord(std::int64_t j, double out_spacing, double in_spacing) {
    return ((static_cast<double>(j) + 0.5) * out_spacing) / in_spacing - 0.5;
}

Vec3i resampled_shape(const Vec3i& shape, const Vec3d& spacing, const Vec3d& target) {
    Vec3i out{};
    for (int a = 0; a < 3; ++a) {
        const double extent = static_cast<double>(shape[a]) * spacing[a];
        out[a] = std::max<std::int64_t>(1, std::llround(extent / target[a]));
    }
    return out;
}

Vec3d resampled_origin(const Vec3d& origin, const Vec3d& spacing, const Vec3d& target) {
    Vec3d out{};
    for (int a = 0; a < 3; ++a) out[a] = origin[a] + 0.5 * (target[a] - spacing[a]);
    return out;
}

}  // namespace

Volume::Volume(Vec3i shape_, Vec3d spacing_, double fill, Vec3d origin_)
    : data(static_cast<std::size_t>(numel(shape_)), fill),
      shape(shape_), spacing(spacing_), origin(origin_) {
    check_shape(shape, "Volume");
    check_spacing(spacing, "Volume");
}

LabelMap::LabelMap(Vec3i shape_, Vec3d spacing_, std::uint16_t fill, Vec3d origin_)
    : data(static_cast<std::size_t>(numel(shape_)), fill),
      shape(shape_), spacing(spacing_), origin(origin_) {
    check_shape(shape, "LabelMap");
    check_spacing(spacing, "LabelMap");
}

Vec3d Volume::to_mm(const Vec3d& voxel) const {
    return {origin[0] + voxel[0] * spacing[0], origin[1] + voxel[1] * spacing[1],
            origin[2] + voxel[2] * spacing[2]};
}

Vec3d Volume::to_voxel(const Vec3d& mm) const {
    return {(mm[0] - origin[0]) / spacing[0], (mm[1] - origin[1]) / spacing[1],
            (mm[2] - origin[2]) / spacing[2]};
}

Vec3d LabelMap::to_mm(const Vec3d& voxel) const {
    return {origin[0] + voxel[0] * spacing[0], origin[1] + voxel[1] * spacing[1],
            origin[2] + voxel[2] * spacing[2]};
}

Vec3d LabelMap::to_voxel(const Vec3d& mm) const {
    return {(mm[0] - origin[0]) / spacing[0], (mm[1] - origin[1]) / spacing[1],
            (mm[2] - origin[2]) / spacing[2]};
}

void Volume::validate(const char* where) const {
    check_shape(shape, where);
    check_spacing(spacing, where);
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
        throw std::invalid_argument(std::string(where) + ": data size does not match shape");
    for (double v : data) {
        if (!std::isfinite(v))
            throw std::invalid_argument(std::string(where) + ": non-finite voxel value");
    }
}

void LabelMap::validate(const char* where) const {
    check_shape(shape, where);
    check_spacing(spacing, where);
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
        throw std::invalid_argument(std::string(where) + ": data size does not match shape");
}

void require_geometry_match(const Volume& v, const LabelMap& l, const char* where) {
    if (v.shape != l.shape || v.spacing != l.spacing || v.origin != l.origin)
        throw std::invalid_argument(std::string(where) + ": image/label geometry mismatch");
}

namespace {

template <typename T, typename Fetch>
void resample_grid(const Vec3i& in_shape, const Vec3i& out_shape, const Vec3d& in_spacing,
                   const Vec3d& target, Interp mode, const T* in, T* out, Fetch fetch) {
    const std::int64_t Zo = out_shape[0], Yo = out_shape[1], Xo = out_shape[2];
#pragma omp parallel for schedule(static)
    for (std::int64_t z = 0; z < Zo; ++z) {
        const double cz = map_coord(z, target[0], in_spacing[0]);
        for (std::int64_t y = 0; y < Yo; ++y) {
            const double cy = map_coord(y, target[1], in_spacing[1]);
            for (std::int64_t x = 0; x < Xo; ++x) {
                const double cx = map_coord(x, target[2], in_spacing[2]);
                out[(z * Yo + y) * Xo + x] = fetch(in, in_shape, cz, cy, cx, mode);
            }
        }
    }
}

double fetch_trilinear(const double* in, const Vec3i& s, double cz, double cy, double cx) {
    const auto sample = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
        z = std::clamp<std::int64_t>(z, 0, s[0] - 1);
        y = std::clamp<std::int64_t>(y, 0, s[1] - 1);
        x = std::clamp<std::int64_t>(x, 0, s[2] - 1);
        return in[(z * s[1] + y) * s[2] + x];
    };
    const double fz = std::floor(cz), fy = std::floor(cy), fx = std::floor(cx);
    const double wz = cz - fz, wy = cy - fy, wx = cx - fx;
    const std::int64_t z0 = static_cast<std::int64_t>(fz);
    const std::int64_t y0 = static_cast<std::int64_t>(fy);
    const std::int64_t x0 = static_cast<std::int64_t>(fx);
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz) {
        const double az = dz ? wz : 1.0 - wz;
        if (az == 0.0) continue;
        for (int dy = 0; dy < 2; ++dy) {
            const double ay = dy ? wy : 1.0 - wy;
            if (ay == 0.0) continue;
            for (int dx = 0; dx < 2; ++dx) {
                const double ax = dx ? wx : 1.0 - wx;
                if (ax == 0.0) continue;
                acc += az * ay * ax * sample(z0 + dz, y0 + dy, x0 + dx);
            }
        }
    }
    return acc;
}

template <typename T>
T fetch_nearest(const T* in, const Vec3i& s, double cz, double cy, double cx) {
    const std::int64_t z = nearest_index(cz, s[0]);
    const std::int64_t y = nearest_index(cy, s[1]);
    const std::int64_t x = nearest_index(cx, s[2]);
    return in[(z * s[1] + y) * s[2] + x];
}

}  // namespace

Volume resample(const Volume& v, Vec3d target, Interp mode) {
    check_spacing(target, "resample");
    v.validate("resample input");
    Volume out(resampled_shape(v.shape, v.spacing, target), target, 0.0,
               resampled_origin(v.origin, v.spacing, target));
    resample_grid(v.shape, out.shape, v.spacing, target, mode, v.data.data(), out.data.data(),
                  [](const double* in, const Vec3i& s, double cz, double cy, double cx, Interp m) {
                      return m == Interp::trilinear ? fetch_trilinear(in, s, cz, cy, cx)
                                                    : fetch_nearest(in, s, cz, cy, cx);
                  });
    out.validate("resample output");
    return out;
}

LabelMap resample(const LabelMap& l, Vec3d target, Interp mode) {
    check_spacing(target, "resample");
    if (mode != Interp::nearest)
        throw std::invalid_argument("resample: LabelMap requires nearest mode");
    LabelMap out(resampled_shape(l.shape, l.spacing, target), target, 0,
                 resampled_origin(l.origin, l.spacing, target));
    resample_grid(l.shape, out.shape, l.spacing, target, mode, l.data.data(), out.data.data(),
                  [](const std::uint16_t* in, const Vec3i& s, double cz, double cy, double cx,
                     Interp) { return fetch_nearest(in, s, cz, cy, cx); });
    return out;
}

namespace {

template <typename GridT>
GridT central_crop_impl(const GridT& g, Vec3i size, const char* where) {
    check_shape(size, where);
    Vec3i start{};
    for (int a = 0; a < 3; ++a) {
        if (size[a] > g.shape[a])
            throw std::invalid_argument(std::string(where) + ": crop size exceeds shape");
        start[a] = (g.shape[a] - size[a]) / 2;
    }
    GridT out(size, g.spacing, {}, g.to_mm({static_cast<double>(start[0]),
                                            static_cast<double>(start[1]),
                                            static_cast<double>(start[2])}));
    for (std::int64_t z = 0; z < size[0]; ++z)
        for (std::int64_t y = 0; y < size[1]; ++y) {
            const auto* src = &g.data[g.index(start[0] + z, start[1] + y, start[2])];
            auto* dst = &out.data[out.index(z, y, 0)];
            std::copy(src, src + size[2], dst);
        }
    return out;
}

template <typename GridT>
Chunked<GridT> chunk_z_impl(const GridT& g, std::int64_t chunk, std::int64_t stride) {
    if (chunk < 1 || stride < 1)
        throw std::invalid_argument("chunk_z: chunk and stride must be >= 1");
    Chunked<GridT> out;
    out.full_shape = g.shape;
    for (std::int64_t start = 0; start < g.shape[0]; start += stride) {
        const std::int64_t valid_end = std::min(start + chunk, g.shape[0]);
        GridT c({chunk, g.shape[1], g.shape[2]}, g.spacing, {},
                g.to_mm({static_cast<double>(start), 0.0, 0.0}));
        const std::int64_t plane = g.shape[1] * g.shape[2];
        std::copy(g.data.begin() + start * plane, g.data.begin() + valid_end * plane,
                  c.data.begin());
        out.chunks.push_back(std::move(c));
        out.ranges.push_back({start, valid_end});
    }
    return out;
}

template <typename GridT>
GridT stitch_z_impl(const std::vector<GridT>& chunks, const std::vector<ZRange>& ranges,
                    Vec3i full_shape) {
    if (chunks.size() != ranges.size() || chunks.empty())
        throw std::invalid_argument("stitch_z: chunk/range count mismatch");
    std::vector<std::size_t> order(ranges.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return ranges[a].z0 < ranges[b].z0; });
    std::int64_t cursor = 0;
    for (std::size_t i : order) {
        if (ranges[i].z0 != cursor || ranges[i].z1 <= ranges[i].z0)
            throw std::invalid_argument("stitch_z: ranges must tile [0, z) without gaps or overlap");
        cursor = ranges[i].z1;
    }
    if (cursor != full_shape[0])
        throw std::invalid_argument("stitch_z: ranges do not cover the full z extent");

    const GridT& first = chunks[order[0]];
    GridT out(full_shape, first.spacing, {}, first.origin);
    const std::int64_t plane = full_shape[1] * full_shape[2];
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        const GridT& c = chunks[i];
        if (c.shape[1] != full_shape[1] || c.shape[2] != full_shape[2])
            throw std::invalid_argument("stitch_z: chunk in-plane shape mismatch");
        const std::int64_t valid = ranges[i].z1 - ranges[i].z0;
        if (valid > c.shape[0])
            throw std::invalid_argument("stitch_z: valid range longer than chunk");
        std::copy(c.data.begin(), c.data.begin() + valid * plane,
                  out.data.begin() + ranges[i].z0 * plane);
    }
    return out;
}

}  // namespace

Volume central_crop(const Volume& v, Vec3i size) { return central_crop_impl(v, size, "central_crop"); }
LabelMap central_crop(const LabelMap& l, Vec3i size) { return central_crop_impl(l, size, "central_crop"); }

Chunked<Volume> chunk_z(const Volume& v, std::int64_t chunk, std::int64_t stride) {
    return chunk_z_impl(v, chunk, stride);
}
Chunked<LabelMap> chunk_z(const LabelMap& l, std::int64_t chunk, std::int64_t stride) {
    return chunk_z_impl(l, chunk, stride);
}

Volume stitch_z(const std::vector<Volume>& chunks, const std::vector<ZRange>& ranges,
                Vec3i full_shape) {
    return stitch_z_impl(chunks, ranges, full_shape);
}
LabelMap stitch_z(const std::vector<LabelMap>& chunks, const std::vector<ZRange>& ranges,
                  Vec3i full_shape) {
    return stitch_z_impl(chunks, ranges, full_shape);
}

AffineParams sample_affine(Rng& rng, const AffineBounds& b) {
    AffineParams p;
    for (int a = 0; a < 3; ++a)
        p.translation[a] = b.max_translation[a] == 0.0
                               ? 0.0
                               : rng.uniform(-b.max_translation[a], b.max_translation[a]);
    p.rotation_deg = rng.uniform(-b.max_rotation_deg, b.max_rotation_deg);
    p.scale = rng.uniform(b.scale_min, b.scale_max);
    return p;
}

std::pair<Volume, LabelMap> random_affine(const Volume& image, const LabelMap& labels,
                                          const AffineParams& p, double fill_value) {
    require_geometry_match(image, labels, "random_affine");
    if (p.rotation_deg < -10.0 || p.rotation_deg > 10.0)
        throw std::invalid_argument("random_affine: rotation outside [-10, 10] degrees");
    if (p.scale < 0.7 || p.scale > 1.3)
        throw std::invalid_argument("random_affine: scale outside [0.7, 1.3]");

    const Vec3i s = image.shape;
    Volume out_img(s, image.spacing, 0.0, image.origin);
    LabelMap out_lab(s, labels.spacing, 0, labels.origin);

    const double theta = p.rotation_deg * 3.14159265358979323846 / 180.0;
    const double cos_t = std::cos(theta), sin_t = std::sin(theta);
    const double cy = 0.5 * static_cast<double>(s[1] - 1);
    const double cx = 0.5 * static_cast<double>(s[2] - 1);

#pragma omp parallel for schedule(static)
    for (std::int64_t z = 0; z < s[0]; ++z) {
        const double zi = static_cast<double>(z) - p.translation[0];
        const bool z_in = zi >= -0.5 && zi <= static_cast<double>(s[0]) - 0.5;
        for (std::int64_t y = 0; y < s[1]; ++y) {
            for (std::int64_t x = 0; x < s[2]; ++x) {
                // inverse map: undo translation, then rotation/scale about center
                const double ry = (static_cast<double>(y) - p.translation[1]) - cy;
                const double rx = (static_cast<double>(x) - p.translation[2]) - cx;
                const double yi = cy + (cos_t * ry + sin_t * rx) / p.scale;
                const double xi = cx + (-sin_t * ry + cos_t * rx) / p.scale;
                const std::int64_t o = (z * s[1] + y) * s[2] + x;
                const bool inside = z_in && yi >= -0.5 && yi <= static_cast<double>(s[1]) - 0.5 &&
                                    xi >= -0.5 && xi <= static_cast<double>(s[2]) - 0.5;
                if (!inside) {
                    out_img.data[o] = fill_value;
                    out_lab.data[o] = 0;
                    continue;
                }
                out_img.data[o] = fetch_trilinear(image.data.data(), s, zi, yi, xi);
                out_lab.data[o] = fetch_nearest(labels.data.data(), s, zi, yi, xi);
            }
        }
    }
    out_img.validate("random_affine output");
    return {std::move(out_img), std::move(out_lab)};
}

}  // namespace organseg
