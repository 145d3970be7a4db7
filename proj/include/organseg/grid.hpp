#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "organseg/rng.hpp"

namespace organseg {

// Axis order is (z, y, x) everywhere: shapes, spacings, origins, loops.

using Vec3i = std::array<std::int64_t, 3>;
using Vec3d = std::array<double, 3>;

inline std::int64_t numel(const Vec3i& s) { return s[0] * s[1] * s[2]; }

// 3D scalar grid with physical voxel spacing. data is C-order, z major.
struct Volume {
    std::vector<double> data;
    Vec3i shape{0, 0, 0};
    Vec3d spacing{1.0, 1.0, 1.0};
    Vec3d origin{0.0, 0.0, 0.0};

    Volume() = default;
    Volume(Vec3i shape, Vec3d spacing, double fill = 0.0, Vec3d origin = {0, 0, 0});

    std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return (z * shape[1] + y) * shape[2] + x;
    }
    double& at(std::int64_t z, std::int64_t y, std::int64_t x) { return data[index(z, y, x)]; }
    double at(std::int64_t z, std::int64_t y, std::int64_t x) const { return data[index(z, y, x)]; }

    // Physical coordinate of a voxel center.
    Vec3d to_mm(const Vec3d& voxel) const;
    Vec3d to_voxel(const Vec3d& mm) const;

    void validate(const char* where) const;  // spacing > 0, shape >= 1, finite data
};

// 3D integer class-id grid sharing Volume geometry. 0 = background.
struct LabelMap {
    std::vector<std::uint16_t> data;
    Vec3i shape{0, 0, 0};
    Vec3d spacing{1.0, 1.0, 1.0};
    Vec3d origin{0.0, 0.0, 0.0};

    LabelMap() = default;
    LabelMap(Vec3i shape, Vec3d spacing, std::uint16_t fill = 0, Vec3d origin = {0, 0, 0});

    std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return (z * shape[1] + y) * shape[2] + x;
    }
    std::uint16_t& at(std::int64_t z, std::int64_t y, std::int64_t x) { return data[index(z, y, x)]; }
    std::uint16_t at(std::int64_t z, std::int64_t y, std::int64_t x) const { return data[index(z, y, x)]; }

    Vec3d to_mm(const Vec3d& voxel) const;
    Vec3d to_voxel(const Vec3d& mm) const;

    void validate(const char* where) const;
};

void require_geometry_match(const Volume& v, const LabelMap& l, const char* where);

enum class Interp { trilinear, nearest };

// Resamples to a new voxel spacing. Output extent matches input extent to
// within one output voxel; voxel centers are aligned so that identical
// spacings reproduce the input bitwise. LabelMaps require nearest mode.
Volume resample(const Volume& v, Vec3d target_spacing, Interp mode);
LabelMap resample(const LabelMap& l, Vec3d target_spacing, Interp mode);

// Crops the centered sub-box of the given size; start = floor((shape-size)/2).
Volume central_crop(const Volume& v, Vec3i size);
LabelMap central_crop(const LabelMap& l, Vec3i size);

// Valid z-slice range [z0, z1) a chunk covers in the source volume.
struct ZRange {
    std::int64_t z0 = 0;
    std::int64_t z1 = 0;
};

template <typename GridT>
struct Chunked {
    std::vector<GridT> chunks;   // all of identical z length; tail zero-padded
    std::vector<ZRange> ranges;  // valid ranges, one per chunk
    Vec3i full_shape{0, 0, 0};
};

// Splits along z into fixed-length chunks starting at 0, stride apart. The
// final partial chunk is zero-padded to full length with its valid range
// recorded.
Chunked<Volume> chunk_z(const Volume& v, std::int64_t chunk, std::int64_t stride);
Chunked<LabelMap> chunk_z(const LabelMap& l, std::int64_t chunk, std::int64_t stride);

// Inverse of chunk_z for disjoint tilings; ranges must tile [0, full z).
Volume stitch_z(const std::vector<Volume>& chunks, const std::vector<ZRange>& ranges,
                Vec3i full_shape);
LabelMap stitch_z(const std::vector<LabelMap>& chunks, const std::vector<ZRange>& ranges,
                  Vec3i full_shape);

// In-plane affine augmentation: rotation about z (degrees), isotropic in-plane
// scale, translation in voxels.
struct AffineParams {
    Vec3d translation{0.0, 0.0, 0.0};  // voxels, (z, y, x)
    double rotation_deg = 0.0;
    double scale = 1.0;
};

struct AffineBounds {
    Vec3d max_translation{0.0, 16.0, 16.0};  // voxels
    double max_rotation_deg = 10.0;
    double scale_min = 0.7;
    double scale_max = 1.3;
};

AffineParams sample_affine(Rng& rng, const AffineBounds& bounds);

// Applies the same transform to image (trilinear, out-of-field filled with
// fill_value) and labels (nearest, filled with 0).
std::pair<Volume, LabelMap> random_affine(const Volume& image, const LabelMap& labels,
                                          const AffineParams& params, double fill_value);

}  // namespace organseg
