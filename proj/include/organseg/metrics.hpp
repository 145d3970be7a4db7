#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "organseg/grid.hpp"
#include "organseg/phantom.hpp"

namespace organseg {

// Binary mask on Volume geometry, value-packed as bytes.
struct Mask {
    std::vector<std::uint8_t> data;
    Vec3i shape{0, 0, 0};

    std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return (z * shape[1] + y) * shape[2] + x;
    }
    std::int64_t count() const;
};

Mask mask_of_class(const LabelMap& labels, int class_id);

// 2|X n Y| / (|X| + |Y|); both empty -> 1, exactly one empty -> 0.
double dsc(const Mask& pred, const Mask& gt);

// Symmetric 95th-percentile surface distance in mm: boundary voxels under
// 6-connectivity (volume border counts as outside), directed nearest-neighbor
// distances via an exact anisotropic euclidean distance transform, 95th
// percentile with linear interpolation, mean of the two directions.
// Throws UndefinedMetric when either mask is empty.
double hd95(const Mask& pred, const Mask& gt, const Vec3d& spacing_mm);

// Boundary voxel extraction, exposed for tests.
std::vector<Vec3i> boundary_voxels(const Mask& m);

// Linear-interpolation percentile of unsorted values, q in [0,1].
double percentile(std::vector<double> values, double q);

struct LocalizationTable {
    double mean_error_mm = 0.0;
    std::vector<double> thresholds_mm;
    std::vector<double> rates;  // fraction of organs within each threshold
    std::int64_t organ_count = 0;
};

LocalizationTable localization_stats(const std::map<int, Vec3d>& pred_centroids_mm,
                                     const std::map<int, Vec3d>& gt_centroids_mm,
                                     const std::vector<double>& thresholds_mm);

struct OrganRow {
    int class_id = 0;
    std::string name;
    SizeClass size_class = SizeClass::large;
    double dsc = 0.0;
    std::optional<double> hd95_mm;  // empty when undefined (empty prediction)
};

struct CaseMetrics {
    std::string case_id;
    std::vector<OrganRow> organs;
};

// Per-class binarization of pred vs gt over the roster.
CaseMetrics evaluate_case(const LabelMap& pred, const LabelMap& gt,
                          const std::vector<OrganSpec>& roster);

struct MetricReport {
    std::vector<OrganRow> organs;          // per-organ means over cases
    double mean_dsc_all = 0.0;             // mean of per-organ rows
    double mean_dsc_small = 0.0;
    std::optional<double> mean_hd95_all;   // over organs with defined hd95
    std::optional<double> mean_hd95_small;
    int hd95_undefined_cases = 0;          // excluded (organ, case) pairs
    std::optional<LocalizationTable> localization;
    std::int64_t case_count = 0;
};

MetricReport aggregate_metrics(const std::vector<CaseMetrics>& cases,
                               const std::vector<OrganSpec>& roster);

}  // namespace organseg
