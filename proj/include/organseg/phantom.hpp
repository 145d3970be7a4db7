#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "organseg/grid.hpp"

namespace organseg {

enum class ShapeKind { ellipsoid, x_cross, tube };
enum class SizeClass { large, small };

// radius_mm meaning by kind (axes z, y, x):
//   ellipsoid: semi-axes.
//   tube:      [0] = half-length along z, [1],[2] = in-plane semi-axes.
//   x_cross:   [0] = half-thickness along z, [1] = bar half-length,
//              [2] = bar half-width; two bars crossed at +/- cross_angle_deg.
struct OrganSpec {
    int class_id = 0;
    std::string name;
    ShapeKind kind = ShapeKind::ellipsoid;
    SizeClass size_class = SizeClass::large;
    Vec3d radius_mm{1, 1, 1};
    double contrast = 0.0;      // mean intensity offset from background
    double intensity_sd = 0.0;  // extra per-voxel texture inside the organ
    Vec3d centroid_lo{0.4, 0.4, 0.4};  // fractional centroid-sampling box
    Vec3d centroid_hi{0.6, 0.6, 0.6};
    double cross_angle_deg = 40.0;
};

struct GeneratorConfig {
    Vec3i shape{32, 96, 96};
    Vec3d spacing{3.0, 1.0, 1.0};
    double background = 0.0;
    double noise_sd = 8.0;
    double bias_amplitude = 4.0;
    double imbalance_target = 100.0;
    Vec3i roi_size{8, 32, 32};  // small organs must fit with >= 2 voxel margin
    int max_place_attempts = 50;
};

struct CaseRecord {
    std::string case_id;
    Volume image;
    LabelMap labels;
    std::map<int, Vec3d> centroids_mm;  // class_id -> label-mass centroid
    std::vector<OrganSpec> roster;
};

// 6 organs: two large ellipsoids, one large tube, two small ellipsoids and
// one small x-cross; defaults reach voxel imbalance >= 100:1.
std::vector<OrganSpec> default_roster();

void validate_roster(const std::vector<OrganSpec>& roster);

nlohmann::json organ_to_json(const OrganSpec& organ);
OrganSpec organ_from_json(const nlohmann::json& j);

CaseRecord generate_case(const std::vector<OrganSpec>& roster, const GeneratorConfig& cfg,
                         std::uint64_t seed, const std::string& case_id);

// Voxel-mass centroid of one class in mm; throws if the class is absent.
Vec3d label_centroid_mm(const LabelMap& labels, int class_id);

std::map<int, std::int64_t> label_voxel_counts(const LabelMap& labels);

struct DatasetManifest {
    std::filesystem::path root;
    Vec3i shape{32, 96, 96};
    Vec3d spacing{3.0, 1.0, 1.0};
    std::vector<OrganSpec> roster;
    std::vector<std::string> train_cases;
    std::vector<std::string> test_cases;
    std::uint64_t seed = 0;
    GeneratorConfig gen;
};

// Layout under root: manifest.json, <case>_img.raw/.json, <case>_lab.raw/.json,
// <case>_meta.json (centroids).
void write_manifest(const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& root);

void write_case(const std::filesystem::path& root, const CaseRecord& rec);
CaseRecord read_case(const DatasetManifest& m, const std::string& case_id);

// Generates and writes the full dataset; per-case seeds derive from
// (manifest seed, case index). Returns the written manifest.
DatasetManifest generate_dataset(const std::filesystem::path& root,
                                 const std::vector<OrganSpec>& roster,
                                 const GeneratorConfig& cfg, std::uint64_t seed,
                                 int train_cases, int test_cases);

}  // namespace organseg
