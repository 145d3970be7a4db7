#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <queue>
#include <set>

#include "organseg/errors.hpp"
#include "organseg/phantom.hpp"

using namespace organseg;
namespace fs = std::filesystem;

namespace {

// 26-connected component count of one class, independent flood fill.
int component_count(const LabelMap& lab, int class_id) {
    std::vector<char> seen(lab.data.size(), 0);
    int components = 0;
    for (std::int64_t z = 0; z < lab.shape[0]; ++z)
        for (std::int64_t y = 0; y < lab.shape[1]; ++y)
            for (std::int64_t x = 0; x < lab.shape[2]; ++x) {
                const std::int64_t idx = lab.index(z, y, x);
                if (lab.data[idx] != class_id || seen[idx]) continue;
                ++components;
                std::queue<Vec3i> q;
                q.push({z, y, x});
                seen[idx] = 1;
                while (!q.empty()) {
                    const Vec3i p = q.front();
                    q.pop();
                    for (std::int64_t dz = -1; dz <= 1; ++dz)
                        for (std::int64_t dy = -1; dy <= 1; ++dy)
                            for (std::int64_t dx = -1; dx <= 1; ++dx) {
                                const std::int64_t nz = p[0] + dz, ny = p[1] + dy, nx = p[2] + dx;
                                if (nz < 0 || nz >= lab.shape[0] || ny < 0 ||
                                    ny >= lab.shape[1] || nx < 0 || nx >= lab.shape[2])
                                    continue;
                                const std::int64_t nidx = lab.index(nz, ny, nx);
                                if (!seen[nidx] && lab.data[nidx] == class_id) {
                                    seen[nidx] = 1;
                                    q.push({nz, ny, nx});
                                }
                            }
                }
            }
    return components;
}

}  // namespace

TEST_SUITE("phantom") {

TEST_CASE("single centered ellipsoid matches the exhaustive inside-test oracle") {
    GeneratorConfig cfg;
    cfg.shape = {16, 32, 32};
    cfg.noise_sd = 0.0;
    cfg.bias_amplitude = 0.0;
    cfg.imbalance_target = 0.0;
    OrganSpec o;
    o.class_id = 1;
    o.name = "ball";
    o.kind = ShapeKind::ellipsoid;
    o.size_class = SizeClass::large;
    o.radius_mm = {3.0, 9.0, 9.0};
    o.contrast = 25.0;
    o.centroid_lo = o.centroid_hi = {0.5, 0.5, 0.5};  // exact center

    const CaseRecord rec = generate_case({o}, cfg, 7, "t");

    // brute-force oracle over every voxel of the grid
    const Vec3d center{rec.image.origin[0] + 0.5 * (cfg.shape[0] - 1) * cfg.spacing[0],
                       rec.image.origin[1] + 0.5 * (cfg.shape[1] - 1) * cfg.spacing[1],
                       rec.image.origin[2] + 0.5 * (cfg.shape[2] - 1) * cfg.spacing[2]};
    std::int64_t oracle_count = 0;
    for (std::int64_t z = 0; z < cfg.shape[0]; ++z)
        for (std::int64_t y = 0; y < cfg.shape[1]; ++y)
            for (std::int64_t x = 0; x < cfg.shape[2]; ++x) {
                const double dz = (z * cfg.spacing[0] - (center[0] - rec.image.origin[0]))
                                  / o.radius_mm[0];
                const double dy = (y * cfg.spacing[1] - (center[1] - rec.image.origin[1]))
                                  / o.radius_mm[1];
                const double dx = (x * cfg.spacing[2] - (center[2] - rec.image.origin[2]))
                                  / o.radius_mm[2];
                if (dz * dz + dy * dy + dx * dx <= 1.0) ++oracle_count;
            }
    const auto counts = label_voxel_counts(rec.labels);
    CHECK(counts.at(1) == oracle_count);

    // zero noise: voxel values are exactly background or background+contrast
    for (std::size_t i = 0; i < rec.image.data.size(); ++i) {
        const double expect = rec.labels.data[i] == 1 ? cfg.background + o.contrast
                                                      : cfg.background;
        CHECK(rec.image.data[i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("x_cross rasterizes to one 26-connected component") {
    const auto roster = default_roster();
    GeneratorConfig cfg;
    const CaseRecord rec = generate_case(roster, cfg, 3, "t");
    int chiasm_id = 0;
    for (const auto& o : roster)
        if (o.kind == ShapeKind::x_cross) chiasm_id = o.class_id;
    REQUIRE(chiasm_id != 0);
    CHECK(component_count(rec.labels, chiasm_id) == 1);
}

TEST_CASE("same seed produces a bitwise identical case") {
    const auto roster = default_roster();
    GeneratorConfig cfg;
    const CaseRecord a = generate_case(roster, cfg, 42, "t");
    const CaseRecord b = generate_case(roster, cfg, 42, "t");
    CHECK(a.image.data == b.image.data);
    CHECK(a.labels.data == b.labels.data);
    CHECK(a.centroids_mm == b.centroids_mm);
}

TEST_CASE("default roster has 6 organs, 3 small, imbalance >= 100") {
    const auto roster = default_roster();
    CHECK(roster.size() == 6);
    int small = 0;
    for (const auto& o : roster) small += o.size_class == SizeClass::small;
    CHECK(small == 3);

    GeneratorConfig cfg;
    const CaseRecord rec = generate_case(roster, cfg, 1, "t");
    const auto counts = label_voxel_counts(rec.labels);
    std::int64_t mx = 0, mn = 1 << 30;
    for (const auto& [cid, n] : counts) {
        mx = std::max(mx, n);
        mn = std::min(mn, n);
    }
    CHECK(static_cast<double>(mx) / static_cast<double>(mn) >= 100.0);

    // x_cross stays small at the reference spacing
    for (const auto& o : roster)
        if (o.kind == ShapeKind::x_cross) CHECK(counts.at(o.class_id) <= 300);

    // every small organ's bbox fits the ROI with >= 2 voxels margin per axis
    for (const auto& o : roster) {
        if (o.size_class != SizeClass::small) continue;
        Vec3i lo{cfg.shape[0], cfg.shape[1], cfg.shape[2]}, hi{0, 0, 0};
        for (std::int64_t z = 0; z < cfg.shape[0]; ++z)
            for (std::int64_t y = 0; y < cfg.shape[1]; ++y)
                for (std::int64_t x = 0; x < cfg.shape[2]; ++x)
                    if (rec.labels.at(z, y, x) == o.class_id) {
                        lo[0] = std::min(lo[0], z); hi[0] = std::max(hi[0], z);
                        lo[1] = std::min(lo[1], y); hi[1] = std::max(hi[1], y);
                        lo[2] = std::min(lo[2], x); hi[2] = std::max(hi[2], x);
                    }
        for (int a = 0; a < 3; ++a) CHECK(hi[a] - lo[a] + 1 <= cfg.roi_size[a] - 4);
    }
}

TEST_CASE("stored centroids equal recomputed label centroids within half a voxel") {
    const auto roster = default_roster();
    GeneratorConfig cfg;
    const CaseRecord rec = generate_case(roster, cfg, 5, "t");
    for (const auto& [cid, c] : rec.centroids_mm) {
        const Vec3d re = label_centroid_mm(rec.labels, cid);
        for (int a = 0; a < 3; ++a)
            CHECK(std::abs(re[a] - c[a]) <= 0.5 * cfg.spacing[a]);
    }
}

TEST_CASE("generation fails with the organ name when it cannot fit") {
    GeneratorConfig cfg;
    cfg.shape = {8, 16, 16};
    OrganSpec o;
    o.class_id = 1;
    o.name = "too_big";
    o.kind = ShapeKind::ellipsoid;
    o.radius_mm = {100.0, 100.0, 100.0};
    o.centroid_lo = o.centroid_hi = {0.5, 0.5, 0.5};
    try {
        generate_case({o}, cfg, 1, "t");
        FAIL("expected GenerationFailure");
    } catch (const GenerationFailure& e) {
        CHECK(std::string(e.what()).find("too_big") != std::string::npos);
    }
}

TEST_CASE("roster validation rejects duplicate class ids") {
    auto roster = default_roster();
    roster[1].class_id = roster[0].class_id;
    CHECK_THROWS_AS(validate_roster(roster), std::invalid_argument);
}

TEST_CASE("dataset write/read round trip is bitwise lossless") {
    const fs::path root = fs::temp_directory_path() / "organseg_phantom_ds";
    fs::remove_all(root);
    GeneratorConfig cfg;
    auto roster = default_roster();
    const DatasetManifest m = generate_dataset(root, roster, cfg, 77, 2, 1);
    CHECK(m.train_cases.size() == 2);
    CHECK(m.test_cases.size() == 1);

    const DatasetManifest back = read_manifest(root);
    CHECK(back.train_cases == m.train_cases);
    CHECK(back.test_cases == m.test_cases);
    CHECK(back.roster.size() == roster.size());

    // split lists disjoint
    std::set<std::string> train(back.train_cases.begin(), back.train_cases.end());
    for (const auto& c : back.test_cases) CHECK(train.count(c) == 0);

    const CaseRecord orig = generate_case(roster, cfg, mix_seed(77, 100 + 0), "case_0000");
    const CaseRecord loaded = read_case(back, "case_0000");
    CHECK(loaded.image.data == orig.image.data);
    CHECK(loaded.labels.data == orig.labels.data);
    CHECK(loaded.centroids_mm == orig.centroids_mm);

    // corrupt one raw file -> data-format error naming the file
    fs::resize_file(root / "case_0000_img.raw", 11);
    try {
        read_case(back, "case_0000");
        FAIL("expected DataFormatError");
    } catch (const DataFormatError& e) {
        CHECK(std::string(e.what()).find("case_0000_img") != std::string::npos);
    }
    fs::remove_all(root);
}

}  // TEST_SUITE
