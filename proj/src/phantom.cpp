#include "organseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "organseg/errors.hpp"
#include "organseg/grid_io.hpp"

namespace organseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct BBox {
    Vec3i lo{0, 0, 0};
    Vec3i hi{0, 0, 0};  // inclusive
};

// Inside test in mm, relative to the organ centroid.
bool inside_organ(const OrganSpec& o, double dz, double dy, double dx) {
    switch (o.kind) {
        case ShapeKind::ellipsoid: {
            const double a = dz / o.radius_mm[0], b = dy / o.radius_mm[1], c = dx / o.radius_mm[2];
            return a * a + b * b + c * c <= 1.0;
        }
        case ShapeKind::tube: {
            if (std::abs(dz) > o.radius_mm[0]) return false;
            const double b = dy / o.radius_mm[1], c = dx / o.radius_mm[2];
            return b * b + c * c <= 1.0;
        }
        case ShapeKind::x_cross: {
            if (std::abs(dz) > o.radius_mm[0]) return false;
            const double t = o.cross_angle_deg * kPi / 180.0;
            const double ct = std::cos(t), st = std::sin(t);
            // bar 1 axes: rotate (dy, dx) by -t; bar 2 by +t
            const double u1 = ct * dy + st * dx, w1 = -st * dy + ct * dx;
            const double u2 = ct * dy - st * dx, w2 = st * dy + ct * dx;
            const bool in1 = std::abs(u1) <= o.radius_mm[1] && std::abs(w1) <= o.radius_mm[2];
            const bool in2 = std::abs(u2) <= o.radius_mm[1] && std::abs(w2) <= o.radius_mm[2];
            return in1 || in2;
        }
    }
    return false;
}

// Conservative half-extent of the organ in mm per axis.
Vec3d organ_half_extent_mm(const OrganSpec& o) {
    if (o.kind == ShapeKind::x_cross) {
        const double r = std::hypot(o.radius_mm[1], o.radius_mm[2]);
        return {o.radius_mm[0], r, r};
    }
    return o.radius_mm;
}

BBox voxel_bbox(const OrganSpec& o, const Vec3d& center_mm, const Volume& geom) {
    const Vec3d half = organ_half_extent_mm(o);
    BBox b;
    for (int a = 0; a < 3; ++a) {
        const double lo = (center_mm[a] - half[a] - geom.origin[a]) / geom.spacing[a];
        const double hi = (center_mm[a] + half[a] - geom.origin[a]) / geom.spacing[a];
        b.lo[a] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(lo)));
        b.hi[a] = std::min<std::int64_t>(geom.shape[a] - 1,
                                         static_cast<std::int64_t>(std::ceil(hi)));
    }
    return b;
}

std::vector<std::int64_t> rasterize(const OrganSpec& o, const Vec3d& center_mm,
                                    const Volume& geom) {
    const BBox b = voxel_bbox(o, center_mm, geom);
    std::vector<std::int64_t> voxels;
    for (std::int64_t z = b.lo[0]; z <= b.hi[0]; ++z)
        for (std::int64_t y = b.lo[1]; y <= b.hi[1]; ++y)
            for (std::int64_t x = b.lo[2]; x <= b.hi[2]; ++x) {
                const Vec3d p = geom.to_mm({static_cast<double>(z), static_cast<double>(y),
                                            static_cast<double>(x)});
                if (inside_organ(o, p[0] - center_mm[0], p[1] - center_mm[1], p[2] - center_mm[2]))
                    voxels.push_back(geom.index(z, y, x));
            }
    return voxels;
}

bool fits_inside_volume(const OrganSpec& o, const Vec3d& center_mm, const Volume& geom) {
    const Vec3d half = organ_half_extent_mm(o);
    for (int a = 0; a < 3; ++a) {
        const double lo = center_mm[a] - half[a];
        const double hi = center_mm[a] + half[a];
        const double vol_lo = geom.origin[a];
        const double vol_hi =
            geom.origin[a] + (static_cast<double>(geom.shape[a]) - 1) * geom.spacing[a];
        if (lo < vol_lo + geom.spacing[a] || hi > vol_hi - geom.spacing[a]) return false;
    }
    return true;
}

// Small organs must fit a fixed ROI box with >= 2 voxels margin per axis.
void check_roi_fit(const OrganSpec& o, const std::vector<std::int64_t>& voxels,
                   const Vec3i& shape, const Vec3i& roi) {
    Vec3i lo{shape[0], shape[1], shape[2]}, hi{0, 0, 0};
    for (std::int64_t idx : voxels) {
        const std::int64_t z = idx / (shape[1] * shape[2]);
        const std::int64_t y = (idx / shape[2]) % shape[1];
        const std::int64_t x = idx % shape[2];
        lo[0] = std::min(lo[0], z); hi[0] = std::max(hi[0], z);
        lo[1] = std::min(lo[1], y); hi[1] = std::max(hi[1], y);
        lo[2] = std::min(lo[2], x); hi[2] = std::max(hi[2], x);
    }
    for (int a = 0; a < 3; ++a) {
        const std::int64_t extent = hi[a] - lo[a] + 1;
        if (extent > roi[a] - 4)
            throw GenerationFailure(o.name, "bounding box exceeds ROI with margin on axis " +
                                                std::to_string(a));
    }
}

}  // namespace

json organ_to_json(const OrganSpec& o) {
    json j;
    j["class_id"] = o.class_id;
    j["name"] = o.name;
    j["kind"] = o.kind == ShapeKind::ellipsoid ? "ellipsoid"
                : o.kind == ShapeKind::tube    ? "tube"
                                               : "x_cross";
    j["size_class"] = o.size_class == SizeClass::large ? "large" : "small";
    j["radius_mm"] = {o.radius_mm[0], o.radius_mm[1], o.radius_mm[2]};
    j["contrast"] = o.contrast;
    j["intensity_sd"] = o.intensity_sd;
    j["centroid_lo"] = {o.centroid_lo[0], o.centroid_lo[1], o.centroid_lo[2]};
    j["centroid_hi"] = {o.centroid_hi[0], o.centroid_hi[1], o.centroid_hi[2]};
    j["cross_angle_deg"] = o.cross_angle_deg;
    return j;
}

OrganSpec organ_from_json(const json& j) {
    OrganSpec o;
    o.class_id = j.at("class_id").get<int>();
    o.name = j.at("name").get<std::string>();
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "ellipsoid") o.kind = ShapeKind::ellipsoid;
    else if (kind == "tube") o.kind = ShapeKind::tube;
    else if (kind == "x_cross") o.kind = ShapeKind::x_cross;
    else throw DataFormatError("unknown organ kind: " + kind);
    o.size_class = j.at("size_class").get<std::string>() == "large" ? SizeClass::large
                                                                    : SizeClass::small;
    for (int a = 0; a < 3; ++a) {
        o.radius_mm[a] = j.at("radius_mm").at(a).get<double>();
        o.centroid_lo[a] = j.at("centroid_lo").at(a).get<double>();
        o.centroid_hi[a] = j.at("centroid_hi").at(a).get<double>();
    }
    o.contrast = j.at("contrast").get<double>();
    o.intensity_sd = j.at("intensity_sd").get<double>();
    o.cross_angle_deg = j.at("cross_angle_deg").get<double>();
    return o;
}

namespace {

void write_json_file(const fs::path& p, const json& j) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + p.string());
    f << j.dump(2) << "\n";
    if (!f) throw IoError("write failed: " + p.string());
}

json read_json_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open: " + p.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataFormatError("malformed JSON " + p.string() + ": " + e.what());
    }
    return j;
}

}  // namespace

std::vector<OrganSpec> default_roster() {
    std::vector<OrganSpec> r(6);
    r[0] = {1, "globe_a", ShapeKind::ellipsoid, SizeClass::large,
            {10.0, 20.0, 20.0}, 40.0, 0.0, {0.40, 0.26, 0.24}, {0.60, 0.32, 0.28}, 40.0};
    r[1] = {2, "globe_b", ShapeKind::ellipsoid, SizeClass::large,
            {10.0, 20.0, 20.0}, 36.0, 0.0, {0.40, 0.26, 0.72}, {0.60, 0.32, 0.76}, 40.0};
    r[2] = {3, "cord", ShapeKind::tube, SizeClass::large,
            {36.0, 8.5, 8.5}, 46.0, 0.0, {0.46, 0.70, 0.47}, {0.54, 0.74, 0.53}, 40.0};
    r[3] = {4, "lens", ShapeKind::ellipsoid, SizeClass::small,
            {2.9, 3.2, 3.2}, 12.0, 0.0, {0.40, 0.54, 0.14}, {0.55, 0.60, 0.24}, 40.0};
    r[4] = {5, "pituitary", ShapeKind::ellipsoid, SizeClass::small,
            {3.5, 4.0, 4.0}, 13.0, 0.0, {0.40, 0.54, 0.78}, {0.55, 0.60, 0.88}, 40.0};
    r[5] = {6, "chiasm", ShapeKind::x_cross, SizeClass::small,
            {2.5, 8.0, 2.0}, 12.0, 0.0, {0.40, 0.64, 0.12}, {0.55, 0.72, 0.20}, 40.0};
    return r;
}

void validate_roster(const std::vector<OrganSpec>& roster) {
    std::set<int> ids;
    for (const auto& o : roster) {
        if (o.class_id <= 0)
            throw std::invalid_argument("roster: class_id must be positive for " + o.name);
        if (!ids.insert(o.class_id).second)
            throw std::invalid_argument("roster: duplicate class_id " + std::to_string(o.class_id));
        for (int a = 0; a < 3; ++a) {
            if (o.radius_mm[a] <= 0.0)
                throw std::invalid_argument("roster: non-positive radius for " + o.name);
            if (o.centroid_lo[a] > o.centroid_hi[a] || o.centroid_lo[a] < 0.0 ||
                o.centroid_hi[a] > 1.0)
                throw std::invalid_argument("roster: bad centroid region for " + o.name);
        }
    }
}

Vec3d label_centroid_mm(const LabelMap& labels, int class_id) {
    double sz = 0, sy = 0, sx = 0;
    std::int64_t n = 0;
    for (std::int64_t z = 0; z < labels.shape[0]; ++z)
        for (std::int64_t y = 0; y < labels.shape[1]; ++y)
            for (std::int64_t x = 0; x < labels.shape[2]; ++x)
                if (labels.at(z, y, x) == class_id) {
                    sz += static_cast<double>(z);
                    sy += static_cast<double>(y);
                    sx += static_cast<double>(x);
                    ++n;
                }
    if (n == 0)
        throw std::invalid_argument("label_centroid_mm: class " + std::to_string(class_id) +
                                    " absent from labels");
    const double inv = 1.0 / static_cast<double>(n);
    return labels.to_mm({sz * inv, sy * inv, sx * inv});
}

std::map<int, std::int64_t> label_voxel_counts(const LabelMap& labels) {
    std::map<int, std::int64_t> counts;
    for (auto v : labels.data)
        if (v != 0) ++counts[v];
    return counts;
}

CaseRecord generate_case(const std::vector<OrganSpec>& roster, const GeneratorConfig& cfg,
                         std::uint64_t seed, const std::string& case_id) {
    validate_roster(roster);
    CaseRecord rec;
    rec.case_id = case_id;
    rec.roster = roster;
    rec.image = Volume(cfg.shape, cfg.spacing, cfg.background);
    rec.labels = LabelMap(cfg.shape, cfg.spacing, 0);

    Rng place_rng(mix_seed(seed, 1));

    // Place organs in roster order by rejection sampling; committed voxels are
    // never overwritten by later organs.
    for (const auto& organ : roster) {
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_place_attempts && !placed; ++attempt) {
            Vec3d center{};
            for (int a = 0; a < 3; ++a) {
                const double extent =
                    (static_cast<double>(cfg.shape[a]) - 1.0) * cfg.spacing[a];
                const double f = place_rng.uniform(organ.centroid_lo[a], organ.centroid_hi[a]);
                center[a] = rec.image.origin[a] + f * extent;
            }
            if (!fits_inside_volume(organ, center, rec.image)) continue;
            const auto voxels = rasterize(organ, center, rec.image);
            if (voxels.empty()) continue;
            bool overlap = false;
            for (std::int64_t idx : voxels)
                if (rec.labels.data[idx] != 0) { overlap = true; break; }
            if (overlap) continue;
            for (std::int64_t idx : voxels)
                rec.labels.data[idx] = static_cast<std::uint16_t>(organ.class_id);
            if (organ.size_class == SizeClass::small)
                check_roi_fit(organ, voxels, cfg.shape, cfg.roi_size);
            placed = true;
        }
        if (!placed)
            throw GenerationFailure(organ.name, "no non-overlapping placement after " +
                                                    std::to_string(cfg.max_place_attempts) +
                                                    " attempts");
    }

    // Image: background + per-organ contrast (+ organ texture) + smooth
    // low-frequency bias field + global Gaussian noise, stored at f32 precision.
    std::map<int, const OrganSpec*> by_id;
    for (const auto& o : roster) by_id[o.class_id] = &o;

    Rng bias_rng(mix_seed(seed, 2));
    const double fz = bias_rng.uniform(0.5, 1.5), pz = bias_rng.uniform(0.0, 2.0 * kPi);
    const double fy = bias_rng.uniform(0.5, 1.5), py = bias_rng.uniform(0.0, 2.0 * kPi);
    const double fx = bias_rng.uniform(0.5, 1.5), px = bias_rng.uniform(0.0, 2.0 * kPi);

    Rng noise_rng(mix_seed(seed, 3));
    const Vec3i s = cfg.shape;
    for (std::int64_t z = 0; z < s[0]; ++z)
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[2]; ++x) {
                const std::int64_t idx = rec.image.index(z, y, x);
                double v = cfg.background;
                const double uz = static_cast<double>(z) / static_cast<double>(s[0]);
                const double uy = static_cast<double>(y) / static_cast<double>(s[1]);
                const double ux = static_cast<double>(x) / static_cast<double>(s[2]);
                v += cfg.bias_amplitude * std::sin(2.0 * kPi * fz * uz + pz) *
                     std::sin(2.0 * kPi * fy * uy + py) * std::sin(2.0 * kPi * fx * ux + px);
                const std::uint16_t lab = rec.labels.data[idx];
                if (lab != 0) {
                    const OrganSpec* o = by_id[lab];
                    v += o->contrast;
                    if (o->intensity_sd > 0.0) v += noise_rng.normal(0.0, o->intensity_sd);
                }
                if (cfg.noise_sd > 0.0) v += noise_rng.normal(0.0, cfg.noise_sd);
                rec.image.data[idx] = static_cast<double>(static_cast<float>(v));
            }

    // Invariants: small organs present with >= 1 voxel; stored centroid is the
    // exact label-mass centroid; imbalance ratio meets the configured target.
    const auto counts = label_voxel_counts(rec.labels);
    std::int64_t max_count = 0, min_count = 0;
    for (const auto& o : roster) {
        const auto it = counts.find(o.class_id);
        if (it == counts.end() || it->second == 0)
            throw GenerationFailure(o.name, "organ rasterized to zero voxels");
        max_count = std::max(max_count, it->second);
        min_count = min_count == 0 ? it->second : std::min(min_count, it->second);
        rec.centroids_mm[o.class_id] = label_centroid_mm(rec.labels, o.class_id);
    }
    if (cfg.imbalance_target > 0.0 &&
        static_cast<double>(max_count) < cfg.imbalance_target * static_cast<double>(min_count))
        throw GenerationFailure("roster", "imbalance ratio " +
                                              std::to_string(static_cast<double>(max_count) /
                                                             static_cast<double>(min_count)) +
                                              " below target");
    rec.image.validate("generate_case image");
    return rec;
}

void write_manifest(const DatasetManifest& m) {
    json j;
    j["shape"] = {m.shape[0], m.shape[1], m.shape[2]};
    j["spacing_mm"] = {m.spacing[0], m.spacing[1], m.spacing[2]};
    j["seed"] = m.seed;
    j["train_cases"] = m.train_cases;
    j["test_cases"] = m.test_cases;
    json roster = json::array();
    for (const auto& o : m.roster) roster.push_back(organ_to_json(o));
    j["roster"] = roster;
    json gen;
    gen["background"] = m.gen.background;
    gen["noise_sd"] = m.gen.noise_sd;
    gen["bias_amplitude"] = m.gen.bias_amplitude;
    gen["imbalance_target"] = m.gen.imbalance_target;
    gen["roi_size"] = {m.gen.roi_size[0], m.gen.roi_size[1], m.gen.roi_size[2]};
    j["generator"] = gen;
    write_json_file(m.root / "manifest.json", j);
}

DatasetManifest read_manifest(const fs::path& root) {
    const json j = read_json_file(root / "manifest.json");
    DatasetManifest m;
    m.root = root;
    try {
        for (int a = 0; a < 3; ++a) {
            m.shape[a] = j.at("shape").at(a).get<std::int64_t>();
            m.spacing[a] = j.at("spacing_mm").at(a).get<double>();
        }
        m.seed = j.at("seed").get<std::uint64_t>();
        m.train_cases = j.at("train_cases").get<std::vector<std::string>>();
        m.test_cases = j.at("test_cases").get<std::vector<std::string>>();
        for (const auto& oj : j.at("roster")) m.roster.push_back(organ_from_json(oj));
        const json& gen = j.at("generator");
        m.gen.background = gen.at("background").get<double>();
        m.gen.noise_sd = gen.at("noise_sd").get<double>();
        m.gen.bias_amplitude = gen.at("bias_amplitude").get<double>();
        m.gen.imbalance_target = gen.at("imbalance_target").get<double>();
        for (int a = 0; a < 3; ++a)
            m.gen.roi_size[a] = gen.at("roi_size").at(a).get<std::int64_t>();
    } catch (const json::exception& e) {
        throw DataFormatError("bad manifest " + (root / "manifest.json").string() + ": " +
                              e.what());
    }
    m.gen.shape = m.shape;
    m.gen.spacing = m.spacing;
    // split lists must be disjoint
    std::set<std::string> train(m.train_cases.begin(), m.train_cases.end());
    for (const auto& c : m.test_cases)
        if (train.count(c))
            throw DataFormatError("manifest splits overlap on case " + c);
    return m;
}

void write_case(const fs::path& root, const CaseRecord& rec) {
    write_volume(root / (rec.case_id + "_img"), rec.image);
    write_labelmap(root / (rec.case_id + "_lab"), rec.labels);
    json meta;
    json cents = json::object();
    for (const auto& [cid, c] : rec.centroids_mm)
        cents[std::to_string(cid)] = {c[0], c[1], c[2]};
    meta["centroids_mm"] = cents;
    write_json_file(root / (rec.case_id + "_meta.json"), meta);
}

CaseRecord read_case(const DatasetManifest& m, const std::string& case_id) {
    CaseRecord rec;
    rec.case_id = case_id;
    rec.roster = m.roster;
    rec.image = read_volume(m.root / (case_id + "_img"));
    rec.labels = read_labelmap(m.root / (case_id + "_lab"));
    if (rec.image.shape != rec.labels.shape)
        throw DataFormatError("case " + case_id + ": image/label shape mismatch");
    const json meta = read_json_file(m.root / (case_id + "_meta.json"));
    try {
        for (const auto& [key, val] : meta.at("centroids_mm").items()) {
            Vec3d c{val.at(0).get<double>(), val.at(1).get<double>(), val.at(2).get<double>()};
            rec.centroids_mm[std::stoi(key)] = c;
        }
    } catch (const json::exception& e) {
        throw DataFormatError("bad case meta for " + case_id + ": " + e.what());
    }
    return rec;
}

DatasetManifest generate_dataset(const fs::path& root, const std::vector<OrganSpec>& roster,
                                 const GeneratorConfig& cfg, std::uint64_t seed, int train_cases,
                                 int test_cases) {
    validate_roster(roster);
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create dataset root " + root.string() + ": " + ec.message());

    DatasetManifest m;
    m.root = root;
    m.shape = cfg.shape;
    m.spacing = cfg.spacing;
    m.roster = roster;
    m.seed = seed;
    m.gen = cfg;

    char buf[32];
    for (int i = 0; i < train_cases + test_cases; ++i) {
        std::snprintf(buf, sizeof(buf), "case_%04d", i);
        const std::string id(buf);
        const CaseRecord rec = generate_case(roster, cfg, mix_seed(seed, 100 + i), id);
        write_case(root, rec);
        if (i < train_cases) m.train_cases.push_back(id);
        else m.test_cases.push_back(id);
    }
    write_manifest(m);
    return m;
}

}  // namespace organseg
