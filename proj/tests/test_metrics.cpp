#include <doctest.h>

#include <cmath>

#include "organseg/errors.hpp"
#include "organseg/metrics.hpp"

using namespace organseg;

namespace {

Mask random_mask(Vec3i shape, double p, Rng& rng) {
    Mask m;
    m.shape = shape;
    m.data.resize(static_cast<std::size_t>(numel(shape)));
    for (auto& v : m.data) v = rng.uniform() < p ? 1 : 0;
    return m;
}

// O(n^2) all-pairs surface-distance oracle with the same percentile rule.
double hd95_oracle(const Mask& pred, const Mask& gt, const Vec3d& sp) {
    const auto bp = boundary_voxels(pred);
    const auto bg = boundary_voxels(gt);
    auto directed = [&](const std::vector<Vec3i>& from, const std::vector<Vec3i>& to) {
        std::vector<double> dists;
        for (const auto& a : from) {
            double best = 1e300;
            for (const auto& b : to) {
                const double dz = (a[0] - b[0]) * sp[0];
                const double dy = (a[1] - b[1]) * sp[1];
                const double dx = (a[2] - b[2]) * sp[2];
                best = std::min(best, dz * dz + dy * dy + dx * dx);
            }
            dists.push_back(std::sqrt(best));
        }
        std::sort(dists.begin(), dists.end());
        const double rank = 0.95 * static_cast<double>(dists.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
        if (lo + 1 >= dists.size()) return dists.back();
        return dists[lo] + (rank - lo) * (dists[lo + 1] - dists[lo]);
    };
    return 0.5 * (directed(bp, bg) + directed(bg, bp));
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("dsc identity, disjoint, half-overlap, symmetry") {
    Mask a, b;
    a.shape = b.shape = {2, 10, 10};
    a.data.assign(200, 0);
    b.data.assign(200, 0);
    for (int i = 0; i < 100; ++i) a.data[static_cast<std::size_t>(i)] = 1;
    CHECK(dsc(a, a) == 1.0);

    for (int i = 100; i < 200; ++i) b.data[static_cast<std::size_t>(i)] = 1;
    CHECK(dsc(a, b) == 0.0);

    // |X| = |Y| = 100, overlap 50
    Mask c = b;
    c.data.assign(200, 0);
    for (int i = 50; i < 150; ++i) c.data[static_cast<std::size_t>(i)] = 1;
    CHECK(dsc(a, c) == doctest::Approx(0.5));
    CHECK(dsc(c, a) == dsc(a, c));

    Mask empty = a;
    empty.data.assign(200, 0);
    CHECK(dsc(empty, empty) == 1.0);
    CHECK(dsc(a, empty) == 0.0);
}

TEST_CASE("percentile uses linear interpolation between order statistics") {
    CHECK(percentile({1.0, 2.0, 3.0, 4.0}, 0.5) == doctest::Approx(2.5));
    CHECK(percentile({4.0, 1.0, 3.0, 2.0}, 0.95) == doctest::Approx(3.85));
    CHECK(percentile({7.0}, 0.95) == doctest::Approx(7.0));
}

TEST_CASE("hd95 of identical masks is zero") {
    Rng rng(80);
    const Mask m = random_mask({6, 8, 8}, 0.3, rng);
    if (m.count() > 0) CHECK(hd95(m, m, {3, 1, 1}) == doctest::Approx(0.0));
}

TEST_CASE("two single-voxel masks 3 z-slices apart at spacing (3,1,1) give 9 mm") {
    Mask a, b;
    a.shape = b.shape = {8, 4, 4};
    a.data.assign(128, 0);
    b.data.assign(128, 0);
    a.data[static_cast<std::size_t>(a.index(1, 2, 2))] = 1;
    b.data[static_cast<std::size_t>(b.index(4, 2, 2))] = 1;
    CHECK(hd95(a, b, {3, 1, 1}) == doctest::Approx(9.0).epsilon(1e-12));
}

TEST_CASE("hd95 matches the all-pairs oracle on random masks") {
    Rng rng(81);
    int tested = 0;
    for (int i = 0; i < 25; ++i) {
        const Vec3i shape{1 + static_cast<std::int64_t>(rng.uniform_int(1, 10)),
                          1 + static_cast<std::int64_t>(rng.uniform_int(1, 14)),
                          1 + static_cast<std::int64_t>(rng.uniform_int(1, 14))};
        const Mask p = random_mask(shape, 0.25, rng);
        const Mask g = random_mask(shape, 0.25, rng);
        if (p.count() == 0 || g.count() == 0) continue;
        const Vec3d sp{3.0, 1.0, 1.0};
        CHECK(hd95(p, g, sp) == doctest::Approx(hd95_oracle(p, g, sp)).epsilon(1e-9));
        ++tested;
    }
    CHECK(tested > 10);
}

TEST_CASE("hd95 is symmetric and rejects empty masks") {
    Rng rng(82);
    const Mask p = random_mask({5, 9, 9}, 0.3, rng);
    const Mask g = random_mask({5, 9, 9}, 0.3, rng);
    CHECK(hd95(p, g, {2, 1, 1}) == doctest::Approx(hd95(g, p, {2, 1, 1})).epsilon(1e-12));
    Mask empty = p;
    empty.data.assign(empty.data.size(), 0);
    CHECK_THROWS_AS(hd95(empty, g, {1, 1, 1}), UndefinedMetric);
    CHECK_THROWS_AS(hd95(g, empty, {1, 1, 1}), UndefinedMetric);
}

TEST_CASE("hd95 never exceeds the max pairwise distance and shrinks on nested masks") {
    // nested boxes converging toward gt
    Mask gt;
    gt.shape = {6, 12, 12};
    gt.data.assign(static_cast<std::size_t>(numel(gt.shape)), 0);
    for (std::int64_t z = 2; z < 4; ++z)
        for (std::int64_t y = 4; y < 8; ++y)
            for (std::int64_t x = 4; x < 8; ++x) gt.data[gt.index(z, y, x)] = 1;
    double prev = 1e300;
    for (std::int64_t grow : {4, 3, 2, 1, 0}) {
        Mask p = gt;
        p.data.assign(p.data.size(), 0);
        for (std::int64_t z = std::max<std::int64_t>(0, 2 - grow / 2); z < std::min<std::int64_t>(6, 4 + grow / 2 + grow % 2); ++z)
            for (std::int64_t y = 4 - grow; y < 8 + grow; ++y)
                for (std::int64_t x = 4 - grow; x < 8 + grow; ++x)
                    p.data[p.index(z, y, x)] = 1;
        const double d = hd95(p, gt, {3, 1, 1});
        CHECK(d <= prev + 1e-12);
        prev = d;
    }
    CHECK(prev == doctest::Approx(0.0));
}

TEST_CASE("localization stats: identity, thresholds, hand-computed errors") {
    std::map<int, Vec3d> gt{{1, {0, 0, 0}}, {2, {10, 0, 0}}};
    const LocalizationTable same = localization_stats(gt, gt, {3, 4, 5});
    CHECK(same.mean_error_mm == doctest::Approx(0.0));
    for (double r : same.rates) CHECK(r == doctest::Approx(1.0));

    std::map<int, Vec3d> pred{{1, {0, 0, 4.0}}, {2, {10, 0, 0}}};
    const LocalizationTable t = localization_stats(pred, gt, {3, 4, 5});
    CHECK(t.mean_error_mm == doctest::Approx(2.0));
    CHECK(t.rates[0] == doctest::Approx(0.5));   // within 3mm: only organ 2
    CHECK(t.rates[1] == doctest::Approx(1.0));   // within 4mm
    CHECK(t.rates[2] == doctest::Approx(1.0));

    std::map<int, Vec3d> missing{{1, {0, 0, 0}}};
    CHECK_THROWS_AS(localization_stats(missing, gt, {3}), std::invalid_argument);
}

TEST_CASE("evaluate_case: exact prediction and empty-prediction handling") {
    const auto roster = default_roster();
    GeneratorConfig cfg;
    const CaseRecord rec = generate_case(roster, cfg, 9, "t");

    const CaseMetrics perfect = evaluate_case(rec.labels, rec.labels, roster);
    for (const auto& row : perfect.organs) {
        CHECK(row.dsc == doctest::Approx(1.0));
        REQUIRE(row.hd95_mm.has_value());
        CHECK(*row.hd95_mm == doctest::Approx(0.0));
    }

    // drop one organ from the prediction entirely
    LabelMap pred = rec.labels;
    for (auto& v : pred.data)
        if (v == roster[3].class_id) v = 0;
    const CaseMetrics partial = evaluate_case(pred, rec.labels, roster);
    const auto& row = partial.organs[3];
    CHECK(row.dsc == doctest::Approx(0.0));
    CHECK_FALSE(row.hd95_mm.has_value());

    const MetricReport rep = aggregate_metrics({partial}, roster);
    CHECK(rep.hd95_undefined_cases == 1);

    // report averages equal the mean of the rows
    double dsc_sum = 0.0;
    for (const auto& r : rep.organs) dsc_sum += r.dsc;
    CHECK(rep.mean_dsc_all ==
          doctest::Approx(dsc_sum / static_cast<double>(rep.organs.size())).epsilon(1e-12));
    double small_sum = 0.0;
    int small_n = 0;
    for (const auto& r : rep.organs)
        if (r.size_class == SizeClass::small) {
            small_sum += r.dsc;
            ++small_n;
        }
    CHECK(rep.mean_dsc_small == doctest::Approx(small_sum / small_n).epsilon(1e-12));

    LabelMap wrong_geom(rec.labels.shape, {1, 1, 1});
    CHECK_THROWS_AS(evaluate_case(wrong_geom, rec.labels, roster), std::invalid_argument);
}

}  // TEST_SUITE
