#include "organseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "organseg/errors.hpp"

namespace organseg {

std::int64_t Mask::count() const {
    std::int64_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
}

Mask mask_of_class(const LabelMap& labels, int class_id) {
    Mask m;
    m.shape = labels.shape;
    m.data.resize(labels.data.size());
    for (std::size_t i = 0; i < labels.data.size(); ++i)
        m.data[i] = labels.data[i] == class_id ? 1 : 0;
    return m;
}

double dsc(const Mask& pred, const Mask& gt) {
    if (pred.shape != gt.shape) throw std::invalid_argument("dsc: shape mismatch");
    std::int64_t inter = 0, np = 0, ng = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
        inter += p && g;
        np += p;
        ng += g;
    }
    if (np + ng == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

std::vector<Vec3i> boundary_voxels(const Mask& m) {
    std::vector<Vec3i> out;
    const Vec3i s = m.shape;
    for (std::int64_t z = 0; z < s[0]; ++z)
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[2]; ++x) {
                if (!m.data[m.index(z, y, x)]) continue;
                const bool edge =
                    z == 0 || z == s[0] - 1 || y == 0 || y == s[1] - 1 || x == 0 ||
                    x == s[2] - 1 || !m.data[m.index(z - 1, y, x)] ||
                    !m.data[m.index(z + 1, y, x)] || !m.data[m.index(z, y - 1, x)] ||
                    !m.data[m.index(z, y + 1, x)] || !m.data[m.index(z, y, x - 1)] ||
                    !m.data[m.index(z, y, x + 1)];
                if (edge) out.push_back({z, y, x});
            }
    return out;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile: no values");
    std::sort(values.begin(), values.end());
    const double rank = q * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
    if (lo + 1 >= values.size()) return values.back();
    const double frac = rank - static_cast<double>(lo);
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D squared distance transform (lower envelope of parabolas) with uniform
// sample spacing h: out[i] = min_j ((i-j)^2 h^2 + f[j]). Infinite f entries
// contribute no parabola.
void dt1d(const double* f, double* out, std::int64_t n, double h, std::int64_t* v,
          double* zbuf) {
    std::int64_t k = -1;
    for (std::int64_t q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        const double xq = static_cast<double>(q) * h;
        double s = 0.0;
        while (k >= 0) {
            const double xp = static_cast<double>(v[k]) * h;
            s = ((f[q] + xq * xq) - (f[v[k]] + xp * xp)) / (2.0 * (xq - xp));
            if (s <= zbuf[k]) --k;
            else break;
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            zbuf[0] = -kInf;
        } else {
            ++k;
            v[k] = q;
            zbuf[k] = s;
        }
        zbuf[k + 1] = kInf;
    }
    if (k < 0) {
        for (std::int64_t i = 0; i < n; ++i) out[i] = kInf;
        return;
    }
    std::int64_t j = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double xi = static_cast<double>(i) * h;
        while (zbuf[j + 1] < xi) ++j;
        const double d = xi - static_cast<double>(v[j]) * h;
        out[i] = d * d + f[v[j]];
    }
}

// Exact anisotropic squared EDT of the point set marked 0 in `field`.
void edt3d(std::vector<double>& field, const Vec3i& s, const Vec3d& spacing) {
    const std::int64_t n = std::max({s[0], s[1], s[2]});
    std::vector<std::int64_t> v(static_cast<std::size_t>(n));
    std::vector<double> z(static_cast<std::size_t>(n + 1)), row(static_cast<std::size_t>(n)),
        out(static_cast<std::size_t>(n));

    // x pass
    for (std::int64_t zz = 0; zz < s[0]; ++zz)
        for (std::int64_t yy = 0; yy < s[1]; ++yy) {
            double* r = &field[(zz * s[1] + yy) * s[2]];
            dt1d(r, out.data(), s[2], spacing[2], v.data(), z.data());
            std::copy(out.begin(), out.begin() + s[2], r);
        }
    // y pass
    for (std::int64_t zz = 0; zz < s[0]; ++zz)
        for (std::int64_t xx = 0; xx < s[2]; ++xx) {
            for (std::int64_t yy = 0; yy < s[1]; ++yy)
                row[static_cast<std::size_t>(yy)] = field[(zz * s[1] + yy) * s[2] + xx];
            dt1d(row.data(), out.data(), s[1], spacing[1], v.data(), z.data());
            for (std::int64_t yy = 0; yy < s[1]; ++yy)
                field[(zz * s[1] + yy) * s[2] + xx] = out[static_cast<std::size_t>(yy)];
        }
    // z pass
    for (std::int64_t yy = 0; yy < s[1]; ++yy)
        for (std::int64_t xx = 0; xx < s[2]; ++xx) {
            for (std::int64_t zz = 0; zz < s[0]; ++zz)
                row[static_cast<std::size_t>(zz)] = field[(zz * s[1] + yy) * s[2] + xx];
            dt1d(row.data(), out.data(), s[0], spacing[0], v.data(), z.data());
            for (std::int64_t zz = 0; zz < s[0]; ++zz)
                field[(zz * s[1] + yy) * s[2] + xx] = out[static_cast<std::size_t>(zz)];
        }
}

double directed_95(const std::vector<Vec3i>& from, const std::vector<double>& edt_sq,
                   const Vec3i& shape) {
    std::vector<double> dists;
    dists.reserve(from.size());
    for (const auto& p : from)
        dists.push_back(std::sqrt(edt_sq[static_cast<std::size_t>(
            (p[0] * shape[1] + p[1]) * shape[2] + p[2])]));
    return percentile(std::move(dists), 0.95);
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace

double hd95(const Mask& pred, const Mask& gt, const Vec3d& spacing) {
    if (pred.shape != gt.shape) throw std::invalid_argument("hd95: shape mismatch");
    if (pred.count() == 0) throw UndefinedMetric("hd95: prediction mask is empty");
    if (gt.count() == 0) throw UndefinedMetric("hd95: ground-truth mask is empty");

    const auto bp = boundary_voxels(pred);
    const auto bg = boundary_voxels(gt);

    std::vector<double> field_g(pred.data.size(), kInf);
    for (const auto& p : bg)
        field_g[static_cast<std::size_t>((p[0] * gt.shape[1] + p[1]) * gt.shape[2] + p[2])] = 0.0;
    edt3d(field_g, gt.shape, spacing);
    const double d_pg = directed_95(bp, field_g, gt.shape);

    std::vector<double> field_p(pred.data.size(), kInf);
    for (const auto& p : bp)
        field_p[static_cast<std::size_t>((p[0] * pred.shape[1] + p[1]) * pred.shape[2] + p[2])] =
            0.0;
    edt3d(field_p, pred.shape, spacing);
    const double d_gp = directed_95(bg, field_p, pred.shape);

    return 0.5 * (d_pg + d_gp);
}

LocalizationTable localization_stats(const std::map<int, Vec3d>& pred,
                                     const std::map<int, Vec3d>& gt,
                                     const std::vector<double>& thresholds) {
    LocalizationTable t;
    t.thresholds_mm = thresholds;
    std::vector<double> errors;
    for (const auto& [cid, g] : gt) {
        const auto it = pred.find(cid);
        if (it == pred.end())
            throw std::invalid_argument("localization_stats: missing prediction for class " +
                                        std::to_string(cid));
        const Vec3d& p = it->second;
        errors.push_back(std::sqrt((p[0] - g[0]) * (p[0] - g[0]) +
                                   (p[1] - g[1]) * (p[1] - g[1]) +
                                   (p[2] - g[2]) * (p[2] - g[2])));
    }
    if (errors.empty()) throw std::invalid_argument("localization_stats: no organs");
    t.organ_count = static_cast<std::int64_t>(errors.size());
    t.mean_error_mm = mean_of(errors);
    for (double th : thresholds) {
        std::int64_t hit = 0;
        for (double e : errors) hit += e <= th;
        t.rates.push_back(static_cast<double>(hit) / static_cast<double>(errors.size()));
    }
    return t;
}

CaseMetrics evaluate_case(const LabelMap& pred, const LabelMap& gt,
                          const std::vector<OrganSpec>& roster) {
    if (pred.shape != gt.shape || pred.spacing != gt.spacing)
        throw std::invalid_argument("evaluate_case: geometry mismatch");
    CaseMetrics cm;
    for (const auto& organ : roster) {
        OrganRow row;
        row.class_id = organ.class_id;
        row.name = organ.name;
        row.size_class = organ.size_class;
        const Mask mp = mask_of_class(pred, organ.class_id);
        const Mask mg = mask_of_class(gt, organ.class_id);
        row.dsc = dsc(mp, mg);
        try {
            row.hd95_mm = hd95(mp, mg, gt.spacing);
        } catch (const UndefinedMetric&) {
            row.hd95_mm.reset();
        }
        cm.organs.push_back(std::move(row));
    }
    return cm;
}

MetricReport aggregate_metrics(const std::vector<CaseMetrics>& cases,
                               const std::vector<OrganSpec>& roster) {
    MetricReport rep;
    rep.case_count = static_cast<std::int64_t>(cases.size());
    if (cases.empty()) throw std::invalid_argument("aggregate_metrics: no cases");

    for (const auto& organ : roster) {
        OrganRow row;
        row.class_id = organ.class_id;
        row.name = organ.name;
        row.size_class = organ.size_class;
        double dsc_sum = 0.0, hd_sum = 0.0;
        std::int64_t hd_n = 0;
        for (const auto& cm : cases) {
            const auto it = std::find_if(cm.organs.begin(), cm.organs.end(),
                                         [&](const OrganRow& r) {
                                             return r.class_id == organ.class_id;
                                         });
            if (it == cm.organs.end())
                throw std::invalid_argument("aggregate_metrics: case missing organ " +
                                            organ.name);
            dsc_sum += it->dsc;
            if (it->hd95_mm) {
                hd_sum += *it->hd95_mm;
                ++hd_n;
            } else {
                ++rep.hd95_undefined_cases;
            }
        }
        row.dsc = dsc_sum / static_cast<double>(cases.size());
        if (hd_n > 0) row.hd95_mm = hd_sum / static_cast<double>(hd_n);
        rep.organs.push_back(std::move(row));
    }

    double dsc_all = 0.0, dsc_small = 0.0, hd_all = 0.0, hd_small = 0.0;
    std::int64_t n_small = 0, n_hd_all = 0, n_hd_small = 0;
    for (const auto& row : rep.organs) {
        dsc_all += row.dsc;
        if (row.hd95_mm) {
            hd_all += *row.hd95_mm;
            ++n_hd_all;
        }
        if (row.size_class == SizeClass::small) {
            dsc_small += row.dsc;
            ++n_small;
            if (row.hd95_mm) {
                hd_small += *row.hd95_mm;
                ++n_hd_small;
            }
        }
    }
    rep.mean_dsc_all = dsc_all / static_cast<double>(rep.organs.size());
    if (n_small > 0) rep.mean_dsc_small = dsc_small / static_cast<double>(n_small);
    if (n_hd_all > 0) rep.mean_hd95_all = hd_all / static_cast<double>(n_hd_all);
    if (n_hd_small > 0) rep.mean_hd95_small = hd_small / static_cast<double>(n_hd_small);
    return rep;
}

}  // namespace organseg
