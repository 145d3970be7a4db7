#include "organseg/report.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "organseg/errors.hpp"

namespace organseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::string report_to_json(const MetricReport& report,
                           const std::optional<RobustnessTable>& robustness) {
    json j;
    j["cases"] = report.case_count;
    json organs = json::array();
    for (const auto& row : report.organs) {
        json o;
        o["class_id"] = row.class_id;
        o["name"] = row.name;
        o["size_class"] = row.size_class == SizeClass::small ? "small" : "large";
        o["dsc"] = row.dsc;
        if (row.hd95_mm) o["hd95_mm"] = *row.hd95_mm;
        else o["hd95_mm"] = nullptr;
        organs.push_back(std::move(o));
    }
    j["organs"] = organs;
    j["average"]["dsc"] = report.mean_dsc_all;
    j["average"]["hd95_mm"] = report.mean_hd95_all ? json(*report.mean_hd95_all) : json(nullptr);
    j["small_average"]["dsc"] = report.mean_dsc_small;
    j["small_average"]["hd95_mm"] =
        report.mean_hd95_small ? json(*report.mean_hd95_small) : json(nullptr);
    j["hd95_undefined_cases"] = report.hd95_undefined_cases;
    if (report.localization) {
        json loc;
        loc["mean_error_mm"] = report.localization->mean_error_mm;
        json rates = json::object();
        for (std::size_t i = 0; i < report.localization->thresholds_mm.size(); ++i) {
            std::ostringstream key;
            key << report.localization->thresholds_mm[i];
            rates[key.str()] = report.localization->rates[i];
        }
        loc["identification_rates"] = rates;
        loc["organ_count"] = report.localization->organ_count;
        j["localization"] = loc;
    }
    if (robustness) {
        json rob = json::array();
        for (const auto& row : robustness->rows) {
            json r;
            r["distance_mm"] = row.distance_mm;
            r["small_dsc"] = row.small_dsc;
            rob.push_back(std::move(r));
        }
        j["robustness"]["rows"] = rob;
        j["robustness"]["sol_small_dsc"] = robustness->sol_small_dsc;
    }
    return j.dump(2) + "\n";
}

namespace {

std::string fixed(double v, int prec = 4) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(prec) << v;
    return s.str();
}

void table_row(std::ostringstream& out, const std::string& a, const std::string& b,
               const std::string& c) {
    out << std::left << std::setw(22) << a << std::right << std::setw(10) << b << std::setw(12)
        << c << "\n";
}

}  // namespace

std::string render_text_table(const MetricReport& report) {
    std::ostringstream out;
    table_row(out, "Organ", "DSC", "95HD (mm)");
    out << std::string(44, '-') << "\n";
    for (const auto& row : report.organs)
        table_row(out, row.name, fixed(row.dsc), row.hd95_mm ? fixed(*row.hd95_mm, 3) : "n/a");
    out << std::string(44, '-') << "\n";
    table_row(out, "Average", fixed(report.mean_dsc_all),
              report.mean_hd95_all ? fixed(*report.mean_hd95_all, 3) : "n/a");
    table_row(out, "Small Organ Average", fixed(report.mean_dsc_small),
              report.mean_hd95_small ? fixed(*report.mean_hd95_small, 3) : "n/a");
    if (report.hd95_undefined_cases > 0)
        out << "(95HD undefined for " << report.hd95_undefined_cases
            << " organ-case pairs; excluded from averages)\n";
    if (report.localization) {
        out << "\nLocalization: mean error " << fixed(report.localization->mean_error_mm, 3)
            << " mm;";
        for (std::size_t i = 0; i < report.localization->thresholds_mm.size(); ++i)
            out << " id-rate@" << report.localization->thresholds_mm[i] << "mm "
                << fixed(report.localization->rates[i], 3) << ";";
        out << "\n";
    }
    return out.str();
}

std::string render_robustness_table(const RobustnessTable& table) {
    std::ostringstream out;
    out << std::left << std::setw(18) << "Box centers" << std::right << std::setw(12)
        << "Small DSC" << "\n";
    out << std::string(30, '-') << "\n";
    out << std::left << std::setw(18) << "SOL-Net peaks" << std::right << std::setw(12)
        << fixed(table.sol_small_dsc) << "\n";
    for (const auto& row : table.rows) {
        std::ostringstream label;
        label << "gt + " << row.distance_mm << " mm";
        out << std::left << std::setw(18) << label.str() << std::right << std::setw(12)
            << fixed(row.small_dsc) << "\n";
    }
    return out.str();
}

void write_bar_chart_bmp(const fs::path& file, const std::vector<std::string>& labels,
                         const std::vector<double>& values, double value_max) {
    if (labels.size() != values.size() || values.empty())
        throw std::invalid_argument("write_bar_chart_bmp: labels/values mismatch");
    const int n = static_cast<int>(values.size());
    const int bar_w = 48, gap = 16, margin = 24;
    const int width = margin * 2 + n * bar_w + (n - 1) * gap;
    const int height = 240;
    const int plot_h = height - 2 * margin;

    std::vector<std::uint8_t> px(static_cast<std::size_t>(width * height * 3), 255);
    auto put = [&](int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        if (x < 0 || x >= width || y < 0 || y >= height) return;
        const std::size_t o = (static_cast<std::size_t>(y) * width + x) * 3;
        px[o] = b;
        px[o + 1] = g;
        px[o + 2] = r;
    };
    // axis
    for (int x = margin - 2; x < width - margin + 2; ++x) put(x, height - margin, 40, 40, 40);
    for (int i = 0; i < n; ++i) {
        const double frac = std::max(0.0, std::min(1.0, values[static_cast<std::size_t>(i)] /
                                                             value_max));
        const int h = static_cast<int>(frac * plot_h);
        const int x0 = margin + i * (bar_w + gap);
        for (int x = x0; x < x0 + bar_w; ++x)
            for (int y = height - margin - h; y < height - margin; ++y) put(x, y, 70, 110, 190);
    }

    const std::uint32_t data_size = static_cast<std::uint32_t>(px.size());
    const std::uint32_t file_size = 54 + data_size;
    std::uint8_t header[54] = {};
    header[0] = 'B';
    header[1] = 'M';
    std::memcpy(header + 2, &file_size, 4);
    const std::uint32_t off = 54;
    std::memcpy(header + 10, &off, 4);
    const std::uint32_t ih_size = 40;
    std::memcpy(header + 14, &ih_size, 4);
    std::memcpy(header + 18, &width, 4);
    std::memcpy(header + 22, &height, 4);
    const std::uint16_t planes = 1, bpp = 24;
    std::memcpy(header + 26, &planes, 2);
    std::memcpy(header + 28, &bpp, 2);
    std::memcpy(header + 34, &data_size, 4);

    std::ofstream f(file, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + file.string());
    f.write(reinterpret_cast<const char*>(header), sizeof(header));
    // BMP rows are bottom-up; row width (3 bytes/px) must be 4-byte aligned
    const int row_bytes = width * 3;
    const int pad = (4 - row_bytes % 4) % 4;
    const char zeros[4] = {};
    for (int y = height - 1; y >= 0; --y) {
        f.write(reinterpret_cast<const char*>(px.data() + static_cast<std::size_t>(y) * row_bytes),
                row_bytes);
        if (pad) f.write(zeros, pad);
    }
    if (!f) throw IoError("write failed: " + file.string());
}

void write_full_report(const fs::path& out_dir, const MetricReport& report,
                       const std::optional<RobustnessTable>& robustness) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create report dir " + out_dir.string());

    {
        std::ofstream f(out_dir / "report.json", std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write report.json");
        f << report_to_json(report, robustness);
    }
    {
        std::ofstream f(out_dir / "report.txt", std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write report.txt");
        f << render_text_table(report);
        if (robustness) f << "\n" << render_robustness_table(*robustness);
    }
    std::vector<std::string> names;
    std::vector<double> dscs, hds;
    double hd_max = 1.0;
    for (const auto& row : report.organs) {
        names.push_back(row.name);
        dscs.push_back(row.dsc);
        hds.push_back(row.hd95_mm ? *row.hd95_mm : 0.0);
        if (row.hd95_mm) hd_max = std::max(hd_max, *row.hd95_mm);
    }
    write_bar_chart_bmp(out_dir / "dsc_per_organ.bmp", names, dscs, 1.0);
    write_bar_chart_bmp(out_dir / "hd95_per_organ.bmp", names, hds, hd_max);
}

}  // namespace organseg
