#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "organseg/metrics.hpp"
#include "organseg/trainer.hpp"

namespace organseg {

// report.json + aligned text table (organ rows, Average, Small Organ Average)
// + per-organ BMP bar charts.

std::string report_to_json(const MetricReport& report,
                           const std::optional<RobustnessTable>& robustness);

std::string render_text_table(const MetricReport& report);

std::string render_robustness_table(const RobustnessTable& table);

// Uncompressed 24-bit BMP bar chart; values in [0,1] unless a max is given.
void write_bar_chart_bmp(const std::filesystem::path& file,
                         const std::vector<std::string>& labels,
                         const std::vector<double>& values, double value_max = 1.0);

void write_full_report(const std::filesystem::path& out_dir, const MetricReport& report,
                       const std::optional<RobustnessTable>& robustness);

}  // namespace organseg
