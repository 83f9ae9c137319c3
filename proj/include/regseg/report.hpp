#pragma once

// Aggregation of evaluation CSVs into Markdown tables and hand-written static
// SVG line plots (weight evolution, loss curves).

#include <string>
#include <vector>

#include "regseg/errors.hpp"

namespace regseg::report {

// One row of `case,organ,path,dsc,msd_mm,hd_mm,hd95_mm`. Failed metric
// entries are NaN and excluded from statistics.
struct MetricsRow {
    std::string case_name, organ, path;
    double dsc, msd_mm, hd_mm, hd95_mm;
};

// Throws DataError when the header or a row does not match the schema.
std::vector<MetricsRow> read_metrics_csv(const std::string& path);

struct Stats {
    double mean = 0, stddev = 0, median = 0;
    int n = 0;       // rows contributing
    int failed = 0;  // NaN rows excluded
};
Stats aggregate(const std::vector<double>& values);

// One table per (network, output path); rows per organ with mean±std and
// median columns for DSC / MSD / HD95. `networks` pairs a display label with
// that network's metrics rows.
std::string metrics_markdown(
    const std::vector<std::pair<std::string, std::vector<MetricsRow>>>& networks);

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;  // (x, y)
};

// Static standalone SVG with axes, ticks and a legend.
std::string line_svg(const std::string& title, const std::string& xlabel,
                     const std::string& ylabel, const std::vector<Series>& series,
                     int width = 760, int height = 440);

// Column-oriented view of a generic CSV (first line = header).
struct CsvFile {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};
CsvFile read_csv(const std::string& path);

// Series extraction for the training CSVs; both validate the expected header
// prefix and throw DataError on mismatch.
std::vector<Series> weight_series(const std::string& weights_csv_path);
std::vector<Series> loss_series(const std::string& log_csv_path);

}  // namespace regseg::report
