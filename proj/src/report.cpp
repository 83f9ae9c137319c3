#include "regseg/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace regseg::report {

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

double parse_num(const std::string& s, const std::string& context) {
    try {
        size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError("non-numeric value '" + s + "' in " + context);
    }
}

std::string fmt(double v, int prec = 3) {
    if (std::isnan(v)) return "—";
    std::ostringstream o;
    o.precision(prec);
    o << std::fixed << v;
    return o.str();
}

}  // namespace

CsvFile read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    CsvFile csv;
    std::string line;
    if (!std::getline(f, line)) throw DataError("empty CSV: " + path);
    csv.header = split_line(line);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        csv.rows.push_back(split_line(line));
    }
    return csv;
}

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
    const CsvFile csv = read_csv(path);
    const std::vector<std::string> expect = {"case", "organ",  "path",   "dsc",
                                             "msd_mm", "hd_mm", "hd95_mm"};
    if (csv.header != expect)
        throw DataError("metrics CSV header mismatch in " + path);
    std::vector<MetricsRow> rows;
    for (size_t i = 0; i < csv.rows.size(); ++i) {
        const auto& r = csv.rows[i];
        const std::string ctx = path + " row " + std::to_string(i + 2);
        if (r.size() != expect.size()) throw DataError("wrong column count in " + ctx);
        rows.push_back({r[0], r[1], r[2], parse_num(r[3], ctx), parse_num(r[4], ctx),
                        parse_num(r[5], ctx), parse_num(r[6], ctx)});
    }
    return rows;
}

Stats aggregate(const std::vector<double>& values) {
    Stats s;
    std::vector<double> v;
    for (double x : values)
        if (std::isnan(x))
            ++s.failed;
        else
            v.push_back(x);
    s.n = static_cast<int>(v.size());
    if (v.empty()) {
        s.mean = s.stddev = s.median = std::nan("");
        return s;
    }
    double sum = 0;
    for (double x : v) sum += x;
    s.mean = sum / s.n;
    double sq = 0;
    for (double x : v) sq += (x - s.mean) * (x - s.mean);
    s.stddev = s.n > 1 ? std::sqrt(sq / (s.n - 1)) : 0.0;
    std::sort(v.begin(), v.end());
    s.median = s.n % 2 ? v[static_cast<size_t>(s.n / 2)]
                       : 0.5 * (v[static_cast<size_t>(s.n / 2 - 1)] +
                                v[static_cast<size_t>(s.n / 2)]);
    return s;
}

std::string metrics_markdown(
    const std::vector<std::pair<std::string, std::vector<MetricsRow>>>& networks) {
    std::ostringstream md;
    md << "# Evaluation summary\n";
    for (const auto& [label, rows] : networks) {
        // stable (path, organ) grouping preserving first-seen order
        std::vector<std::pair<std::string, std::string>> keys;
        std::map<std::pair<std::string, std::string>, std::vector<const MetricsRow*>> groups;
        for (const auto& r : rows) {
            const auto key = std::make_pair(r.path, r.organ);
            if (!groups.count(key)) keys.push_back(key);
            groups[key].push_back(&r);
        }
        std::vector<std::string> paths;
        for (const auto& k : keys)
            if (std::find(paths.begin(), paths.end(), k.first) == paths.end())
                paths.push_back(k.first);
        for (const auto& path : paths) {
            md << "\n## " << label << " — " << path << " path\n\n";
            md << "| Organ | DSC μ±σ | DSC median | MSD (mm) μ±σ | MSD median | "
                  "HD95 (mm) μ±σ | HD95 median | failed |\n";
            md << "|---|---|---|---|---|---|---|---|\n";
            for (const auto& key : keys) {
                if (key.first != path) continue;
                std::vector<double> dsc, msd, hd95;
                int failed = 0;
                for (const MetricsRow* r : groups[key]) {
                    dsc.push_back(r->dsc);
                    msd.push_back(r->msd_mm);
                    hd95.push_back(r->hd95_mm);
                }
                const Stats sd = aggregate(dsc), sm = aggregate(msd), sh = aggregate(hd95);
                failed = std::max({sd.failed, sm.failed, sh.failed});
                md << "| " << key.second << " | " << fmt(sd.mean) << " ± " << fmt(sd.stddev)
                   << " | " << fmt(sd.median) << " | " << fmt(sm.mean) << " ± "
                   << fmt(sm.stddev) << " | " << fmt(sm.median) << " | " << fmt(sh.mean)
                   << " ± " << fmt(sh.stddev) << " | " << fmt(sh.median) << " | " << failed
                   << " |\n";
            }
        }
    }
    return md.str();
}

// ---------------------------------------------------------------------------
// SVG plots
// ---------------------------------------------------------------------------

std::string line_svg(const std::string& title, const std::string& xlabel,
                     const std::string& ylabel, const std::vector<Series>& series, int width,
                     int height) {
    const double ml = 64, mr = 150, mt = 40, mb = 48;  // margins, legend on the right
    const double pw = width - ml - mr, ph = height - mt - mb;

    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool first = true;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            if (first) {
                xmin = xmax = x;
                ymin = ymax = y;
                first = false;
            }
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    if (xmax - xmin < 1e-12) xmax = xmin + 1;
    if (ymax - ymin < 1e-12) ymax = ymin + 1;
    const double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
    auto py = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                            "#9467bd", "#8c564b", "#17becf"};

    std::ostringstream svg;
    svg.precision(6);
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << width / 2.0 << "\" y=\"22\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"15\">" << title << "</text>\n";

    // axes + ticks
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
        << mt + ph << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
        << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double xv = xmin + (xmax - xmin) * i / 5.0;
        const double yv = ymin + (ymax - ymin) * i / 5.0;
        svg << "<line x1=\"" << px(xv) << "\" y1=\"" << mt + ph << "\" x2=\"" << px(xv)
            << "\" y2=\"" << mt + ph + 5 << "\" stroke=\"black\"/>\n"
            << "<text x=\"" << px(xv) << "\" y=\"" << mt + ph + 20
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
            << fmt(xv, xmax - xmin > 50 ? 0 : 2) << "</text>\n"
            << "<line x1=\"" << ml - 5 << "\" y1=\"" << py(yv) << "\" x2=\"" << ml << "\" y2=\""
            << py(yv) << "\" stroke=\"black\"/>\n"
            << "<text x=\"" << ml - 8 << "\" y=\"" << py(yv) + 4
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
            << fmt(yv, 3) << "</text>\n";
    }
    svg << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 8
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << xlabel
        << "</text>\n"
        << "<text x=\"14\" y=\"" << mt + ph / 2
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
        << "transform=\"rotate(-90 14 " << mt + ph / 2 << ")\">" << ylabel << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const char* color = colors[si % 7];
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : series[si].points)
            if (std::isfinite(x) && std::isfinite(y)) svg << px(x) << "," << py(y) << " ";
        svg << "\"/>\n";
        const double ly = mt + 14 + 18 * static_cast<double>(si);
        svg << "<line x1=\"" << ml + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << ml + pw + 34
            << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
            << "<text x=\"" << ml + pw + 40 << "\" y=\"" << ly + 4
            << "\" font-family=\"sans-serif\" font-size=\"11\">" << series[si].name
            << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

namespace {

std::vector<Series> csv_series(const std::string& path,
                               const std::vector<std::string>& expect_prefix,
                               const std::vector<std::pair<int, std::string>>& cols,
                               int x_col) {
    const CsvFile csv = read_csv(path);
    if (csv.header.size() < expect_prefix.size())
        throw DataError("CSV header too short in " + path);
    for (size_t i = 0; i < expect_prefix.size(); ++i)
        if (csv.header[i] != expect_prefix[i])
            throw DataError("CSV header mismatch in " + path + ": expected '" +
                            expect_prefix[i] + "', got '" + csv.header[i] + "'");
    std::vector<Series> out;
    for (const auto& [ci, name] : cols) out.push_back({name, {}});
    for (size_t r = 0; r < csv.rows.size(); ++r) {
        const auto& row = csv.rows[r];
        const std::string ctx = path + " row " + std::to_string(r + 2);
        if (row.size() < expect_prefix.size()) throw DataError("wrong column count in " + ctx);
        const double x = parse_num(row[static_cast<size_t>(x_col)], ctx);
        for (size_t k = 0; k < cols.size(); ++k)
            out[k].points.emplace_back(
                x, parse_num(row[static_cast<size_t>(cols[k].first)], ctx));
    }
    return out;
}

}  // namespace

std::vector<Series> weight_series(const std::string& weights_csv_path) {
    return csv_series(weights_csv_path,
                      {"iter", "strategy", "w_ncc", "w_dscr", "w_dscs", "w_be"},
                      {{2, "w_ncc"}, {3, "w_dscr"}, {4, "w_dscs"}, {5, "w_be"}}, 0);
}

std::vector<Series> loss_series(const std::string& log_csv_path) {
    return csv_series(
        log_csv_path,
        {"iter", "l_ncc", "l_dscr", "l_dscs", "l_be", "total", "w0", "w1", "w2", "w3", "seconds"},
        {{1, "l_ncc"}, {2, "l_dscr"}, {3, "l_dscs"}, {4, "l_be"}, {5, "total"}}, 0);
}

}  // namespace regseg::report
