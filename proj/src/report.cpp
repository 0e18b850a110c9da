#include "projprobe/report.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace projprobe {

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            default: out += c;
        }
    }
    return out;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b"};

}  // namespace

std::vector<SummaryRow> summarize_records(const std::vector<RunRecord>& records,
                                          double sigma_tol) {
    struct Group {
        std::vector<double> clean, adv;
    };
    std::map<std::array<std::string, 4>, Group> groups;
    for (const RunRecord& r : records) {
        const std::array<std::string, 4> key{r.scenario, r.loss,
                                             r.axis.empty() ? "-" : r.axis,
                                             r.axis_value.empty() ? "-" : r.axis_value};
        Group& g = groups[key];
        g.clean.push_back(r.clean_accuracy);
        g.adv.push_back(r.adv_accuracy);
    }
    std::vector<SummaryRow> rows;
    for (auto& [key, g] : groups) {
        const AggregateStats clean = aggregate_runs(g.clean, sigma_tol);
        const AggregateStats adv = aggregate_runs(g.adv, sigma_tol);
        SummaryRow row;
        row.scenario = key[0];
        row.loss = key[1];
        row.axis = key[2];
        row.value = key[3];
        row.clean_mu = clean.mu;
        row.adv_mu = adv.mu;
        row.adv_sigma = adv.sigma;
        row.delta = clean.mu - adv.mu;
        row.high_variance = adv.high_variance;
        row.runs = adv.n;
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ConfigError("cannot write table: " + path);
    os << "scenario,loss,axis,value,clean_mu,adv_mu,adv_sigma,delta,high_variance,runs\n";
    for (const SummaryRow& r : rows)
        os << r.scenario << ',' << r.loss << ',' << r.axis << ',' << r.value << ','
           << fmt(r.clean_mu) << ',' << fmt(r.adv_mu) << ',' << fmt(r.adv_sigma) << ','
           << fmt(r.delta) << ',' << (r.high_variance ? 1 : 0) << ',' << r.runs << "\n";
}

// -----------------------------------------------------------------------
// SVG plotting

namespace {

constexpr int kW = 640, kH = 420;
constexpr int kMarginL = 70, kMarginR = 20, kMarginT = 48, kMarginB = 64;

struct Canvas {
    std::ostringstream svg;

    void open(const std::string& title) {
        svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << kW << "' height='" << kH
            << "' viewBox='0 0 " << kW << " " << kH << "'>\n"
            << "<rect width='100%' height='100%' fill='white'/>\n"
            << "<text x='" << kW / 2 << "' y='24' text-anchor='middle' font-size='16' "
               "font-family='sans-serif'>"
            << xml_escape(title) << "</text>\n";
    }

    void axes(const std::string& x_label, const std::string& y_label, double y0, double y1) {
        const int px0 = kMarginL, px1 = kW - kMarginR;
        const int py0 = kH - kMarginB, py1 = kMarginT;
        svg << "<line x1='" << px0 << "' y1='" << py0 << "' x2='" << px1 << "' y2='" << py0
            << "' stroke='black'/>\n"
            << "<line x1='" << px0 << "' y1='" << py0 << "' x2='" << px0 << "' y2='" << py1
            << "' stroke='black'/>\n";
        for (int i = 0; i <= 4; ++i) {
            const double v = y0 + (y1 - y0) * i / 4.0;
            const double y = py0 - (py0 - py1) * i / 4.0;
            svg << "<text x='" << px0 - 8 << "' y='" << y + 4
                << "' text-anchor='end' font-size='11' font-family='sans-serif'>" << fmt(v)
                << "</text>\n"
                << "<line x1='" << px0 << "' y1='" << y << "' x2='" << px1 << "' y2='" << y
                << "' stroke='#dddddd'/>\n";
        }
        svg << "<text x='" << (px0 + px1) / 2 << "' y='" << kH - 12
            << "' text-anchor='middle' font-size='13' font-family='sans-serif'>"
            << xml_escape(x_label) << "</text>\n"
            << "<text x='16' y='" << (py0 + py1) / 2
            << "' text-anchor='middle' font-size='13' font-family='sans-serif' transform='rotate(-90 16 "
            << (py0 + py1) / 2 << ")'>" << xml_escape(y_label) << "</text>\n";
    }

    void close(std::ofstream& os) { os << svg.str() << "</svg>\n"; }
};

std::pair<double, double> y_range(const std::vector<Series>& series) {
    double lo = 1e300, hi = -1e300;
    for (const auto& s : series)
        for (double v : s.y) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (lo > hi) { lo = 0.0; hi = 1.0; }
    const double pad = std::max(0.02, (hi - lo) * 0.1);
    return {std::max(0.0, lo - pad), hi + pad};
}

}  // namespace

void write_line_plot_svg(const std::string& path, const std::string& title,
                         const std::string& x_label, const std::string& y_label,
                         const std::vector<std::string>& x_ticks,
                         const std::vector<Series>& series) {
    if (x_ticks.empty() || series.empty())
        throw ValidationError("plot: empty data for " + path);
    for (const auto& s : series)
        if (s.y.size() != x_ticks.size())
            throw ValidationError("plot: series/tick length mismatch for " + path);

    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ConfigError("cannot write plot: " + path);

    const auto [y0, y1] = y_range(series);
    const int px0 = kMarginL, px1 = kW - kMarginR;
    const int py0 = kH - kMarginB, py1 = kMarginT;
    const int n = static_cast<int>(x_ticks.size());
    auto xpos = [&](int i) {
        return n == 1 ? (px0 + px1) / 2.0 : px0 + (px1 - px0) * static_cast<double>(i) / (n - 1);
    };
    auto ypos = [&](double v) { return py0 - (py0 - py1) * (v - y0) / (y1 - y0); };

    Canvas c;
    c.open(title);
    c.axes(x_label, y_label, y0, y1);
    for (int i = 0; i < n; ++i)
        c.svg << "<text x='" << xpos(i) << "' y='" << py0 + 18
              << "' text-anchor='middle' font-size='11' font-family='sans-serif'>"
              << xml_escape(x_ticks[i]) << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kPalette[s % std::size(kPalette)];
        c.svg << "<polyline fill='none' stroke='" << color << "' stroke-width='2' points='";
        for (int i = 0; i < n; ++i) c.svg << xpos(i) << "," << ypos(series[s].y[i]) << " ";
        c.svg << "'/>\n";
        for (int i = 0; i < n; ++i)
            c.svg << "<circle cx='" << xpos(i) << "' cy='" << ypos(series[s].y[i])
                  << "' r='3' fill='" << color << "'/>\n";
        c.svg << "<text x='" << px1 - 8 << "' y='" << py1 + 16 + 16 * static_cast<int>(s)
              << "' text-anchor='end' font-size='12' font-family='sans-serif' fill='" << color
              << "'>" << xml_escape(series[s].label) << "</text>\n";
    }
    c.close(os);
}

void write_bar_plot_svg(const std::string& path, const std::string& title,
                        const std::string& y_label, const std::vector<std::string>& labels,
                        const std::vector<double>& values) {
    if (labels.empty() || labels.size() != values.size())
        throw ValidationError("plot: bad bar data for " + path);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ConfigError("cannot write plot: " + path);

    double hi = 0.0;
    for (double v : values) hi = std::max(hi, v);
    if (hi <= 0.0) hi = 1.0;
    hi *= 1.1;
    const int px0 = kMarginL, px1 = kW - kMarginR;
    const int py0 = kH - kMarginB, py1 = kMarginT;
    const int n = static_cast<int>(labels.size());
    const double slot = static_cast<double>(px1 - px0) / n;

    Canvas c;
    c.open(title);
    c.axes("", y_label, 0.0, hi);
    for (int i = 0; i < n; ++i) {
        const double h = (py0 - py1) * values[i] / hi;
        const double x = px0 + slot * i + slot * 0.15;
        c.svg << "<rect x='" << x << "' y='" << py0 - h << "' width='" << slot * 0.7
              << "' height='" << h << "' fill='" << kPalette[i % std::size(kPalette)] << "'/>\n"
              << "<text x='" << px0 + slot * (i + 0.5) << "' y='" << py0 + 18
              << "' text-anchor='middle' font-size='11' font-family='sans-serif'>"
              << xml_escape(labels[i]) << "</text>\n";
    }
    c.close(os);
}

std::vector<std::string> write_plots(const std::string& dir, const std::vector<SummaryRow>& rows) {
    std::map<std::string, std::vector<const SummaryRow*>> by_axis;
    for (const SummaryRow& r : rows)
        if (r.axis != "-") by_axis[r.axis].push_back(&r);

    std::vector<std::string> written;
    for (auto& [axis, group] : by_axis) {
        // one series per (scenario, loss) pair, points ordered by axis value
        std::map<std::string, std::map<std::string, double>> series_map;
        std::vector<std::string> ticks;
        for (const SummaryRow* r : group) {
            series_map[r->scenario + "/" + r->loss][r->value] = r->adv_mu;
            if (std::find(ticks.begin(), ticks.end(), r->value) == ticks.end())
                ticks.push_back(r->value);
        }
        const bool numeric = std::all_of(ticks.begin(), ticks.end(), [](const std::string& s) {
            char* end = nullptr;
            std::strtod(s.c_str(), &end);
            return end && *end == '\0' && !s.empty();
        });
        const std::string path = dir + "/sweep_" + axis + ".svg";
        if (numeric) {
            std::sort(ticks.begin(), ticks.end(), [](const std::string& a, const std::string& b) {
                return std::stod(a) < std::stod(b);
            });
            std::vector<Series> series;
            for (auto& [label, pts] : series_map) {
                Series s{label, {}};
                for (const auto& tick : ticks) {
                    auto it = pts.find(tick);
                    s.y.push_back(it == pts.end() ? 0.0 : it->second);
                }
                series.push_back(std::move(s));
            }
            write_line_plot_svg(path, "adversarial accuracy vs " + axis, axis,
                                "adversarial accuracy", ticks, series);
        } else {
            std::vector<std::string> labels;
            std::vector<double> values;
            for (const SummaryRow* r : group) {
                labels.push_back(r->value);
                values.push_back(r->adv_mu);
            }
            write_bar_plot_svg(path, "adversarial accuracy by " + axis, "adversarial accuracy",
                               labels, values);
        }
        written.push_back(path);
    }
    return written;
}

}  // namespace projprobe
