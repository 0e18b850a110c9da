#pragma once

#include <string>
#include <vector>

#include "projprobe/eval.hpp"

namespace projprobe {

// One aggregated table row: records grouped by (scenario, loss, axis, value)
// with seed-level accuracies reduced to mean/std.
struct SummaryRow {
    std::string scenario;
    std::string loss;
    std::string axis;    // "-" when the record came from a single run
    std::string value;   // axis value, "-" when not swept
    double clean_mu = 0.0;
    double adv_mu = 0.0;
    double adv_sigma = 0.0;
    double delta = 0.0;  // clean_mu - adv_mu
    bool high_variance = false;
    int runs = 0;
};

std::vector<SummaryRow> summarize_records(const std::vector<RunRecord>& records,
                                          double sigma_tol = 0.25);

// Fixed column order:
// scenario,loss,axis,value,clean_mu,adv_mu,adv_sigma,delta,high_variance,runs
void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows);

// Minimal self-contained SVG charts.
struct Series {
    std::string label;
    std::vector<double> y;
};

// x labels shared by all series; one polyline per series
void write_line_plot_svg(const std::string& path, const std::string& title,
                         const std::string& x_label, const std::string& y_label,
                         const std::vector<std::string>& x_ticks,
                         const std::vector<Series>& series);

void write_bar_plot_svg(const std::string& path, const std::string& title,
                        const std::string& y_label,
                        const std::vector<std::string>& labels,
                        const std::vector<double>& values);

// Renders one plot per sweep axis found in the rows (line for numeric axes,
// bars otherwise) into dir; returns the paths written.
std::vector<std::string> write_plots(const std::string& dir,
                                     const std::vector<SummaryRow>& rows);

}  // namespace projprobe
