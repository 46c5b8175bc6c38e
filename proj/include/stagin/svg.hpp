#pragma once

// Minimal SVG emitters for the analysis outputs: attention heatmaps,
// attention-vector line plots, proportion bar charts.

#include <string>
#include <vector>

#include "stagin/common.hpp"

namespace stagin::svg {

void heatmap(const Mat& values, const std::string& title, const std::string& path);
void line_plot(const std::vector<double>& values, const std::string& title,
               const std::string& path);
void bar_plot(const std::vector<std::string>& labels, const std::vector<double>& values,
              const std::string& title, const std::string& path);

}  // namespace stagin::svg
