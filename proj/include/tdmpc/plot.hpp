#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tdmpc/trainer.hpp"

namespace tdmpc {

/// One metric of one run, at the rows where it is present.
struct Series {
  std::vector<double> steps;
  std::vector<double> values;
};

/// Columns of metrics.csv that can be plotted (every column but env_step).
const std::vector<std::string>& metric_names();

/// Throws std::invalid_argument for an unknown metric name.
Series extract_series(const std::vector<MetricsRow>& rows, const std::string& metric);

struct AveragedSeries {
  std::vector<double> steps;
  std::vector<double> mean;
  std::vector<double> std;  // population, across runs
  std::size_t runs = 0;
  /// True when the runs had different grids and were interpolated.
  bool resampled = false;
};

/// Average across runs at matching env steps. Runs on different grids are
/// linearly interpolated onto the grid with the fewest points, restricted
/// to the step range every run covers.
AveragedSeries average_series(const std::vector<Series>& runs);

/// Standalone SVG of the mean curve with a +-1 std band.
std::string render_svg(const AveragedSeries& s, const std::string& metric);

/// `env_step,mean,std,runs` rows.
std::string summary_csv(const AveragedSeries& s);

}  // namespace tdmpc
