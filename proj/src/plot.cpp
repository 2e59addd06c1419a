#include "tdmpc/plot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <optional>
#include <sstream>
#include <stdexcept>

namespace tdmpc {
namespace {

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::string px(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << v;
  return os.str();
}

std::optional<double> pick(const MetricsRow& r, const std::string& m) {
  auto loss = [&](double LossLog::*f) -> std::optional<double> {
    if (!r.losses) return std::nullopt;
    return (*r.losses).*f;
  };
  if (m == "episode_return") return r.episode_return;
  if (m == "loss_reward") return loss(&LossLog::reward);
  if (m == "loss_value") return loss(&LossLog::value);
  if (m == "loss_consistency") return loss(&LossLog::consistency);
  if (m == "loss_reconstruction") return loss(&LossLog::reconstruction);
  if (m == "loss_total") return loss(&LossLog::total);
  if (m == "loss_policy") return loss(&LossLog::policy);
  if (m == "eval_mean") return r.eval_mean;
  if (m == "eval_std") return r.eval_std;
  if (m == "wall_seconds") return r.wall_seconds;
  throw std::invalid_argument("unknown metric '" + m + "'");
}

double interpolate(const Series& s, double x) {
  auto it = std::lower_bound(s.steps.begin(), s.steps.end(), x);
  const std::size_t j = static_cast<std::size_t>(it - s.steps.begin());
  if (j < s.steps.size() && s.steps[j] == x) return s.values[j];
  if (j == 0) return s.values.front();
  if (j == s.steps.size()) return s.values.back();
  const double t = (x - s.steps[j - 1]) / (s.steps[j] - s.steps[j - 1]);
  return s.values[j - 1] + t * (s.values[j] - s.values[j - 1]);
}

}  // namespace

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{
      "episode_return",      "loss_reward", "loss_value", "loss_consistency",
      "loss_reconstruction", "loss_total",  "loss_policy", "eval_mean",
      "eval_std",            "wall_seconds"};
  return names;
}

Series extract_series(const std::vector<MetricsRow>& rows, const std::string& metric) {
  Series s;
  for (const auto& r : rows) {
    if (auto v = pick(r, metric)) {
      s.steps.push_back(static_cast<double>(r.env_step));
      s.values.push_back(*v);
    }
  }
  if (rows.empty()) pick(MetricsRow{}, metric);  // still reject unknown names
  return s;
}

AveragedSeries average_series(const std::vector<Series>& runs) {
  if (runs.empty()) throw std::invalid_argument("no runs to average");
  for (const auto& r : runs) {
    if (r.steps.empty()) throw std::invalid_argument("a run has no values for this metric");
    if (r.steps.size() != r.values.size()) throw std::invalid_argument("ragged series");
  }
  AveragedSeries out;
  out.runs = runs.size();
  const bool same = std::all_of(runs.begin(), runs.end(),
                                [&](const Series& r) { return r.steps == runs[0].steps; });
  if (same) {
    out.steps = runs[0].steps;
  } else {
    out.resampled = true;
    const Series* coarse = &runs[0];
    double lo = runs[0].steps.front(), hi = runs[0].steps.back();
    for (const auto& r : runs) {
      if (r.steps.size() < coarse->steps.size()) coarse = &r;
      lo = std::max(lo, r.steps.front());
      hi = std::min(hi, r.steps.back());
    }
    for (double x : coarse->steps)
      if (x >= lo && x <= hi) out.steps.push_back(x);
    if (out.steps.empty()) throw std::invalid_argument("runs share no common step range");
  }
  const double n = static_cast<double>(runs.size());
  for (double x : out.steps) {
    double sum = 0.0;
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(interpolate(r, x));
    for (double y : v) sum += y;
    const double mean = sum / n;
    double ss = 0.0;
    for (double y : v) ss += (y - mean) * (y - mean);
    out.mean.push_back(mean);
    out.std.push_back(std::sqrt(ss / n));
  }
  return out;
}

std::string render_svg(const AveragedSeries& s, const std::string& metric) {
  const double W = 640, H = 400, left = 70, right = 20, top = 30, bottom = 50;
  double x0 = s.steps.front(), x1 = s.steps.back();
  double y0 = s.mean[0] - s.std[0], y1 = s.mean[0] + s.std[0];
  for (std::size_t i = 0; i < s.steps.size(); ++i) {
    y0 = std::min(y0, s.mean[i] - s.std[i]);
    y1 = std::max(y1, s.mean[i] + s.std[i]);
  }
  if (x1 == x0) x1 = x0 + 1.0;
  if (y1 == y0) {
    y0 -= 1.0;
    y1 += 1.0;
  }
  auto X = [&](double x) { return left + (x - x0) / (x1 - x0) * (W - left - right); };
  auto Y = [&](double y) { return top + (y1 - y) / (y1 - y0) * (H - top - bottom); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<polygon class=\"band\" fill=\"#4c72b0\" fill-opacity=\"0.25\" stroke=\"none\" points=\"";
  for (std::size_t i = 0; i < s.steps.size(); ++i)
    os << px(X(s.steps[i])) << "," << px(Y(s.mean[i] + s.std[i])) << " ";
  for (std::size_t i = s.steps.size(); i-- > 0;)
    os << px(X(s.steps[i])) << "," << px(Y(s.mean[i] - s.std[i])) << " ";
  os << "\"/>\n";
  os << "<polyline class=\"mean\" fill=\"none\" stroke=\"#4c72b0\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < s.steps.size(); ++i)
    os << px(X(s.steps[i])) << "," << px(Y(s.mean[i])) << " ";
  os << "\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\""
     << H - bottom << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\""
     << H - bottom << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << left << "\" y=\"" << H - bottom + 18 << "\" font-size=\"12\">" << num(x0)
     << "</text>\n";
  os << "<text x=\"" << W - right << "\" y=\"" << H - bottom + 18
     << "\" font-size=\"12\" text-anchor=\"end\">" << num(x1) << "</text>\n";
  os << "<text x=\"" << left - 6 << "\" y=\"" << top + 4
     << "\" font-size=\"12\" text-anchor=\"end\">" << num(y1) << "</text>\n";
  os << "<text x=\"" << left - 6 << "\" y=\"" << H - bottom
     << "\" font-size=\"12\" text-anchor=\"end\">" << num(y0) << "</text>\n";
  os << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 12
     << "\" font-size=\"13\" text-anchor=\"middle\">env_step</text>\n";
  os << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << top - 10
     << "\" font-size=\"14\" text-anchor=\"middle\">" << metric << " (" << s.runs
     << (s.runs == 1 ? " run" : " runs") << ", mean +- 1 std)</text>\n";
  os << "</svg>\n";
  return os.str();
}

std::string summary_csv(const AveragedSeries& s) {
  std::string out = "env_step,mean,std,runs\n";
  for (std::size_t i = 0; i < s.steps.size(); ++i)
    out += num(s.steps[i]) + "," + num(s.mean[i]) + "," + num(s.std[i]) + "," +
           std::to_string(s.runs) + "\n";
  return out;
}

}  // namespace tdmpc
