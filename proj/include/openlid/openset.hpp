// Copyright 2026 The OpenLID Authors
// SPDX-License-Identifier: Apache-2.0

// Max-softmax threshold rejection, the three open-set accuracies, threshold
// sweeps and their CSV/SVG reports.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "openlid/error.hpp"
#include "openlid/util.hpp"

namespace openlid {

inline constexpr double kProbSumTolerance = 1e-4;

struct Decision {
  std::optional<std::size_t> accepted;  // language index, empty when rejected
  double max_prob = 0.0;

  bool rejected() const { return !accepted.has_value(); }
};

/// Reference label of one evaluated utterance; empty = out-of-set language.
using Reference = std::optional<std::size_t>;

inline void check_threshold(double tau) {
  if (!std::isfinite(tau) || tau < 0.0) fail(ErrorKind::usage, "threshold must be a finite value >= 0");
}

/// Max probability and its first index; probs must be a distribution.
inline std::pair<std::size_t, double> top_class(std::span<const double> probs) {
  if (probs.empty()) fail(ErrorKind::data, "empty probability vector");
  double sum = 0.0;
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0 || p > 1.0 + kProbSumTolerance) {
      fail(ErrorKind::data, "malformed probabilities: entry outside [0, 1]");
    }
    sum += p;
  }
  if (std::fabs(sum - 1.0) > kProbSumTolerance) {
    fail(ErrorKind::data, "malformed probabilities: sum " + format_fixed(sum, 6) + " is not 1");
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < probs.size(); ++k)
    if (probs[k] > probs[best]) best = k;
  return {best, probs[best]};
}

/// Rejects only when the top probability is strictly below tau.
inline Decision classify_open(std::span<const double> probs, double tau) {
  check_threshold(tau);
  auto [best, p] = top_class(probs);
  if (p < tau) return {std::nullopt, p};
  return {best, p};
}

struct EvalReport {
  double threshold = 0.0;
  double overall = 0.0;  // percentages
  double in_set = 0.0;
  double out_of_set = 0.0;
  std::size_t n_in = 0;
  std::size_t n_out = 0;
  std::size_t correct_in = 0;
  std::size_t correct_reject = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline EvalReport evaluate(std::span<const Decision> decisions, std::span<const Reference> refs, double tau) {
  if (decisions.size() != refs.size()) fail(ErrorKind::data, "one reference per decision is required");
  EvalReport r;
  r.threshold = tau;
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    if (refs[i]) {
      ++r.n_in;
      if (decisions[i].accepted && *decisions[i].accepted == *refs[i]) ++r.correct_in;
    } else {
      ++r.n_out;
      if (decisions[i].rejected()) ++r.correct_reject;
    }
  }
  if (r.n_in == 0) fail(ErrorKind::data, "evaluation set has no in-set utterances");
  if (r.n_out == 0) fail(ErrorKind::data, "evaluation set has no out-of-set utterances");
  r.in_set = 100.0 * static_cast<double>(r.correct_in) / static_cast<double>(r.n_in);
  r.out_of_set = 100.0 * static_cast<double>(r.correct_reject) / static_cast<double>(r.n_out);
  r.overall = 100.0 * static_cast<double>(r.correct_in + r.correct_reject) / static_cast<double>(r.n_in + r.n_out);
  return r;
}

/// One report per threshold from a single cached probability set.
inline std::vector<EvalReport> threshold_sweep(std::span<const std::vector<double>> probs, std::span<const Reference> refs,
                                               std::span<const double> taus) {
  if (taus.empty()) fail(ErrorKind::usage, "threshold grid is empty");
  for (std::size_t i = 0; i < taus.size(); ++i) {
    check_threshold(taus[i]);
    if (i > 0 && !(taus[i - 1] < taus[i])) fail(ErrorKind::usage, "threshold grid must be strictly ascending");
  }
  std::vector<std::pair<std::size_t, double>> top;
  top.reserve(probs.size());
  for (const auto& p : probs) top.push_back(top_class(p));
  std::vector<EvalReport> out;
  std::vector<Decision> decisions(probs.size());
  for (double tau : taus) {
    for (std::size_t i = 0; i < top.size(); ++i) {
      decisions[i] = top[i].second < tau ? Decision{std::nullopt, top[i].second} : Decision{top[i].first, top[i].second};
    }
    out.push_back(evaluate(decisions, refs, tau));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Threshold grids

/// "%.4f" with trailing zeros removed, keeping at least two decimals.
inline std::string format_threshold(double tau) {
  std::string s = format_fixed(tau, 4);
  while (s.size() > 1 && s.back() == '0' && s.size() - s.find('.') > 3) s.pop_back();
  return s;
}

/// Parses "start:step:end[,extra...]" into a sorted, de-duplicated grid.
/// Any comma-separated item may itself be a single value or a range.
inline std::vector<double> parse_grid(std::string_view text) {
  auto number = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      fail(ErrorKind::usage, "invalid threshold grid item '" + s + "' in '" + std::string(text) + "'");
    }
  };
  std::vector<double> out;
  for (const auto& item : split(text, ',')) {
    if (item.empty()) fail(ErrorKind::usage, "empty item in threshold grid '" + std::string(text) + "'");
    auto parts = split(item, ':');
    if (parts.size() == 1) {
      out.push_back(number(parts[0]));
    } else if (parts.size() == 3) {
      const double start = number(parts[0]), step = number(parts[1]), end = number(parts[2]);
      if (!(step > 0.0) || end < start) fail(ErrorKind::usage, "threshold range '" + item + "' needs step > 0 and end >= start");
      for (std::size_t i = 0;; ++i) {
        const double v = std::round((start + static_cast<double>(i) * step) * 1e9) / 1e9;
        if (v > end + 1e-9) break;
        out.push_back(v);
      }
    } else {
      fail(ErrorKind::usage, "threshold grid item '" + item + "' is neither a value nor start:step:end");
    }
  }
  for (double v : out) check_threshold(v);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end(), [](double a, double b) { return std::fabs(a - b) < 1e-9; }), out.end());
  return out;
}

inline constexpr std::string_view kDefaultGrid = "0.10:0.05:0.90,0.7625,0.775,0.7875,0.8125,0.825";

inline std::vector<double> default_grid() { return parse_grid(kDefaultGrid); }

// ---------------------------------------------------------------------------
// Reports

inline constexpr std::string_view kReportCsvHeader = "threshold,overall,in_set,out_of_set";

inline std::string render_csv(std::span<const EvalReport> reports) {
  std::string out(kReportCsvHeader);
  out += '\n';
  for (const auto& r : reports) {
    out += format_threshold(r.threshold) + "," + format_fixed(r.overall, 1) + "," + format_fixed(r.in_set, 1) + "," +
           format_fixed(r.out_of_set, 1) + "\n";
  }
  return out;
}

/// Accuracy-vs-threshold line chart: SVG 1.1, 800x500 viewBox.
inline std::string render_svg(std::span<const EvalReport> reports, std::string_view title = "Accuracy (%) vs threshold") {
  if (reports.empty()) fail(ErrorKind::usage, "no reports to plot");
  constexpr double left = 70, right = 630, top = 50, bottom = 430;
  double lo = reports.front().threshold, hi = reports.back().threshold;
  for (const auto& r : reports) {
    lo = std::min(lo, r.threshold);
    hi = std::max(hi, r.threshold);
  }
  if (hi - lo < 1e-9) {
    lo -= 0.05;
    hi += 0.05;
  }
  auto px = [&](double tau) { return left + (tau - lo) / (hi - lo) * (right - left); };
  auto py = [&](double pct) { return bottom - pct / 100.0 * (bottom - top); };
  auto f2 = [](double v) { return format_fixed(v, 2); };

  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"800\" height=\"500\" viewBox=\"0 0 800 500\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"800\" height=\"500\" fill=\"white\"/>\n";
  s += "<text x=\"400\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"18\">" + std::string(title) +
       "</text>\n";
  // Grid and y axis ticks.
  for (int pct = 0; pct <= 100; pct += 20) {
    const double y = py(pct);
    s += "<line x1=\"" + f2(left) + "\" y1=\"" + f2(y) + "\" x2=\"" + f2(right) + "\" y2=\"" + f2(y) +
         "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    s += "<text x=\"" + f2(left - 8) + "\" y=\"" + f2(y + 4) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" + std::to_string(pct) + "</text>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    const double tau = lo + (hi - lo) * i / 4.0;
    const double x = px(tau);
    s += "<line x1=\"" + f2(x) + "\" y1=\"" + f2(bottom) + "\" x2=\"" + f2(x) + "\" y2=\"" + f2(bottom + 5) +
         "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    s += "<text x=\"" + f2(x) + "\" y=\"" + f2(bottom + 20) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + format_threshold(tau) + "</text>\n";
  }
  s += "<line x1=\"" + f2(left) + "\" y1=\"" + f2(bottom) + "\" x2=\"" + f2(right) + "\" y2=\"" + f2(bottom) +
       "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
  s += "<line x1=\"" + f2(left) + "\" y1=\"" + f2(top) + "\" x2=\"" + f2(left) + "\" y2=\"" + f2(bottom) +
       "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
  s += "<text x=\"" + f2((left + right) / 2) + "\" y=\"" + f2(bottom + 48) +
       "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">Threshold</text>\n";
  s += "<text x=\"20\" y=\"" + f2((top + bottom) / 2) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\" "
       "transform=\"rotate(-90 20 " + f2((top + bottom) / 2) + ")\">Accuracy (%)</text>\n";

  struct Series {
    const char* name;
    const char* color;
    double EvalReport::*field;
  };
  const Series series[] = {{"overall", "#1f77b4", &EvalReport::overall},
                           {"in-set", "#2ca02c", &EvalReport::in_set},
                           {"out-of-set", "#d62728", &EvalReport::out_of_set}};
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& se = series[k];
    std::string pts;
    for (const auto& r : reports) {
      if (!pts.empty()) pts += ' ';
      pts += f2(px(r.threshold)) + "," + f2(py(r.*se.field));
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(se.color) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    const double ly = top + 20 + 24.0 * static_cast<double>(k);
    s += "<line x1=\"650\" y1=\"" + f2(ly) + "\" x2=\"680\" y2=\"" + f2(ly) + "\" stroke=\"" + se.color +
         "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"688\" y=\"" + f2(ly + 4) + "\" font-family=\"sans-serif\" font-size=\"13\">" + se.name + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

/// Writes <prefix>.csv and <prefix>.svg; returns their paths.
inline std::vector<fs::path> render_reports(std::span<const EvalReport> reports, const fs::path& out_prefix) {
  if (reports.empty()) fail(ErrorKind::usage, "no reports to render");
  const fs::path csv = out_prefix.string() + ".csv";
  const fs::path svg = out_prefix.string() + ".svg";
  write_file(csv, render_csv(reports));
  write_file(svg, render_svg(reports));
  return {csv, svg};
}

}  // namespace openlid
