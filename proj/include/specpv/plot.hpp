// Copyright 2026 The specpv Authors
// SPDX-License-Identifier: Apache-2.0

// SVG line charts of speedup and accept length against context length.
// Output bytes depend only on the report contents.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "specpv/bench.hpp"

namespace specpv {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // sorted by x
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string fmt_tick(double v) {
  char buf[32];
  if (std::fabs(v - std::round(v)) < 1e-9) {
    std::snprintf(buf, sizeof buf, "%.0f", v);
  } else {
    std::snprintf(buf, sizeof buf, "%.3g", v);
  }
  return buf;
}

inline std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                          "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

}  // namespace detail

/// Self-contained SVG with one polyline plus markers per series.
inline std::string render_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                                     const std::vector<Series>& series) {
  constexpr double W = 640, H = 400, L = 70, R = 170, T = 40, B = 60;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (first) {
        x0 = x1 = x;
        y0 = y1 = y;
        first = false;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  y0 = std::min(y0, 0.0);
  if (x1 - x0 < 1e-12) {
    x0 -= 1.0;
    x1 += 1.0;
  }
  if (y1 - y0 < 1e-12) y1 = y0 + 1.0;
  y1 += 0.05 * (y1 - y0);
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
  s += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  s += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" +
       detail::escape_xml(title) + "</text>\n";
  // Axes.
  s += "<line x1=\"" + detail::fmt(L) + "\" y1=\"" + detail::fmt(H - B) + "\" x2=\"" + detail::fmt(W - R) + "\" y2=\"" +
       detail::fmt(H - B) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + detail::fmt(L) + "\" y1=\"" + detail::fmt(T) + "\" x2=\"" + detail::fmt(L) + "\" y2=\"" +
       detail::fmt(H - B) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = y0 + (y1 - y0) * i / 4.0;
    const double xv = x0 + (x1 - x0) * i / 4.0;
    s += "<text x=\"" + detail::fmt(L - 6) + "\" y=\"" + detail::fmt(py(yv) + 4) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + detail::fmt_tick(yv) + "</text>\n";
    s += "<text x=\"" + detail::fmt(px(xv)) + "\" y=\"" + detail::fmt(H - B + 16) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + detail::fmt_tick(xv) +
         "</text>\n";
  }
  s += "<text x=\"" + detail::fmt((L + W - R) / 2) + "\" y=\"" + detail::fmt(H - 16) +
       "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + detail::escape_xml(x_label) +
       "</text>\n";
  s += "<text x=\"16\" y=\"" + detail::fmt((T + H - B) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       detail::fmt((T + H - B) / 2) + ")\" font-family=\"sans-serif\" font-size=\"12\">" +
       detail::escape_xml(y_label) + "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& ser = series[i];
    const std::string color = detail::kPalette[i % std::size(detail::kPalette)];
    if (ser.points.size() > 1) {
      s += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"";
      for (std::size_t k = 0; k < ser.points.size(); ++k) {
        if (k > 0) s += ' ';
        s += detail::fmt(px(ser.points[k].first)) + "," + detail::fmt(py(ser.points[k].second));
      }
      s += "\"/>\n";
    }
    for (const auto& [x, y] : ser.points) {
      s += "<circle cx=\"" + detail::fmt(px(x)) + "\" cy=\"" + detail::fmt(py(y)) + "\" r=\"3.5\" fill=\"" + color +
           "\"/>\n";
    }
    const double ly = T + 14 + 18.0 * static_cast<double>(i);
    s += "<rect x=\"" + detail::fmt(W - R + 12) + "\" y=\"" + detail::fmt(ly - 9) + "\" width=\"12\" height=\"12\" fill=\"" +
         color + "\"/>\n";
    s += "<text x=\"" + detail::fmt(W - R + 30) + "\" y=\"" + detail::fmt(ly + 1) +
         "\" font-family=\"sans-serif\" font-size=\"11\">" + detail::escape_xml(ser.label) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

/// One series per method from a report JSON; cells lacking `field` are
/// skipped. Methods appear in first-seen order.
inline std::vector<Series> report_series(const json& report, const std::string& field) {
  std::vector<Series> out;
  std::map<std::string, std::size_t> index;
  for (const auto& c : report.at("cells")) {
    if (c.value("status", "") != "ok" || !c.contains(field) || c.at(field).is_null()) continue;
    const std::string m = c.at("method").get<std::string>();
    if (!index.count(m)) {
      index[m] = out.size();
      out.push_back({m, {}});
    }
    out[index[m]].points.emplace_back(c.at("context_len").get<double>(), c.at(field).get<double>());
  }
  for (auto& s : out) std::sort(s.points.begin(), s.points.end());
  return out;
}

struct PlotResult {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> warnings;
};

/// Writes speedup_vs_context.svg and tau_vs_context.svg. A report without
/// usable points writes nothing and returns a warning.
inline PlotResult emit_plots(const json& report, const std::filesystem::path& out_dir) {
  PlotResult res;
  struct Chart {
    const char* file;
    const char* field;
    const char* title;
    const char* y_label;
  };
  const Chart charts[] = {
      {"speedup_vs_context.svg", "alpha_modeled", "Modeled speedup vs context length", "speedup (modeled)"},
      {"tau_vs_context.svg", "tau", "Accept length vs context length", "tau (accepted per step)"},
  };
  for (const auto& c : charts) {
    const auto series = report_series(report, c.field);
    if (series.empty()) {
      res.warnings.push_back(std::string("no data for ") + c.file + "; skipped");
      continue;
    }
    const auto path = out_dir / c.file;
    write_text(path, render_line_chart(c.title, "context length (tokens)", c.y_label, series));
    res.files.push_back(path);
  }
  return res;
}

}  // namespace specpv
