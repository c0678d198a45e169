#include "matl/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace matl {

EvalMatrix parse_matrix_long(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line.rfind("train_count,eval_count,train_seed,eval_seed,mean", 0) != 0)
    throw ConfigError("not a matrix_long.csv file: unexpected header");
  std::vector<int> train_counts, eval_counts;
  std::vector<RunValue> runs;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 5) throw ConfigError("matrix_long.csv line " + std::to_string(line_no) + ": expected 5 fields");
    try {
      RunValue r;
      r.train_count = std::stoi(f[0]);
      r.eval_count = std::stoi(f[1]);
      r.train_seed = std::stoull(f[2]);
      r.eval_seed = std::stoull(f[3]);
      if (f[4] != "FAIL") r.value = std::stod(f[4]);
      if (std::find(train_counts.begin(), train_counts.end(), r.train_count) == train_counts.end())
        train_counts.push_back(r.train_count);
      if (std::find(eval_counts.begin(), eval_counts.end(), r.eval_count) == eval_counts.end())
        eval_counts.push_back(r.eval_count);
      runs.push_back(r);
    } catch (const std::logic_error&) {
      throw ConfigError("matrix_long.csv line " + std::to_string(line_no) + ": unreadable number");
    }
  }
  if (runs.empty()) throw ConfigError("matrix_long.csv holds no rows");
  return assemble_matrix(train_counts, eval_counts, std::move(runs));
}

namespace {

constexpr double kWidth = 800, kHeight = 600;
constexpr double kMarginLeft = 90, kMarginRight = 40, kMarginTop = 60, kMarginBottom = 80;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string header(const std::string& title) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
         "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"600\" viewBox=\"0 0 800 600\" "
         "font-family=\"sans-serif\" font-size=\"14\">\n"
         "<rect width=\"800\" height=\"600\" fill=\"white\"/>\n"
         "<text x=\"400\" y=\"32\" text-anchor=\"middle\" font-size=\"18\">" +
         title + "</text>\n";
}

// Round-number tick spacing covering [lo, hi] with about five ticks.
double tick_step(double lo, double hi) {
  const double span = std::max(hi - lo, 1e-9);
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10.0 * mag;
}

}  // namespace

std::string line_plot_svg(const EvalMatrix& m, int eval_count, const std::string& value_label) {
  const auto col = std::find(m.eval_counts.begin(), m.eval_counts.end(), eval_count);
  if (col == m.eval_counts.end()) {
    std::string avail;
    for (int c : m.eval_counts) avail += (avail.empty() ? "" : ", ") + std::to_string(c);
    throw UsageError("eval count " + std::to_string(eval_count) + " not in the data; available: " + avail);
  }
  const auto j = static_cast<std::size_t>(col - m.eval_counts.begin());

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < m.train_counts.size(); ++i) {
    const MatrixCell& c = m.cells[i][j];
    if (c.failed) continue;
    lo = std::min(lo, c.mean - c.std);
    hi = std::max(hi, c.mean + c.std);
  }
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  const double step = tick_step(lo, hi);
  lo = std::floor(lo / step) * step;
  hi = std::ceil(hi / step) * step;
  if (hi <= lo) hi = lo + step;

  const double pw = kWidth - kMarginLeft - kMarginRight, ph = kHeight - kMarginTop - kMarginBottom;
  const std::size_t nx = m.train_counts.size();
  auto xpos = [&](std::size_t i) { return kMarginLeft + (nx == 1 ? pw / 2 : pw * static_cast<double>(i) / (nx - 1)); };
  auto ypos = [&](double v) { return kMarginTop + ph * (hi - v) / (hi - lo); };

  std::string svg = header(std::to_string(eval_count) + " Agents Evaluation");
  svg += "<rect x=\"" + num(kMarginLeft) + "\" y=\"" + num(kMarginTop) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
  for (double v = lo; v <= hi + step * 1e-6; v += step) {
    const double y = ypos(v);
    svg += "<line x1=\"" + num(kMarginLeft - 5) + "\" y1=\"" + num(y) + "\" x2=\"" + num(kMarginLeft + pw) + "\" y2=\"" + num(y) +
           "\" stroke=\"#dddddd\"/>\n";
    svg += "<text x=\"" + num(kMarginLeft - 8) + "\" y=\"" + num(y + 5) + "\" text-anchor=\"end\">" + num(v) + "</text>\n";
  }
  for (std::size_t i = 0; i < nx; ++i)
    svg += "<text x=\"" + num(xpos(i)) + "\" y=\"" + num(kMarginTop + ph + 22) + "\" text-anchor=\"middle\">" +
           std::to_string(m.train_counts[i]) + "</text>\n";
  svg += "<text x=\"" + num(kMarginLeft + pw / 2) + "\" y=\"" + num(kHeight - 25) +
         "\" text-anchor=\"middle\">Number of agents in training</text>\n";
  svg += "<text x=\"25\" y=\"" + num(kMarginTop + ph / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 25 " +
         num(kMarginTop + ph / 2) + ")\">" + value_label + "</text>\n";

  std::string path;
  for (std::size_t i = 0; i < nx; ++i) {
    const MatrixCell& c = m.cells[i][j];
    if (c.failed) continue;
    const double x = xpos(i);
    path += (path.empty() ? "M" : " L") + num(x) + " " + num(ypos(c.mean));
    svg += "<line x1=\"" + num(x) + "\" y1=\"" + num(ypos(c.mean - c.std)) + "\" x2=\"" + num(x) + "\" y2=\"" +
           num(ypos(c.mean + c.std)) + "\" stroke=\"#1f77b4\"/>\n";
    for (double v : {c.mean - c.std, c.mean + c.std})
      svg += "<line x1=\"" + num(x - 6) + "\" y1=\"" + num(ypos(v)) + "\" x2=\"" + num(x + 6) + "\" y2=\"" +
             num(ypos(v)) + "\" stroke=\"#1f77b4\"/>\n";
    svg += "<circle cx=\"" + num(x) + "\" cy=\"" + num(ypos(c.mean)) + "\" r=\"4\" fill=\"#1f77b4\"/>\n";
  }
  if (!path.empty()) svg += "<path d=\"" + path + "\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n";
  svg += "</svg>\n";
  return svg;
}

std::string heatmap_svg(const EvalMatrix& m, const std::string& value_label) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& row : m.cells)
    for (const auto& c : row)
      if (!c.failed) lo = std::min(lo, c.mean), hi = std::max(hi, c.mean);
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  const double pw = kWidth - kMarginLeft - kMarginRight, ph = kHeight - kMarginTop - kMarginBottom;
  const double cw = pw / static_cast<double>(m.eval_counts.size());
  const double ch = ph / static_cast<double>(m.train_counts.size());

  std::string svg = header("Transfer matrix: " + value_label);
  for (std::size_t i = 0; i < m.train_counts.size(); ++i) {
    const double y = kMarginTop + ch * static_cast<double>(i);
    svg += "<text x=\"" + num(kMarginLeft - 8) + "\" y=\"" + num(y + ch / 2 + 5) + "\" text-anchor=\"end\">" +
           std::to_string(m.train_counts[i]) + "</text>\n";
    for (std::size_t j = 0; j < m.eval_counts.size(); ++j) {
      const MatrixCell& c = m.cells[i][j];
      const double x = kMarginLeft + cw * static_cast<double>(j);
      std::string fill = "#bbbbbb", label = "FAIL";
      if (!c.failed) {
        const double t = hi > lo ? (c.mean - lo) / (hi - lo) : 0.5;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", static_cast<int>(std::lround(255 - 200 * t)),
                      static_cast<int>(std::lround(255 - 120 * t)), 255);
        fill = buf;
        label = num(c.mean) + "±" + num(c.std);
      }
      svg += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(cw) + "\" height=\"" + num(ch) +
             "\" fill=\"" + fill + "\" stroke=\"white\"/>\n";
      svg += "<text x=\"" + num(x + cw / 2) + "\" y=\"" + num(y + ch / 2 + 5) + "\" text-anchor=\"middle\">" +
             label + "</text>\n";
    }
  }
  for (std::size_t j = 0; j < m.eval_counts.size(); ++j)
    svg += "<text x=\"" + num(kMarginLeft + cw * (static_cast<double>(j) + 0.5)) + "\" y=\"" + num(kMarginTop + ph + 22) +
           "\" text-anchor=\"middle\">" + std::to_string(m.eval_counts[j]) + "</text>\n";
  svg += "<text x=\"" + num(kMarginLeft + pw / 2) + "\" y=\"" + num(kHeight - 25) +
         "\" text-anchor=\"middle\">Number of agents in evaluation</text>\n";
  svg += "<text x=\"25\" y=\"" + num(kMarginTop + ph / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 25 " +
         num(kMarginTop + ph / 2) + ")\">Number of agents in training</text>\n";
  svg += "</svg>\n";
  return svg;
}

}  // namespace matl
