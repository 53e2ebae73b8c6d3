#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

#include "psyt/csv.h"
#include "psyt/eval.h"

namespace psyt {

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed2(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

double percent(std::size_t part, std::size_t whole) {
  return whole == 0 ? 0.0 : 100.0 * static_cast<double>(part) / static_cast<double>(whole);
}

Grid make_grid(std::vector<int> levels, const std::vector<std::pair<int, int>>& obs) {
  Grid g;
  g.levels = std::move(levels);
  const std::size_t k = g.levels.size();
  for (int h : g.levels)
    for (int m : g.levels) g.cells.push_back({h, m, 0, 0.0, 0.0});
  auto index = [&](int v) {
    const auto it = std::lower_bound(g.levels.begin(), g.levels.end(), v);
    if (it == g.levels.end() || *it != v) throw EvalError("grid value " + std::to_string(v) + " is not a level");
    return static_cast<std::size_t>(it - g.levels.begin());
  };
  for (const auto& [h, m] : obs) ++g.cells[index(h) * k + index(m)].count;
  const double n = static_cast<double>(obs.size());
  const double p = 1.0 / static_cast<double>(k * k);
  const double expect = n * p, sd = std::sqrt(n * p * (1.0 - p));
  for (GridCell& c : g.cells) {
    c.percent = percent(c.count, obs.size());
    c.z = sd > 0.0 ? (static_cast<double>(c.count) - expect) / sd : 0.0;
  }
  return g;
}

// Mid-ranks, 1-based.
std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = mid;
    i = j + 1;
  }
  return r;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

nlohmann::json grid_json(const Grid& g) {
  nlohmann::json cells = nlohmann::json::array();
  for (const GridCell& c : g.cells)
    cells.push_back({{"human", c.human}, {"model", c.model}, {"count", c.count}, {"percent", c.percent}, {"z", c.z}});
  return {{"levels", g.levels}, {"cells", cells}};
}

Grid grid_from(const nlohmann::json& j) {
  Grid g;
  g.levels = j.at("levels").get<std::vector<int>>();
  for (const auto& c : j.at("cells"))
    g.cells.push_back({c.at("human").get<int>(), c.at("model").get<int>(), c.at("count").get<std::size_t>(),
                       c.at("percent").get<double>(), c.at("z").get<double>()});
  if (g.cells.size() != g.levels.size() * g.levels.size()) throw EvalError("grid cell count does not match levels");
  return g;
}

nlohmann::json corr_json(const RankCorrelation& c) {
  return {{"method", "spearman"}, {"rho", opt_json(c.rho)}, {"p_value", opt_json(c.p_value)}};
}

RankCorrelation corr_from(const nlohmann::json& j) { return {opt_from(j.at("rho")), opt_from(j.at("p_value"))}; }

}  // namespace

const GridCell& Grid::at(int human, int model) const {
  for (const GridCell& c : cells)
    if (c.human == human && c.model == model) return c;
  throw std::out_of_range("no grid cell (" + std::to_string(human) + ", " + std::to_string(model) + ")");
}

RankCorrelation spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  const std::size_t n = x.size();
  RankCorrelation out;
  if (n < 2) return out;
  const auto rx = ranks(x), ry = ranks(y);
  const double mean = (static_cast<double>(n) + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0.0 || syy == 0.0) return out;
  const double rho = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  out.rho = rho;
  if (n < 3) return out;
  if (std::abs(rho) == 1.0) {
    out.p_value = 0.0;
    return out;
  }
  const double df = static_cast<double>(n - 2);
  const double t = rho * std::sqrt(df / (1.0 - rho * rho));
  const boost::math::students_t dist(df);
  out.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  return out;
}

EvalReport aggregate(std::span<const CodedPair> coded) {
  if (coded.size() < 2) throw EvalError("aggregate needs at least 2 coded pairs");
  for (const CodedPair& p : coded) p.validate();

  EvalReport r;
  r.n = coded.size();
  std::size_t rqi_ok = 0, turing_ok = 0, recognized = 0;
  std::vector<long long> diff;
  std::vector<std::pair<int, int>> rqi_obs, turing_obs;
  std::vector<double> h_rqi, m_rqi, h_tur, m_tur;
  for (const CodedPair& p : coded) {
    const int h = rqi(p.human, p.source), m = rqi(p.model, p.source);
    if (m >= h) ++rqi_ok;
    if (p.model.turing >= p.human.turing) ++turing_ok;
    if (p.model.turing == 1) ++recognized;
    diff.push_back(m - h);
    rqi_obs.emplace_back(h, m);
    turing_obs.emplace_back(p.human.turing, p.model.turing);
    h_rqi.push_back(h);
    m_rqi.push_back(m);
    h_tur.push_back(p.human.turing);
    m_tur.push_back(p.model.turing);
  }
  r.pct_model_rqi_at_or_above = percent(rqi_ok, r.n);
  r.pct_model_turing_at_or_above = percent(turing_ok, r.n);
  r.pct_recognized_generated = percent(recognized, r.n);

  // Integer moments keep the statistics independent of the row order.
  long long sum = 0, sum2 = 0;
  for (long long d : diff) {
    sum += d;
    sum2 += d * d;
  }
  const auto n = static_cast<long long>(r.n);
  const double mean = static_cast<double>(sum) / static_cast<double>(n);
  const double var = static_cast<double>(n * sum2 - sum * sum) / static_cast<double>(n * n);
  r.mean_rqi_difference = mean;
  r.sd_rqi_difference = std::sqrt(var);
  std::size_t significant = 0;
  for (long long d : diff) {
    if (d >= 0) continue;
    ++r.model_rqi_losses;
    if (r.sd_rqi_difference > 0.0 && (static_cast<double>(d) - mean) / r.sd_rqi_difference < -1.0) ++significant;
  }
  r.degenerate_rqi_difference = r.sd_rqi_difference == 0.0;
  r.pct_significant_human_wins_rqi = percent(significant, r.model_rqi_losses);

  r.rqi_grid = make_grid(rqi_values(), rqi_obs);
  r.turing_grid = make_grid({1, 2, 3}, turing_obs);
  r.rqi_correlation = spearman(h_rqi, m_rqi);
  r.turing_correlation = spearman(h_tur, m_tur);
  return r;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json::object();
  j["n"] = r.n;
  j["pct_model_rqi_at_or_above"] = r.pct_model_rqi_at_or_above;
  j["pct_model_turing_at_or_above"] = r.pct_model_turing_at_or_above;
  j["mean_rqi_difference"] = r.mean_rqi_difference;
  j["sd_rqi_difference"] = r.sd_rqi_difference;
  j["model_rqi_losses"] = r.model_rqi_losses;
  j["pct_significant_human_wins_rqi"] = r.pct_significant_human_wins_rqi;
  j["degenerate_rqi_difference"] = r.degenerate_rqi_difference;
  j["pct_recognized_generated"] = r.pct_recognized_generated;
  j["rqi_grid"] = grid_json(r.rqi_grid);
  j["turing_grid"] = grid_json(r.turing_grid);
  j["rqi_correlation"] = corr_json(r.rqi_correlation);
  j["turing_correlation"] = corr_json(r.turing_correlation);
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r.n = j.at("n").get<std::size_t>();
  r.pct_model_rqi_at_or_above = j.at("pct_model_rqi_at_or_above").get<double>();
  r.pct_model_turing_at_or_above = j.at("pct_model_turing_at_or_above").get<double>();
  r.mean_rqi_difference = j.at("mean_rqi_difference").get<double>();
  r.sd_rqi_difference = j.at("sd_rqi_difference").get<double>();
  r.model_rqi_losses = j.at("model_rqi_losses").get<std::size_t>();
  r.pct_significant_human_wins_rqi = j.at("pct_significant_human_wins_rqi").get<double>();
  r.degenerate_rqi_difference = j.at("degenerate_rqi_difference").get<bool>();
  r.pct_recognized_generated = j.at("pct_recognized_generated").get<double>();
  r.rqi_grid = grid_from(j.at("rqi_grid"));
  r.turing_grid = grid_from(j.at("turing_grid"));
  r.rqi_correlation = corr_from(j.at("rqi_correlation"));
  r.turing_correlation = corr_from(j.at("turing_correlation"));
}

void write_report_csv(std::ostream& out, const EvalReport& r) {
  const CsvRow header{"row",
                      "n",
                      "pct_model_rqi_at_or_above",
                      "pct_model_turing_at_or_above",
                      "mean_rqi_difference",
                      "sd_rqi_difference",
                      "model_rqi_losses",
                      "pct_significant_human_wins_rqi",
                      "degenerate_rqi_difference",
                      "pct_recognized_generated",
                      "rqi_spearman_rho",
                      "rqi_spearman_p",
                      "turing_spearman_rho",
                      "turing_spearman_p",
                      "grid",
                      "human_score",
                      "model_score",
                      "count",
                      "percent",
                      "z"};
  write_csv_row(out, header);
  auto opt = [](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  write_csv_row(out, {"summary",
                      std::to_string(r.n),
                      num(r.pct_model_rqi_at_or_above),
                      num(r.pct_model_turing_at_or_above),
                      num(r.mean_rqi_difference),
                      num(r.sd_rqi_difference),
                      std::to_string(r.model_rqi_losses),
                      num(r.pct_significant_human_wins_rqi),
                      r.degenerate_rqi_difference ? "1" : "0",
                      num(r.pct_recognized_generated),
                      opt(r.rqi_correlation.rho),
                      opt(r.rqi_correlation.p_value),
                      opt(r.turing_correlation.rho),
                      opt(r.turing_correlation.p_value),
                      "", "", "", "", "", ""});
  auto cells = [&](const char* name, const Grid& g) {
    for (const GridCell& c : g.cells) {
      CsvRow row(header.size());
      row[0] = "cell";
      row[14] = name;
      row[15] = std::to_string(c.human);
      row[16] = std::to_string(c.model);
      row[17] = std::to_string(c.count);
      row[18] = num(c.percent);
      row[19] = num(c.z);
      write_csv_row(out, row);
    }
  };
  cells("rqi", r.rqi_grid);
  cells("turing", r.turing_grid);
}

ReportFormat parse_report_format(const std::string& name) {
  if (name == "json") return ReportFormat::json;
  if (name == "csv") return ReportFormat::csv;
  throw std::invalid_argument("report format must be json or csv, got '" + name + "'");
}

void export_report(const EvalReport& r, ReportFormat fmt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report to " + path.string());
  if (fmt == ReportFormat::json)
    out << nlohmann::json(r).dump(2) << '\n';
  else
    write_report_csv(out, r);
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string format_headlines(const EvalReport& r) {
  std::ostringstream s;
  s << "coded pairs: " << r.n << '\n';
  s << "model RQI at or above human: " << fixed2(r.pct_model_rqi_at_or_above) << "%\n";
  s << "model Spot-the-Bot at or above human: " << fixed2(r.pct_model_turing_at_or_above) << "%\n";
  s << "model responses recognized as generated: " << fixed2(r.pct_recognized_generated) << "%\n";
  s << "mean RQI difference (model - human): " << fixed2(r.mean_rqi_difference)
    << ", sd " << fixed2(r.sd_rqi_difference) << '\n';
  s << "significant human wins (z < -1): " << fixed2(r.pct_significant_human_wins_rqi) << "% of "
    << r.model_rqi_losses << " model losses";
  if (r.degenerate_rqi_difference) s << " (degenerate: sd = 0)";
  s << '\n';
  auto corr = [&](const char* name, const RankCorrelation& c) {
    s << name << " spearman rho (interpretation): ";
    if (!c.rho) {
      s << "undefined\n";
      return;
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", *c.rho);
    s << buf;
    if (c.p_value) {
      std::snprintf(buf, sizeof buf, ", p = %.3g", *c.p_value);
      s << buf;
    }
    s << '\n';
  };
  corr("RQI", r.rqi_correlation);
  corr("Spot-the-Bot", r.turing_correlation);
  return s.str();
}

}  // namespace psyt
