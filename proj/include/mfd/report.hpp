#pragma once

// Combines simulation study outputs into one summary table and the
// distribution series behind box-and-whisker figures.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mfd/errors.hpp"
#include "mfd/simulation.hpp"
#include "mfd/stats.hpp"

namespace mfd {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ValidationError("missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Reads a plain comma-separated table (no quoting); every row must have
/// the header's width.
inline CsvTable read_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split_csv_line(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto row = split_csv_line(line);
    if (row.size() != t.header.size())
      throw ValidationError(path.string() + " line " + std::to_string(lineno) + ": expected " +
                            std::to_string(t.header.size()) + " fields");
    t.rows.push_back(std::move(row));
  }
  return t;
}

struct StudyTables {
  std::filesystem::path dir;
  CsvTable summary;
  CsvTable replications;
};

inline StudyTables read_study(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ValidationError(dir.string() + ": not a directory");
  const auto summary = dir / "summary.csv";
  const auto reps = dir / "replications.csv";
  if (!fs::exists(summary) || !fs::exists(reps))
    throw ValidationError(dir.string() + ": expected summary.csv and replications.csv");
  StudyTables st{dir, read_table(summary), read_table(reps)};
  if (split_csv_line(kSummaryHeader) != st.summary.header)
    throw ValidationError(summary.string() + ": unexpected summary schema");
  if (split_csv_line(kReplicationHeader) != st.replications.header)
    throw ValidationError(reps.string() + ": unexpected replication schema");
  return st;
}

inline constexpr std::array<double, 5> kReportQuantiles{0.05, 0.25, 0.50, 0.75, 0.95};

struct SeriesRow {
  std::vector<std::string> summary;  // the original summary row
  std::vector<double> estimates;     // sorted successful tau_hat values
};

struct Report {
  std::vector<SeriesRow> rows;
};

/// Joins each summary row with the estimates of its (scenario, estimator)
/// pair. Scenario names must be unique across inputs.
inline Report build_report(const std::vector<std::filesystem::path>& dirs) {
  if (dirs.empty()) throw ValidationError("report: no inputs");
  Report rep;
  std::map<std::string, std::filesystem::path> seen;
  for (const auto& dir : dirs) {
    const auto st = read_study(dir);
    if (st.summary.rows.empty()) throw ValidationError(dir.string() + ": summary.csv has no rows");
    const auto sc = st.replications.column("scenario");
    const auto es = st.replications.column("estimator");
    const auto status = st.replications.column("status");
    const auto th = st.replications.column("tau_hat");
    std::map<std::pair<std::string, std::string>, std::vector<double>> est;
    for (const auto& r : st.replications.rows) {
      if (r[status] != "ok") continue;
      est[{r[sc], r[es]}].push_back(std::stod(r[th]));
    }
    std::set<std::string> local;
    for (const auto& row : st.summary.rows) {
      const auto& name = row[0];
      if (auto it = seen.find(name); it != seen.end() && it->second != dir)
        throw ValidationError("report: scenario '" + name + "' appears in more than one input");
      local.insert(name);
      SeriesRow sr{row, est[{row[0], row[1]}]};
      std::sort(sr.estimates.begin(), sr.estimates.end());
      rep.rows.push_back(std::move(sr));
    }
    for (const auto& name : local) seen.emplace(name, dir);
  }
  return rep;
}

inline void write_report_summary(const Report& rep, std::ostream& out) {
  out << kSummaryHeader << ",q05,q25,q50,q75,q95\n";
  for (const auto& r : rep.rows) {
    for (const auto& f : r.summary) out << f << ',';
    for (std::size_t k = 0; k < kReportQuantiles.size(); ++k) {
      const double q = r.estimates.empty() ? std::nan("") : stats::quantile_sorted(r.estimates, kReportQuantiles[k]);
      out << format_value(q) << (k + 1 < kReportQuantiles.size() ? ',' : '\n');
    }
  }
}

/// One row per (scenario, estimator): the five quantiles, mean and median
/// of the successful estimates.
inline void write_figure_series(const Report& rep, std::ostream& out) {
  out << "scenario,estimator,n,nu,s,tau,n_used,q05,q25,q50,q75,q95,mean,median\n";
  const auto header = split_csv_line(kSummaryHeader);
  auto col = [&](const char* name) {
    return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  };
  const std::size_t n = col("n"), nu = col("nu"), s = col("s"), tau = col("tau");
  for (const auto& r : rep.rows) {
    const auto& v = r.estimates;
    out << r.summary[0] << ',' << r.summary[1] << ',' << r.summary[n] << ',' << r.summary[nu] << ',' << r.summary[s]
        << ',' << r.summary[tau] << ',' << v.size();
    for (double p : kReportQuantiles) out << ',' << format_value(v.empty() ? std::nan("") : stats::quantile_sorted(v, p));
    out << ',' << format_value(v.empty() ? std::nan("") : stats::mean(v)) << ','
        << format_value(v.empty() ? std::nan("") : stats::quantile_sorted(v, 0.5)) << '\n';
  }
}

}  // namespace mfd
