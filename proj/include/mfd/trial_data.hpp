#pragma once

// Subject-level trial data: a 2x2 factorial of vaccine arm Z and Mendelian
// factor G within sites, with covariates and either a count outcome f(Y) or
// a (time, event) pair for time to first fever.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mfd/errors.hpp"

namespace mfd {

enum class OutcomeKind { count, survival };

inline std::string to_string(OutcomeKind k) { return k == OutcomeKind::count ? "count" : "survival"; }

inline OutcomeKind parse_outcome_kind(std::string_view s) {
  if (s == "count") return OutcomeKind::count;
  if (s == "survival") return OutcomeKind::survival;
  throw ParameterError("unknown outcome kind '" + std::string(s) + "' (expected count|survival)");
}

struct SubjectRecord {
  std::string site;
  int z = 0;
  int g = 0;
  std::vector<double> covariates;
  double y = 0.0;  // count outcome, f(Y) = total fevers
  double time = 0.0;
  int event = 0;
};

/// Column-oriented dataset. Site labels are mapped to dense 0-based indices in
/// order of first appearance. Populated once through add(), read-only after.
class TrialDataset {
 public:
  TrialDataset(OutcomeKind kind, std::size_t num_covariates)
      : kind_(kind), d_(num_covariates) {}

  void reserve(std::size_t n) {
    site_.reserve(n);
    z_.reserve(n);
    g_.reserve(n);
    x_.reserve(n * d_);
    if (kind_ == OutcomeKind::count) {
      y_.reserve(n);
    } else {
      time_.reserve(n);
      event_.reserve(n);
    }
  }

  /// Appends one subject after checking the record invariants.
  void add(const SubjectRecord& r) {
    if (r.z != 0 && r.z != 1) throw ValidationError("z must be 0 or 1");
    if (r.g != 0 && r.g != 1) throw ValidationError("g must be 0 or 1");
    if (r.covariates.size() != d_)
      throw ValidationError("expected " + std::to_string(d_) + " covariates, got " +
                            std::to_string(r.covariates.size()));
    for (double v : r.covariates)
      if (!std::isfinite(v)) throw ValidationError("non-finite covariate value");
    if (kind_ == OutcomeKind::count) {
      if (!std::isfinite(r.y) || r.y < 0.0) throw ValidationError("count outcome must be >= 0");
      if (r.y != std::floor(r.y)) throw ValidationError("count outcome must be an integer");
    } else {
      if (!std::isfinite(r.time) || r.time <= 0.0) throw ValidationError("survival time must be > 0");
      if (r.event != 0 && r.event != 1) throw ValidationError("event must be 0 or 1");
    }

    auto [it, inserted] = site_index_.try_emplace(r.site, site_labels_.size());
    if (inserted) {
      site_labels_.push_back(r.site);
      site_sizes_.push_back(0);
    }
    site_.push_back(it->second);
    ++site_sizes_[it->second];
    z_.push_back(r.z);
    g_.push_back(r.g);
    x_.insert(x_.end(), r.covariates.begin(), r.covariates.end());
    if (kind_ == OutcomeKind::count) {
      y_.push_back(r.y);
    } else {
      time_.push_back(r.time);
      event_.push_back(r.event);
    }
  }

  OutcomeKind kind() const noexcept { return kind_; }
  std::size_t size() const noexcept { return z_.size(); }
  std::size_t num_covariates() const noexcept { return d_; }
  std::size_t num_sites() const noexcept { return site_labels_.size(); }

  std::size_t site(std::size_t i) const { return site_[i]; }
  int z(std::size_t i) const { return z_[i]; }
  int g(std::size_t i) const { return g_[i]; }
  double covariate(std::size_t i, std::size_t k) const { return x_[i * d_ + k]; }
  std::span<const double> covariates(std::size_t i) const {
    return std::span<const double>(x_).subspan(i * d_, d_);
  }

  std::span<const double> outcomes() const noexcept { return y_; }
  std::span<const double> times() const noexcept { return time_; }
  std::span<const int> events() const noexcept { return event_; }

  const std::string& site_label(std::size_t j) const { return site_labels_[j]; }
  const std::vector<std::string>& site_labels() const noexcept { return site_labels_; }
  /// I_j for each site.
  const std::vector<std::size_t>& site_sizes() const noexcept { return site_sizes_; }

  SubjectRecord record(std::size_t i) const {
    SubjectRecord r;
    r.site = site_labels_[site_[i]];
    r.z = z_[i];
    r.g = g_[i];
    auto c = covariates(i);
    r.covariates.assign(c.begin(), c.end());
    if (kind_ == OutcomeKind::count) {
      r.y = y_[i];
    } else {
      r.time = time_[i];
      r.event = event_[i];
    }
    return r;
  }

  /// Observed prevalence p_{j,n}(G=1) for every site.
  std::vector<double> site_prevalence() const {
    std::vector<double> carriers(num_sites(), 0.0);
    for (std::size_t i = 0; i < size(); ++i) carriers[site_[i]] += g_[i];
    for (std::size_t j = 0; j < num_sites(); ++j)
      carriers[j] /= static_cast<double>(site_sizes_[j]);
    return carriers;
  }

 private:
  OutcomeKind kind_;
  std::size_t d_;
  std::vector<std::string> site_labels_;
  std::unordered_map<std::string, std::size_t> site_index_;
  std::vector<std::size_t> site_sizes_;
  std::vector<std::size_t> site_;
  std::vector<int> z_;
  std::vector<int> g_;
  std::vector<double> x_;  // row-major n x d
  std::vector<double> y_;
  std::vector<double> time_;
  std::vector<int> event_;
};

// ---------------------------------------------------------------------------
// Validation

using CellCounts = std::array<std::array<std::size_t, 2>, 2>;  // [z][g]

struct EmptyCell {
  std::string site;
  int z;
  int g;
};

struct SiteReport {
  std::string site;
  std::size_t size = 0;
  CellCounts cells{};
  double prevalence = 0.0;       // p_{j,n}(G=1)
  double vaccine_fraction = 0.0; // share of the site with z = 1
  bool positivity = false;       // all four (z,g) cells occupied
};

struct ValidationReport {
  std::vector<SiteReport> sites;
  std::vector<EmptyCell> empty_cells;

  bool positivity_ok() const noexcept { return empty_cells.empty(); }

  std::string describe_empty_cells() const {
    std::string out;
    for (const auto& c : empty_cells) {
      if (!out.empty()) out += "; ";
      out += "site '" + c.site + "' has no subject with z=" + std::to_string(c.z) +
             ", g=" + std::to_string(c.g);
    }
    return out;
  }
};

/// Report-only check of positivity, prevalence and arm balance per site.
inline ValidationReport validate(const TrialDataset& ds) {
  ValidationReport rep;
  rep.sites.resize(ds.num_sites());
  for (std::size_t j = 0; j < ds.num_sites(); ++j) rep.sites[j].site = ds.site_label(j);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& s = rep.sites[ds.site(i)];
    ++s.size;
    ++s.cells[ds.z(i)][ds.g(i)];
  }
  for (auto& s : rep.sites) {
    const double n = static_cast<double>(s.size);
    s.prevalence = static_cast<double>(s.cells[0][1] + s.cells[1][1]) / n;
    s.vaccine_fraction = static_cast<double>(s.cells[1][0] + s.cells[1][1]) / n;
    s.positivity = true;
    for (int z : {1, 0})
      for (int g : {1, 0})
        if (s.cells[z][g] == 0) {
          s.positivity = false;
          rep.empty_cells.push_back({s.site, z, g});
        }
  }
  return rep;
}

inline void require_positivity(const TrialDataset& ds) {
  if (ds.size() == 0) throw ValidationError("dataset is empty");
  auto rep = validate(ds);
  if (!rep.positivity_ok()) throw ValidationError("positivity violated: " + rep.describe_empty_cells());
}

// ---------------------------------------------------------------------------
// Cell summaries

using CellValues = std::array<std::array<double, 2>, 2>;  // [z][g]

struct SiteCells {
  std::string site;
  std::size_t size = 0;
  double prevalence = 0.0;
  CellCounts count{};
  CellValues mean_outcome{};  // count outcomes
  CellValues events{};        // survival outcomes
  CellValues person_time{};   // survival outcomes
};

struct CellSummary {
  OutcomeKind kind = OutcomeKind::count;
  std::vector<SiteCells> sites;
};

inline CellSummary cell_summaries(const TrialDataset& ds) {
  require_positivity(ds);
  CellSummary out;
  out.kind = ds.kind();
  out.sites.resize(ds.num_sites());
  for (std::size_t j = 0; j < ds.num_sites(); ++j) out.sites[j].site = ds.site_label(j);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& s = out.sites[ds.site(i)];
    const int z = ds.z(i), g = ds.g(i);
    ++s.size;
    ++s.count[z][g];
    if (ds.kind() == OutcomeKind::count) {
      s.mean_outcome[z][g] += ds.outcomes()[i];
    } else {
      s.events[z][g] += ds.events()[i];
      s.person_time[z][g] += ds.times()[i];
    }
  }
  for (auto& s : out.sites) {
    s.prevalence = static_cast<double>(s.count[0][1] + s.count[1][1]) / static_cast<double>(s.size);
    if (ds.kind() == OutcomeKind::count)
      for (int z = 0; z < 2; ++z)
        for (int g = 0; g < 2; ++g) s.mean_outcome[z][g] /= static_cast<double>(s.count[z][g]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_number(std::string_view field, std::size_t line, std::string_view column) {
  auto fail = [&](const std::string& why) {
    return ValidationError("line " + std::to_string(line) + ", column '" + std::string(column) + "': " + why);
  };
  if (field.empty()) throw fail("missing value");
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size())
    throw fail("not a number: '" + std::string(field) + "'");
  if (!std::isfinite(v)) throw fail("non-finite value");
  return v;
}

inline int parse_binary(std::string_view field, std::size_t line, std::string_view column) {
  const double v = parse_number(field, line, column);
  if (v != 0.0 && v != 1.0)
    throw ValidationError("line " + std::to_string(line) + ", column '" + std::string(column) +
                          "': expected 0 or 1, got '" + std::string(field) + "'");
  return static_cast<int>(v);
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

}  // namespace detail

/// Parses `site,z,g,x1..xd,y` (count) or `site,z,g,x1..xd,time,event`
/// (survival). Positivity is enforced on the result.
inline TrialDataset read_csv(std::istream& in, OutcomeKind kind) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("line 1: missing header");
  auto header = detail::split_fields(line);
  const std::size_t tail = kind == OutcomeKind::count ? 1 : 2;
  if (header.size() < 3 + tail || header[0] != "site" || header[1] != "z" || header[2] != "g")
    throw ValidationError("line 1: header must start with site,z,g");
  const std::size_t d = header.size() - 3 - tail;
  for (std::size_t k = 0; k < d; ++k)
    if (header[3 + k] != "x" + std::to_string(k + 1))
      throw ValidationError("line 1: expected column 'x" + std::to_string(k + 1) + "', got '" +
                            std::string(header[3 + k]) + "'");
  if (kind == OutcomeKind::count) {
    if (header.back() != "y") throw ValidationError("line 1: last column of a count file must be 'y'");
  } else if (header[3 + d] != "time" || header[4 + d] != "event") {
    throw ValidationError("line 1: survival file must end with time,event");
  }

  TrialDataset ds(kind, d);
  SubjectRecord rec;
  rec.covariates.resize(d);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto f = detail::split_fields(line);
    if (f.size() != header.size())
      throw ValidationError("line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                            " fields, got " + std::to_string(f.size()));
    if (f[0].empty()) throw ValidationError("line " + std::to_string(lineno) + ", column 'site': missing value");
    rec.site.assign(f[0]);
    rec.z = detail::parse_binary(f[1], lineno, "z");
    rec.g = detail::parse_binary(f[2], lineno, "g");
    for (std::size_t k = 0; k < d; ++k) rec.covariates[k] = detail::parse_number(f[3 + k], lineno, header[3 + k]);
    try {
      if (kind == OutcomeKind::count) {
        rec.y = detail::parse_number(f[3 + d], lineno, "y");
      } else {
        rec.time = detail::parse_number(f[3 + d], lineno, "time");
        rec.event = detail::parse_binary(f[4 + d], lineno, "event");
      }
      ds.add(rec);
    } catch (const ValidationError& e) {
      std::string msg = e.what();
      if (msg.rfind("line ", 0) == 0) throw;
      throw ValidationError("line " + std::to_string(lineno) + ": " + msg);
    }
  }
  require_positivity(ds);
  return ds;
}

inline TrialDataset load_csv(const std::string& path, OutcomeKind kind) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  return read_csv(in, kind);
}

/// Numbers are written with 12 significant digits.
inline void write_csv(const TrialDataset& ds, std::ostream& out) {
  out << "site,z,g";
  for (std::size_t k = 0; k < ds.num_covariates(); ++k) out << ",x" << k + 1;
  out << (ds.kind() == OutcomeKind::count ? ",y\n" : ",time,event\n");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& label = ds.site_label(ds.site(i));
    if (label.find(',') != std::string::npos) throw ValidationError("site label contains a comma: " + label);
    out << label << ',' << ds.z(i) << ',' << ds.g(i);
    for (double v : ds.covariates(i)) out << ',' << detail::format_number(v);
    if (ds.kind() == OutcomeKind::count)
      out << ',' << detail::format_number(ds.outcomes()[i]) << '\n';
    else
      out << ',' << detail::format_number(ds.times()[i]) << ',' << ds.events()[i] << '\n';
  }
}

inline void write_csv(const TrialDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  write_csv(ds, out);
}

}  // namespace mfd
