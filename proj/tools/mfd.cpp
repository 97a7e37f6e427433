// mfd: estimate vaccine efficacy from trial CSVs, run simulation studies,
// and assemble report tables.
//
// Exit status: 0 success, 2 usage or validation error, 3 numerical failure.

#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mfd/config.hpp"
#include "mfd/errors.hpp"
#include "mfd/estimators.hpp"
#include "mfd/report.hpp"
#include "mfd/simulation.hpp"
#include "mfd/survival.hpp"
#include "mfd/trial_data.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "1.0.0";

struct UsageError : mfd::ValidationError {
  using mfd::ValidationError::ValidationError;
};

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw mfd::ValidationError("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 15];
  while (in) {
    in.read(buf, sizeof buf);
    EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

template <typename T>
T parse_env_number(const char* name, const std::string& v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw UsageError(std::string(name) + " must be a non-negative integer");
  return out;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw mfd::ValidationError("cannot create output directory " + dir.string());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw mfd::ValidationError("cannot write " + path.string());
  return out;
}

json manifest(const std::string& command, json config, const std::vector<fs::path>& inputs) {
  json m;
  m["command"] = command;
  m["tool_version"] = kVersion;
  m["config"] = std::move(config);
  json digests = json::object();
  for (const auto& p : inputs) digests[p.string()] = sha256_file(p);
  m["input_sha256"] = digests;
  m["timestamp"] = utc_timestamp();
  return m;
}

void write_manifest(const fs::path& dir, const json& m) { open_out(dir / "manifest.json") << m.dump(2) << '\n'; }

std::string fmt(double v) { return mfd::format_value(v); }

// ---------------------------------------------------------------------------

struct EstimateArgs {
  std::string input;
  std::string outcome = "count";
  std::vector<std::string> estimators{"mfd", "naive", "bounded"};
  std::optional<double> s;
  std::vector<double> s_interval;
  double s_beta = 0.05;
  double alpha = 0.05;
  double alpha0 = 0.001;
  double alpha_tilde = 0.001;
  double pz = 0.5;
  std::string out;
};

int cmd_estimate(const EstimateArgs& a) {
  const auto kind = mfd::parse_outcome_kind(a.outcome);
  const bool want_s = std::find(a.estimators.begin(), a.estimators.end(), "s_corrected") != a.estimators.end();
  for (const auto& e : a.estimators)
    if (e != "mfd" && e != "naive" && e != "bounded" && e != "s_corrected")
      throw UsageError("unknown estimator '" + e + "'");
  if (a.s && !a.s_interval.empty()) throw UsageError("--s and --s-interval are mutually exclusive");
  if (want_s && !a.s && a.s_interval.empty()) throw UsageError("s_corrected requires --s or --s-interval");
  if (want_s && kind == mfd::OutcomeKind::survival) throw UsageError("s_corrected is defined for count outcomes");
  if (!a.s_interval.empty() && a.s_interval.size() != 2) throw UsageError("--s-interval takes lo,hi");

  mfd::InferenceOptions opt;
  opt.alpha = a.alpha;
  opt.alpha0 = a.alpha0;
  opt.alpha_tilde = a.alpha_tilde;
  opt.pz = a.pz;
  mfd::check_level(opt.alpha, "alpha");
  mfd::check_level(opt.alpha_tilde, "alpha_tilde");
  mfd::check_level(opt.pz, "pz");
  if (opt.alpha0 < 0.0 || opt.alpha0 > opt.alpha / 2.0) throw mfd::ParameterError("alpha0 must lie in [0, alpha/2]");

  const auto ds = mfd::load_csv(a.input, kind);
  std::vector<mfd::EfficacyEstimate> rows;
  auto pick = [&](const std::string& name, const mfd::EfficacyEstimate& e) {
    if (std::find(a.estimators.begin(), a.estimators.end(), name) != a.estimators.end()) rows.push_back(e);
  };
  if (kind == mfd::OutcomeKind::count) {
    const auto est = mfd::estimate_count(ds, opt);
    pick("mfd", est.mfd);
    pick("naive", est.naive);
    pick("bounded", est.bounded);
    if (want_s) {
      mfd::Specificity spec = a.s ? mfd::Specificity{*a.s} : mfd::Specificity{mfd::Interval{a.s_interval[0], a.s_interval[1]}};
      rows.push_back(mfd::s_corrected(est.naive, spec, opt.alpha, a.s_beta));
    }
  } else {
    const auto est = mfd::estimate_survival(ds, opt);
    pick("mfd", est.mfd);
    pick("naive", est.naive);
    pick("bounded", est.bounded);
  }

  const fs::path out(a.out);
  ensure_dir(out);
  auto csv = open_out(out / "estimates.csv");
  csv << "method,tau_hat,se,ci_lower,ci_upper,flags\n";
  std::cout << std::left << std::setw(13) << "method" << std::right << std::setw(12) << "tau_hat" << std::setw(12)
            << "se" << std::setw(12) << "ci_lower" << std::setw(12) << "ci_upper" << "  flags\n";
  for (const auto& e : rows) {
    csv << mfd::to_string(e.method) << ',' << fmt(e.tau_hat) << ',' << fmt(e.se) << ',' << fmt(e.ci.lower) << ','
        << fmt(e.ci.upper) << ',' << e.flags.to_string() << '\n';
    std::cout << std::left << std::setw(13) << mfd::to_string(e.method) << std::right << std::fixed
              << std::setprecision(4) << std::setw(12) << e.tau_hat << std::setw(12) << e.se << std::setw(12)
              << e.ci.lower << std::setw(12) << e.ci.upper << "  " << e.flags.to_string() << '\n';
  }

  json cfg{{"input", a.input},         {"outcome", a.outcome}, {"estimators", a.estimators},
           {"alpha", a.alpha},         {"alpha0", a.alpha0},   {"alpha_tilde", a.alpha_tilde},
           {"pz", a.pz},               {"n", ds.size()},       {"sites", ds.site_labels().size()}};
  if (a.s) cfg["s"] = *a.s;
  if (!a.s_interval.empty()) {
    cfg["s_interval"] = a.s_interval;
    cfg["s_beta"] = a.s_beta;
  }
  auto m = manifest("estimate", cfg, {a.input});
  m["seed"] = nullptr;
  write_manifest(out, m);
  return 0;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string config;
  std::string out = ".";
  std::optional<unsigned> jobs;
};

/// Seed and job count: the environment overrides the file and the flag.
struct Overrides {
  std::optional<std::uint64_t> seed;
  unsigned jobs = 1;
};

Overrides overrides(std::optional<unsigned> jobs_flag) {
  Overrides o;
  if (jobs_flag) o.jobs = *jobs_flag;
  if (auto v = env("MFD_SEED")) o.seed = parse_env_number<std::uint64_t>("MFD_SEED", *v);
  if (auto v = env("MFD_JOBS")) o.jobs = parse_env_number<unsigned>("MFD_JOBS", *v);
  if (o.jobs == 0) throw UsageError("jobs must be >= 1");
  return o;
}

mfd::KeyValues read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw mfd::ValidationError("cannot open config " + path.string());
  return mfd::KeyValues::parse(in);
}

bool is_survival(const mfd::KeyValues& kv) {
  std::string outcome = "count";
  kv.read("outcome", outcome);
  return mfd::parse_outcome_kind(outcome) == mfd::OutcomeKind::survival;
}

int cmd_simulate(const SimulateArgs& a) {
  const auto kv = read_config(a.config);
  const auto ov = overrides(a.jobs);
  const fs::path out(a.out);
  json cfg;
  std::uint64_t seed = 0;
  if (is_survival(kv)) {
    auto c = mfd::parse_survival_scenario(kv);
    if (ov.seed) c.scenario.seed = *ov.seed;
    const auto st = mfd::run_survival_study(c, ov.jobs);
    ensure_dir(out);
    auto sum = open_out(out / "summary.csv");
    mfd::write_summary_csv(st, sum);
    auto reps = open_out(out / "replications.csv");
    mfd::write_replications_csv(st, reps);
    seed = c.scenario.seed;
    const auto& s = c.scenario;
    cfg = {{"outcome", "survival"}, {"name", c.name},   {"baseline_hazard", s.baseline_hazard},
           {"kappa", s.kappa},      {"phi", s.phi},     {"tau", s.tau},
           {"nu", s.nu},            {"eta", s.eta},     {"horizon", s.horizon},
           {"p_g", s.p_g},          {"beta_x", s.beta_x}, {"n", s.n},
           {"n_sim", c.n_sim},      {"alpha", c.alpha}, {"alpha0", c.alpha0},
           {"alpha_tilde", c.alpha_tilde}};
    std::cout << "survival study '" << c.name << "': " << c.n_sim << " replications, " << st.summary.failed
              << " failed\n";
  } else {
    auto c = mfd::parse_scenario(kv);
    if (ov.seed) c.seed = *ov.seed;
    const auto st = mfd::run_study(c, ov.jobs);
    ensure_dir(out);
    auto sum = open_out(out / "summary.csv");
    mfd::write_summary_csv(st, sum);
    auto reps = open_out(out / "replications.csv");
    mfd::write_replications_csv(st, reps);
    seed = c.seed;
    std::ostringstream resolved;
    mfd::write_scenario(c, resolved);
    cfg = {{"outcome", "count"}, {"scenario", resolved.str()}, {"kappa", st.rates.kappa}, {"phi", st.rates.phi}};
    std::cout << "study '" << c.name << "': " << c.n_sim << " replications, " << st.summary.failed << " failed\n";
    for (const auto& e : st.summary.estimators)
      std::cout << "  " << std::left << std::setw(8) << mfd::to_string(e.method) << std::right << std::fixed
                << std::setprecision(3) << " mean " << e.mean << "  prop|bias| " << e.prop_abs_bias << "  rmse "
                << e.rmse << "  coverage " << e.coverage << "  power " << e.power << '\n';
  }
  auto m = manifest("simulate", cfg, {a.config});
  m["seed"] = seed;
  m["seed_from_env"] = ov.seed.has_value();
  m["jobs"] = ov.jobs;
  write_manifest(out, m);
  return 0;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
};

int cmd_report(const ReportArgs& a) {
  std::vector<fs::path> dirs(a.inputs.begin(), a.inputs.end());
  const auto rep = mfd::build_report(dirs);
  const fs::path out(a.out);
  ensure_dir(out);
  auto sum = open_out(out / "combined_summary.csv");
  mfd::write_report_summary(rep, sum);
  auto fig = open_out(out / "figure_series.csv");
  mfd::write_figure_series(rep, fig);
  std::vector<fs::path> inputs;
  for (const auto& d : dirs) {
    inputs.push_back(d / "summary.csv");
    inputs.push_back(d / "replications.csv");
  }
  auto m = manifest("report", json{{"inputs", a.inputs}}, inputs);
  m["seed"] = nullptr;
  write_manifest(out, m);
  std::cout << rep.rows.size() << " rows from " << dirs.size() << " studies\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string config;
  std::string out;
  std::uint64_t replication = 0;
};

int cmd_generate(const GenerateArgs& a) {
  const auto kv = read_config(a.config);
  const auto ov = overrides(std::nullopt);
  if (is_survival(kv)) {
    auto c = mfd::parse_survival_scenario(kv);
    if (ov.seed) c.scenario.seed = *ov.seed;
    mfd::write_csv(mfd::simulate_survival(c.scenario, a.replication), a.out);
  } else {
    auto c = mfd::parse_scenario(kv);
    if (ov.seed) c.seed = *ov.seed;
    mfd::write_csv(mfd::simulate_trial(c, mfd::calibrate_rates(c), a.replication).data, a.out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mendelian factorial design estimation of vaccine efficacy"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  EstimateArgs est;
  auto* e = app.add_subcommand("estimate", "Estimate efficacy from a trial CSV");
  e->add_option("--input", est.input, "Trial CSV")->required()->check(CLI::ExistingFile);
  e->add_option("--outcome", est.outcome, "count or survival")->check(CLI::IsMember({"count", "survival"}));
  e->add_option("--estimators", est.estimators, "Comma-separated: mfd,naive,bounded,s_corrected")->delimiter(',');
  e->add_option("--s", est.s, "Known specificity");
  e->add_option("--s-interval", est.s_interval, "Confidence set for specificity: lo,hi")->delimiter(',');
  e->add_option("--s-beta", est.s_beta, "Level of the specificity confidence set");
  e->add_option("--alpha", est.alpha);
  e->add_option("--alpha0", est.alpha0);
  e->add_option("--alpha-tilde", est.alpha_tilde);
  e->add_option("--pz", est.pz, "p(Z=1) by design");
  e->add_option("--out", est.out, "Output directory")->required();

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Run a Monte Carlo study from a scenario file");
  s->add_option("--config", sim.config)->required()->check(CLI::ExistingFile);
  s->add_option("--out", sim.out, "Output directory");
  s->add_option("--jobs", sim.jobs, "Worker threads");

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "Combine study outputs");
  r->add_option("--inputs", rep.inputs, "Study output directories")->required();
  r->add_option("--out", rep.out, "Output directory")->required();

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write one simulated trial as CSV");
  g->add_option("--config", gen.config)->required()->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Output CSV")->required();
  g->add_option("--replication", gen.replication, "Replication index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (e->parsed()) return cmd_estimate(est);
    if (s->parsed()) return cmd_simulate(sim);
    if (r->parsed()) return cmd_report(rep);
    if (g->parsed()) return cmd_generate(gen);
  } catch (const mfd::ValidationError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const mfd::ParameterError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const mfd::EstimationError& err) {
    std::cerr << "estimation failed: " << err.what() << '\n';
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "estimation failed: " << err.what() << '\n';
    return 3;
  }
  return 2;
}
