#include "lmmkit/simgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>

#include "lmmkit/rng.hpp"

namespace lmmkit {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void check_sd(double x, const std::string& what) {
  require(std::isfinite(x) && x >= 0.0,
          what + " must be a non-negative standard deviation");
}

void check_corr(double x, const std::string& what) {
  require(std::isfinite(x) && x >= -1.0 && x <= 1.0,
          what + " must be a correlation in [-1, 1]");
}

int digits_of(int n) {
  int d = 1;
  while (n >= 10) {
    n /= 10;
    ++d;
  }
  return d;
}

// 1-based zero-padded label so lexicographic level order equals numeric
// order ("s01" < "s10").
std::string padded(const char* prefix, int i, int n) {
  const std::string digits = std::to_string(i + 1);
  std::string out = prefix;
  const std::size_t width = static_cast<std::size_t>(digits_of(n));
  if (digits.size() < width) out.append(width - digits.size(), '0');
  out += digits;
  return out;
}

Column factor_column(const std::string& name, std::vector<std::int32_t> codes,
                     std::vector<std::string> levels) {
  Column c;
  c.name = name;
  c.type = ColumnType::Factor;
  c.codes = std::move(codes);
  c.levels = std::move(levels);
  c.missing.assign(c.codes.size(), false);
  return c;
}

Column numeric_column(const std::string& name, std::vector<double> values) {
  Column c;
  c.name = name;
  c.type = ColumnType::Numeric;
  c.numeric = std::move(values);
  c.missing.assign(c.numeric.size(), false);
  return c;
}

// Factor F with F F' = R for a correlation matrix R, tolerating the
// semidefinite boundary (correlations of +-1). Indefinite R is an error.
Eigen::MatrixXd corr_factor(const Eigen::MatrixXd& R) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(R);
  if (es.info() != Eigen::Success)
    throw std::invalid_argument("random-effect correlation matrix could not "
                                "be factored");
  Eigen::VectorXd ev = es.eigenvalues();
  if (ev.minCoeff() < -1e-10)
    throw std::invalid_argument(
        "random-effect correlation matrix is not positive semi-definite");
  for (int i = 0; i < ev.size(); ++i) ev[i] = std::sqrt(std::max(ev[i], 0.0));
  return es.eigenvectors() * ev.asDiagonal();
}

}  // namespace

const char* to_string(SimFamily f) {
  switch (f) {
    case SimFamily::Longitudinal: return "longitudinal";
    case SimFamily::Factorial: return "factorial";
    case SimFamily::Crossed: return "crossed";
  }
  return "?";
}

SimFamily parse_sim_family(const std::string& name) {
  if (name == "longitudinal") return SimFamily::Longitudinal;
  if (name == "factorial") return SimFamily::Factorial;
  if (name == "crossed") return SimFamily::Crossed;
  throw std::invalid_argument("unknown simulation family '" + name +
                              "' (expected longitudinal, factorial, or "
                              "crossed)");
}

SimConfig default_config(SimFamily family) {
  SimConfig cfg;
  cfg.family = family;
  switch (family) {
    case SimFamily::Longitudinal:
      break;  // struct defaults describe this family
    case SimFamily::Factorial:
      cfg.n_subjects = 10;
      cfg.noise_sd = 3.0;
      break;
    case SimFamily::Crossed:
      cfg.n_subjects = 53;
      cfg.noise_sd = 0.25;
      break;
  }
  return cfg;
}

Dataset sim_longitudinal(const SimConfig& cfg) {
  SimConfig c = cfg;
  if (c.groups.empty())
    c.groups = {"grade1_high_tetra", "grade2_low_tetra", "grade3_para"};
  if (c.group_curves.empty())
    c.group_curves = {{20.0, 4.0, -0.12}, {30.0, 4.5, -0.14}, {40.0, 5.0, -0.16}};

  require(c.n_subjects >= 2, "simulation needs at least 2 subjects");
  require(c.n_timepoints >= 1, "timepoints must be positive");
  require(c.n_sites >= 0, "sites must be non-negative");
  require(c.group_curves.size() == c.groups.size(),
          "group_curves needs one intercept,slope,quadratic triple per group");
  for (double sd : c.subject_sds) check_sd(sd, "subject deviate SD");
  for (double r : c.subject_corrs) check_corr(r, "subject deviate correlation");
  check_sd(c.site_sd, "site SD");
  check_sd(c.noise_sd, "noise SD");

  Eigen::MatrixXd R(3, 3);
  R << 1.0, c.subject_corrs[0], c.subject_corrs[1],
      c.subject_corrs[0], 1.0, c.subject_corrs[2],
      c.subject_corrs[1], c.subject_corrs[2], 1.0;
  Eigen::MatrixXd L = corr_factor(R);
  for (int i = 0; i < 3; ++i) L.row(i) *= c.subject_sds[i];

  const int n_groups = static_cast<int>(c.groups.size());
  std::vector<std::string> group_levels = c.groups;
  std::sort(group_levels.begin(), group_levels.end());
  require(std::adjacent_find(group_levels.begin(), group_levels.end()) ==
              group_levels.end(),
          "group labels must be distinct");
  std::vector<std::int32_t> group_code_of(n_groups);
  for (int g = 0; g < n_groups; ++g)
    group_code_of[g] = static_cast<std::int32_t>(
        std::lower_bound(group_levels.begin(), group_levels.end(),
                         c.groups[g]) -
        group_levels.begin());

  // Independent streams per random component: adding or removing one
  // component never perturbs draws from the others.
  Rng subj_rng(c.seed, "longitudinal.subject");
  Rng site_rng(c.seed, "longitudinal.site");
  Rng noise_rng(c.seed, "longitudinal.noise");

  std::vector<std::array<double, 3>> dev(c.n_subjects);
  for (int i = 0; i < c.n_subjects; ++i) {
    Eigen::Vector3d z(subj_rng.normal(), subj_rng.normal(), subj_rng.normal());
    Eigen::Vector3d d = L * z;
    dev[i] = {d[0], d[1], d[2]};
  }
  std::vector<double> site_dev(std::max(c.n_sites, 0));
  for (int s = 0; s < c.n_sites; ++s)
    site_dev[s] = site_rng.normal(0.0, c.site_sd);

  const std::size_t n_rows =
      static_cast<std::size_t>(c.n_subjects) * c.n_timepoints;
  std::vector<std::int32_t> subj_codes, site_codes, grade_codes;
  std::vector<double> time_vals, func_vals;
  subj_codes.reserve(n_rows);
  grade_codes.reserve(n_rows);
  time_vals.reserve(n_rows);
  func_vals.reserve(n_rows);

  for (int i = 0; i < c.n_subjects; ++i) {
    const int gi = i % n_groups;
    const int si =
        c.n_sites > 0
            ? static_cast<int>(static_cast<long long>(i) * c.n_sites /
                               c.n_subjects)
            : -1;
    const std::array<double, 3>& q = c.group_curves[gi];
    for (int tp = 0; tp < c.n_timepoints; ++tp) {
      const double t = tp;
      const double mean = q[0] + q[1] * t + q[2] * (t * t);
      double resp = mean + dev[i][0] + dev[i][1] * t + dev[i][2] * (t * t);
      if (c.n_sites > 0) resp += site_dev[si];
      resp += noise_rng.normal(0.0, c.noise_sd);
      subj_codes.push_back(i);
      if (c.n_sites > 0) site_codes.push_back(si);
      grade_codes.push_back(group_code_of[gi]);
      time_vals.push_back(t);
      func_vals.push_back(resp);
    }
  }

  std::vector<std::string> subj_levels, site_levels;
  for (int i = 0; i < c.n_subjects; ++i)
    subj_levels.push_back(padded("s", i, c.n_subjects));
  for (int s = 0; s < c.n_sites; ++s)
    site_levels.push_back(padded("site", s, c.n_sites));

  std::vector<Column> cols;
  cols.push_back(factor_column("subject", std::move(subj_codes),
                               std::move(subj_levels)));
  if (c.n_sites > 0)
    cols.push_back(factor_column("site", std::move(site_codes),
                                 std::move(site_levels)));
  cols.push_back(factor_column("AIS_grade", std::move(grade_codes),
                               std::move(group_levels)));
  cols.push_back(numeric_column("time", std::move(time_vals)));
  cols.push_back(numeric_column("functioning", std::move(func_vals)));
  return Dataset(std::move(cols));
}

Dataset sim_factorial(const SimConfig& cfg) {
  SimConfig c = cfg;
  require(c.n_subjects >= 2, "simulation needs at least 2 subjects");
  require(c.n_altitude >= 2 && c.n_condition >= 2,
          "factor level counts must be at least 2");
  require(c.replicates >= 1, "replicates must be positive");
  const int n_cells = c.n_altitude * c.n_condition;
  if (c.cell_means.empty()) {
    c.cell_means.resize(n_cells);
    for (int a = 0; a < c.n_altitude; ++a)
      for (int b = 0; b < c.n_condition; ++b)
        c.cell_means[a * c.n_condition + b] =
            60.0 + 12.0 * a + 18.0 * b + 3.0 * a * b;
  }
  require(static_cast<int>(c.cell_means.size()) == n_cells,
          "cell_means needs " + std::to_string(n_cells) + " values (" +
              std::to_string(c.n_altitude) + " x " +
              std::to_string(c.n_condition) + " cells); got " +
              std::to_string(c.cell_means.size()));
  check_sd(c.subject_sd, "subject SD");
  check_sd(c.subject_altitude_sd, "subject:altitude SD");
  check_sd(c.subject_condition_sd, "subject:condition SD");
  check_sd(c.noise_sd, "noise SD");

  Rng subj_rng(c.seed, "factorial.subject");
  Rng salt_rng(c.seed, "factorial.subject_altitude");
  Rng scond_rng(c.seed, "factorial.subject_condition");
  Rng noise_rng(c.seed, "factorial.noise");

  std::vector<double> bs(c.n_subjects);
  for (double& x : bs) x = subj_rng.normal(0.0, c.subject_sd);
  std::vector<double> bsa(static_cast<std::size_t>(c.n_subjects) *
                          c.n_altitude);
  for (double& x : bsa) x = salt_rng.normal(0.0, c.subject_altitude_sd);
  std::vector<double> bsc(static_cast<std::size_t>(c.n_subjects) *
                          c.n_condition);
  for (double& x : bsc) x = scond_rng.normal(0.0, c.subject_condition_sd);

  std::vector<std::int32_t> subj_codes, alt_codes, cond_codes;
  std::vector<double> hr;
  for (int i = 0; i < c.n_subjects; ++i) {
    for (int a = 0; a < c.n_altitude; ++a) {
      for (int b = 0; b < c.n_condition; ++b) {
        for (int r = 0; r < c.replicates; ++r) {
          double resp = c.cell_means[a * c.n_condition + b] + bs[i] +
                        bsa[static_cast<std::size_t>(i) * c.n_altitude + a] +
                        bsc[static_cast<std::size_t>(i) * c.n_condition + b];
          resp += noise_rng.normal(0.0, c.noise_sd);
          subj_codes.push_back(i);
          alt_codes.push_back(a);
          cond_codes.push_back(b);
          hr.push_back(resp);
        }
      }
    }
  }

  std::vector<std::string> subj_levels, alt_levels, cond_levels;
  for (int i = 0; i < c.n_subjects; ++i)
    subj_levels.push_back(padded("s", i, c.n_subjects));
  for (int a = 0; a < c.n_altitude; ++a)
    alt_levels.push_back(padded("a", a, c.n_altitude));
  for (int b = 0; b < c.n_condition; ++b)
    cond_levels.push_back(padded("c", b, c.n_condition));

  std::vector<Column> cols;
  cols.push_back(factor_column("subject", std::move(subj_codes),
                               std::move(subj_levels)));
  cols.push_back(
      factor_column("altitude", std::move(alt_codes), std::move(alt_levels)));
  cols.push_back(factor_column("condition", std::move(cond_codes),
                               std::move(cond_levels)));
  cols.push_back(numeric_column("heart_rate", std::move(hr)));
  return Dataset(std::move(cols));
}

Dataset sim_crossed(const SimConfig& cfg) {
  const SimConfig& c = cfg;
  require(c.n_subjects >= 2, "simulation needs at least 2 subjects");
  require(c.n_stimuli >= 2, "stimuli must be at least 2");
  check_sd(c.subject_icept_sd, "subject intercept SD");
  check_sd(c.subject_slope_sd, "subject slope SD");
  check_corr(c.subject_islope_corr, "subject intercept-slope correlation");
  check_sd(c.stimulus_sd, "stimulus SD");
  check_sd(c.noise_sd, "noise SD");
  require(std::isfinite(c.missing_rate) && c.missing_rate >= 0.0 &&
              c.missing_rate < 1.0,
          "missing rate must lie in [0, 1)");

  Eigen::MatrixXd R(2, 2);
  R << 1.0, c.subject_islope_corr, c.subject_islope_corr, 1.0;
  Eigen::MatrixXd L = corr_factor(R);
  L.row(0) *= c.subject_icept_sd;
  L.row(1) *= c.subject_slope_sd;

  Rng subj_rng(c.seed, "crossed.subject");
  Rng stim_rng(c.seed, "crossed.stimulus");
  Rng noise_rng(c.seed, "crossed.noise");
  Rng miss_rng(c.seed, "crossed.missing");

  std::vector<std::array<double, 2>> dev(c.n_subjects);
  for (int i = 0; i < c.n_subjects; ++i) {
    Eigen::Vector2d z(subj_rng.normal(), subj_rng.normal());
    Eigen::Vector2d d = L * z;
    dev[i] = {d[0], d[1]};
  }
  std::vector<double> stim_dev(c.n_stimuli);
  for (double& x : stim_dev) x = stim_rng.normal(0.0, c.stimulus_sd);

  std::vector<std::int32_t> subj_codes, stim_codes, mod_codes;
  std::vector<double> rt;
  for (int i = 0; i < c.n_subjects; ++i) {
    for (int k = 0; k < c.n_stimuli; ++k) {
      // Every pair consumes its noise and missingness draws whether or
      // not the row is kept, so the retained rows are unchanged by the
      // missingness rate.
      const double noise = noise_rng.normal(0.0, c.noise_sd);
      const double u = miss_rng.uniform();
      if (u < c.missing_rate) continue;
      const int m = (i + k) % 2;  // each stimulus in one modality per subject
      double log_rt = c.rt_intercept + (m == 1 ? c.modality_effect : 0.0) +
                      dev[i][0] + (m == 1 ? dev[i][1] : 0.0) + stim_dev[k] +
                      noise;
      subj_codes.push_back(i);
      stim_codes.push_back(k);
      mod_codes.push_back(m);
      rt.push_back(std::exp(log_rt));
    }
  }

  std::vector<std::string> subj_levels, stim_levels;
  for (int i = 0; i < c.n_subjects; ++i)
    subj_levels.push_back(padded("s", i, c.n_subjects));
  for (int k = 0; k < c.n_stimuli; ++k)
    stim_levels.push_back(padded("stim", k, c.n_stimuli));

  std::vector<Column> cols;
  cols.push_back(factor_column("subject", std::move(subj_codes),
                               std::move(subj_levels)));
  cols.push_back(factor_column("stimulus", std::move(stim_codes),
                               std::move(stim_levels)));
  cols.push_back(factor_column("modality", std::move(mod_codes),
                               {"audio", "audiovisual"}));
  cols.push_back(numeric_column("RT", std::move(rt)));
  return Dataset(std::move(cols));
}

Dataset simulate(const SimConfig& cfg) {
  switch (cfg.family) {
    case SimFamily::Longitudinal: return sim_longitudinal(cfg);
    case SimFamily::Factorial: return sim_factorial(cfg);
    case SimFamily::Crossed: return sim_crossed(cfg);
  }
  throw std::invalid_argument("unknown simulation family");
}

namespace {

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    throw std::invalid_argument("setting '" + key + "' needs a number; got '" +
                                v + "'");
  return x;
}

int parse_int(const std::string& key, const std::string& v) {
  const double x = parse_double(key, v);
  const int i = static_cast<int>(x);
  if (static_cast<double>(i) != x)
    throw std::invalid_argument("setting '" + key + "' needs an integer; got '" +
                                v + "'");
  return i;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(cur);
  return parts;
}

std::string trimmed(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<double> parse_list(const std::string& key, const std::string& v,
                               int expected = -1) {
  std::vector<double> out;
  for (const std::string& part : split(v, ','))
    out.push_back(parse_double(key, trimmed(part)));
  if (expected >= 0 && static_cast<int>(out.size()) != expected)
    throw std::invalid_argument("setting '" + key + "' needs " +
                                std::to_string(expected) + " values; got " +
                                std::to_string(out.size()));
  return out;
}

}  // namespace

SimConfig parse_sim_config(const std::map<std::string, std::string>& kv) {
  SimFamily family = SimFamily::Longitudinal;
  if (auto it = kv.find("family"); it != kv.end())
    family = parse_sim_family(trimmed(it->second));
  SimConfig cfg = default_config(family);

  for (const auto& [key, raw] : kv) {
    const std::string v = trimmed(raw);
    if (key == "family") {
      continue;
    } else if (key == "seed") {
      const double x = parse_double(key, v);
      if (x < 0 || x != std::floor(x))
        throw std::invalid_argument("setting 'seed' needs a non-negative "
                                    "integer; got '" + v + "'");
      cfg.seed = static_cast<std::uint64_t>(x);
    } else if (key == "subjects") {
      cfg.n_subjects = parse_int(key, v);
    } else if (key == "noise_sd") {
      cfg.noise_sd = parse_double(key, v);
    } else if (key == "timepoints") {
      cfg.n_timepoints = parse_int(key, v);
    } else if (key == "sites") {
      cfg.n_sites = parse_int(key, v);
    } else if (key == "groups") {
      cfg.groups.clear();
      for (const std::string& part : split(v, ',')) {
        const std::string label = trimmed(part);
        if (label.empty())
          throw std::invalid_argument("setting 'groups' has an empty label");
        cfg.groups.push_back(label);
      }
    } else if (key == "group_curves") {
      cfg.group_curves.clear();
      for (const std::string& triple : split(v, ';')) {
        const std::vector<double> coef = parse_list(key, trimmed(triple), 3);
        cfg.group_curves.push_back({coef[0], coef[1], coef[2]});
      }
    } else if (key == "subject_sds") {
      const std::vector<double> x = parse_list(key, v, 3);
      cfg.subject_sds = {x[0], x[1], x[2]};
    } else if (key == "subject_corrs") {
      const std::vector<double> x = parse_list(key, v, 3);
      cfg.subject_corrs = {x[0], x[1], x[2]};
    } else if (key == "site_sd") {
      cfg.site_sd = parse_double(key, v);
    } else if (key == "altitude_levels") {
      cfg.n_altitude = parse_int(key, v);
    } else if (key == "condition_levels") {
      cfg.n_condition = parse_int(key, v);
    } else if (key == "replicates") {
      cfg.replicates = parse_int(key, v);
    } else if (key == "cell_means") {
      cfg.cell_means = parse_list(key, v);
    } else if (key == "subject_sd") {
      cfg.subject_sd = parse_double(key, v);
    } else if (key == "subject_altitude_sd") {
      cfg.subject_altitude_sd = parse_double(key, v);
    } else if (key == "subject_condition_sd") {
      cfg.subject_condition_sd = parse_double(key, v);
    } else if (key == "stimuli") {
      cfg.n_stimuli = parse_int(key, v);
    } else if (key == "rt_intercept") {
      cfg.rt_intercept = parse_double(key, v);
    } else if (key == "modality_effect") {
      cfg.modality_effect = parse_double(key, v);
    } else if (key == "subject_icept_sd") {
      cfg.subject_icept_sd = parse_double(key, v);
    } else if (key == "subject_slope_sd") {
      cfg.subject_slope_sd = parse_double(key, v);
    } else if (key == "subject_islope_corr") {
      cfg.subject_islope_corr = parse_double(key, v);
    } else if (key == "stimulus_sd") {
      cfg.stimulus_sd = parse_double(key, v);
    } else if (key == "missing_rate") {
      cfg.missing_rate = parse_double(key, v);
    } else {
      throw std::invalid_argument("unknown simulation setting '" + key + "'");
    }
  }
  return cfg;
}

std::map<std::string, std::string> read_sim_settings(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("cannot open simulation config '" + path + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const std::size_t hash = line.find('#'); hash != std::string::npos)
      line = line.substr(0, hash);
    line = trimmed(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": expected key = value");
    kv[trimmed(line.substr(0, eq))] = trimmed(line.substr(eq + 1));
  }
  return kv;
}

SimConfig read_sim_config(const std::string& path) {
  return parse_sim_config(read_sim_settings(path));
}

}  // namespace lmmkit
