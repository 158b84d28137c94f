#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lmmkit/dataframe.hpp"

namespace lmmkit {

enum class SimFamily { Longitudinal, Factorial, Crossed };

const char* to_string(SimFamily f);
SimFamily parse_sim_family(const std::string& name);

// One flat config covering all three families; each generator reads only
// its own shape and truth fields (plus seed, n_subjects, noise_sd).
// Default-constructed values describe the longitudinal family; use
// default_config for family-appropriate defaults.
struct SimConfig {
  SimFamily family = SimFamily::Longitudinal;
  std::uint64_t seed = 1;
  int n_subjects = 40;
  double noise_sd = 6.0;

  // Longitudinal: per-group quadratic trajectories of functioning over
  // months, correlated subject (intercept, slope, quadratic) deviates,
  // optional site intercepts (n_sites = 0 drops the column).
  int n_timepoints = 18;
  int n_sites = 4;
  std::vector<std::string> groups;                  // AIS_grade labels
  std::vector<std::array<double, 3>> group_curves;  // per group: b0, b1, b2
  std::array<double, 3> subject_sds{8.0, 1.0, 0.04};
  // Correlations in (intercept,slope), (intercept,quad), (slope,quad) order.
  std::array<double, 3> subject_corrs{-0.2, 0.1, -0.3};
  double site_sd = 2.0;

  // Factorial: heart rate per subject x altitude x condition cell with
  // subject, subject:altitude, and subject:condition deviates.
  int n_altitude = 2;
  int n_condition = 3;
  int replicates = 1;
  std::vector<double> cell_means;  // altitude-major, n_altitude*n_condition
  double subject_sd = 4.0;
  double subject_altitude_sd = 3.0;
  double subject_condition_sd = 2.5;

  // Crossed: log response time = intercept + modality effect + subject
  // (intercept, modality-slope) deviates + stimulus intercept + noise;
  // the RT column holds exp(log RT). Each (subject, stimulus) pair is
  // dropped independently with probability missing_rate.
  int n_stimuli = 543;
  double rt_intercept = 6.4;
  double modality_effect = 0.079;
  double subject_icept_sd = 0.152;
  double subject_slope_sd = 0.075;
  double subject_islope_corr = -0.29;
  double stimulus_sd = 0.017;
  double missing_rate = 0.0;
};

SimConfig default_config(SimFamily family);

// Flat key=value settings applied over the family's defaults; the
// "family" key is read first. Unknown keys and unparsable values are
// errors.
SimConfig parse_sim_config(const std::map<std::string, std::string>& kv);

// Raw key=value pairs from a file: one per line, '#' comments, blank
// lines ignored. Lets callers layer overrides before parsing.
std::map<std::string, std::string> read_sim_settings(const std::string& path);

// parse_sim_config applied to read_sim_settings.
SimConfig read_sim_config(const std::string& path);

Dataset sim_longitudinal(const SimConfig& cfg);
Dataset sim_factorial(const SimConfig& cfg);
Dataset sim_crossed(const SimConfig& cfg);
Dataset simulate(const SimConfig& cfg);

}  // namespace lmmkit
