#include "lmmkit/nonlinear.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include <Eigen/Dense>
#include <json.hpp>

namespace lmmkit {

namespace {

constexpr int kMaxIterations = 200;
constexpr double kDampingStart = 1e-3;
constexpr double kDampingCap = 1e10;
constexpr double kGradientTol = 1e-8;
constexpr double kSseRelTol = 1e-10;

double sse_of(const NegExpParams& p, const std::vector<double>& t,
              const std::vector<double>& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double r = y[i] - negexp_predict(p, t[i]);
    s += r * r;
  }
  return s;
}

std::string fmt6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", x);
  return buf;
}

}  // namespace

double negexp_predict(const NegExpParams& p, double t) {
  return p.alpha + p.delta * std::exp(p.lambda * t);
}

std::array<double, 3> negexp_jacobian(const NegExpParams& p, double t) {
  const double e = std::exp(p.lambda * t);
  return {1.0, e, p.delta * t * e};
}

NegExpSubjectFit fit_negexp_subject(const std::vector<double>& times,
                                    const std::vector<double>& y,
                                    const NegExpParams& start) {
  if (times.size() != y.size())
    throw std::invalid_argument("time and response vectors differ in length");

  std::vector<double> t, v;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (std::isfinite(times[i]) && std::isfinite(y[i])) {
      t.push_back(times[i]);
      v.push_back(y[i]);
    }
  }
  if (t.size() < 4)
    throw std::invalid_argument(
        "a negative exponential fit needs at least 4 non-missing points; got " +
        std::to_string(t.size()));
  if (std::all_of(t.begin(), t.end(), [&](double x) { return x == t[0]; }))
    throw std::invalid_argument(
        "all time points are equal; the rate is unidentifiable");

  const int n = static_cast<int>(t.size());
  NegExpSubjectFit fit;
  fit.n_points = n;
  fit.params = start;
  fit.sse = sse_of(fit.params, t, v);

  double damping = kDampingStart;
  for (int iter = 0; iter < kMaxIterations; ++iter) {
    fit.iterations = iter + 1;

    Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
    Eigen::Vector3d g = Eigen::Vector3d::Zero();
    for (int i = 0; i < n; ++i) {
      const std::array<double, 3> j = negexp_jacobian(fit.params, t[i]);
      const double r = v[i] - negexp_predict(fit.params, t[i]);
      for (int a = 0; a < 3; ++a) {
        g[a] += j[a] * r;
        for (int b = 0; b < 3; ++b) jtj(a, b) += j[a] * j[b];
      }
    }
    // grad SSE = -2 J'r, so the stationarity test is on 2|J'r|.
    if (!g.allFinite() || !jtj.allFinite()) break;
    if (2.0 * g.norm() < kGradientTol) {
      fit.converged = true;
      break;
    }

    bool stepped = false;
    while (damping <= kDampingCap) {
      Eigen::Matrix3d damped = jtj;
      for (int a = 0; a < 3; ++a)
        damped(a, a) += damping * std::max(jtj(a, a), 1e-12);
      const Eigen::Vector3d step = damped.ldlt().solve(g);
      NegExpParams trial{fit.params.alpha + step[0], fit.params.delta + step[1],
                         fit.params.lambda + step[2]};
      const double trial_sse = sse_of(trial, t, v);
      if (std::isfinite(trial_sse) && trial_sse < fit.sse) {
        const double drop = fit.sse - trial_sse;
        fit.params = trial;
        fit.sse = trial_sse;
        damping *= 0.1;
        stepped = true;
        if (drop < kSseRelTol * std::max(fit.sse, DBL_MIN)) fit.converged = true;
        break;
      }
      damping *= 10.0;
    }
    if (!stepped || fit.converged) break;  // damping exhausted: best-so-far
  }

  if (std::abs(fit.params.delta) <=
      1e-8 * std::max(1.0, std::abs(fit.params.alpha)))
    fit.degenerate = true;
  return fit;
}

NegExpPopulationFit fit_negexp_population(const Dataset& ds,
                                          const std::string& dv,
                                          const std::string& time,
                                          const std::string& subject,
                                          const NegExpParams& start) {
  const Column& yc = ds.column(dv);
  const Column& tc = ds.column(time);
  const Column& sc = ds.column(subject);
  if (yc.type != ColumnType::Numeric)
    throw std::invalid_argument("response column '" + dv + "' must be numeric");
  if (tc.type != ColumnType::Numeric)
    throw std::invalid_argument("time column '" + time + "' must be numeric");
  if (sc.type != ColumnType::Factor)
    throw std::invalid_argument("subject column '" + subject +
                                "' must be a factor");

  const std::size_t n_levels = sc.levels.size();
  std::vector<std::vector<double>> ts(n_levels), vs(n_levels);
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    if (sc.is_missing(r) || tc.is_missing(r) || yc.is_missing(r)) continue;
    const int s = sc.codes[r];
    ts[s].push_back(tc.numeric[r]);
    vs[s].push_back(yc.numeric[r]);
  }

  NegExpPopulationFit pop;
  for (std::size_t s = 0; s < n_levels; ++s) {
    const std::string& label = sc.levels[s];
    if (ts[s].size() < 4) {
      pop.excluded.push_back(
          {label, "fewer than 4 non-missing observations (" +
                      std::to_string(ts[s].size()) + ")"});
      continue;
    }
    if (std::all_of(ts[s].begin(), ts[s].end(),
                    [&](double x) { return x == ts[s][0]; })) {
      pop.excluded.push_back({label, "all time points equal"});
      continue;
    }
    const NegExpSubjectFit fit = fit_negexp_subject(ts[s], vs[s], start);
    if (fit.degenerate) {
      pop.excluded.push_back({label, "no exponential signal (flat trajectory)"});
      continue;
    }
    if (!fit.converged) {
      pop.excluded.push_back({label, "did not converge"});
      continue;
    }
    pop.subjects.push_back(label);
    pop.estimates.push_back(fit.params);
    pop.sse.push_back(fit.sse);
  }

  const std::size_t m = pop.subjects.size();
  if (m < 2)
    throw std::runtime_error(
        "a population summary needs at least 2 converged subjects; got " +
        std::to_string(m));

  double sums[3] = {0.0, 0.0, 0.0};
  for (const NegExpParams& e : pop.estimates) {
    sums[0] += e.alpha;
    sums[1] += e.delta;
    sums[2] += e.lambda;
  }
  pop.fixed = {sums[0] / m, sums[1] / m, sums[2] / m};

  // Deviates are nudged so fixed + deviate reproduces the stage-1
  // estimate exactly, not just to rounding.
  auto exact_dev = [](double est, double fixed) {
    double dev = est - fixed;
    for (int k = 0; k < 4 && fixed + dev != est; ++k)
      dev += est - (fixed + dev);
    return dev;
  };
  for (const NegExpParams& e : pop.estimates)
    pop.deviates.push_back({exact_dev(e.alpha, pop.fixed.alpha),
                            exact_dev(e.delta, pop.fixed.delta),
                            exact_dev(e.lambda, pop.fixed.lambda)});

  double dmean[3] = {0.0, 0.0, 0.0};
  for (const NegExpParams& d : pop.deviates) {
    dmean[0] += d.alpha;
    dmean[1] += d.delta;
    dmean[2] += d.lambda;
  }
  for (double& x : dmean) x /= m;
  for (const NegExpParams& d : pop.deviates) {
    const double c[3] = {d.alpha - dmean[0], d.delta - dmean[1],
                         d.lambda - dmean[2]};
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) pop.deviate_cov[a][b] += c[a] * c[b];
  }
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) pop.deviate_cov[a][b] /= (m - 1);

  return pop;
}

namespace {

std::string equation_line(const NegExpParams& p) {
  return "y = " + fmt6(p.alpha) + " + (" + fmt6(p.delta) + ") * exp(" +
         fmt6(p.lambda) + " * t)";
}

}  // namespace

std::string format_negexp_text(const NegExpPopulationFit& fit) {
  std::string out =
      "negative exponential fit (two-stage: per-subject least squares, then "
      "moment summary)\n";
  out += "  population: " + equation_line(fit.fixed) + "\n";
  for (std::size_t i = 0; i < fit.subjects.size(); ++i) {
    out += "  subject " + fit.subjects[i] + ": " +
           equation_line(fit.estimates[i]) + "   [sse " + fmt6(fit.sse[i]) +
           "]\n";
  }
  for (const ExcludedSubject& e : fit.excluded)
    out += "  excluded: " + e.subject + " (" + e.reason + ")\n";
  return out;
}

std::string negexp_to_json(const NegExpPopulationFit& fit) {
  nlohmann::json j;
  j["model"] = "negative_exponential";
  j["method"] =
      "two-stage per-subject least squares; fixed effects are the mean of "
      "converged subject estimates";
  j["fixed"] = {{"alpha", fit.fixed.alpha},
                {"delta", fit.fixed.delta},
                {"lambda", fit.fixed.lambda}};
  j["subjects"] = nlohmann::json::array();
  for (std::size_t i = 0; i < fit.subjects.size(); ++i) {
    j["subjects"].push_back(
        {{"subject", fit.subjects[i]},
         {"alpha", fit.estimates[i].alpha},
         {"delta", fit.estimates[i].delta},
         {"lambda", fit.estimates[i].lambda},
         {"deviate",
          {{"alpha", fit.deviates[i].alpha},
           {"delta", fit.deviates[i].delta},
           {"lambda", fit.deviates[i].lambda}}},
         {"sse", fit.sse[i]}});
  }
  j["deviate_cov"] = nlohmann::json::array();
  for (int a = 0; a < 3; ++a)
    j["deviate_cov"].push_back(
        {fit.deviate_cov[a][0], fit.deviate_cov[a][1], fit.deviate_cov[a][2]});
  j["excluded"] = nlohmann::json::array();
  for (const ExcludedSubject& e : fit.excluded)
    j["excluded"].push_back({{"subject", e.subject}, {"reason", e.reason}});
  return j.dump(2);
}

}  // namespace lmmkit
