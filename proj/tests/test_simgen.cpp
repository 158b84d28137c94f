#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <doctest.h>

#include "lmmkit/dataframe.hpp"
#include "lmmkit/design.hpp"
#include "lmmkit/estimate.hpp"
#include "lmmkit/formula.hpp"
#include "lmmkit/simgen.hpp"

using namespace lmmkit;

namespace {

LmmFit fit_of(const Dataset& ds, const std::string& formula, FitMethod m) {
  FitOptions o;
  o.method = m;
  return fit_lmm(build_matrices(ds, expand_terms(parse_formula(formula))), o);
}

double component_sd(const LmmFit& fit, const std::string& grouping) {
  for (const VarianceComponent& c : fit.components)
    if (c.grouping == grouping) return c.stddev[0];
  FAIL("no component for grouping ", grouping);
  return 0.0;
}

}  // namespace

TEST_CASE("longitudinal shape, columns, and nesting") {
  const SimConfig cfg = default_config(SimFamily::Longitudinal);
  const Dataset ds = sim_longitudinal(cfg);
  CHECK(ds.n_rows() == 720);  // 40 subjects x 18 monthly scores
  REQUIRE(ds.n_cols() == 5);
  CHECK(ds.column(0).name == "subject");
  CHECK(ds.column(1).name == "site");
  CHECK(ds.column(2).name == "AIS_grade");
  CHECK(ds.column(3).name == "time");
  CHECK(ds.column(4).name == "functioning");

  CHECK(ds.column("subject").levels.size() == 40);
  CHECK(ds.column("subject").levels[0] == "s01");
  CHECK(ds.column("site").levels ==
        std::vector<std::string>{"site1", "site2", "site3", "site4"});
  CHECK(ds.column("AIS_grade").levels.size() == 3);
  CHECK(ds.column("time").type == ColumnType::Numeric);
  CHECK(ds.column("time").numeric[0] == 0.0);
  CHECK(ds.column("time").numeric[17] == 17.0);
  CHECK(ds.column("time").numeric[18] == 0.0);

  // Subjects are nested in sites; AIS grade is crossed with site.
  CHECK(classify_relation(ds, "subject", "site") == FactorRelation::NestedAinB);
  CHECK(classify_relation(ds, "AIS_grade", "site") ==
        FactorRelation::FullyCrossed);

  SimConfig no_site = cfg;
  no_site.n_sites = 0;
  const Dataset ds2 = sim_longitudinal(no_site);
  CHECK(ds2.n_cols() == 4);
  CHECK_FALSE(ds2.has_column("site"));
}

TEST_CASE("factorial shape and balance") {
  SimConfig cfg = default_config(SimFamily::Factorial);
  Dataset ds = sim_factorial(cfg);
  CHECK(ds.n_rows() == 60);  // 10 x 2 x 3 x 1
  CHECK(ds.column(0).name == "subject");
  CHECK(ds.column(1).name == "altitude");
  CHECK(ds.column(2).name == "condition");
  CHECK(ds.column(3).name == "heart_rate");
  CHECK(ds.column("altitude").levels == std::vector<std::string>{"a1", "a2"});
  CHECK(ds.column("condition").levels ==
        std::vector<std::string>{"c1", "c2", "c3"});

  cfg.replicates = 2;
  CHECK(sim_factorial(cfg).n_rows() == 120);

  // Every subject x condition cell holds exactly replicates * n_altitude rows.
  const CrossTab tab = cross_tabulate(sim_factorial(cfg), "subject", "condition");
  for (const auto& row : tab.counts)
    for (std::int64_t n : row) CHECK(n == 4);
}

TEST_CASE("crossed shape, modality assignment, and missingness") {
  SimConfig cfg = default_config(SimFamily::Crossed);
  const Dataset full = sim_crossed(cfg);
  CHECK(full.n_rows() == 28779);  // 53 x 543, nothing missing
  CHECK(full.column("modality").levels ==
        std::vector<std::string>{"audio", "audiovisual"});

  // Each stimulus appears in exactly one modality for a given subject,
  // split by parity so both factors see both modalities.
  const Column& subj = full.column("subject");
  const Column& stim = full.column("stimulus");
  const Column& mod = full.column("modality");
  for (std::size_t r = 0; r < full.n_rows(); r += 97)
    CHECK(mod.codes[r] == (subj.codes[r] + stim.codes[r]) % 2);

  // The observed-row count note (21,679 of 53 x 543) corresponds to about
  // 24.7% of pairs missing; the rate is a free parameter with plain
  // Bernoulli-drop semantics.
  cfg.missing_rate = 0.2467;
  const Dataset paperlike = sim_crossed(cfg);
  CHECK(std::llabs(static_cast<long long>(paperlike.n_rows()) - 21679) <= 300);

  cfg.missing_rate = 0.01;
  const Dataset sparse = sim_crossed(cfg);
  CHECK(std::llabs(static_cast<long long>(sparse.n_rows()) - 28491) <= 150);

  // Dropping pairs never perturbs the retained rows' values.
  std::map<std::pair<int, int>, double> full_rt;
  for (std::size_t r = 0; r < full.n_rows(); ++r)
    full_rt[{subj.codes[r], stim.codes[r]}] = full.column("RT").numeric[r];
  const Column& ssubj = sparse.column("subject");
  const Column& sstim = sparse.column("stimulus");
  for (std::size_t r = 0; r < sparse.n_rows(); ++r)
    CHECK(sparse.column("RT").numeric[r] ==
          full_rt.at({ssubj.codes[r], sstim.codes[r]}));
}

TEST_CASE("identical config and seed reproduce the dataset bit for bit") {
  for (const SimFamily fam :
       {SimFamily::Longitudinal, SimFamily::Factorial, SimFamily::Crossed}) {
    CAPTURE(to_string(fam));
    SimConfig cfg = default_config(fam);
    cfg.n_subjects = 8;
    cfg.n_stimuli = 12;
    cfg.seed = 77;
    const std::string a = write_csv_text(simulate(cfg));
    const std::string b = write_csv_text(simulate(cfg));
    CHECK(a == b);
    cfg.seed = 78;
    CHECK(a != write_csv_text(simulate(cfg)));
  }
}

TEST_CASE("zero variances collapse each family onto its mean structure") {
  SimConfig lcfg = default_config(SimFamily::Longitudinal);
  lcfg.subject_sds = {0.0, 0.0, 0.0};
  lcfg.site_sd = 0.0;
  lcfg.noise_sd = 0.0;
  const Dataset lds = sim_longitudinal(lcfg);
  const std::vector<std::array<double, 3>> curves = {
      {20.0, 4.0, -0.12}, {30.0, 4.5, -0.14}, {40.0, 5.0, -0.16}};
  for (std::size_t r = 0; r < lds.n_rows(); ++r) {
    const int subject = lds.column("subject").codes[r];
    const std::array<double, 3>& q = curves[subject % 3];
    const double t = lds.column("time").numeric[r];
    CHECK(lds.column("functioning").numeric[r] ==
          q[0] + q[1] * t + q[2] * (t * t));
  }

  SimConfig fcfg = default_config(SimFamily::Factorial);
  fcfg.subject_sd = fcfg.subject_altitude_sd = fcfg.subject_condition_sd = 0.0;
  fcfg.noise_sd = 0.0;
  const Dataset fds = sim_factorial(fcfg);
  for (std::size_t r = 0; r < fds.n_rows(); ++r) {
    const int a = fds.column("altitude").codes[r];
    const int b = fds.column("condition").codes[r];
    CHECK(fds.column("heart_rate").numeric[r] ==
          60.0 + 12.0 * a + 18.0 * b + 3.0 * a * b);
  }

  SimConfig xcfg = default_config(SimFamily::Crossed);
  xcfg.subject_icept_sd = xcfg.subject_slope_sd = xcfg.stimulus_sd = 0.0;
  xcfg.noise_sd = 0.0;
  const Dataset xds = sim_crossed(xcfg);
  for (std::size_t r = 0; r < xds.n_rows(); r += 53) {
    const int m = xds.column("modality").codes[r];
    CHECK(xds.column("RT").numeric[r] ==
          std::exp(6.4 + (m == 1 ? 0.079 : 0.0)));
  }
}

TEST_CASE("per-component streams leave other draws untouched") {
  // Turning the site component off entirely and setting its SD to zero
  // must agree exactly: site draws come from their own stream.
  SimConfig a = default_config(SimFamily::Longitudinal);
  a.site_sd = 0.0;
  SimConfig b = a;
  b.n_sites = 0;
  const Dataset da = sim_longitudinal(a);
  const Dataset db = sim_longitudinal(b);
  REQUIRE(da.n_rows() == db.n_rows());
  for (std::size_t r = 0; r < da.n_rows(); ++r)
    CHECK(da.column("functioning").numeric[r] ==
          db.column("functioning").numeric[r]);
}

TEST_CASE("covariance and shape validation") {
  SimConfig cfg = default_config(SimFamily::Longitudinal);
  cfg.subject_corrs = {0.95, -0.95, 0.95};  // indefinite correlation matrix
  CHECK_THROWS_WITH_AS(sim_longitudinal(cfg),
                       doctest::Contains("positive semi-definite"),
                       std::invalid_argument);
  cfg.subject_corrs = {1.0, 0.0, 0.0};  // semidefinite boundary is fine
  CHECK_NOTHROW(sim_longitudinal(cfg));

  cfg = default_config(SimFamily::Longitudinal);
  cfg.subject_corrs = {1.5, 0.0, 0.0};
  CHECK_THROWS_WITH_AS(sim_longitudinal(cfg),
                       doctest::Contains("correlation in [-1, 1]"),
                       std::invalid_argument);
  cfg = default_config(SimFamily::Longitudinal);
  cfg.noise_sd = -1.0;
  CHECK_THROWS_WITH_AS(sim_longitudinal(cfg),
                       doctest::Contains("non-negative"),
                       std::invalid_argument);
  cfg = default_config(SimFamily::Longitudinal);
  cfg.n_subjects = 1;
  CHECK_THROWS_WITH_AS(sim_longitudinal(cfg),
                       doctest::Contains("at least 2 subjects"),
                       std::invalid_argument);
  cfg = default_config(SimFamily::Longitudinal);
  cfg.group_curves = {{1.0, 2.0, 3.0}};
  CHECK_THROWS_WITH_AS(sim_longitudinal(cfg),
                       doctest::Contains("triple per group"),
                       std::invalid_argument);

  SimConfig fcfg = default_config(SimFamily::Factorial);
  fcfg.cell_means = {1.0, 2.0, 3.0};
  CHECK_THROWS_WITH_AS(sim_factorial(fcfg),
                       doctest::Contains("cell_means needs 6 values"),
                       std::invalid_argument);

  SimConfig xcfg = default_config(SimFamily::Crossed);
  xcfg.missing_rate = 1.0;
  CHECK_THROWS_WITH_AS(sim_crossed(xcfg), doctest::Contains("[0, 1)"),
                       std::invalid_argument);
}

TEST_CASE("config parsing from key-value settings and files") {
  CHECK(default_config(SimFamily::Crossed).n_subjects == 53);
  CHECK(default_config(SimFamily::Crossed).noise_sd == 0.25);
  CHECK(default_config(SimFamily::Factorial).n_subjects == 10);

  const SimConfig cfg = parse_sim_config({{"family", "factorial"},
                                          {"subjects", "20"},
                                          {"replicates", "2"},
                                          {"noise_sd", "1.5"},
                                          {"cell_means", "1,2,3,4,5,6"},
                                          {"seed", "99"}});
  CHECK(cfg.family == SimFamily::Factorial);
  CHECK(cfg.n_subjects == 20);
  CHECK(cfg.replicates == 2);
  CHECK(cfg.noise_sd == 1.5);
  CHECK(cfg.cell_means == std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(cfg.seed == 99);

  CHECK(parse_sim_config({}).family == SimFamily::Longitudinal);
  CHECK_THROWS_WITH_AS(parse_sim_config({{"bogus", "1"}}),
                       doctest::Contains("unknown simulation setting"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_sim_config({{"subjects", "ten"}}),
                       doctest::Contains("needs a number"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_sim_config({{"subject_sds", "1,2"}}),
                       doctest::Contains("needs 3 values"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_sim_config({{"seed", "-3"}}),
                       doctest::Contains("non-negative"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_sim_config({{"family", "fancy"}}),
                       doctest::Contains("unknown simulation family"),
                       std::invalid_argument);

  const std::string path = "/tmp/lmmkit_simcfg_test.txt";
  {
    std::ofstream out(path);
    out << "# crossed family demo\n"
        << "family = crossed\n"
        << "subjects = 6   # small\n"
        << "stimuli = 10\n"
        << "\n"
        << "missing_rate = 0.1\n";
  }
  const SimConfig fromfile = read_sim_config(path);
  CHECK(fromfile.family == SimFamily::Crossed);
  CHECK(fromfile.n_subjects == 6);
  CHECK(fromfile.n_stimuli == 10);
  CHECK(fromfile.missing_rate == 0.1);
  CHECK_THROWS_WITH_AS(read_sim_config("/tmp/no_such_simcfg.txt"),
                       doctest::Contains("cannot open"), std::runtime_error);
}

TEST_CASE("factorial data fit by its own generative structure") {
  SimConfig cfg = default_config(SimFamily::Factorial);
  cfg.n_subjects = 60;
  cfg.seed = 5;
  const Dataset ds = sim_factorial(cfg);
  const LmmFit fit =
      fit_of(ds,
             "heart_rate ~ 1 + altitude * condition + (1|subject) + "
             "(1|subject:altitude) + (1|subject:condition)",
             FitMethod::REML);
  REQUIRE(fit.converged);
  CHECK_FALSE(fit.singular);
  // Truth: subject 4, subject:altitude 3, subject:condition 2.5, noise 3.
  CHECK(component_sd(fit, "subject") == doctest::Approx(4.0).epsilon(0.4));
  CHECK(component_sd(fit, "subject:altitude") ==
        doctest::Approx(3.0).epsilon(0.4));
  CHECK(component_sd(fit, "subject:condition") ==
        doctest::Approx(2.5).epsilon(0.4));
  CHECK(std::sqrt(fit.sigma2) == doctest::Approx(3.0).epsilon(0.4));
}

TEST_CASE("crossed variances recover at the full shape") {
  SimConfig cfg = default_config(SimFamily::Crossed);
  cfg.seed = 3;
  const Dataset ds = sim_crossed(cfg);
  const LmmFit fit = fit_of(
      ds, "log(RT) ~ 1 + modality + (1|subject) + (1|stimulus)",
      FitMethod::REML);
  REQUIRE(fit.converged);
  CHECK_FALSE(fit.singular);
  // The small stimulus spread and the large subject spread both land
  // within 20% of truth.
  CHECK(component_sd(fit, "stimulus") == doctest::Approx(0.017).epsilon(0.2));
  CHECK(component_sd(fit, "subject") == doctest::Approx(0.152).epsilon(0.2));
  CHECK(std::sqrt(fit.sigma2) == doctest::Approx(0.25).epsilon(0.2));
  CHECK(fit.beta[1] == doctest::Approx(0.079).epsilon(0.45));
}

TEST_CASE("generated datasets survive a csv round trip unchanged") {
  SimConfig cfg = default_config(SimFamily::Crossed);
  cfg.n_subjects = 4;
  cfg.n_stimuli = 6;
  const Dataset ds = sim_crossed(cfg);
  const Dataset back = read_csv_text(write_csv_text(ds));
  REQUIRE(back.n_rows() == ds.n_rows());
  for (std::size_t c = 0; c < ds.n_cols(); ++c) {
    const Column& orig = ds.column(c);
    const Column& rt = back.column(orig.name);
    CHECK(rt.type == orig.type);
    if (orig.type == ColumnType::Factor) {
      CHECK(rt.levels == orig.levels);
      CHECK(rt.codes == orig.codes);
    } else {
      for (std::size_t r = 0; r < ds.n_rows(); ++r)
        CHECK(rt.numeric[r] == orig.numeric[r]);
    }
  }
}
