#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmmkit/dataframe.hpp"
#include "lmmkit/design.hpp"
#include "lmmkit/formula.hpp"
#include "lmmkit/rng.hpp"

using namespace lmmkit;

namespace {

ModelMatrices build(const std::string& csv, const std::string& formula,
                    const ContrastScheme& cs = {},
                    const CenteringPolicy& cp = {}) {
  Dataset ds = read_csv_text(csv);
  return build_matrices(ds, expand_terms(parse_formula(formula)), cs, cp);
}

const std::string kHeartRateCsv =
    "subject,condition,heart_rate\n"
    "s1,ctl,60\n"
    "s1,ex,72\n"
    "s2,ctl,42\n"
    "s2,ex,50\n";

// 10 subjects x 2 altitudes x 3 conditions, one observation per cell.
std::string factorial_csv(int replicates = 1) {
  std::string csv = "subject,altitude,condition,heart_rate\n";
  int v = 50;
  for (int s = 1; s <= 10; ++s) {
    for (const char* alt : {"low", "high"}) {
      for (const char* cond : {"rest", "imm", "delay"}) {
        for (int r = 0; r < replicates; ++r) {
          csv += "S" + std::to_string(s) + "," + alt + "," + cond + "," +
                 std::to_string(50 + (v = (v * 31 + 7) % 37)) + "\n";
        }
      }
    }
  }
  return csv;
}

}  // namespace

TEST_CASE("heart-rate design reproduces the worked matrices") {
  ModelMatrices m = build(kHeartRateCsv, "heart_rate ~ 1+condition+(1|subject)");
  REQUIRE(m.n == 4);
  REQUIRE(m.p() == 2);
  CHECK(m.x_names == std::vector<std::string>{"(Intercept)", "condition=ex"});

  Eigen::MatrixXd X(4, 2);
  X << 1, 0, 1, 1, 1, 0, 1, 1;
  CHECK((m.X - X).norm() == 0.0);

  REQUIRE(m.blocks.size() == 1);
  const ZBlock& b = m.blocks[0];
  CHECK(b.grouping_name == "subject");
  CHECK(b.levels == std::vector<std::string>{"s1", "s2"});
  CHECK(b.k == 1);
  Eigen::MatrixXd Z(4, 2);
  Z << 1, 0, 1, 0, 0, 1, 0, 1;
  CHECK((Eigen::MatrixXd(b.Z) - Z).norm() == 0.0);

  CHECK(m.y.transpose() == Eigen::RowVector4d(60, 72, 42, 50));
  CHECK(count_random_effects(m) == 2);
}

TEST_CASE("treatment coding uses the alphanumerically first reference") {
  ModelMatrices m = build(factorial_csv(),
                          "heart_rate ~ 1+condition+(1|subject)");
  // Levels sort delay < imm < rest, so delay is the reference.
  CHECK(m.x_names == std::vector<std::string>{"(Intercept)", "condition=imm",
                                              "condition=rest"});
}

TEST_CASE("reference level can be overridden per factor") {
  ContrastScheme cs;
  cs.reference["condition"] = "rest";
  ModelMatrices m = build(factorial_csv(),
                          "heart_rate ~ 1+condition+(1|subject)", cs);
  CHECK(m.x_names == std::vector<std::string>{"(Intercept)", "condition=delay",
                                              "condition=imm"});
}

TEST_CASE("sum coding assigns -1 to the last level") {
  ContrastScheme cs;
  cs.kind = ContrastKind::Sum;
  ModelMatrices m = build(
      "g,y\na,1\nb,2\nc,3\n"
      "a,4\nb,5\nc,6\n",
      "y ~ 1+g+(1|g)");
  (void)m;
  ModelMatrices s =
      build("g,s,y\na,u,1\nb,u,2\nc,u,3\na,v,4\nb,v,5\nc,v,6\n",
            "y ~ 1+g+(1|s)", cs);
  CHECK(s.x_names == std::vector<std::string>{"(Intercept)", "g.sum1",
                                              "g.sum2"});
  Eigen::MatrixXd want(6, 3);
  want << 1, 1, 0, 1, 0, 1, 1, -1, -1, 1, 1, 0, 1, 0, 1, 1, -1, -1;
  CHECK((s.X - want).norm() == 0.0);
}

TEST_CASE("interaction columns are products with the first factor fastest") {
  ModelMatrices m = build(factorial_csv(),
                          "heart_rate ~ 1+condition*altitude+(1|subject)");
  CHECK(m.x_names ==
        std::vector<std::string>{"(Intercept)", "condition=imm",
                                 "condition=rest", "altitude=low",
                                 "condition=imm:altitude=low",
                                 "condition=rest:altitude=low"});
  // The interaction column equals the elementwise product.
  for (Eigen::Index i = 0; i < m.X.rows(); ++i) {
    CHECK(m.X(i, 4) == m.X(i, 1) * m.X(i, 3));
    CHECK(m.X(i, 5) == m.X(i, 2) * m.X(i, 3));
  }
  REQUIRE(m.fixed_terms.size() == 3);
  CHECK(m.fixed_terms[0].name == "condition");
  CHECK(m.fixed_terms[2].name == "condition:altitude");
  CHECK(m.fixed_terms[2].start == 4);
  CHECK(m.fixed_terms[2].len == 2);
}

TEST_CASE("power transform squares the centered variable") {
  std::string csv = "t,s,y\n";
  for (int s = 0; s < 3; ++s) {
    for (int t = 2; t <= 6; ++t) {
      csv += std::to_string(t) + ",S" + std::to_string(s) + "," +
             std::to_string(10 * s + t) + "\n";
    }
  }
  CenteringPolicy cp;
  cp.per_variable["t"] = Centering::AtMean;
  ModelMatrices m = build(csv, "y ~ 1+t+I(t^2)+(1|s)", {}, cp);
  // Mean of t is 4; the quadratic column squares the centered value.
  for (Eigen::Index i = 0; i < m.X.rows(); ++i) {
    CHECK(m.X(i, 2) == doctest::Approx(m.X(i, 1) * m.X(i, 1)));
  }
  CHECK(m.centering_offsets.at("t") == doctest::Approx(4.0));

  CenteringPolicy first;
  first.per_variable["t"] = Centering::AtFirstObservation;
  ModelMatrices m2 = build(csv, "y ~ 1+t+(1|s)", {}, first);
  CHECK(m2.centering_offsets.at("t") == doctest::Approx(2.0));
  CHECK(m2.X.col(1).minCoeff() == 0.0);
}

TEST_CASE("maximal factorial random slopes count sixty coefficients") {
  ModelMatrices m = build(
      factorial_csv(),
      "heart_rate ~ 1+condition*altitude+(condition*altitude|subject)");
  REQUIRE(m.blocks.size() == 1);
  CHECK(m.blocks[0].k == 6);
  CHECK(m.blocks[0].n_levels() == 10);
  CHECK(count_random_effects(m) == 60);
  CHECK(max_term_random_effects(m) == 60);
}

TEST_CASE("per-cell intercept structure also counts sixty in total") {
  ModelMatrices m = build(factorial_csv(),
                          "heart_rate ~ 1+condition*altitude+(1|subject)+"
                          "(1|subject:condition)+(1|subject:altitude)");
  REQUIRE(m.blocks.size() == 3);
  CHECK(m.blocks[0].n_coefs() == 10);
  CHECK(m.blocks[1].n_coefs() == 30);
  CHECK(m.blocks[2].n_coefs() == 20);
  CHECK(count_random_effects(m) == 60);
  CHECK(max_term_random_effects(m) == 30);
  CHECK(m.blocks[1].grouping_name == "subject:condition");
  CHECK(m.blocks[1].levels.size() == 30);
}

TEST_CASE("random slope blocks hold the inner design level-major") {
  std::string csv = "t,s,y\n0,a,1\n1,a,2\n0,b,3\n1,b,4\n2,b,5\n";
  ModelMatrices m = build(csv, "y ~ 1+t+(1+t|s)");
  const ZBlock& b = m.blocks[0];
  REQUIRE(b.k == 2);
  REQUIRE(b.levels == std::vector<std::string>{"a", "b"});
  Eigen::MatrixXd Z(b.Z);
  Eigen::MatrixXd want(5, 4);
  want << 1, 0, 0, 0,
          1, 1, 0, 0,
          0, 0, 1, 0,
          0, 0, 1, 1,
          0, 0, 1, 2;
  CHECK((Z - want).norm() == 0.0);
  CHECK(b.col_names == std::vector<std::string>{"(Intercept)", "t"});

  // Each row has exactly k structural entries in its level's column group.
  for (std::size_t i = 0; i < m.n; ++i) {
    int nz = 0;
    for (int j = 0; j < b.Z.cols(); ++j) {
      if (Eigen::MatrixXd(b.Z)(static_cast<Eigen::Index>(i), j) != 0.0 ||
          (j / b.k) == b.row_level[i]) {
        if ((j / b.k) == b.row_level[i]) ++nz;
      }
    }
    CHECK(nz == b.k);
  }
}

TEST_CASE("theta layout walks each term's lower triangle") {
  std::string csv = "t,s,y\n0,a,1\n1,a,2\n0,b,3\n1,b,4\n";
  ModelMatrices m = build(csv, "y ~ 1+t+(1+t|s)");
  REQUIRE(m.theta_layout.size() == 3);
  CHECK(m.theta_layout[0].row == 0);
  CHECK(m.theta_layout[0].col == 0);
  CHECK(m.theta_layout[1].row == 1);
  CHECK(m.theta_layout[1].col == 0);
  CHECK(m.theta_layout[2].row == 1);
  CHECK(m.theta_layout[2].col == 1);
  CHECK(m.theta_layout[0].diagonal());
  CHECK_FALSE(m.theta_layout[1].diagonal());

  ModelMatrices u = build(csv, "y ~ 1+t+(1+t||s)");
  REQUIRE(u.theta_layout.size() == 2);
  CHECK(u.theta_layout[0].diagonal());
  CHECK(u.theta_layout[1].diagonal());
  CHECK_FALSE(u.blocks[0].correlated);
}

TEST_CASE("rows with missing referenced values are dropped and recorded") {
  std::string csv =
      "x,s,y,junk\n1,a,10,NA\n2,a,NA,5\nNA,b,12,6\n3,b,13,7\n4,b,14,8\n";
  ModelMatrices m = build(csv, "y ~ 1+x+(1|s)");
  CHECK(m.n == 3);
  CHECK(m.dropped_rows == std::vector<std::size_t>{1, 2});
  // The unreferenced 'junk' column's NA must not cost a row.
  CHECK(m.y.size() == 3);
}

TEST_CASE("rank deficiency is a hard error naming dependent columns") {
  std::string csv = "a,b,s,y\n1,2,u,1\n2,4,u,2\n3,6,v,3\n4,8,v,4\n";
  Dataset ds = read_csv_text(csv);
  try {
    build_matrices(ds, expand_terms(parse_formula("y ~ 1+a+b+(1|s)")));
    FAIL("expected rank-deficiency error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("rank deficient") != std::string::npos);
    // b = 2a, so one of the pair must be named as dependent.
    CHECK((msg.find("a") != std::string::npos ||
           msg.find("b") != std::string::npos));
  }
}

TEST_CASE("degenerate inputs raise targeted errors") {
  CHECK_THROWS_AS(build("s,y\na,1\na,2\n", "y ~ 1+(1|s)"),
                  std::invalid_argument);  // single grouping level
  CHECK_THROWS_AS(build("g,s,y\nu,a,1\nu,b,2\n", "y ~ 1+g+(1|s)"),
                  std::invalid_argument);  // single factor level
  CHECK_THROWS_AS(build("x,s,y\nNA,a,1\nNA,b,2\n", "y ~ 1+x+(1|s)"),
                  std::invalid_argument);  // zero rows after dropping
  CHECK_THROWS_AS(build("s,y\na,1\nb,2\n", "y ~ 1+missing+(1|s)"),
                  std::invalid_argument);  // unknown column
  CHECK_THROWS_AS(build("s,y\na,1\nb,2\n", "s ~ 1+(1|y)"),
                  std::invalid_argument);  // factor response
  CHECK_THROWS_AS(build("g,s,y\nu,a,1\nv,b,2\n", "y ~ 1+I(g^2)+(1|s)"),
                  std::invalid_argument);  // power of a factor
  CHECK_THROWS_AS(build("x,s,y\n1,a,0\n2,a,5\n3,b,2\n4,b,-3\n",
                        "log(y) ~ 1+x+(1|s)"),
                  std::invalid_argument);  // log of non-positive response
}

TEST_CASE("log response transforms y") {
  ModelMatrices m = build("s,y\na,1\na,2.718281828459045\nb,1\nb,1\n",
                          "log(y) ~ 1+(1|s)");
  CHECK(m.y[0] == doctest::Approx(0.0));
  CHECK(m.y[1] == doctest::Approx(1.0));
  CHECK(m.log_response);
}

TEST_CASE("reordering rows permutes X and Z rows identically") {
  std::string csv = factorial_csv();
  Dataset ds = read_csv_text(csv);
  FormulaAst ast = expand_terms(
      parse_formula("heart_rate ~ 1+condition*altitude+(1|subject)"));
  ModelMatrices a = build_matrices(ds, ast);

  // Reverse the rows.
  std::vector<std::size_t> perm(ds.n_rows());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    perm[i] = perm.size() - 1 - i;
  }
  std::vector<Column> cols;
  for (const Column& c : ds.columns()) {
    Column r = c;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      r.missing[i] = c.missing[perm[i]];
      if (c.type == ColumnType::Numeric) {
        r.numeric[i] = c.numeric[perm[i]];
      } else {
        r.codes[i] = c.codes[perm[i]];
      }
    }
    cols.push_back(std::move(r));
  }
  ModelMatrices b = build_matrices(Dataset(std::move(cols)), ast);

  for (std::size_t i = 0; i < a.n; ++i) {
    CHECK((a.X.row(static_cast<Eigen::Index>(i)) -
           b.X.row(static_cast<Eigen::Index>(perm.size() - 1 - i)))
              .norm() == 0.0);
  }
  Eigen::MatrixXd za(a.blocks[0].Z), zb(b.blocks[0].Z);
  for (std::size_t i = 0; i < a.n; ++i) {
    CHECK((za.row(static_cast<Eigen::Index>(i)) -
           zb.row(static_cast<Eigen::Index>(perm.size() - 1 - i)))
              .norm() == 0.0);
  }
}

TEST_CASE("one-factor OLS under treatment coding recovers level means") {
  // Balanced: the fitted mean per level equals the sample mean per level.
  std::string csv = "g,s,y\n";
  Rng rng(31, "cellmeans");
  std::vector<double> mu = {10.0, 14.0, 23.0};
  for (int rep = 0; rep < 8; ++rep) {
    for (int g = 0; g < 3; ++g) {
      csv += std::string(1, char('a' + g)) + ",S" + std::to_string(rep) + "," +
             std::to_string(mu[static_cast<std::size_t>(g)] +
                            rng.normal(0, 0.5)) +
             "\n";
    }
  }
  ModelMatrices m = build(csv, "y ~ 1+g+(1|s)");
  Eigen::VectorXd beta = m.X.colPivHouseholderQr().solve(m.y);
  // Level means from the data.
  Dataset ds = read_csv_text(csv);
  const Column& g = ds.column("g");
  const Column& y = ds.column("y");
  std::vector<double> sum(3, 0.0);
  std::vector<int> cnt(3, 0);
  for (std::size_t i = 0; i < ds.n_rows(); ++i) {
    sum[static_cast<std::size_t>(g.codes[i])] += y.numeric[i];
    ++cnt[static_cast<std::size_t>(g.codes[i])];
  }
  CHECK(beta[0] == doctest::Approx(sum[0] / cnt[0]));
  CHECK(beta[0] + beta[1] == doctest::Approx(sum[1] / cnt[1]));
  CHECK(beta[0] + beta[2] == doctest::Approx(sum[2] / cnt[2]));
}

TEST_CASE("marginal hypothesis rows recover sum-coded coefficients") {
  ModelMatrices m = build(factorial_csv(),
                          "heart_rate ~ 1+condition*altitude+(1|subject)");
  CHECK(m.hypothesis_exact);
  // The stacked hypothesis rows (plus the mean row) form an invertible
  // reparameterization, so each term's hypothesis has full row rank.
  for (const FixedTermInfo& t : m.fixed_terms) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(t.hypothesis);
    CHECK(lu.rank() == t.len);
  }
  // For the balanced design, the condition hypothesis applied to the OLS
  // coefficients must reproduce the sum-coded condition effects.
  Eigen::VectorXd beta = m.X.colPivHouseholderQr().solve(m.y);
  ContrastScheme sum;
  sum.kind = ContrastKind::Sum;
  ModelMatrices ms = build(factorial_csv(),
                           "heart_rate ~ 1+condition*altitude+(1|subject)",
                           sum);
  Eigen::VectorXd beta_sum = ms.X.colPivHouseholderQr().solve(ms.y);
  const FixedTermInfo& cond = m.fixed_terms[0];
  Eigen::VectorXd h = cond.hypothesis * beta;
  CHECK((h - beta_sum.segment(cond.start, cond.len)).norm() ==
        doctest::Approx(0.0).epsilon(1e-8));
}

TEST_CASE("new data encodes against the stored level tables") {
  ModelMatrices m = build(kHeartRateCsv, "heart_rate ~ 1+condition+(1|subject)");
  Dataset nd = read_csv_text("subject,condition\ns3,ex\ns1,ctl\n");
  Eigen::MatrixXd X = encode_fixed_rows(m, nd);
  CHECK(X(0, 0) == 1.0);
  CHECK(X(0, 1) == 1.0);
  CHECK(X(1, 1) == 0.0);
  auto lev = encode_grouping_rows(m, 0, nd);
  CHECK(lev == std::vector<std::int32_t>{-1, 0});

  Dataset bad = read_csv_text("subject,condition\ns1,swimming\n");
  CHECK_THROWS_AS(encode_fixed_rows(m, bad), std::invalid_argument);
}

TEST_CASE("design dumps are parseable CSV of the right shape") {
  ModelMatrices m = build(kHeartRateCsv, "heart_rate ~ 1+condition+(1|subject)");
  Dataset x = read_csv_text(dump_x_csv(m));
  CHECK(x.n_rows() == 4);
  CHECK(x.n_cols() == 2);
  Dataset z = read_csv_text(dump_z_csv(m));
  CHECK(z.n_rows() == 4);
  CHECK(z.n_cols() == 2);
  CHECK(z.column(0).name == "subject=s1");
}
