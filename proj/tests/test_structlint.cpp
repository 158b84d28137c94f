#include <doctest.h>

#include <json.hpp>

#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

#include "lmmkit/dataframe.hpp"
#include "lmmkit/design.hpp"
#include "lmmkit/estimate.hpp"
#include "lmmkit/formula.hpp"
#include "lmmkit/structlint.hpp"

using namespace lmmkit;

namespace {

// Structure checks never read the response, so a row counter works as y.
Dataset factorial_csv(int reps) {
  std::ostringstream csv;
  csv << "subject,altitude,condition,y\n";
  int row = 0;
  for (int s = 0; s < 10; ++s) {
    for (int a = 0; a < 2; ++a) {
      for (int c = 0; c < 3; ++c) {
        for (int r = 0; r < reps; ++r) {
          csv << "s0" << s << ",alt" << a << ",cond" << c << "," << row++
              << "\n";
        }
      }
    }
  }
  return read_csv_text(csv.str());
}

// Subjects crossed with a pool of stimuli; modality varies within subject
// with ten stimuli per subject-by-modality cell.
Dataset crossed_csv() {
  std::ostringstream csv;
  csv << "subject,stimulus,modality,rt\n";
  int row = 0;
  for (int s = 0; s < 6; ++s) {
    for (int k = 0; k < 20; ++k) {
      const int m = (s + k) % 2;
      csv << "s" << s << ",stim" << (k < 10 ? "0" : "") << k << ",mod" << m
          << "," << row++ << "\n";
    }
  }
  return read_csv_text(csv.str());
}

DesignDeclaration factorial_design(int reps = 1) {
  return infer_design(factorial_csv(reps), "subject",
                      {"altitude", "condition"});
}

LintReport lint_of(const DesignDeclaration& d, const std::string& formula) {
  return lint_structure(expand_terms(parse_formula(formula)), d);
}

int count_code(const LintReport& r, LintCode c) {
  int n = 0;
  for (const LintFinding& f : r.findings) n += f.code == c ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("design inference: balanced within factorial") {
  DesignDeclaration d = factorial_design();
  CHECK(d.subject == "subject");
  CHECK(d.n_subjects == 10);
  CHECK(d.n_obs == 60);
  CHECK(d.replicates == 1);
  REQUIRE(d.factors.size() == 2);
  CHECK(d.factors[0].name == "altitude");
  CHECK(d.factors[0].role == FactorRole::Within);
  CHECK(d.factors[0].n_levels == 2);
  CHECK_FALSE(d.factors[0].sampling);
  CHECK(d.factors[1].role == FactorRole::Within);
  CHECK(d.factors[1].n_levels == 3);
  CHECK(d.notes.empty());
  REQUIRE(d.relations.size() == 3);
  for (const FactorPairRelation& r : d.relations) {
    CHECK(r.relation == FactorRelation::FullyCrossed);
  }
  CHECK(factorial_design(2).replicates == 2);
}

TEST_CASE("design inference: between factors, dropout, and sampled pools") {
  // One group level per subject is between-subjects.
  Dataset between = read_csv_text(
      "subj,grp,y\n"
      "s1,a,1\ns1,a,2\ns2,b,3\ns2,b,4\ns3,a,5\ns3,a,6\n");
  DesignDeclaration d = infer_design(between, "subj", {"grp"});
  CHECK(d.factors[0].role == FactorRole::Between);
  CHECK(d.notes.empty());

  // 9 of 10 subjects at 2+ levels stays within (tolerated dropout) but is
  // noted; 5 of 10 flips to between.
  auto partial = [](int multi) {
    std::ostringstream csv;
    csv << "subj,f,y\n";
    for (int s = 0; s < 10; ++s) {
      csv << "p" << s << ",l0," << s << "\n";
      csv << "p" << s << "," << (s < multi ? "l1" : "l0") << "," << s << "\n";
    }
    return read_csv_text(csv.str());
  };
  DesignDeclaration d9 = infer_design(partial(9), "subj", {"f"});
  CHECK(d9.factors[0].role == FactorRole::Within);
  REQUIRE(d9.notes.size() == 1);
  CHECK(d9.notes[0].find("9 of 10") != std::string::npos);
  DesignDeclaration d5 = infer_design(partial(5), "subj", {"f"});
  CHECK(d5.factors[0].role == FactorRole::Between);
  CHECK(d5.notes.size() == 1);

  // Crossed pool: stimulus is a within sampling factor, and modality keeps
  // real replicates at the subject-by-modality cell.
  DesignDeclaration dc =
      infer_design(crossed_csv(), "subject", {"modality", "stimulus"});
  CHECK(dc.factors[0].role == FactorRole::Within);
  CHECK_FALSE(dc.factors[0].sampling);
  CHECK(dc.factors[1].role == FactorRole::Within);
  CHECK(dc.factors[1].sampling);
  CHECK(dc.factors[1].n_levels == 20);
  CHECK(dc.replicates == 10);
}

TEST_CASE("design inference rejects unusable inputs") {
  Dataset ds = read_csv_text(
      "subj,f,y\n"
      "s1,a,1\ns1,a,2\ns2,a,3\ns2,a,4\n");
  CHECK_THROWS_WITH_AS(infer_design(ds, "subj", {"f"}),
                       doctest::Contains("constant"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(infer_design(ds, "subj", {"y"}),
                       doctest::Contains("must be a factor"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(infer_design(ds, "y", {"f"}),
                       doctest::Contains("must be a factor"),
                       std::invalid_argument);
  Dataset one = read_csv_text("subj,f,y\ns1,a,1\ns1,b,2\n");
  CHECK_THROWS_WITH_AS(infer_design(one, "subj", {"f"}),
                       doctest::Contains("at least 2"), std::invalid_argument);
}

TEST_CASE("lint: intercepts-only structure warns for each within factor") {
  LintReport r = lint_of(factorial_design(),
                         "y ~ 1 + condition*altitude + (1|subject)");
  CHECK(r.verdict == LintVerdict::PassWithWarnings);
  REQUIRE(r.findings.size() == 2);
  CHECK(count_code(r, LintCode::UnderSpecified) == 2);
  for (const LintFinding& f : r.findings) {
    CHECK(f.severity == LintSeverity::Warning);
    CHECK_FALSE(f.columns.empty());
    CHECK_FALSE(f.suggestion.empty());
  }
  CHECK(r.findings[0].columns[0] == "altitude");
  CHECK(r.findings[1].columns[0] == "condition");
  CHECK(r.findings[1].suggestion == "(1|subject:condition)");
}

TEST_CASE("lint: global intercepts on within factors are mis-specified") {
  LintReport r = lint_of(factorial_design(),
                         "y ~ 1 + condition*altitude + (1|subject) + "
                         "(1|condition) + (1|altitude)");
  CHECK(r.verdict == LintVerdict::PassWithWarnings);
  CHECK(count_code(r, LintCode::UnderSpecified) == 2);
  CHECK(count_code(r, LintCode::MisSpecified) == 2);
  CHECK(count_code(r, LintCode::SparseGroups) == 2);
  CHECK(r.findings.size() == 6);
  bool quoted = false;
  for (const LintFinding& f : r.findings) {
    if (f.code == LintCode::MisSpecified &&
        f.message.find("only crossed") != std::string::npos) {
      quoted = true;
    }
  }
  CHECK(quoted);
}

TEST_CASE("lint: per-subject cell intercepts and full slopes are clean") {
  DesignDeclaration d = factorial_design();
  LintReport c = lint_of(d,
                         "y ~ 1 + condition*altitude + (1|subject) + "
                         "(1|subject:condition) + (1|subject:altitude)");
  CHECK(c.verdict == LintVerdict::Pass);
  CHECK(c.findings.empty());
  LintReport slopes = lint_of(
      d, "y ~ 1 + condition*altitude + (1+condition+altitude|subject)");
  CHECK(slopes.verdict == LintVerdict::Pass);
  CHECK(slopes.findings.empty());
}

TEST_CASE("lint: saturated slopes are flagged exactly when the fitter "
          "refuses them") {
  Dataset ds = factorial_csv(1);
  DesignDeclaration d = infer_design(ds, "subject", {"altitude", "condition"});
  const std::string f =
      "y ~ 1 + condition*altitude + (condition*altitude|subject)";
  LintReport r = lint_of(d, f);
  CHECK(r.verdict == LintVerdict::Fail);
  REQUIRE(r.findings.size() == 1);
  CHECK(r.findings[0].severity == LintSeverity::Error);
  CHECK(r.findings[0].code == LintCode::OverSpecified);
  CHECK(r.findings[0].message.find("probably unidentifiable") !=
        std::string::npos);
  CHECK(r.findings[0].message.find("60") != std::string::npos);
  CHECK_THROWS_WITH_AS(
      fit_lmm(build_matrices(ds, expand_terms(parse_formula(f)))),
      doctest::Contains("probably unidentifiable"), std::invalid_argument);

  // With replicates the same structure passes lint and fits.
  Dataset ds2 = factorial_csv(2);
  DesignDeclaration d2 =
      infer_design(ds2, "subject", {"altitude", "condition"});
  LintReport r2 = lint_of(d2, f);
  CHECK(r2.verdict == LintVerdict::Pass);
  CHECK(r2.findings.empty());
}

TEST_CASE("lint: missing subject intercept is fatal") {
  LintReport r =
      lint_of(factorial_design(), "y ~ 1 + condition + (1|condition)");
  CHECK(r.verdict == LintVerdict::Fail);
  CHECK(count_code(r, LintCode::MissingRandomIntercept) == 1);
  CHECK(r.findings[0].severity == LintSeverity::Error);  // errors first
  CHECK(r.findings[0].columns == std::vector<std::string>{"subject"});
  CHECK(r.findings[0].suggestion == "(1|subject)");
}

TEST_CASE("lint: reused level labels asserted as nested warn as ambiguous") {
  // Student labels repeat across classrooms, so the coding looks crossed.
  std::ostringstream csv;
  csv << "student,classroom,score\n";
  for (int c = 0; c < 2; ++c) {
    for (int k = 0; k < 15; ++k) {
      csv << "k" << k << ",c" << c << "," << (c * 15 + k) << "\n";
    }
  }
  DesignDeclaration d =
      infer_design(read_csv_text(csv.str()), "student", {"classroom"});
  d.asserted_nested.push_back({"student", "classroom"});
  LintReport r = lint_of(d, "score ~ 1 + (1|student)");
  CHECK(count_code(r, LintCode::AmbiguousNesting) == 1);
  for (const LintFinding& f : r.findings) {
    if (f.code != LintCode::AmbiguousNesting) continue;
    CHECK(f.suggestion == "(1|classroom/student)");
    CHECK(f.message.find("crossed") != std::string::npos);
  }
  // A truly nested coding stays quiet.
  std::ostringstream csv2;
  csv2 << "student,classroom,score\n";
  for (int c = 0; c < 2; ++c) {
    for (int k = 0; k < 15; ++k) {
      csv2 << "c" << c << "k" << k << ",c" << c << "," << k << "\n";
    }
  }
  Dataset nested = read_csv_text(csv2.str());
  DesignDeclaration dn = infer_design(nested, "student", {"classroom"});
  CHECK(dn.factors[0].role == FactorRole::Between);
  dn.asserted_nested.push_back({"student", "classroom"});
  LintReport rn = lint_of(dn, "score ~ 1 + (1|student)");
  CHECK(count_code(rn, LintCode::AmbiguousNesting) == 0);
}

TEST_CASE("lint: unused replicates are an info-level nudge") {
  DesignDeclaration dc =
      infer_design(crossed_csv(), "subject", {"modality", "stimulus"});
  LintReport plain = lint_of(
      dc, "rt ~ 1 + modality + (1|subject) + (1|stimulus)");
  CHECK(count_code(plain, LintCode::ReplicatesUnused) == 1);
  CHECK(count_code(plain, LintCode::UnderSpecified) == 1);
  // The sampled pool never asks for per-subject terms, and its own
  // intercept is not mis-specified.
  CHECK(count_code(plain, LintCode::MisSpecified) == 0);
  CHECK(plain.verdict == LintVerdict::PassWithWarnings);

  LintReport sloped = lint_of(
      dc, "rt ~ 1 + modality + (1+modality|subject) + (1|stimulus)");
  CHECK(sloped.findings.empty());
  CHECK(sloped.verdict == LintVerdict::Pass);

  // Info alone never demotes the verdict.
  DesignDeclaration d2 = factorial_design(2);
  LintReport c2 = lint_of(d2,
                          "y ~ 1 + condition*altitude + (1|subject) + "
                          "(1|subject:condition) + (1|subject:altitude)");
  CHECK(c2.verdict == LintVerdict::Pass);
  CHECK(count_code(c2, LintCode::ReplicatesUnused) == 2);
}

TEST_CASE("recommended structures match the design and lint clean") {
  DesignDeclaration d = factorial_design();
  CHECK(recommend_structure(d) ==
        "(1|subject) + (1|subject:altitude) + (1|subject:condition)");
  DesignDeclaration d2 = factorial_design(2);
  CHECK(recommend_structure(d2) == "(1+altitude+condition|subject)");
  DesignDeclaration dc =
      infer_design(crossed_csv(), "subject", {"modality", "stimulus"});
  CHECK(recommend_structure(dc) == "(1+modality|subject) + (1|stimulus)");

  Dataset between = read_csv_text(
      "subj,grp,y\n"
      "s1,a,1\ns1,a,2\ns2,b,3\ns2,b,4\ns3,a,5\ns3,a,6\n");
  DesignDeclaration db = infer_design(between, "subj", {"grp"});
  CHECK(recommend_structure(db) == "(1|subj)");

  // Three within factors add pairwise cells.
  std::ostringstream csv;
  csv << "s,w1,w2,w3,y\n";
  for (int s = 0; s < 12; ++s) {
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        for (int k = 0; k < 2; ++k) {
          csv << "s" << s << ",u" << i << ",v" << j << ",w" << k << ",0\n";
        }
      }
    }
  }
  Dataset three = read_csv_text(csv.str());
  DesignDeclaration d3 = infer_design(three, "s", {"w1", "w2", "w3"});
  const std::string rec3 = recommend_structure(d3);
  CHECK(rec3.find("(1|s:w1:w2)") != std::string::npos);
  CHECK(rec3.find("(1|s:w1:w3)") != std::string::npos);
  CHECK(rec3.find("(1|s:w2:w3)") != std::string::npos);

  // Every recommendation lints clean on its own design.
  LintReport r1 = lint_of(d, "y ~ 1 + condition*altitude + " +
                                 recommend_structure(d));
  CHECK(r1.findings.empty());
  LintReport r2 = lint_of(d2, "y ~ 1 + condition*altitude + " +
                                  recommend_structure(d2));
  CHECK(r2.findings.empty());
  LintReport rc = lint_of(dc, "rt ~ 1 + modality + " +
                                  recommend_structure(dc));
  CHECK(rc.findings.empty());
  LintReport r3 = lint_of(d3, "y ~ 1 + w1*w2*w3 + " + rec3);
  CHECK(r3.findings.empty());
}

TEST_CASE("lint reports render as text and JSON") {
  DesignDeclaration d = factorial_design();
  LintReport r = lint_of(
      d, "y ~ 1 + condition*altitude + (condition*altitude|subject)");
  const std::string text = format_lint_text(r);
  CHECK(text.find("lint: FAIL") != std::string::npos);
  CHECK(text.find("[Error] OverSpecified") != std::string::npos);
  CHECK(text.find("suggestion:") != std::string::npos);
  CHECK(text.find("recommended: (1|subject)") != std::string::npos);

  nlohmann::json j = nlohmann::json::parse(lint_to_json(r));
  CHECK(j["verdict"] == "Fail");
  REQUIRE(j["findings"].size() == 1);
  CHECK(j["findings"][0]["severity"] == "Error");
  CHECK(j["findings"][0]["code"] == "OverSpecified");
  CHECK(j["findings"][0]["columns"][0] == "subject");
  CHECK(j["findings"][0]["message"].get<std::string>().find(
            "unidentifiable") != std::string::npos);
  CHECK(j["recommended"] ==
        "(1|subject) + (1|subject:altitude) + (1|subject:condition)");

  LintReport pass = lint_of(d,
                            "y ~ 1 + condition*altitude + (1|subject) + "
                            "(1|subject:condition) + (1|subject:altitude)");
  CHECK(format_lint_text(pass).find("lint: PASS") != std::string::npos);
  CHECK(nlohmann::json::parse(lint_to_json(pass))["verdict"] == "Pass");
}

TEST_CASE("lint rejects groupings outside the declared design") {
  DesignDeclaration d = factorial_design();
  CHECK_THROWS_WITH_AS(lint_of(d, "y ~ 1 + (1|site)"),
                       doctest::Contains("not part of the declared design"),
                       std::invalid_argument);
}
