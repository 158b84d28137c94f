#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lmmkit/dataframe.hpp"
#include "lmmkit/formula.hpp"

namespace lmmkit {

enum class FactorRole { Within, Between };

enum class LintSeverity { Error, Warning, Info };

enum class LintCode {
  MissingRandomIntercept,
  UnderSpecified,
  MisSpecified,
  OverSpecified,
  SparseGroups,
  AmbiguousNesting,
  ReplicatesUnused,
};

enum class LintVerdict { Pass, PassWithWarnings, Fail };

const char* to_string(FactorRole r);
const char* to_string(LintSeverity s);
const char* to_string(LintCode c);
const char* to_string(LintVerdict v);

// One candidate factor classified against the subject column.
struct FactorStatus {
  std::string name;
  FactorRole role = FactorRole::Within;
  int n_levels = 0;
  // Stimulus-like pools of sampled units (many levels). They are excluded
  // from the replicate cell and are modeled with their own intercept
  // rather than per-subject terms.
  bool sampling = false;
};

struct FactorPairRelation {
  std::string a;
  std::string b;
  FactorRelation relation = FactorRelation::FullyCrossed;
};

// User-asserted nesting (inner lives inside outer), checked against the
// observed coding.
struct NestingAssertion {
  std::string inner;
  std::string outer;
};

struct DesignDeclaration {
  std::string subject;
  int n_subjects = 0;
  std::vector<FactorStatus> factors;
  // Max observations per subject-by-cell, the cell being the combination
  // of all within non-sampling factors.
  int replicates = 1;
  // Observed relations for every candidate pair and each candidate
  // against the subject.
  std::vector<FactorPairRelation> relations;
  std::vector<NestingAssertion> asserted_nested;  // caller-supplied
  std::size_t n_obs = 0;
  // Borderline classifications worth surfacing (partial crossing).
  std::vector<std::string> notes;

  const FactorStatus* factor(const std::string& name) const;
};

// Classifies each candidate factor as within- or between-subjects from the
// observed incidence (within when at least 90% of subjects appear at 2+
// levels, tolerating dropout), counts replicates, and records pairwise
// relations. Throws on non-factor columns, a constant candidate, or a
// subject with fewer than 2 levels.
DesignDeclaration infer_design(const Dataset& ds, const std::string& subject,
                               const std::vector<std::string>& candidates);

struct LintFinding {
  LintSeverity severity = LintSeverity::Warning;
  LintCode code = LintCode::UnderSpecified;
  std::vector<std::string> columns;  // never empty
  std::string message;
  std::string suggestion;  // formula fragment, possibly empty
};

struct LintReport {
  std::vector<LintFinding> findings;  // errors first
  std::string recommended;
  LintVerdict verdict = LintVerdict::Pass;
};

// Applies the structural rules to an expanded formula against the declared
// design. Purely structural: never touches data or fits anything. The
// verdict is Fail iff an Error-level finding is present; warnings alone
// give PassWithWarnings.
LintReport lint_structure(const FormulaAst& ast,
                          const DesignDeclaration& design);

// Random-effects structure the design itself supports: per-subject
// intercept, plus a per-subject-by-factor intercept for each within factor
// at one observation per cell (adding pairwise cells from 3 within factors
// up), or random slopes once replicates support them, plus an intercept
// per sampled-unit pool.
std::string recommend_structure(const DesignDeclaration& design);

std::string format_lint_text(const LintReport& report);
std::string lint_to_json(const LintReport& report);

}  // namespace lmmkit
