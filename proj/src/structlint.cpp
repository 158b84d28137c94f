#include "lmmkit/structlint.hpp"

#include <json.hpp>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace lmmkit {

const char* to_string(FactorRole r) {
  return r == FactorRole::Within ? "Within" : "Between";
}

const char* to_string(LintSeverity s) {
  switch (s) {
    case LintSeverity::Error: return "Error";
    case LintSeverity::Warning: return "Warning";
    default: return "Info";
  }
}

const char* to_string(LintCode c) {
  switch (c) {
    case LintCode::MissingRandomIntercept: return "MissingRandomIntercept";
    case LintCode::UnderSpecified: return "UnderSpecified";
    case LintCode::MisSpecified: return "MisSpecified";
    case LintCode::OverSpecified: return "OverSpecified";
    case LintCode::SparseGroups: return "SparseGroups";
    case LintCode::AmbiguousNesting: return "AmbiguousNesting";
    default: return "ReplicatesUnused";
  }
}

const char* to_string(LintVerdict v) {
  switch (v) {
    case LintVerdict::Pass: return "Pass";
    case LintVerdict::PassWithWarnings: return "PassWithWarnings";
    default: return "Fail";
  }
}

const FactorStatus* DesignDeclaration::factor(const std::string& name) const {
  for (const FactorStatus& f : factors) {
    if (f.name == name) return &f;
  }
  return nullptr;
}

namespace {

// A factor with this many levels or fewer is an experimental manipulation;
// above it, a pool of sampled units (stimuli, words) for which per-subject
// cells and slopes make no sense.
const int kSamplingLevelCutoff = 10;

const double kWithinFraction = 0.9;

}  // namespace

DesignDeclaration infer_design(const Dataset& ds, const std::string& subject,
                               const std::vector<std::string>& candidates) {
  const Column& subj = ds.column(subject);
  if (subj.type != ColumnType::Factor) {
    throw std::invalid_argument("subject column '" + subject +
                                "' must be a factor");
  }
  const int nsubj = static_cast<int>(subj.levels.size());
  if (nsubj < 2) {
    throw std::invalid_argument("subject column '" + subject +
                                "' needs at least 2 levels");
  }

  DesignDeclaration d;
  d.subject = subject;
  d.n_subjects = nsubj;
  d.n_obs = ds.n_rows();

  for (const std::string& name : candidates) {
    const Column& c = ds.column(name);
    if (c.type != ColumnType::Factor) {
      throw std::invalid_argument("candidate factor '" + name +
                                  "' must be a factor");
    }
    if (c.levels.size() < 2) {
      throw std::invalid_argument("factor '" + name +
                                  "' is constant across all rows");
    }
    // Distinct levels seen per subject.
    std::vector<std::set<int>> seen(static_cast<std::size_t>(nsubj));
    for (std::size_t r = 0; r < ds.n_rows(); ++r) {
      if (subj.missing[r] || c.missing[r]) continue;
      seen[static_cast<std::size_t>(subj.codes[r])].insert(c.codes[r]);
    }
    int multi = 0, present = 0;
    for (const std::set<int>& s : seen) {
      if (s.empty()) continue;
      ++present;
      if (s.size() >= 2) ++multi;
    }
    const double frac = present > 0 ? double(multi) / double(present) : 0.0;
    FactorStatus fs;
    fs.name = name;
    fs.n_levels = static_cast<int>(c.levels.size());
    fs.role = frac >= kWithinFraction ? FactorRole::Within : FactorRole::Between;
    fs.sampling =
        fs.role == FactorRole::Within && fs.n_levels > kSamplingLevelCutoff;
    if (frac > 0.0 && frac < 1.0) {
      std::ostringstream note;
      note << "factor '" << name << "' varies within " << multi << " of "
           << present << " subjects; classified "
           << to_string(fs.role) << "-subjects";
      d.notes.push_back(note.str());
    }
    d.factors.push_back(fs);
  }

  // Replicates: observations per subject within one cell of the within
  // (non-sampling) factors.
  std::vector<const Column*> cellcols;
  std::vector<int> dims;
  for (const FactorStatus& f : d.factors) {
    if (f.role == FactorRole::Within && !f.sampling) {
      cellcols.push_back(&ds.column(f.name));
      dims.push_back(f.n_levels);
    }
  }
  std::map<long long, int> counts;
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    if (subj.missing[r]) continue;
    long long key = subj.codes[r];
    bool ok = true;
    for (std::size_t i = 0; i < cellcols.size(); ++i) {
      if (cellcols[i]->missing[r]) {
        ok = false;
        break;
      }
      key = key * dims[i] + cellcols[i]->codes[r];
    }
    if (ok) counts[key]++;
  }
  d.replicates = 1;
  for (const auto& kv : counts) d.replicates = std::max(d.replicates, kv.second);

  for (std::size_t i = 0; i < candidates.size(); ++i) {
    d.relations.push_back(
        {subject, candidates[i], classify_relation(ds, subject, candidates[i])});
    for (std::size_t j = i + 1; j < candidates.size(); ++j) {
      d.relations.push_back({candidates[i], candidates[j],
                             classify_relation(ds, candidates[i],
                                               candidates[j])});
    }
  }
  return d;
}

namespace {

int severity_rank(LintSeverity s) {
  switch (s) {
    case LintSeverity::Error: return 0;
    case LintSeverity::Warning: return 1;
    default: return 2;
  }
}

std::string random_term_label(const RandomTerm& rt) {
  std::string inner = rt.intercept ? "1" : "0";
  for (const FixedTerm& t : rt.inner_terms) inner += " + " + term_label(t);
  return "(" + inner + (rt.correlated ? " | " : " || ") +
         grouping_label(rt.grouping()) + ")";
}

}  // namespace

LintReport lint_structure(const FormulaAst& ast,
                          const DesignDeclaration& design) {
  if (!ast.expanded) {
    throw std::invalid_argument("lint: formula must be expanded first");
  }
  auto known = [&](const std::string& name) {
    return name == design.subject || design.factor(name) != nullptr;
  };
  auto levels_of = [&](const std::string& name) -> long long {
    if (name == design.subject) return design.n_subjects;
    const FactorStatus* f = design.factor(name);
    return f ? f->n_levels : 0;
  };
  for (const RandomTerm& rt : ast.random_terms) {
    for (const std::string& g : rt.grouping().factors) {
      if (!known(g)) {
        throw std::invalid_argument("lint: grouping factor '" + g +
                                    "' is not part of the declared design");
      }
    }
  }

  auto grouping_levels = [&](const Grouping& g) {
    long long l = 1;
    for (const std::string& f : g.factors) l *= levels_of(f);
    return l;
  };
  // Coefficient columns a random term asks for per group level, counting
  // factor contrasts the way the design matrix builder does.
  auto term_cols = [&](const FixedTerm& t, bool full_first) {
    long long k = 1;
    bool first = true;
    for (const VarRef& v : t.factors) {
      const FactorStatus* f = design.factor(v.name);
      if (f == nullptr && v.name == design.subject) {
        k *= design.n_subjects;  // degenerate but countable
        continue;
      }
      if (f == nullptr) continue;  // numeric covariate: one column
      k *= (full_first && first) ? f->n_levels : f->n_levels - 1;
      first = false;
    }
    return k;
  };
  auto k_of = [&](const RandomTerm& rt) {
    long long k = rt.intercept ? 1 : 0;
    bool expand_full = !rt.intercept;
    for (const FixedTerm& t : rt.inner_terms) {
      const bool is_factor_main =
          t.order() == 1 && design.factor(t.factors[0].name) != nullptr;
      k += term_cols(t, expand_full && is_factor_main);
      if (is_factor_main) expand_full = false;
    }
    return k;
  };

  const bool has_subject_intercept_group = [&] {
    for (const RandomTerm& rt : ast.random_terms) {
      if (rt.grouping().factors ==
          std::vector<std::string>{design.subject}) {
        return true;
      }
    }
    return false;
  }();
  auto has_subject_slope = [&](const std::string& f) {
    for (const RandomTerm& rt : ast.random_terms) {
      if (rt.grouping().factors != std::vector<std::string>{design.subject}) {
        continue;
      }
      for (const FixedTerm& t : rt.inner_terms) {
        for (const VarRef& v : t.factors) {
          if (v.name == f) return true;
        }
      }
    }
    return false;
  };
  auto has_subject_cell = [&](const std::string& f) {
    for (const RandomTerm& rt : ast.random_terms) {
      const std::vector<std::string>& g = rt.grouping().factors;
      const bool has_s =
          std::find(g.begin(), g.end(), design.subject) != g.end();
      const bool has_f = std::find(g.begin(), g.end(), f) != g.end();
      if (has_s && has_f) return true;
    }
    return false;
  };

  LintReport report;
  auto add = [&](LintSeverity sev, LintCode code,
                 std::vector<std::string> cols, std::string msg,
                 std::string sugg) {
    report.findings.push_back(
        {sev, code, std::move(cols), std::move(msg), std::move(sugg)});
  };

  // No per-subject intercept: repeated observations of the same subject
  // are treated as independent.
  if (!has_subject_intercept_group) {
    add(LintSeverity::Error, LintCode::MissingRandomIntercept,
        {design.subject},
        "no random term is grouped by '" + design.subject +
            "'; repeated observations of one " + design.subject +
            " would be treated as independent",
        "(1|" + design.subject + ")");
  }

  // A within factor repeats inside each subject; without a per-subject
  // term for it, its F test pools that dependency into the residual.
  for (const FactorStatus& f : design.factors) {
    if (f.role != FactorRole::Within || f.sampling) continue;
    if (has_subject_slope(f.name) || has_subject_cell(f.name)) continue;
    add(LintSeverity::Warning, LintCode::UnderSpecified,
        {f.name, design.subject},
        "within-subjects factor '" + f.name +
            "' has repeated observations per " + design.subject +
            " but no per-" + design.subject +
            " term; its F test will borrow denominator degrees of freedom "
            "from every repeat",
        "(1|" + design.subject + ":" + f.name + ")");
  }

  // A bare intercept per level of a within factor models its levels as
  // sampled units, but the factor is only crossed with the response
  // within each subject.
  std::set<std::string> misspec_seen;
  for (const RandomTerm& rt : ast.random_terms) {
    const std::vector<std::string>& g = rt.grouping().factors;
    if (g.size() != 1) continue;
    const FactorStatus* f = design.factor(g[0]);
    if (f == nullptr || f->role != FactorRole::Within || f->sampling) continue;
    if (!misspec_seen.insert(f->name).second) continue;
    add(LintSeverity::Warning, LintCode::MisSpecified, {f->name},
        "'(1|" + f->name + ")' models the levels of '" + f->name +
            "' as sampled units, but '" + f->name +
            "' is only crossed with the response within each " +
            design.subject + "; the dependency it should capture is per-" +
            design.subject,
        "(1|" + design.subject + ":" + f->name + ")");
  }

  // More coefficients than observations in one term cannot be identified.
  for (const RandomTerm& rt : ast.random_terms) {
    const long long k = k_of(rt);
    const long long l = grouping_levels(rt.grouping());
    if (k * l >= static_cast<long long>(design.n_obs)) {
      std::vector<std::string> cols = rt.grouping().factors;
      std::ostringstream msg;
      msg << "random term " << random_term_label(rt) << " asks for " << k
          << " x " << l << " = " << k * l << " coefficients from "
          << design.n_obs
          << " observations; the model is probably unidentifiable";
      add(LintSeverity::Error, LintCode::OverSpecified, std::move(cols),
          msg.str(),
          "drop the interaction slopes or collect replicate observations "
          "per cell");
    }
  }

  // Too few draws to estimate a variance from.
  std::set<std::string> sparse_seen;
  for (const RandomTerm& rt : ast.random_terms) {
    const long long l = grouping_levels(rt.grouping());
    if (l >= 5) continue;
    const std::string label = grouping_label(rt.grouping());
    if (!sparse_seen.insert(label).second) continue;
    std::ostringstream msg;
    msg << "grouping '" << label << "' has only " << l
        << " levels; a variance estimated from " << l
        << " draws is unstable";
    add(LintSeverity::Warning, LintCode::SparseGroups,
        rt.grouping().factors, msg.str(),
        "consider modeling '" + label + "' as a fixed effect instead");
  }

  // Asserted nesting contradicted by the coding: reused labels make
  // nested factors look crossed.
  for (const NestingAssertion& na : design.asserted_nested) {
    FactorRelation rel = FactorRelation::FullyCrossed;
    bool found = false;
    for (const FactorPairRelation& pr : design.relations) {
      if ((pr.a == na.inner && pr.b == na.outer) ||
          (pr.a == na.outer && pr.b == na.inner)) {
        rel = pr.relation;
        found = true;
        break;
      }
    }
    if (!found || rel != FactorRelation::FullyCrossed) continue;
    add(LintSeverity::Warning, LintCode::AmbiguousNesting,
        {na.inner, na.outer},
        "'" + na.inner + "' is declared nested in '" + na.outer +
            "' but the coding is fully crossed; reused level labels make "
            "nested factors look crossed",
        "(1|" + na.outer + "/" + na.inner + ")");
  }

  // Replicates per cell would support a slope that the structure ignores.
  if (design.replicates > 1) {
    for (const FactorStatus& f : design.factors) {
      if (f.role != FactorRole::Within || f.sampling) continue;
      if (has_subject_slope(f.name)) continue;
      std::ostringstream msg;
      msg << "with " << design.replicates << " observations per "
          << design.subject << "-by-cell, a random slope on '" << f.name
          << "' is estimable but absent";
      add(LintSeverity::Info, LintCode::ReplicatesUnused, {f.name},
          msg.str(), "(1+" + f.name + "|" + design.subject + ")");
    }
  }

  std::stable_sort(report.findings.begin(), report.findings.end(),
                   [](const LintFinding& a, const LintFinding& b) {
                     return severity_rank(a.severity) <
                            severity_rank(b.severity);
                   });
  bool any_error = false, any_warning = false;
  for (const LintFinding& f : report.findings) {
    any_error |= f.severity == LintSeverity::Error;
    any_warning |= f.severity == LintSeverity::Warning;
  }
  report.verdict = any_error ? LintVerdict::Fail
                   : any_warning ? LintVerdict::PassWithWarnings
                                 : LintVerdict::Pass;
  report.recommended = recommend_structure(design);
  return report;
}

std::string recommend_structure(const DesignDeclaration& design) {
  std::vector<std::string> within;
  std::vector<std::string> pools;
  for (const FactorStatus& f : design.factors) {
    if (f.role != FactorRole::Within) continue;
    (f.sampling ? pools : within).push_back(f.name);
  }
  std::ostringstream out;
  if (design.replicates > 1 && !within.empty()) {
    out << "(1";
    for (const std::string& w : within) out << "+" << w;
    out << "|" << design.subject << ")";
  } else {
    out << "(1|" << design.subject << ")";
    for (const std::string& w : within) {
      out << " + (1|" << design.subject << ":" << w << ")";
    }
    if (within.size() >= 3) {
      for (std::size_t i = 0; i < within.size(); ++i) {
        for (std::size_t j = i + 1; j < within.size(); ++j) {
          out << " + (1|" << design.subject << ":" << within[i] << ":"
              << within[j] << ")";
        }
      }
    }
  }
  for (const std::string& p : pools) out << " + (1|" << p << ")";
  return out.str();
}

std::string format_lint_text(const LintReport& report) {
  std::ostringstream out;
  switch (report.verdict) {
    case LintVerdict::Pass: out << "lint: PASS\n"; break;
    case LintVerdict::PassWithWarnings:
      out << "lint: PASS (with warnings)\n";
      break;
    default: out << "lint: FAIL\n"; break;
  }
  for (const LintFinding& f : report.findings) {
    out << "  [" << to_string(f.severity) << "] " << to_string(f.code)
        << " (";
    for (std::size_t i = 0; i < f.columns.size(); ++i) {
      out << (i ? ", " : "") << f.columns[i];
    }
    out << "): " << f.message << "\n";
    if (!f.suggestion.empty()) {
      out << "      suggestion: " << f.suggestion << "\n";
    }
  }
  out << "recommended: " << report.recommended << "\n";
  return out.str();
}

std::string lint_to_json(const LintReport& report) {
  nlohmann::json j;
  j["verdict"] = to_string(report.verdict);
  j["recommended"] = report.recommended;
  nlohmann::json arr = nlohmann::json::array();
  for (const LintFinding& f : report.findings) {
    arr.push_back({{"severity", to_string(f.severity)},
                   {"code", to_string(f.code)},
                   {"columns", f.columns},
                   {"message", f.message},
                   {"suggestion", f.suggestion}});
  }
  j["findings"] = arr;
  return j.dump(2);
}

}  // namespace lmmkit
