// Command-line surface: xtab, lint, fit, anova, predict, simulate, compare.
// Results go to stdout or --output; diagnostics and errors go to stderr.
// Exit codes: 0 ok (including lint warnings), 1 usage, 2 lint failure or
// model error, 3 I/O.
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lmmkit/dataframe.hpp"
#include "lmmkit/design.hpp"
#include "lmmkit/estimate.hpp"
#include "lmmkit/formula.hpp"
#include "lmmkit/inference.hpp"
#include "lmmkit/simgen.hpp"
#include "lmmkit/structlint.hpp"

namespace {

using namespace lmmkit;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Dataset load_data(const std::string& path) {
  try {
    return read_csv(path);
  } catch (const std::exception& e) {
    throw IoError(std::string("cannot read '") + path + "': " + e.what());
  }
}

FormulaAst parse_model(const std::string& text) {
  try {
    return expand_terms(parse_formula(text));
  } catch (const std::exception& e) {
    throw UsageError(std::string("formula: ") + e.what());
  }
}

// --output resolves relative paths against LMMKIT_OUT_DIR when set; empty
// means stdout.
void emit(const std::string& text, const std::string& out_path) {
  std::string body = text;
  if (!body.empty() && body.back() != '\n') body += '\n';
  if (out_path.empty()) {
    std::cout << body;
    return;
  }
  std::string path = out_path;
  const char* dir = std::getenv("LMMKIT_OUT_DIR");
  if (dir && *dir && path.front() != '/')
    path = std::string(dir) + "/" + path;
  std::ofstream out(path);
  out << body;
  if (!out) throw IoError("cannot write '" + path + "'");
}

FitMethod parse_method(const std::string& s) {
  std::string low;
  for (char c : s)
    low += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (low == "reml") return FitMethod::REML;
  if (low == "ml") return FitMethod::ML;
  throw UsageError("--method must be reml or ml, got '" + s + "'");
}

ContrastScheme parse_contrasts(const std::string& kind,
                               const std::vector<std::string>& refs) {
  ContrastScheme scheme;
  if (kind == "treatment")
    scheme.kind = ContrastKind::Treatment;
  else if (kind == "sum")
    scheme.kind = ContrastKind::Sum;
  else
    throw UsageError("--contrasts must be treatment or sum, got '" + kind +
                     "'");
  for (const std::string& r : refs) {
    const std::size_t eq = r.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == r.size())
      throw UsageError("--ref needs factor=level, got '" + r + "'");
    scheme.reference[r.substr(0, eq)] = r.substr(eq + 1);
  }
  return scheme;
}

Centering parse_centering_one(const std::string& s) {
  if (s == "none") return Centering::None;
  if (s == "first") return Centering::AtFirstObservation;
  if (s == "mean") return Centering::AtMean;
  throw UsageError("centering must be none, first, or mean, got '" + s + "'");
}

CenteringPolicy parse_centering(const std::string& global,
                                const std::vector<std::string>& per_var) {
  CenteringPolicy policy;
  policy.default_policy = parse_centering_one(global);
  for (const std::string& v : per_var) {
    const std::size_t eq = v.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == v.size())
      throw UsageError("--center-var needs variable=policy, got '" + v + "'");
    policy.per_variable[v.substr(0, eq)] =
        parse_centering_one(v.substr(eq + 1));
  }
  return policy;
}

// Flags shared by the model-fitting subcommands, validated before any
// file access.
struct ModelFlags {
  std::string method = "reml";
  std::string contrasts = "treatment";
  std::vector<std::string> refs;
  std::string center = "none";
  std::vector<std::string> center_vars;

  void attach(CLI::App* cmd) {
    cmd->add_option("--method", method, "Estimation criterion: reml or ml");
    cmd->add_option("--contrasts", contrasts,
                    "Factor coding: treatment or sum");
    cmd->add_option("--ref", refs,
                    "Reference level override, factor=level (repeatable)");
    cmd->add_option("--center", center,
                    "Numeric centering: none, first, or mean");
    cmd->add_option("--center-var", center_vars,
                    "Per-variable centering, variable=policy (repeatable)");
  }

  struct Parsed {
    FitMethod method = FitMethod::REML;
    ContrastScheme contrasts;
    CenteringPolicy centering;
  };

  Parsed validate() const {
    return {parse_method(method), parse_contrasts(contrasts, refs),
            parse_centering(center, center_vars)};
  }
};

LmmFit fit_with(const ModelFlags::Parsed& p, const Dataset& ds,
                const FormulaAst& ast) {
  FitOptions o;
  o.method = p.method;
  return fit_lmm(build_matrices(ds, ast, p.contrasts, p.centering), o);
}

// The sampling unit for linting: --subject wins; otherwise the first
// single-factor random grouping.
std::string subject_of(const FormulaAst& ast, const std::string& flag) {
  if (!flag.empty()) return flag;
  for (const RandomTerm& rt : ast.random_terms)
    if (rt.grouping().factors.size() == 1) return rt.grouping().factors[0];
  return "";
}

// Candidate design factors: factor columns the formula references other
// than the subject.
std::vector<std::string> design_candidates(const Dataset& ds,
                                           const FormulaAst& ast,
                                           const std::string& subject) {
  std::vector<std::string> out;
  for (const std::string& name : referenced_columns(ast)) {
    if (name == subject || name == ast.response) continue;
    if (!ds.has_column(name))
      throw std::invalid_argument("column '" + name + "' is not in the data");
    if (ds.column(name).type == ColumnType::Factor) out.push_back(name);
  }
  return out;
}

LintReport run_lint(const Dataset& ds, const FormulaAst& ast,
                    const std::string& subject) {
  return lint_structure(
      ast, infer_design(ds, subject, design_candidates(ds, ast, subject)));
}

std::string relation_label(FactorRelation rel, const std::string& a,
                           const std::string& b) {
  switch (rel) {
    case FactorRelation::FullyCrossed: return "Fully crossed: " + a + " x " + b;
    case FactorRelation::NestedAinB: return "Nested: " + a + " within " + b;
    case FactorRelation::NestedBinA: return "Nested: " + b + " within " + a;
    case FactorRelation::PartiallyCrossed:
      return "Partially crossed: " + a + " x " + b;
  }
  return "?";
}

std::string format_xtab_text(const CrossTab& tab, const std::string& a,
                             const std::string& b) {
  std::size_t w = 1;
  for (const std::string& l : tab.row_levels) w = std::max(w, l.size());
  std::vector<std::size_t> cw(tab.col_levels.size());
  for (std::size_t j = 0; j < tab.col_levels.size(); ++j) {
    cw[j] = tab.col_levels[j].size();
    for (const auto& row : tab.counts)
      cw[j] = std::max(cw[j], std::to_string(row[j]).size());
  }
  std::string out(w, ' ');
  for (std::size_t j = 0; j < tab.col_levels.size(); ++j) {
    out += "  ";
    out.append(cw[j] - tab.col_levels[j].size(), ' ');
    out += tab.col_levels[j];
  }
  out += '\n';
  for (std::size_t i = 0; i < tab.row_levels.size(); ++i) {
    out += tab.row_levels[i];
    out.append(w - tab.row_levels[i].size(), ' ');
    for (std::size_t j = 0; j < tab.col_levels.size(); ++j) {
      const std::string c = std::to_string(tab.counts[i][j]);
      out += "  ";
      out.append(cw[j] - c.size(), ' ');
      out += c;
    }
    out += '\n';
  }
  out += relation_label(classify_relation(tab), a, b);
  return out;
}

std::string xtab_to_json(const CrossTab& tab, const std::string& a,
                         const std::string& b) {
  nlohmann::json j;
  j["rows"] = a;
  j["cols"] = b;
  j["row_levels"] = tab.row_levels;
  j["col_levels"] = tab.col_levels;
  j["counts"] = tab.counts;
  const FactorRelation rel = classify_relation(tab);
  j["relation"] = to_string(rel);
  j["label"] = relation_label(rel, a, b);
  return j.dump(2);
}

std::string dataset_to_json(const Dataset& ds) {
  nlohmann::json cols = nlohmann::json::array();
  for (std::size_t c = 0; c < ds.n_cols(); ++c) {
    const Column& col = ds.column(c);
    nlohmann::json jc;
    jc["name"] = col.name;
    jc["type"] = col.type == ColumnType::Factor ? "factor" : "numeric";
    nlohmann::json vals = nlohmann::json::array();
    for (std::size_t r = 0; r < ds.n_rows(); ++r) {
      if (col.is_missing(r))
        vals.push_back(nullptr);
      else if (col.type == ColumnType::Factor)
        vals.push_back(col.level_of(r));
      else
        vals.push_back(col.numeric[r]);
    }
    jc["values"] = std::move(vals);
    cols.push_back(std::move(jc));
  }
  nlohmann::json j;
  j["n_rows"] = ds.n_rows();
  j["columns"] = std::move(cols);
  return j.dump(2);
}

Dataset with_predictions(const Dataset& ds, const Eigen::VectorXd& fitted,
                         const Eigen::VectorXd& population) {
  std::vector<Column> cols;
  for (std::size_t c = 0; c < ds.n_cols(); ++c) cols.push_back(ds.column(c));
  Column f;
  f.name = "fitted";
  f.type = ColumnType::Numeric;
  Column p;
  p.name = "population";
  p.type = ColumnType::Numeric;
  for (std::size_t r = 0; r < ds.n_rows(); ++r) {
    f.numeric.push_back(fitted[static_cast<Eigen::Index>(r)]);
    p.numeric.push_back(population[static_cast<Eigen::Index>(r)]);
  }
  f.missing.assign(ds.n_rows(), false);
  p.missing.assign(ds.n_rows(), false);
  cols.push_back(std::move(f));
  cols.push_back(std::move(p));
  return Dataset(std::move(cols));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-model toolkit: design checks, fits, F-tests, and "
               "seeded simulation"};
  std::string data_path, formula_text, formula_alt, out_path;
  std::string subject_flag, config_path, family_flag, xa, xb;
  std::vector<std::string> sets;
  bool json = false, force = false;
  long long seed_flag = 0;

  CLI::App* xtab_cmd = app.add_subcommand(
      "xtab", "Cross-tabulate two factors and label their relation");
  xtab_cmd->add_option("data", data_path, "CSV file")->required();
  xtab_cmd->add_option("a", xa, "Row factor")->required();
  xtab_cmd->add_option("b", xb, "Column factor")->required();

  CLI::App* lint_cmd = app.add_subcommand(
      "lint", "Check a random-effects structure against the design");
  lint_cmd->add_option("data", data_path, "CSV file")->required();
  lint_cmd->add_option("formula", formula_text, "Model formula")->required();
  lint_cmd->add_option("--subject", subject_flag,
                       "Sampling-unit column (default: first random "
                       "grouping)");

  CLI::App* fit_cmd =
      app.add_subcommand("fit", "Fit a linear mixed model and summarize it");
  ModelFlags fit_flags;
  fit_cmd->add_option("data", data_path, "CSV file")->required();
  fit_cmd->add_option("formula", formula_text, "Model formula")->required();
  fit_flags.attach(fit_cmd);

  CLI::App* anova_cmd = app.add_subcommand(
      "anova", "F-tests of the fixed terms (lints the structure first)");
  ModelFlags anova_flags;
  anova_cmd->add_option("data", data_path, "CSV file")->required();
  anova_cmd->add_option("formula", formula_text, "Model formula")->required();
  anova_cmd->add_option("--subject", subject_flag,
                        "Sampling-unit column (default: first random "
                        "grouping)");
  anova_cmd->add_flag("--force", force,
                      "Fit even when the structure fails the linter");
  anova_flags.attach(anova_cmd);

  CLI::App* predict_cmd = app.add_subcommand(
      "predict",
      "Fitted values as CSV: input columns plus fitted and population");
  ModelFlags predict_flags;
  predict_cmd->add_option("data", data_path, "CSV file")->required();
  predict_cmd->add_option("formula", formula_text, "Model formula")
      ->required();
  predict_flags.attach(predict_cmd);

  CLI::App* simulate_cmd =
      app.add_subcommand("simulate", "Generate a seeded synthetic dataset");
  simulate_cmd->add_option("--config", config_path,
                           "key = value settings file");
  simulate_cmd->add_option("--family", family_flag,
                           "longitudinal, factorial, or crossed");
  simulate_cmd->add_option("--set", sets,
                           "Override one setting, key=value (repeatable)");
  simulate_cmd->add_option("--seed", seed_flag, "Random seed");

  CLI::App* compare_cmd = app.add_subcommand(
      "compare", "Likelihood-ratio test of two nested models");
  ModelFlags compare_flags;
  compare_cmd->add_option("data", data_path, "CSV file")->required();
  compare_cmd->add_option("null", formula_text, "Smaller model")->required();
  compare_cmd->add_option("alt", formula_alt, "Larger model")->required();
  compare_flags.attach(compare_cmd);

  for (CLI::App* cmd : {xtab_cmd, lint_cmd, fit_cmd, anova_cmd, predict_cmd,
                        simulate_cmd, compare_cmd}) {
    cmd->add_flag("--json", json, "Emit JSON instead of text");
    cmd->add_option("--output", out_path,
                    "Write the result here instead of stdout (relative "
                    "paths resolve against LMMKIT_OUT_DIR)");
  }
  app.require_subcommand(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "lmmkit: " << e.what() << "\n";
    return 1;
  }

  try {
    if (xtab_cmd->parsed()) {
      const Dataset ds = load_data(data_path);
      const CrossTab tab = cross_tabulate(ds, xa, xb);
      emit(json ? xtab_to_json(tab, xa, xb) : format_xtab_text(tab, xa, xb),
           out_path);
      return 0;
    }

    if (lint_cmd->parsed()) {
      const FormulaAst ast = parse_model(formula_text);
      const std::string subject = subject_of(ast, subject_flag);
      if (subject.empty())
        throw UsageError(
            "lint needs a sampling unit: pass --subject or give the "
            "formula a random grouping");
      const Dataset ds = load_data(data_path);
      const LintReport report = run_lint(ds, ast, subject);
      emit(json ? lint_to_json(report) : format_lint_text(report), out_path);
      return report.verdict == LintVerdict::Fail ? 2 : 0;
    }

    if (fit_cmd->parsed()) {
      const FormulaAst ast = parse_model(formula_text);
      const ModelFlags::Parsed p = fit_flags.validate();
      const Dataset ds = load_data(data_path);
      const LmmFit f = fit_with(p, ds, ast);
      emit(json ? fit_to_json(f) : summarize_fit(f), out_path);
      return 0;
    }

    if (anova_cmd->parsed()) {
      const FormulaAst ast = parse_model(formula_text);
      const ModelFlags::Parsed p = anova_flags.validate();
      const Dataset ds = load_data(data_path);
      // Misspecification gate: refuse to test fixed effects through a
      // structure the linter rejects, or with no random structure at all.
      const std::string subject = subject_of(ast, subject_flag);
      if (subject.empty()) {
        if (!force) {
          std::cerr << "lmmkit: no random-effect structure to lint; pass "
                       "--subject to lint against a sampling unit, or "
                       "--force to fit anyway\n";
          return 2;
        }
      } else {
        const LintReport report = run_lint(ds, ast, subject);
        if (!report.findings.empty()) std::cerr << format_lint_text(report);
        if (report.verdict == LintVerdict::Fail && !force) {
          std::cerr << "lmmkit: the random-effects structure fails the "
                       "linter; use --force to fit anyway\n";
          return 2;
        }
      }
      const LmmFit f = fit_with(p, ds, ast);
      const AnovaTable table = anova_satterthwaite(f);
      emit(json ? anova_to_json(table) : format_anova_text(table), out_path);
      return 0;
    }

    if (predict_cmd->parsed()) {
      const FormulaAst ast = parse_model(formula_text);
      const ModelFlags::Parsed p = predict_flags.validate();
      const Dataset ds = load_data(data_path);
      const LmmFit f = fit_with(p, ds, ast);
      const Dataset out = with_predictions(ds, predict(f, ds, true),
                                           predict(f, ds, false));
      emit(json ? dataset_to_json(out) : write_csv_text(out), out_path);
      return 0;
    }

    if (simulate_cmd->parsed()) {
      std::map<std::string, std::string> settings;
      if (!config_path.empty()) {
        try {
          settings = read_sim_settings(config_path);
        } catch (const std::invalid_argument& e) {
          throw UsageError(e.what());
        } catch (const std::exception& e) {
          throw IoError(e.what());
        }
      }
      for (const std::string& s : sets) {
        const std::size_t eq = s.find('=');
        if (eq == std::string::npos || eq == 0)
          throw UsageError("--set needs key=value, got '" + s + "'");
        settings[s.substr(0, eq)] = s.substr(eq + 1);
      }
      if (!family_flag.empty()) settings["family"] = family_flag;
      if (simulate_cmd->count("--seed"))
        settings["seed"] = std::to_string(seed_flag);
      Dataset ds;
      try {
        ds = simulate(parse_sim_config(settings));
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      emit(json ? dataset_to_json(ds) : write_csv_text(ds), out_path);
      return 0;
    }

    if (compare_cmd->parsed()) {
      const FormulaAst ast_null = parse_model(formula_text);
      const FormulaAst ast_alt = parse_model(formula_alt);
      const ModelFlags::Parsed p = compare_flags.validate();
      const Dataset ds = load_data(data_path);
      const LmmFit null_fit = fit_with(p, ds, ast_null);
      const LmmFit alt_fit = fit_with(p, ds, ast_alt);
      const LrtResult r = compare_models(null_fit, alt_fit);
      emit(json ? lrt_to_json(r) : format_lrt_text(r), out_path);
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "lmmkit: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "lmmkit: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "lmmkit: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
