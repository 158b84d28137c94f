#pragma once

#include <string>
#include <vector>

namespace lmmkit {

// One variable reference, optionally raised to an integer power via the
// I(x^k) wrapper. power == 1 means the bare column.
struct VarRef {
  std::string name;
  int power = 1;

  friend bool operator==(const VarRef&, const VarRef&) = default;
};

// An interaction of one or more variables (a main effect when order 1).
// Factor order is kept for labeling; equality is set equality.
struct FixedTerm {
  std::vector<VarRef> factors;

  int order() const { return static_cast<int>(factors.size()); }
};

bool same_term(const FixedTerm& a, const FixedTerm& b);

// Product-expression tree for one addend of a formula, with the shorthand
// operators still intact: a*b (cross), a:b (interaction), a/b (nesting).
struct TermExpr {
  enum class Op { Var, Colon, Star, Slash };
  Op op = Op::Var;
  VarRef var;                   // op == Var
  std::vector<TermExpr> kids;   // op != Var, size >= 2
};

// Grouping factor of a random term: one factor or a `:` concatenation.
struct Grouping {
  std::vector<std::string> factors;

  friend bool operator==(const Grouping&, const Grouping&) = default;
};

// (inner | grouping) or (inner || grouping). Before expansion the grouping
// may be a slash chain g1/g2/... and inner_exprs may hold shorthand; after
// expansion slash_chain has length 1 and inner_terms is canonical.
struct RandomTerm {
  bool intercept = true;
  std::vector<TermExpr> inner_exprs;
  std::vector<FixedTerm> inner_terms;
  std::vector<Grouping> slash_chain;
  bool correlated = true;

  const Grouping& grouping() const { return slash_chain.front(); }
};

struct FormulaAst {
  std::string response;
  bool log_response = false;
  bool intercept = true;
  std::vector<TermExpr> fixed_exprs;
  std::vector<FixedTerm> fixed_terms;   // filled by expand_terms
  std::vector<RandomTerm> random_terms;
  bool expanded = false;
};

bool operator==(const FixedTerm& a, const FixedTerm& b);
bool operator==(const TermExpr& a, const TermExpr& b);
bool operator==(const RandomTerm& a, const RandomTerm& b);
bool operator==(const FormulaAst& a, const FormulaAst& b);

// Parses formula text of the form "response ~ terms". Shorthand operators
// are preserved in the AST for expand_terms. Throws std::invalid_argument
// with a character position on malformed input.
FormulaAst parse_formula(const std::string& text);

// Rewrites shorthand into the canonical term list: a*b -> a + b + a:b,
// a/b -> a + a:b, (1|g1/g2) -> (1|g1) + (1|g1:g2). Duplicates are dropped
// keeping the first position, then terms are stably ordered so every
// interaction follows its constituent main effects. Idempotent.
FormulaAst expand_terms(const FormulaAst& ast);

// Canonical text form; parsing it reproduces the AST.
std::string print_formula(const FormulaAst& ast);

std::string var_label(const VarRef& v);
std::string term_label(const FixedTerm& t);
std::string grouping_label(const Grouping& g);

// Every distinct column name the formula references (response, fixed,
// random inner, grouping), in first-appearance order.
std::vector<std::string> referenced_columns(const FormulaAst& ast);

}  // namespace lmmkit
