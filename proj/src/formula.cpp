#include "lmmkit/formula.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace lmmkit {

namespace {

enum class Tok { Ident, Num, Tilde, Plus, Minus, Star, Colon, Slash, Bar,
                 DblBar, LParen, RParen, Caret, End };

struct Token {
  Tok kind;
  std::string text;
  std::size_t pos;
};

class Lexer {
public:
  explicit Lexer(const std::string& s) : s_(s) { advance(); }

  const Token& peek() const { return cur_; }
  Token take() {
    Token t = cur_;
    advance();
    return t;
  }

private:
  const std::string& s_;
  std::size_t i_ = 0;
  Token cur_;

  static bool ident_start(char c) {
    return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '.';
  }
  static bool ident_char(char c) {
    return ident_start(c) || std::isdigit(static_cast<unsigned char>(c));
  }

  void advance() {
    while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) {
      ++i_;
    }
    const std::size_t pos = i_;
    if (i_ >= s_.size()) {
      cur_ = {Tok::End, "", pos};
      return;
    }
    const char c = s_[i_];
    auto one = [&](Tok k) {
      ++i_;
      cur_ = {k, std::string(1, c), pos};
    };
    switch (c) {
      case '~': one(Tok::Tilde); return;
      case '+': one(Tok::Plus); return;
      case '-': one(Tok::Minus); return;
      case '*': one(Tok::Star); return;
      case ':': one(Tok::Colon); return;
      case '/': one(Tok::Slash); return;
      case '^': one(Tok::Caret); return;
      case '(': one(Tok::LParen); return;
      case ')': one(Tok::RParen); return;
      case '|':
        if (i_ + 1 < s_.size() && s_[i_ + 1] == '|') {
          i_ += 2;
          cur_ = {Tok::DblBar, "||", pos};
        } else {
          ++i_;
          cur_ = {Tok::Bar, "|", pos};
        }
        return;
      default: break;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      std::size_t j = i_;
      while (j < s_.size() &&
             std::isdigit(static_cast<unsigned char>(s_[j]))) {
        ++j;
      }
      cur_ = {Tok::Num, s_.substr(i_, j - i_), pos};
      i_ = j;
      return;
    }
    if (ident_start(c)) {
      std::size_t j = i_;
      while (j < s_.size() && ident_char(s_[j])) ++j;
      cur_ = {Tok::Ident, s_.substr(i_, j - i_), pos};
      i_ = j;
      return;
    }
    throw std::invalid_argument("formula: unexpected character '" +
                                std::string(1, c) + "' at position " +
                                std::to_string(pos));
  }
};

[[noreturn]] void fail(const Token& t, const std::string& what) {
  throw std::invalid_argument("formula: " + what + " at position " +
                              std::to_string(t.pos));
}

class Parser {
public:
  explicit Parser(const std::string& text) : lex_(text) {}

  FormulaAst parse() {
    FormulaAst ast;
    parse_response(ast);
    if (lex_.peek().kind != Tok::Tilde) fail(lex_.peek(), "expected '~'");
    lex_.take();
    parse_rhs(ast);
    if (lex_.peek().kind == Tok::Tilde) {
      fail(lex_.peek(), "a formula has exactly one '~'");
    }
    if (lex_.peek().kind != Tok::End) {
      fail(lex_.peek(), "unexpected trailing input");
    }
    return ast;
  }

private:
  Lexer lex_;

  Token expect(Tok k, const std::string& what) {
    if (lex_.peek().kind != k) fail(lex_.peek(), "expected " + what);
    return lex_.take();
  }

  void parse_response(FormulaAst& ast) {
    Token t = lex_.peek();
    if (t.kind != Tok::Ident) fail(t, "expected a response variable");
    lex_.take();
    if (t.text == "log" && lex_.peek().kind == Tok::LParen) {
      lex_.take();
      Token name = expect(Tok::Ident, "a column name inside log(...)");
      expect(Tok::RParen, "')'");
      ast.response = name.text;
      ast.log_response = true;
    } else {
      ast.response = t.text;
    }
  }

  void parse_rhs(FormulaAst& ast) {
    if (lex_.peek().kind == Tok::End) fail(lex_.peek(), "empty right-hand side");
    bool first = true;
    while (true) {
      if (!first) {
        Tok k = lex_.peek().kind;
        if (k == Tok::End) break;
        if (k == Tok::Bar || k == Tok::DblBar) {
          fail(lex_.peek(),
               "'|' is only valid inside a parenthesized random-effects term");
        }
        if (k == Tok::Plus) {
          lex_.take();
        } else if (k == Tok::Minus) {
          lex_.take();
          Token n = expect(Tok::Num, "'1' after '-'");
          if (n.text != "1") fail(n, "only '- 1' may follow '-'");
          ast.intercept = false;
          continue;
        } else {
          fail(lex_.peek(), "expected '+'");
        }
      }
      first = false;
      parse_addend(ast);
    }
  }

  void parse_addend(FormulaAst& ast) {
    const Token& t = lex_.peek();
    if (t.kind == Tok::Num) {
      Token n = lex_.take();
      if (n.text == "1") {
        ast.intercept = ast.intercept && true;
      } else if (n.text == "0") {
        ast.intercept = false;
      } else {
        fail(n, "only the literals 0 and 1 are allowed as terms");
      }
      const Tok k = lex_.peek().kind;
      if (k == Tok::Star || k == Tok::Colon || k == Tok::Slash) {
        fail(lex_.peek(), "numeric literal cannot take part in a product");
      }
      return;
    }
    if (t.kind == Tok::LParen) {
      ast.random_terms.push_back(parse_random_term());
      const Tok k = lex_.peek().kind;
      if (k == Tok::Star || k == Tok::Colon || k == Tok::Slash) {
        fail(lex_.peek(), "a random-effects term cannot take part in a product");
      }
      return;
    }
    ast.fixed_exprs.push_back(parse_product());
  }

  RandomTerm parse_random_term() {
    expect(Tok::LParen, "'('");
    RandomTerm rt;
    bool first = true;
    while (true) {
      Tok k = lex_.peek().kind;
      if (!first) {
        if (k == Tok::Bar || k == Tok::DblBar) break;
        if (k == Tok::Plus) {
          lex_.take();
        } else if (k == Tok::Minus) {
          lex_.take();
          Token n = expect(Tok::Num, "'1' after '-'");
          if (n.text != "1") fail(n, "only '- 1' may follow '-'");
          rt.intercept = false;
          continue;
        } else if (k == Tok::RParen) {
          fail(lex_.peek(),
               "parenthesized term without a grouping '|'; fixed-effect "
               "grouping parentheses are not supported");
        } else {
          fail(lex_.peek(), "expected '+', '|', or '||'");
        }
      }
      first = false;
      const Token& t = lex_.peek();
      if (t.kind == Tok::Num) {
        Token n = lex_.take();
        if (n.text == "1") {
          // explicit intercept, already the default
        } else if (n.text == "0") {
          rt.intercept = false;
        } else {
          fail(n, "only the literals 0 and 1 are allowed as terms");
        }
        continue;
      }
      rt.inner_exprs.push_back(parse_product());
    }
    const bool correlated = lex_.peek().kind == Tok::Bar;
    lex_.take();
    rt.correlated = correlated;
    rt.slash_chain = parse_grouping();
    expect(Tok::RParen, "')' to close the random-effects term");
    return rt;
  }

  // grouping := colon_group ('/' colon_group)*, names only.
  std::vector<Grouping> parse_grouping() {
    std::vector<Grouping> chain;
    while (true) {
      Grouping g;
      while (true) {
        const Token& t = lex_.peek();
        if (t.kind != Tok::Ident) {
          fail(t, "expected a grouping factor name");
        }
        Token name = lex_.take();
        if (lex_.peek().kind == Tok::LParen) {
          fail(lex_.peek(), "grouping must be plain factor names");
        }
        g.factors.push_back(name.text);
        if (lex_.peek().kind == Tok::Colon) {
          lex_.take();
          continue;
        }
        break;
      }
      chain.push_back(std::move(g));
      if (lex_.peek().kind == Tok::Slash) {
        lex_.take();
        continue;
      }
      break;
    }
    return chain;
  }

  // product := interaction ('*' interaction)*
  TermExpr parse_product() {
    TermExpr e = parse_interaction();
    if (lex_.peek().kind != Tok::Star) return e;
    TermExpr out;
    out.op = TermExpr::Op::Star;
    out.kids.push_back(std::move(e));
    while (lex_.peek().kind == Tok::Star) {
      lex_.take();
      out.kids.push_back(parse_interaction());
    }
    return out;
  }

  // interaction := nesting (':' nesting)*
  TermExpr parse_interaction() {
    TermExpr e = parse_nesting();
    if (lex_.peek().kind != Tok::Colon) return e;
    TermExpr out;
    out.op = TermExpr::Op::Colon;
    out.kids.push_back(std::move(e));
    while (lex_.peek().kind == Tok::Colon) {
      lex_.take();
      out.kids.push_back(parse_nesting());
    }
    return out;
  }

  // nesting := atom ('/' atom)*
  TermExpr parse_nesting() {
    TermExpr e = parse_atom();
    if (lex_.peek().kind != Tok::Slash) return e;
    TermExpr out;
    out.op = TermExpr::Op::Slash;
    out.kids.push_back(std::move(e));
    while (lex_.peek().kind == Tok::Slash) {
      lex_.take();
      out.kids.push_back(parse_atom());
    }
    return out;
  }

  TermExpr parse_atom() {
    const Token& t = lex_.peek();
    if (t.kind == Tok::Num) {
      fail(t, "numeric literal cannot take part in a product");
    }
    if (t.kind != Tok::Ident) fail(t, "expected a variable name");
    Token name = lex_.take();
    if (lex_.peek().kind == Tok::LParen) {
      if (name.text == "I") return parse_power();
      if (name.text == "log") {
        fail(name, "log(...) is only supported on the response");
      }
      fail(name, "unknown function '" + name.text +
                     "': only log and I are supported");
    }
    TermExpr e;
    e.op = TermExpr::Op::Var;
    e.var = {name.text, 1};
    return e;
  }

  // I(x^k) with k a positive integer.
  TermExpr parse_power() {
    expect(Tok::LParen, "'('");
    Token name = expect(Tok::Ident, "a column name inside I(...)");
    expect(Tok::Caret, "'^' inside I(...)");
    Token num = expect(Tok::Num, "an integer exponent");
    const int k = std::stoi(num.text);
    if (k < 1) fail(num, "power exponent must be a positive integer");
    expect(Tok::RParen, "')'");
    TermExpr e;
    e.op = TermExpr::Op::Var;
    e.var = {name.text, k};
    return e;
  }
};

// -- term algebra ------------------------------------------------------------

// Interaction of two terms: concatenated factors, duplicates dropped.
FixedTerm merge(const FixedTerm& a, const FixedTerm& b) {
  FixedTerm out = a;
  for (const VarRef& v : b.factors) {
    if (std::find(out.factors.begin(), out.factors.end(), v) ==
        out.factors.end()) {
      out.factors.push_back(v);
    }
  }
  return out;
}

std::vector<FixedTerm> cross(const std::vector<FixedTerm>& a,
                             const std::vector<FixedTerm>& b) {
  std::vector<FixedTerm> out;
  for (const auto& x : a) {
    for (const auto& y : b) out.push_back(merge(x, y));
  }
  return out;
}

std::vector<FixedTerm> expand_expr(const TermExpr& e) {
  switch (e.op) {
    case TermExpr::Op::Var: {
      FixedTerm t;
      t.factors.push_back(e.var);
      return {t};
    }
    case TermExpr::Op::Colon: {
      std::vector<FixedTerm> acc = expand_expr(e.kids[0]);
      for (std::size_t i = 1; i < e.kids.size(); ++i) {
        acc = cross(acc, expand_expr(e.kids[i]));
      }
      return acc;
    }
    case TermExpr::Op::Star: {
      // a*b = a + b + a:b, folded left to cover all non-empty subsets.
      std::vector<FixedTerm> acc = expand_expr(e.kids[0]);
      for (std::size_t i = 1; i < e.kids.size(); ++i) {
        std::vector<FixedTerm> rhs = expand_expr(e.kids[i]);
        std::vector<FixedTerm> prod = cross(acc, rhs);
        acc.insert(acc.end(), rhs.begin(), rhs.end());
        acc.insert(acc.end(), prod.begin(), prod.end());
      }
      return acc;
    }
    case TermExpr::Op::Slash: {
      // a/b = a + a:b; folded so each level nests in everything before it.
      std::vector<FixedTerm> acc = expand_expr(e.kids[0]);
      std::vector<FixedTerm> ctx = acc;
      for (std::size_t i = 1; i < e.kids.size(); ++i) {
        ctx = cross(ctx, expand_expr(e.kids[i]));
        acc.insert(acc.end(), ctx.begin(), ctx.end());
      }
      return acc;
    }
  }
  return {};
}

// Dedup keeping first position, then stable order by interaction order so
// interactions follow their constituent main effects.
std::vector<FixedTerm> canonicalize(std::vector<FixedTerm> terms) {
  std::vector<FixedTerm> uniq;
  for (auto& t : terms) {
    bool dup = false;
    for (const auto& u : uniq) {
      if (same_term(u, t)) { dup = true; break; }
    }
    if (!dup) uniq.push_back(std::move(t));
  }
  std::stable_sort(uniq.begin(), uniq.end(),
                   [](const FixedTerm& a, const FixedTerm& b) {
                     return a.order() < b.order();
                   });
  return uniq;
}

TermExpr to_expr(const FixedTerm& t) {
  if (t.factors.size() == 1) {
    TermExpr e;
    e.op = TermExpr::Op::Var;
    e.var = t.factors[0];
    return e;
  }
  TermExpr e;
  e.op = TermExpr::Op::Colon;
  for (const VarRef& v : t.factors) {
    TermExpr k;
    k.op = TermExpr::Op::Var;
    k.var = v;
    e.kids.push_back(std::move(k));
  }
  return e;
}

std::string expr_label(const TermExpr& e) {
  if (e.op == TermExpr::Op::Var) return var_label(e.var);
  const char* sep = e.op == TermExpr::Op::Star   ? "*"
                    : e.op == TermExpr::Op::Colon ? ":"
                                                  : "/";
  std::string out;
  for (std::size_t i = 0; i < e.kids.size(); ++i) {
    if (i) out += sep;
    out += expr_label(e.kids[i]);
  }
  return out;
}

}  // namespace

bool same_term(const FixedTerm& a, const FixedTerm& b) {
  if (a.factors.size() != b.factors.size()) return false;
  for (const VarRef& v : a.factors) {
    if (std::find(b.factors.begin(), b.factors.end(), v) == b.factors.end()) {
      return false;
    }
  }
  return true;
}

bool operator==(const FixedTerm& a, const FixedTerm& b) {
  return a.factors == b.factors;
}

bool operator==(const TermExpr& a, const TermExpr& b) {
  return a.op == b.op && a.var == b.var && a.kids == b.kids;
}

bool operator==(const RandomTerm& a, const RandomTerm& b) {
  return a.intercept == b.intercept && a.inner_exprs == b.inner_exprs &&
         a.inner_terms == b.inner_terms && a.slash_chain == b.slash_chain &&
         a.correlated == b.correlated;
}

bool operator==(const FormulaAst& a, const FormulaAst& b) {
  return a.response == b.response && a.log_response == b.log_response &&
         a.intercept == b.intercept && a.fixed_exprs == b.fixed_exprs &&
         a.fixed_terms == b.fixed_terms && a.random_terms == b.random_terms &&
         a.expanded == b.expanded;
}

FormulaAst parse_formula(const std::string& text) {
  if (text.empty()) throw std::invalid_argument("formula: empty input");
  return Parser(text).parse();
}

FormulaAst expand_terms(const FormulaAst& ast) {
  FormulaAst out;
  out.response = ast.response;
  out.log_response = ast.log_response;
  out.intercept = ast.intercept;

  std::vector<FixedTerm> terms;
  if (ast.expanded) {
    terms = ast.fixed_terms;
  } else {
    for (const TermExpr& e : ast.fixed_exprs) {
      auto ex = expand_expr(e);
      terms.insert(terms.end(), ex.begin(), ex.end());
    }
  }
  out.fixed_terms = canonicalize(std::move(terms));
  out.fixed_exprs.reserve(out.fixed_terms.size());
  for (const FixedTerm& t : out.fixed_terms) {
    out.fixed_exprs.push_back(to_expr(t));
  }

  for (const RandomTerm& rt : ast.random_terms) {
    std::vector<FixedTerm> inner;
    if (ast.expanded) {
      inner = rt.inner_terms;
    } else {
      for (const TermExpr& e : rt.inner_exprs) {
        auto ex = expand_expr(e);
        inner.insert(inner.end(), ex.begin(), ex.end());
      }
    }
    inner = canonicalize(std::move(inner));

    // A slash chain g1/g2/g3 nests: one term per accumulated grouping.
    Grouping acc;
    for (const Grouping& g : rt.slash_chain) {
      acc.factors.insert(acc.factors.end(), g.factors.begin(),
                         g.factors.end());
      RandomTerm t;
      t.intercept = rt.intercept;
      t.inner_terms = inner;
      t.inner_exprs.reserve(inner.size());
      for (const FixedTerm& ft : inner) t.inner_exprs.push_back(to_expr(ft));
      t.slash_chain = {acc};
      t.correlated = rt.correlated;
      bool dup = false;
      for (const RandomTerm& u : out.random_terms) {
        if (u == t) { dup = true; break; }
      }
      if (!dup) out.random_terms.push_back(std::move(t));
    }
  }
  out.expanded = true;
  return out;
}

std::string var_label(const VarRef& v) {
  if (v.power == 1) return v.name;
  return "I(" + v.name + "^" + std::to_string(v.power) + ")";
}

std::string term_label(const FixedTerm& t) {
  std::string out;
  for (std::size_t i = 0; i < t.factors.size(); ++i) {
    if (i) out += ":";
    out += var_label(t.factors[i]);
  }
  return out;
}

std::string grouping_label(const Grouping& g) {
  std::string out;
  for (std::size_t i = 0; i < g.factors.size(); ++i) {
    if (i) out += ":";
    out += g.factors[i];
  }
  return out;
}

std::string print_formula(const FormulaAst& ast) {
  std::string out = ast.log_response ? "log(" + ast.response + ")"
                                     : ast.response;
  out += " ~ ";
  out += ast.intercept ? "1" : "0";
  for (const TermExpr& e : ast.fixed_exprs) {
    out += " + " + expr_label(e);
  }
  for (const RandomTerm& rt : ast.random_terms) {
    out += " + (";
    out += rt.intercept ? "1" : "0";
    for (const TermExpr& e : rt.inner_exprs) {
      out += " + " + expr_label(e);
    }
    out += rt.correlated ? " | " : " || ";
    for (std::size_t i = 0; i < rt.slash_chain.size(); ++i) {
      if (i) out += "/";
      out += grouping_label(rt.slash_chain[i]);
    }
    out += ")";
  }
  return out;
}

namespace {

void collect_expr(const TermExpr& e, std::vector<std::string>& out) {
  auto add = [&out](const std::string& n) {
    if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
  };
  if (e.op == TermExpr::Op::Var) {
    add(e.var.name);
    return;
  }
  for (const TermExpr& k : e.kids) collect_expr(k, out);
}

}  // namespace

std::vector<std::string> referenced_columns(const FormulaAst& ast) {
  std::vector<std::string> out;
  out.push_back(ast.response);
  auto add = [&out](const std::string& n) {
    if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
  };
  for (const TermExpr& e : ast.fixed_exprs) collect_expr(e, out);
  for (const FixedTerm& t : ast.fixed_terms) {
    for (const VarRef& v : t.factors) add(v.name);
  }
  for (const RandomTerm& rt : ast.random_terms) {
    for (const TermExpr& e : rt.inner_exprs) collect_expr(e, out);
    for (const FixedTerm& t : rt.inner_terms) {
      for (const VarRef& v : t.factors) add(v.name);
    }
    for (const Grouping& g : rt.slash_chain) {
      for (const std::string& f : g.factors) add(f);
    }
  }
  return out;
}

}  // namespace lmmkit
