#include "pasm/expr.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <sstream>

namespace pasm {

int op_arity(Op op) {
  switch (op) {
    case Op::Var:
    case Op::Const:
      return 0;
    case Op::Exp:
    case Op::Log:
    case Op::Sin:
    case Op::Cos:
    case Op::Sqrt:
      return 1;
    default:
      return 2;
  }
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Var: return "var";
    case Op::Const: return "const";
    case Op::Add: return "+";
    case Op::Sub: return "-";
    case Op::Mul: return "*";
    case Op::Div: return "/";
    case Op::Pow: return "^";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Sqrt: return "sqrt";
  }
  return "?";
}

void EvalGuards::validate() const {
  if (!(eps_shift > 0.0) || !(pow_exp_clamp > 0.0) || !(denom_floor > 0.0) ||
      !(magnitude_clip >= 1.0)) {
    throw ExprError("invalid evaluation guards", 0);
  }
}

Expression::Expression(std::vector<ExprNode> prefix_nodes) : nodes_(std::move(prefix_nodes)) {
  if (nodes_.empty()) throw ExprError("empty expression", 0);
  if (node_count() > kMaxNodes) {
    throw ExprError("expression exceeds the 40-node cap", 0);
  }
  // Arity check over the prefix encoding: exactly one tree, no dangling slots.
  int need = 1;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (need <= 0) throw ExprError("malformed expression tree", i);
    need += op_arity(nodes_[i].op) - 1;
  }
  if (need != 0) throw ExprError("malformed expression tree", nodes_.size());

  subtree_sizes_.assign(nodes_.size(), 1);
  std::vector<int> sizes;
  sizes.reserve(nodes_.size());
  for (int i = node_count() - 1; i >= 0; --i) {
    int size = 1;
    for (int a = 0; a < op_arity(nodes_[static_cast<std::size_t>(i)].op); ++a) {
      size += sizes.back();
      sizes.pop_back();
    }
    subtree_sizes_[static_cast<std::size_t>(i)] = size;
    sizes.push_back(size);
  }

  slot_count_ = 0;
  max_var_index_ = -1;
  for (auto& node : nodes_) {
    if (node.op == Op::Const) {
      node.index = slot_count_++;
    } else if (node.op == Op::Var) {
      if (node.index < 0) throw ExprError("negative variable index", 0);
      max_var_index_ = std::max(max_var_index_, static_cast<int>(node.index));
    }
  }
}

std::vector<double> Expression::slot_defaults() const {
  std::vector<double> theta(static_cast<std::size_t>(slot_count_));
  for (const auto& node : nodes_) {
    if (node.op == Op::Const) theta[static_cast<std::size_t>(node.index)] = node.value;
  }
  return theta;
}

Expression Expression::with_slot_defaults(std::span<const double> theta) const {
  if (static_cast<int>(theta.size()) != slot_count_) {
    throw ExprError("slot count mismatch", 0);
  }
  std::vector<ExprNode> updated = nodes_;
  for (auto& node : updated) {
    if (node.op == Op::Const) node.value = theta[static_cast<std::size_t>(node.index)];
  }
  return Expression(std::move(updated));
}

bool Expression::structurally_equal(const Expression& other) const {
  if (nodes_.size() != other.nodes_.size()) return false;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& a = nodes_[i];
    const auto& b = other.nodes_[i];
    if (a.op != b.op || a.index != b.index) return false;
    if (a.op == Op::Const && a.value != b.value) return false;
  }
  return true;
}

int complexity(const Expression& e) { return e.node_count(); }
int constant_slots(const Expression& e) { return e.constant_slots(); }

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace {

enum class TokKind { Number, Ident, Plus, Minus, Star, Slash, Caret, LParen, RParen, End };

struct Token {
  TokKind kind;
  std::size_t pos;
  double number = 0.0;
  std::string ident;
};

std::vector<Token> tokenize(const std::string& text) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) ||
        (c == '.' && i + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[i + 1])))) {
      const char* begin = text.c_str() + i;
      char* end = nullptr;
      double value = std::strtod(begin, &end);
      if (end == begin || !std::isfinite(value)) {
        throw ExprError("invalid numeric literal", i);
      }
      out.push_back({TokKind::Number, i, value, {}});
      i += static_cast<std::size_t>(end - begin);
      continue;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t start = i;
      while (i < text.size() &&
             (std::isalnum(static_cast<unsigned char>(text[i])) || text[i] == '_')) {
        ++i;
      }
      out.push_back({TokKind::Ident, start, 0.0, text.substr(start, i - start)});
      continue;
    }
    TokKind kind;
    switch (c) {
      case '+': kind = TokKind::Plus; break;
      case '-': kind = TokKind::Minus; break;
      case '*': kind = TokKind::Star; break;
      case '/': kind = TokKind::Slash; break;
      case '^': kind = TokKind::Caret; break;
      case '(': kind = TokKind::LParen; break;
      case ')': kind = TokKind::RParen; break;
      default:
        throw ExprError(std::string("unexpected character '") + c + "'", i);
    }
    out.push_back({kind, i, 0.0, {}});
    ++i;
  }
  out.push_back({TokKind::End, text.size(), 0.0, {}});
  return out;
}

bool unary_op_from_name(const std::string& name, Op* op) {
  if (name == "exp") *op = Op::Exp;
  else if (name == "log") *op = Op::Log;
  else if (name == "sin") *op = Op::Sin;
  else if (name == "cos") *op = Op::Cos;
  else if (name == "sqrt") *op = Op::Sqrt;
  else return false;
  return true;
}

class Parser {
 public:
  Parser(std::vector<Token> tokens, const std::vector<std::string>& features)
      : tokens_(std::move(tokens)), features_(features) {}

  Expression run() {
    std::vector<ExprNode> nodes;
    parse_sum(nodes);
    if (peek().kind != TokKind::End) {
      throw ExprError("unexpected trailing input", peek().pos);
    }
    return Expression(std::move(nodes));
  }

 private:
  const Token& peek() const { return tokens_[cursor_]; }
  const Token& advance() { return tokens_[cursor_++]; }

  void emit(std::vector<ExprNode>& nodes, ExprNode node, std::size_t pos) {
    if (static_cast<int>(nodes.size()) >= Expression::kMaxNodes) {
      throw ExprError("expression exceeds the 40-node cap", pos);
    }
    nodes.push_back(node);
  }

  // Inserts `op` as the parent of the subtree currently starting at
  // `lhs_start`; the right operand is parsed next and lands after it.
  void wrap_binary(std::vector<ExprNode>& nodes, std::size_t lhs_start, Op op, std::size_t pos) {
    if (static_cast<int>(nodes.size()) >= Expression::kMaxNodes) {
      throw ExprError("expression exceeds the 40-node cap", pos);
    }
    nodes.insert(nodes.begin() + static_cast<std::ptrdiff_t>(lhs_start), ExprNode{op, -1, 0.0});
  }

  void parse_sum(std::vector<ExprNode>& nodes) {
    std::size_t start = nodes.size();
    parse_product(nodes);
    while (peek().kind == TokKind::Plus || peek().kind == TokKind::Minus) {
      const Token& tok = advance();
      wrap_binary(nodes, start, tok.kind == TokKind::Plus ? Op::Add : Op::Sub, tok.pos);
      parse_product(nodes);
    }
  }

  void parse_product(std::vector<ExprNode>& nodes) {
    std::size_t start = nodes.size();
    parse_power(nodes);
    while (peek().kind == TokKind::Star || peek().kind == TokKind::Slash) {
      const Token& tok = advance();
      wrap_binary(nodes, start, tok.kind == TokKind::Star ? Op::Mul : Op::Div, tok.pos);
      parse_power(nodes);
    }
  }

  void parse_power(std::vector<ExprNode>& nodes) {
    std::size_t start = nodes.size();
    parse_primary(nodes);
    while (peek().kind == TokKind::Caret) {
      const Token& tok = advance();
      wrap_binary(nodes, start, Op::Pow, tok.pos);
      parse_primary(nodes);
    }
  }

  void parse_primary(std::vector<ExprNode>& nodes) {
    const Token& tok = advance();
    switch (tok.kind) {
      case TokKind::Number:
        emit(nodes, ExprNode{Op::Const, -1, tok.number}, tok.pos);
        return;
      case TokKind::Minus: {
        // '-' is only accepted as the sign of a numeric literal.
        const Token& next = advance();
        if (next.kind != TokKind::Number) {
          throw ExprError("'-' must precede a numeric literal here", tok.pos);
        }
        emit(nodes, ExprNode{Op::Const, -1, -next.number}, tok.pos);
        return;
      }
      case TokKind::LParen: {
        parse_sum(nodes);
        if (peek().kind != TokKind::RParen) {
          throw ExprError("expected ')'", peek().pos);
        }
        advance();
        return;
      }
      case TokKind::Ident: {
        Op unary;
        if (peek().kind == TokKind::LParen) {
          if (!unary_op_from_name(tok.ident, &unary)) {
            throw ExprError("unknown function '" + tok.ident + "'", tok.pos);
          }
          advance();  // '('
          emit(nodes, ExprNode{unary, -1, 0.0}, tok.pos);
          parse_sum(nodes);
          if (peek().kind != TokKind::RParen) {
            throw ExprError("expected ')'", peek().pos);
          }
          advance();
          return;
        }
        auto it = std::find(features_.begin(), features_.end(), tok.ident);
        if (it == features_.end()) {
          throw ExprError("unknown identifier '" + tok.ident + "'", tok.pos);
        }
        emit(nodes,
             ExprNode{Op::Var, static_cast<std::int32_t>(it - features_.begin()), 0.0},
             tok.pos);
        return;
      }
      case TokKind::RParen:
        throw ExprError("unexpected ')'", tok.pos);
      default:
        throw ExprError("expected an operand", tok.pos);
    }
  }

  std::vector<Token> tokens_;
  const std::vector<std::string>& features_;
  std::size_t cursor_ = 0;
};

}  // namespace

Expression parse(const std::string& text, const std::vector<std::string>& features) {
  return Parser(tokenize(text), features).run();
}

// ---------------------------------------------------------------------------
// Canonical printing
// ---------------------------------------------------------------------------

namespace {

int op_precedence(Op op) {
  switch (op) {
    case Op::Add:
    case Op::Sub:
      return 1;
    case Op::Mul:
    case Op::Div:
      return 2;
    case Op::Pow:
      return 3;
    default:
      return 4;  // leaves and function calls never need parentheses
  }
}

// Shortest decimal form that re-parses to the identical double.
std::string format_constant(double value) {
  std::array<char, 40> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  std::string s(buf.data(), res.ptr);
  if (s == "-0") s = "0";
  return s;
}

void print_node(const Expression& e, int i, const std::vector<std::string>& features,
                std::string& out) {
  const ExprNode& node = e.nodes()[static_cast<std::size_t>(i)];
  switch (node.op) {
    case Op::Var:
      if (node.index >= static_cast<std::int32_t>(features.size())) {
        throw ExprError("variable index out of range for feature list", 0);
      }
      out += features[static_cast<std::size_t>(node.index)];
      return;
    case Op::Const:
      out += format_constant(node.value);
      return;
    case Op::Exp:
    case Op::Log:
    case Op::Sin:
    case Op::Cos:
    case Op::Sqrt: {
      out += op_name(node.op);
      out += '(';
      print_node(e, i + 1, features, out);
      out += ')';
      return;
    }
    default: {
      const int prec = op_precedence(node.op);
      const int left = i + 1;
      const int right = left + e.subtree_size(left);
      const int left_prec = op_precedence(e.nodes()[static_cast<std::size_t>(left)].op);
      const int right_prec = op_precedence(e.nodes()[static_cast<std::size_t>(right)].op);
      // Left-associative grammar: the right operand needs parentheses at
      // equal precedence or the tree shape would not survive a re-parse.
      const bool paren_left = left_prec < prec;
      const bool paren_right = right_prec <= prec;
      if (paren_left) out += '(';
      print_node(e, left, features, out);
      if (paren_left) out += ')';
      out += ' ';
      out += op_name(node.op);
      out += ' ';
      if (paren_right) out += '(';
      print_node(e, right, features, out);
      if (paren_right) out += ')';
      return;
    }
  }
}

}  // namespace

std::string print_canonical(const Expression& e, const std::vector<std::string>& features) {
  std::string out;
  out.reserve(static_cast<std::size_t>(e.node_count()) * 8);
  print_node(e, 0, features, out);
  return out;
}

// ---------------------------------------------------------------------------
// Guarded evaluation
// ---------------------------------------------------------------------------

namespace {

struct NodeEval {
  double value = 0.0;      // post-guard, post-clip value
  double clip_pass = 0.0;  // 1 inside the clip region, 0 outside
};

inline double sign_pos(double v) { return v < 0.0 ? -1.0 : 1.0; }

inline bool is_integer_exponent(double b) {
  return std::abs(b) < 1e9 && b == std::floor(b);
}

inline void track_margin(double* margin, double distance) {
  if (margin != nullptr && distance < *margin) *margin = distance;
}

// Applies the non-finite-to-zero rule and the magnitude clip shared by
// every intermediate.
inline NodeEval finish(double raw, const EvalGuards& g, double* margin) {
  if (!std::isfinite(raw)) {
    track_margin(margin, 0.0);
    return {0.0, 0.0};
  }
  track_margin(margin, std::abs(g.magnitude_clip - std::abs(raw)));
  if (raw > g.magnitude_clip) return {g.magnitude_clip, 0.0};
  if (raw < -g.magnitude_clip) return {-g.magnitude_clip, 0.0};
  return {raw, 1.0};
}

// Raw operator application under the branch guards. d_a/d_b receive the
// partials of the raw result w.r.t. the (already clipped) operand values,
// with guard branches treated as locally constant.
inline double apply_op(Op op, double a, double b, const EvalGuards& g, double* d_a, double* d_b,
                       double* margin) {
  switch (op) {
    case Op::Add:
      if (d_a) { *d_a = 1.0; *d_b = 1.0; }
      return a + b;
    case Op::Sub:
      if (d_a) { *d_a = 1.0; *d_b = -1.0; }
      return a - b;
    case Op::Mul:
      if (d_a) { *d_a = b; *d_b = a; }
      return a * b;
    case Op::Div: {
      const double floored = std::max(std::abs(b), g.denom_floor);
      const double denom = sign_pos(b) * floored;
      track_margin(margin, std::abs(std::abs(b) - g.denom_floor));
      if (d_a) {
        *d_a = 1.0 / denom;
        *d_b = std::abs(b) > g.denom_floor ? -a / (denom * denom) : 0.0;
      }
      return a / denom;
    }
    case Op::Pow: {
      const double bc = std::clamp(b, -g.pow_exp_clamp, g.pow_exp_clamp);
      track_margin(margin, std::abs(g.pow_exp_clamp - std::abs(b)));
      const double b_pass = std::abs(b) < g.pow_exp_clamp ? 1.0 : 0.0;
      track_margin(margin, std::abs(a));
      if (is_integer_exponent(bc)) {
        // For a < 0 the sign-preserving branch below disagrees with exact
        // integer powers, so integer exponents sit on a branch boundary.
        if (a < 0.0) track_margin(margin, 0.0);
        const double raw = std::pow(a, bc);
        if (d_a) {
          *d_a = a == 0.0 ? 0.0 : bc * std::pow(a, bc - 1.0);
          *d_b = (a == 0.0 || !std::isfinite(raw)) ? 0.0 : b_pass * raw * std::log(std::abs(a));
        }
        return raw;
      }
      track_margin(margin, std::abs(bc - std::round(bc)));
      const double s = sign_pos(a);
      const double raw = s * std::pow(std::abs(a), bc);
      if (d_a) {
        *d_a = a == 0.0 ? 0.0 : bc * std::pow(std::abs(a), bc - 1.0);
        *d_b = (a == 0.0 || !std::isfinite(raw)) ? 0.0 : b_pass * raw * std::log(std::abs(a));
      }
      return raw;
    }
    case Op::Exp: {
      const double uc = std::clamp(a, -g.pow_exp_clamp, g.pow_exp_clamp);
      track_margin(margin, std::abs(g.pow_exp_clamp - std::abs(a)));
      const double raw = std::exp(uc);
      if (d_a) *d_a = std::abs(a) < g.pow_exp_clamp ? raw : 0.0;
      return raw;
    }
    case Op::Log: {
      const double shifted = std::max(a, 0.0) + g.eps_shift;
      track_margin(margin, std::abs(a));
      if (d_a) *d_a = a > 0.0 ? 1.0 / shifted : 0.0;
      return std::log(shifted);
    }
    case Op::Sin:
      if (d_a) *d_a = std::cos(a);
      return std::sin(a);
    case Op::Cos:
      if (d_a) *d_a = -std::sin(a);
      return std::cos(a);
    case Op::Sqrt: {
      const double clamped = std::max(a, 0.0);
      track_margin(margin, std::abs(a));
      const double raw = std::sqrt(clamped);
      if (d_a) *d_a = a > 0.0 ? 0.5 / raw : 0.0;
      return raw;
    }
    default:
      return 0.0;
  }
}

}  // namespace

double eval_safe(const Expression& e, std::span<const double> x, std::span<const double> theta,
                 const EvalGuards& g) {
  if (e.max_var_index() >= static_cast<int>(x.size())) {
    throw ExprError("input vector does not cover the expression's variables", 0);
  }
  if (static_cast<int>(theta.size()) != e.constant_slots()) {
    throw ExprError("theta length does not match the constant-slot count", 0);
  }
  const auto& nodes = e.nodes();
  double stack[Expression::kMaxNodes];
  int top = 0;
  for (int i = e.node_count() - 1; i >= 0; --i) {
    const ExprNode& node = nodes[static_cast<std::size_t>(i)];
    double raw;
    switch (op_arity(node.op)) {
      case 0:
        raw = node.op == Op::Var ? x[static_cast<std::size_t>(node.index)]
                                 : theta[static_cast<std::size_t>(node.index)];
        break;
      case 1:
        raw = apply_op(node.op, stack[--top], 0.0, g, nullptr, nullptr, nullptr);
        break;
      default: {
        const double a = stack[--top];
        const double b = stack[--top];
        raw = apply_op(node.op, a, b, g, nullptr, nullptr, nullptr);
        break;
      }
    }
    stack[top++] = finish(raw, g, nullptr).value;
  }
  return stack[0];
}

double eval_safe_grad(const Expression& e, std::span<const double> x,
                      std::span<const double> theta, const EvalGuards& g,
                      std::span<double> dtheta, double* guard_margin) {
  if (e.max_var_index() >= static_cast<int>(x.size())) {
    throw ExprError("input vector does not cover the expression's variables", 0);
  }
  const int n = e.node_count();
  if (static_cast<int>(theta.size()) != e.constant_slots() ||
      static_cast<int>(dtheta.size()) != e.constant_slots()) {
    throw ExprError("theta length does not match the constant-slot count", 0);
  }
  std::fill(dtheta.begin(), dtheta.end(), 0.0);
  if (guard_margin) *guard_margin = std::numeric_limits<double>::infinity();

  const auto& nodes = e.nodes();
  std::array<NodeEval, Expression::kMaxNodes> vals{};
  // Children live at higher prefix indices, so a backward sweep has every
  // operand ready when its parent is reached.
  for (int i = n - 1; i >= 0; --i) {
    const ExprNode& node = nodes[static_cast<std::size_t>(i)];
    double raw;
    if (op_arity(node.op) == 0) {
      raw = node.op == Op::Var ? x[static_cast<std::size_t>(node.index)]
                               : theta[static_cast<std::size_t>(node.index)];
    } else if (op_arity(node.op) == 1) {
      raw = apply_op(node.op, vals[static_cast<std::size_t>(i + 1)].value, 0.0, g, nullptr,
                     nullptr, guard_margin);
    } else {
      const int left = i + 1;
      const int right = left + e.subtree_size(left);
      raw = apply_op(node.op, vals[static_cast<std::size_t>(left)].value,
                     vals[static_cast<std::size_t>(right)].value, g, nullptr, nullptr,
                     guard_margin);
    }
    vals[static_cast<std::size_t>(i)] = finish(raw, g, guard_margin);
  }

  std::array<double, Expression::kMaxNodes> adjoint{};
  adjoint[0] = 1.0;
  for (int i = 0; i < n; ++i) {
    const ExprNode& node = nodes[static_cast<std::size_t>(i)];
    const double adj = adjoint[static_cast<std::size_t>(i)];
    const double pass = vals[static_cast<std::size_t>(i)].clip_pass;
    if (node.op == Op::Const) {
      dtheta[static_cast<std::size_t>(node.index)] += adj * pass;
      continue;
    }
    if (op_arity(node.op) == 0) continue;
    if (adj == 0.0 || pass == 0.0) continue;  // avoid inf*0 from dead branches
    double d_a = 0.0;
    double d_b = 0.0;
    if (op_arity(node.op) == 1) {
      apply_op(node.op, vals[static_cast<std::size_t>(i + 1)].value, 0.0, g, &d_a, &d_b, nullptr);
      double contrib = adj * pass * d_a;
      if (!std::isfinite(contrib)) contrib = 0.0;
      adjoint[static_cast<std::size_t>(i + 1)] += contrib;
    } else {
      const int left = i + 1;
      const int right = left + e.subtree_size(left);
      apply_op(node.op, vals[static_cast<std::size_t>(left)].value,
               vals[static_cast<std::size_t>(right)].value, g, &d_a, &d_b, nullptr);
      double ca = adj * pass * d_a;
      double cb = adj * pass * d_b;
      if (!std::isfinite(ca)) ca = 0.0;
      if (!std::isfinite(cb)) cb = 0.0;
      adjoint[static_cast<std::size_t>(left)] += ca;
      adjoint[static_cast<std::size_t>(right)] += cb;
    }
  }
  return vals[0].value;
}

namespace {

int subtree_len(const std::vector<ExprNode>& v, std::size_t i) {
  int need = 1;
  std::size_t j = i;
  for (; need > 0; ++j) need += op_arity(v[j].op) - 1;
  return static_cast<int>(j - i);
}

bool has_var(const std::vector<ExprNode>& v, std::size_t i, int len) {
  for (int k = 0; k < len; ++k) {
    if (v[i + static_cast<std::size_t>(k)].op == Op::Var) return true;
  }
  return false;
}

double fold_value(const std::vector<ExprNode>& v, std::size_t i, int len, const EvalGuards& g) {
  Expression sub(std::vector<ExprNode>(v.begin() + static_cast<std::ptrdiff_t>(i),
                                       v.begin() + static_cast<std::ptrdiff_t>(i) + len));
  const std::vector<double> theta = sub.slot_defaults();
  return eval_safe(sub, {}, theta, g);
}

// One rewrite attempt over the whole buffer; returns true on change.
bool simplify_step(std::vector<ExprNode>& v, const EvalGuards& g) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Op op = v[i].op;
    const int len = subtree_len(v, i);
    if (len > 1 && !has_var(v, i, len)) {
      const double value = fold_value(v, i, len, g);
      v.erase(v.begin() + static_cast<std::ptrdiff_t>(i),
              v.begin() + static_cast<std::ptrdiff_t>(i) + len);
      v.insert(v.begin() + static_cast<std::ptrdiff_t>(i), ExprNode{Op::Const, 0, value});
      return true;
    }
    if (op_arity(op) != 2) continue;
    const std::size_t left = i + 1;
    const int left_len = subtree_len(v, left);
    const std::size_t right = left + static_cast<std::size_t>(left_len);
    const int right_len = subtree_len(v, right);
    // Canonicalize a constant-first commutative pair to constant-last.
    if ((op == Op::Add || op == Op::Mul) && v[left].op == Op::Const &&
        v[right].op != Op::Const) {
      std::vector<ExprNode> rhs(v.begin() + static_cast<std::ptrdiff_t>(right),
                                v.begin() + static_cast<std::ptrdiff_t>(right) + right_len);
      const ExprNode c = v[left];
      v.erase(v.begin() + static_cast<std::ptrdiff_t>(left),
              v.begin() + static_cast<std::ptrdiff_t>(right) + right_len);
      v.insert(v.begin() + static_cast<std::ptrdiff_t>(left), rhs.begin(), rhs.end());
      v.insert(v.begin() + static_cast<std::ptrdiff_t>(left) + right_len, c);
      return true;
    }
    // Merge stacked constant offsets/factors: (u op1 C1) op2 C2 -> u op3 C3.
    if (v[right].op != Op::Const || right_len != 1) continue;
    const Op inner = v[left].op;
    if (op_arity(inner) != 2) continue;
    const std::size_t iu = left + 1;
    const int u_len = subtree_len(v, iu);
    const std::size_t ic1 = iu + static_cast<std::size_t>(u_len);
    if (v[ic1].op != Op::Const || subtree_len(v, ic1) != 1) continue;
    const double c1 = v[ic1].value;
    const double c2 = v[right].value;
    Op merged = Op::Const;
    double c3 = 0.0;
    if (op == Op::Div && inner == Op::Div) { merged = Op::Div; c3 = c1 * c2; }
    else if (op == Op::Div && inner == Op::Mul) { merged = Op::Mul; c3 = c1 / c2; }
    else if (op == Op::Mul && inner == Op::Div) { merged = Op::Mul; c3 = c2 / c1; }
    else if (op == Op::Mul && inner == Op::Mul) { merged = Op::Mul; c3 = c1 * c2; }
    else if (op == Op::Add && inner == Op::Add) { merged = Op::Add; c3 = c1 + c2; }
    else if (op == Op::Add && inner == Op::Sub) { merged = Op::Sub; c3 = c1 - c2; }
    else if (op == Op::Sub && inner == Op::Add) { merged = Op::Add; c3 = c1 - c2; }
    else if (op == Op::Sub && inner == Op::Sub) { merged = Op::Sub; c3 = c1 + c2; }
    else continue;
    if (!std::isfinite(c3)) continue;
    v[i].op = merged;
    std::vector<ExprNode> u(v.begin() + static_cast<std::ptrdiff_t>(iu),
                            v.begin() + static_cast<std::ptrdiff_t>(iu) + u_len);
    v.erase(v.begin() + static_cast<std::ptrdiff_t>(left),
            v.begin() + static_cast<std::ptrdiff_t>(right) + 1);
    v.insert(v.begin() + static_cast<std::ptrdiff_t>(left), u.begin(), u.end());
    v.insert(v.begin() + static_cast<std::ptrdiff_t>(left) + u_len, ExprNode{Op::Const, 0, c3});
    return true;
  }
  return false;
}

}  // namespace

Expression simplify(const Expression& e, const EvalGuards& g) {
  std::vector<ExprNode> v(e.nodes().begin(), e.nodes().end());
  while (simplify_step(v, g)) {
  }
  return Expression(std::move(v));
}

}  // namespace pasm
