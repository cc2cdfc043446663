#ifndef PASM_EXPR_HPP
#define PASM_EXPR_HPP

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pasm {

// Operator set: binary {+,-,*,/,^} and unary {exp,log,sin,cos,sqrt},
// plus the two leaf kinds. Expressions are immutable flat trees in
// prefix order; constant slots are numbered densely left to right.
enum class Op : std::uint8_t {
  Var,
  Const,
  Add,
  Sub,
  Mul,
  Div,
  Pow,
  Exp,
  Log,
  Sin,
  Cos,
  Sqrt,
};

int op_arity(Op op);
const char* op_name(Op op);

struct ExprNode {
  Op op = Op::Const;
  std::int32_t index = -1;  // feature index (Var) or slot index (Const)
  double value = 0.0;       // default value (Const only)
};

class ExprError : public std::runtime_error {
 public:
  ExprError(std::string message, std::size_t position)
      : std::runtime_error(std::move(message)), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

class Expression {
 public:
  static constexpr int kMaxNodes = 40;

  Expression() = default;
  // Validates arity structure, the node cap, and renumbers constant
  // slots densely in prefix (= textual left-to-right) order.
  explicit Expression(std::vector<ExprNode> prefix_nodes);

  const std::vector<ExprNode>& nodes() const { return nodes_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  int constant_slots() const { return slot_count_; }
  int max_var_index() const { return max_var_index_; }
  bool empty() const { return nodes_.empty(); }

  // Size of the subtree rooted at node i (in nodes, including i).
  int subtree_size(int i) const { return subtree_sizes_[static_cast<std::size_t>(i)]; }

  std::vector<double> slot_defaults() const;
  Expression with_slot_defaults(std::span<const double> theta) const;

  bool structurally_equal(const Expression& other) const;

 private:
  std::vector<ExprNode> nodes_;
  std::vector<int> subtree_sizes_;
  int slot_count_ = 0;
  int max_var_index_ = -1;
};

// Numerical-safety guards for total evaluation. All evaluation paths
// shift log/sqrt inputs, floor denominators, clamp exponents and clip
// every intermediate so no non-finite value can escape.
struct EvalGuards {
  double eps_shift = 1e-12;
  double pow_exp_clamp = 50.0;
  double magnitude_clip = 1e6;
  double denom_floor = 1e-12;

  void validate() const;
};

// Infix parser with function-call unaries. Precedence ^ > {*,/} > {+,-},
// all binaries left-associative. Identifiers resolve against `features`;
// a leading '-' is accepted only as part of a numeric literal.
Expression parse(const std::string& text, const std::vector<std::string>& features);

// Canonical printer: minimal parentheses, constants at 17 significant
// digits, parse(print_canonical(e)) structurally identical to e.
std::string print_canonical(const Expression& e, const std::vector<std::string>& features);

int complexity(const Expression& e);
int constant_slots(const Expression& e);

// Algebraic cleanup: folds constant-only subtrees through the guarded
// evaluator and merges stacked constant factors/divisors/offsets, e.g.
// x / 0.2 / 0.34 -> x / 0.068 and exp(2.0) -> 7.389... Rewrites are
// semantics-preserving except where an intermediate guard would have
// fired, so callers should treat the result as a candidate expression
// rather than a drop-in replacement.
Expression simplify(const Expression& e, const EvalGuards& g);

// Total guarded evaluation. theta supplies per-slot constant values
// (pass the slot defaults for an unadapted expression).
double eval_safe(const Expression& e, std::span<const double> x,
                 std::span<const double> theta, const EvalGuards& g);

// Guarded evaluation plus reverse-mode d(value)/d(theta). Guard branches
// are treated as locally constant: clip/clamp pass-through is 1 inside
// the active region and 0 outside. dtheta must have constant_slots()
// entries and is overwritten. If guard_margin is non-null it receives
// the smallest distance observed between any intermediate and the
// nearest guard-branch boundary (0 when a guard fired on a boundary).
double eval_safe_grad(const Expression& e, std::span<const double> x,
                      std::span<const double> theta, const EvalGuards& g,
                      std::span<double> dtheta, double* guard_margin = nullptr);

}  // namespace pasm

#endif  // PASM_EXPR_HPP
