#include "pasm/symreg.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <thread>
#include <unordered_map>

#include "pasm/errors.hpp"
#include "pasm/rng.hpp"

namespace pasm {

void SRConfig::validate() const {
  if (generations < 1 || islands < 1 || population_per_island < 1 || tournament_size < 1 ||
      migration_interval < 1 || pareto_top_k < 1 || constant_restarts < 0) {
    throw InputError("symbolic-regression counts must be positive");
  }
  if (max_nodes < 1 || max_nodes > Expression::kMaxNodes) {
    throw InputError("max_nodes must lie in [1, " + std::to_string(Expression::kMaxNodes) + "]");
  }
  if (!(llm_trigger_prob >= 0.0 && llm_trigger_prob <= 1.0)) {
    throw InputError("llm_trigger_prob must lie in [0,1]");
  }
  if (!(parsimony >= 0.0)) throw InputError("parsimony must be non-negative");
}

namespace {

// log(1 + exp(u)) without overflow.
double softplus(double u) { return u > 0.0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u)); }

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::span<const double> row_span(const RowMajor& X, Eigen::Index i) {
  return {X.data() + i * X.cols(), static_cast<std::size_t>(X.cols())};
}

double loss_on(const Expression& e, std::span<const double> theta, const RowMajor& X,
               const std::vector<int>& y, const EvalGuards& g) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double z = eval_safe(e, row_span(X, i), theta, g);
    const double margin = (y[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0) * z;
    total += softplus(-margin);
  }
  return total / static_cast<double>(X.rows());
}

}  // namespace

double soft_margin_loss(const Expression& e, std::span<const double> theta,
                        const Eigen::MatrixXd& X, const std::vector<int>& y,
                        const EvalGuards& g) {
  if (static_cast<std::size_t>(X.rows()) != y.size()) {
    throw InputError("feature/label row counts disagree");
  }
  const RowMajor XR = X;
  return loss_on(e, theta, XR, y, g);
}

namespace {

// Coordinate/pattern descent from one starting point.
std::pair<std::vector<double>, double> pattern_search(const Expression& e,
                                                      std::vector<double> theta,
                                                      const RowMajor& X,
                                                      const std::vector<int>& y,
                                                      const EvalGuards& g) {
  const std::size_t c = theta.size();
  double best = loss_on(e, theta, X, y, g);
  std::vector<double> step(c);
  for (std::size_t j = 0; j < c; ++j) step[j] = 0.25 * std::abs(theta[j]) + 0.02;
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool moved = false;
    for (std::size_t j = 0; j < c; ++j) {
      for (double dir : {+1.0, -1.0}) {
        std::vector<double> trial = theta;
        trial[j] += dir * step[j];
        const double loss = loss_on(e, trial, X, y, g);
        if (loss < best - 1e-12) {
          best = loss;
          theta = std::move(trial);
          moved = true;
          break;
        }
      }
    }
    if (!moved) {
      double max_step = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        step[j] *= 0.5;
        max_step = std::max(max_step, step[j]);
      }
      if (max_step < 1e-5) break;
    }
  }
  return {std::move(theta), best};
}

// Full-batch Adam on the analytic gradient. Pattern search alone stalls
// in diagonal valleys (e.g. two constants whose ratio sets the decision
// boundary while their scale sets the margin); the smooth soft-margin
// loss lets a first-order method track those valleys.
std::pair<std::vector<double>, double> adam_polish(const Expression& e,
                                                   std::vector<double> theta, const RowMajor& X,
                                                   const std::vector<int>& y, const EvalGuards& g,
                                                   int steps) {
  const std::size_t c = theta.size();
  if (c == 0) return {std::move(theta), loss_on(e, theta, X, y, g)};
  const double n = static_cast<double>(X.rows());
  std::vector<double> m(c, 0.0), v(c, 0.0), grad(c), row_d(c);
  std::vector<double> best_theta = theta;
  double best = std::numeric_limits<double>::infinity();
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int step = 1; step <= steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double sy = y[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
      const double z = eval_safe_grad(e, row_span(X, i), theta, g, row_d);
      const double margin = sy * z;
      loss += softplus(-margin) / n;
      const double w = -sy / (1.0 + std::exp(margin)) / n;
      for (std::size_t j = 0; j < c; ++j) grad[j] += w * row_d[j];
    }
    if (loss < best) {
      best = loss;
      best_theta = theta;
    }
    for (std::size_t j = 0; j < c; ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
      v[j] = b2 * v[j] + (1.0 - b2) * grad[j] * grad[j];
      const double mh = m[j] / (1.0 - std::pow(b1, step));
      const double vh = v[j] / (1.0 - std::pow(b2, step));
      theta[j] -= lr * (1.0 + std::abs(theta[j])) * mh / (std::sqrt(vh) + eps);
    }
  }
  const double final_loss = loss_on(e, theta, X, y, g);
  if (final_loss < best) {
    best = final_loss;
    best_theta = std::move(theta);
  }
  return {std::move(best_theta), best};
}

// Damped Gauss-Newton (IRLS-style) refinement. For expressions linear in
// their constants the soft-margin loss is convex and this converges on
// the exact optimum, including the max-margin ray of separable data that
// first-order steps crawl along.
std::pair<std::vector<double>, double> newton_polish(const Expression& e,
                                                     std::vector<double> theta, const RowMajor& X,
                                                     const std::vector<int>& y, const EvalGuards& g,
                                                     int iterations) {
  const int c = static_cast<int>(theta.size());
  if (c == 0) return {std::move(theta), loss_on(e, theta, X, y, g)};
  const double n = static_cast<double>(X.rows());
  std::vector<double> row_d(static_cast<std::size_t>(c));
  Eigen::VectorXd grad(c);
  Eigen::MatrixXd hess(c, c);
  Eigen::Map<const Eigen::VectorXd> dz(row_d.data(), c);
  double best = loss_on(e, theta, X, y, g);
  std::vector<double> best_theta = theta;
  double lambda = 1e-3;
  for (int it = 0; it < iterations; ++it) {
    grad.setZero();
    hess.setZero();
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double sy = y[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
      const double z = eval_safe_grad(e, row_span(X, i), theta, g, row_d);
      const double margin = sy * z;
      const double s = 1.0 / (1.0 + std::exp(margin));
      grad -= (sy * s / n) * dz;
      hess += (s * (1.0 - s) / n) * dz * dz.transpose();
    }
    bool accepted = false;
    for (int attempt = 0; attempt < 6; ++attempt) {
      Eigen::MatrixXd damped = hess;
      damped.diagonal().array() += lambda;
      const Eigen::VectorXd step = damped.ldlt().solve(-grad);
      if (!step.allFinite()) break;
      std::vector<double> trial = theta;
      for (int j = 0; j < c; ++j) trial[static_cast<std::size_t>(j)] += step[j];
      const double trial_loss = loss_on(e, trial, X, y, g);
      if (trial_loss < best - 1e-15) {
        theta = std::move(trial);
        best = trial_loss;
        best_theta = theta;
        lambda = std::max(lambda / 3.0, 1e-10);
        accepted = true;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) break;
  }
  return {std::move(best_theta), best};
}

}  // namespace

namespace {

std::pair<std::vector<double>, double> optimize_constants_rm(const Expression& e,
                                                             const RowMajor& XR,
                                                             const std::vector<int>& y,
                                                             int restarts, std::uint64_t seed,
                                                             const EvalGuards& g) {
  const std::vector<double> defaults = e.slot_defaults();
  if (defaults.empty()) {
    return {{}, loss_on(e, defaults, XR, y, g)};
  }
  auto run_from = [&](std::vector<double> start) {
    auto [theta, loss] = pattern_search(e, std::move(start), XR, y, g);
    auto [adamed, adam_loss] = adam_polish(e, theta, XR, y, g, 150);
    if (adam_loss < loss) {
      theta = std::move(adamed);
      loss = adam_loss;
    }
    auto [newtoned, newton_loss] = newton_polish(e, theta, XR, y, g, 40);
    return newton_loss < loss ? std::make_pair(std::move(newtoned), newton_loss)
                              : std::make_pair(std::move(theta), loss);
  };
  auto [best_theta, best_loss] = run_from(defaults);
  auto rng = make_rng(seed, 0xC0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int r = 0; r < restarts; ++r) {
    std::vector<double> start(defaults.size());
    for (std::size_t j = 0; j < start.size(); ++j) {
      start[j] = defaults[j] * (1.0 + 0.5 * gauss(rng)) + 0.5 * gauss(rng);
    }
    auto [theta, loss] = run_from(std::move(start));
    if (loss < best_loss) {
      best_loss = loss;
      best_theta = std::move(theta);
    }
  }
  return {std::move(best_theta), best_loss};
}

}  // namespace

std::pair<std::vector<double>, double> optimize_constants(const Expression& e,
                                                          const Eigen::MatrixXd& X,
                                                          const std::vector<int>& y, int restarts,
                                                          std::uint64_t seed,
                                                          const EvalGuards& g) {
  const RowMajor XR = X;
  return optimize_constants_rm(e, XR, y, restarts, seed, g);
}

// ---------------------------------------------------------------------------
// Island evolution
// ---------------------------------------------------------------------------

namespace {

const Op kBinaryOps[] = {Op::Add, Op::Sub, Op::Mul, Op::Div, Op::Pow};
const Op kUnaryOps[] = {Op::Exp, Op::Log, Op::Sin, Op::Cos, Op::Sqrt};

struct Individual {
  Expression expr;
  double loss = 0.0;
  double fitness = 0.0;
};

// Structure-only fingerprint (ops and variable indices, constants ignored).
std::uint64_t shape_hash(const Expression& e) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& node : e.nodes()) {
    h = (h ^ (static_cast<std::uint64_t>(node.op) + 0x9E37ULL)) * 1099511628211ULL;
    if (node.op == Op::Var) {
      h = (h ^ static_cast<std::uint64_t>(node.index)) * 1099511628211ULL;
    }
  }
  return h;
}

double random_constant(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> wide(-3.0, 3.0);
  std::uniform_real_distribution<double> small(0.01, 1.0);
  return unit(rng) < 0.3 ? small(rng) : wide(rng);
}

void random_tree(std::mt19937_64& rng, int budget, int n_features,
                 std::vector<ExprNode>* out) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (budget <= 1) {
    if (unit(rng) < 0.7) {
      std::uniform_int_distribution<int> pick(0, n_features - 1);
      out->push_back({Op::Var, pick(rng), 0.0});
    } else {
      out->push_back({Op::Const, -1, random_constant(rng)});
    }
    return;
  }
  const double roll = unit(rng);
  if (budget >= 3 && roll < 0.55) {
    std::uniform_int_distribution<int> pick(0, 4);
    out->push_back({kBinaryOps[pick(rng)], -1, 0.0});
    std::uniform_int_distribution<int> split(1, budget - 2);
    const int left = split(rng);
    random_tree(rng, left, n_features, out);
    random_tree(rng, budget - 1 - left, n_features, out);
  } else if (roll < 0.75) {
    std::uniform_int_distribution<int> pick(0, 4);
    out->push_back({kUnaryOps[pick(rng)], -1, 0.0});
    random_tree(rng, budget - 1, n_features, out);
  } else {
    random_tree(rng, 1, n_features, out);
  }
}

Expression random_expression(std::mt19937_64& rng, int max_budget, int n_features) {
  std::uniform_int_distribution<int> pick_budget(1, max_budget);
  std::vector<ExprNode> nodes;
  random_tree(rng, pick_budget(rng), n_features, &nodes);
  return Expression(std::move(nodes));
}

// A small atom: a variable, a unary of a variable, or a variable scaled
// by a constant.
void random_basis(std::mt19937_64& rng, int n_features, std::vector<ExprNode>* out) {
  std::uniform_int_distribution<int> pf(0, n_features - 1);
  std::uniform_int_distribution<int> kind(0, 3);
  std::uniform_int_distribution<int> pu(0, 4);
  switch (kind(rng)) {
    case 0:
      out->push_back({Op::Var, pf(rng), 0.0});
      break;
    case 1:
      out->push_back({kUnaryOps[pu(rng)], -1, 0.0});
      out->push_back({Op::Var, pf(rng), 0.0});
      break;
    case 2:
      out->push_back({Op::Mul, -1, 0.0});
      out->push_back({Op::Var, pf(rng), 0.0});
      out->push_back({Op::Const, -1, random_constant(rng)});
      break;
    default:
      out->push_back({Op::Div, -1, 0.0});
      out->push_back({Op::Var, pf(rng), 0.0});
      out->push_back({Op::Const, -1, random_constant(rng)});
      break;
  }
}

// Binary combination of two atoms; pairs structure the pure random trees
// rarely assemble early on.
Expression random_combo(std::mt19937_64& rng, int n_features) {
  std::uniform_int_distribution<int> po(0, 4);
  std::vector<ExprNode> nodes;
  nodes.push_back({kBinaryOps[po(rng)], -1, 0.0});
  random_basis(rng, n_features, &nodes);
  random_basis(rng, n_features, &nodes);
  return Expression(std::move(nodes));
}

std::optional<Expression> splice(const Expression& a, int at_a, const Expression& b, int at_b,
                                 int max_nodes) {
  const int size_a = a.subtree_size(at_a);
  const int size_b = b.subtree_size(at_b);
  const int total = a.node_count() - size_a + size_b;
  if (total > max_nodes) return std::nullopt;
  std::vector<ExprNode> nodes;
  nodes.reserve(static_cast<std::size_t>(total));
  const auto& an = a.nodes();
  const auto& bn = b.nodes();
  nodes.insert(nodes.end(), an.begin(), an.begin() + at_a);
  nodes.insert(nodes.end(), bn.begin() + at_b, bn.begin() + at_b + size_b);
  nodes.insert(nodes.end(), an.begin() + at_a + size_a, an.end());
  return Expression(std::move(nodes));
}

Expression point_mutate(const Expression& e, std::mt19937_64& rng, int n_features) {
  std::vector<ExprNode> nodes = e.nodes();
  std::uniform_int_distribution<int> pick(0, e.node_count() - 1);
  const int i = pick(rng);
  ExprNode& node = nodes[static_cast<std::size_t>(i)];
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  switch (op_arity(node.op)) {
    case 0:
      if (unit(rng) < 0.5) {
        std::uniform_int_distribution<int> pf(0, n_features - 1);
        node = {Op::Var, pf(rng), 0.0};
      } else {
        node = {Op::Const, -1, random_constant(rng)};
      }
      break;
    case 1: {
      std::uniform_int_distribution<int> po(0, 4);
      node.op = kUnaryOps[po(rng)];
      break;
    }
    default: {
      std::uniform_int_distribution<int> po(0, 4);
      node.op = kBinaryOps[po(rng)];
      break;
    }
  }
  return Expression(std::move(nodes));
}

std::optional<Expression> subtree_mutate(const Expression& e, std::mt19937_64& rng,
                                         int n_features, int max_nodes) {
  std::uniform_int_distribution<int> pick(0, e.node_count() - 1);
  const int i = pick(rng);
  const int budget = max_nodes - (e.node_count() - e.subtree_size(i));
  if (budget < 1) return std::nullopt;
  std::uniform_int_distribution<int> pick_budget(1, std::min(budget, 9));
  std::vector<ExprNode> fresh;
  random_tree(rng, pick_budget(rng), n_features, &fresh);
  const Expression replacement(std::move(fresh));
  return splice(e, i, replacement, 0, max_nodes);
}

Expression jitter_constants(const Expression& e, std::mt19937_64& rng) {
  std::vector<double> theta = e.slot_defaults();
  if (theta.empty()) return e;
  std::uniform_int_distribution<std::size_t> pick(0, theta.size() - 1);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t j = pick(rng);
  if (unit(rng) < 0.25) {
    // Multiplicative kick; additive jitter alone explores scale too slowly.
    theta[j] *= std::pow(4.0, gauss(rng));
  } else {
    theta[j] = theta[j] * (1.0 + 0.2 * gauss(rng)) + 0.05 * gauss(rng);
  }
  return e.with_slot_defaults(theta);
}

struct Island {
  std::mt19937_64 rng;
  std::vector<Individual> population;
  int elite = 0;
  // Best loss seen per complexity, feeding the final front.
  std::map<int, Individual> archive;
};

struct SharedStats {
  std::atomic<long long> attempted{0}, accepted{0}, parse_failures{0}, client_failures{0};
};

class Evolver {
 public:
  Evolver(const RowMajor& X, const std::vector<int>& y,
          const std::vector<std::string>& features, const SRConfig& cfg,
          SuggestionClient* client, SharedStats* stats)
      : X_(X), y_(y), features_(features), cfg_(cfg), client_(client), stats_(stats) {}

  Individual make_individual(Expression expr) const {
    const auto theta = expr.slot_defaults();
    const double loss = loss_on(expr, theta, X_, y_, guards_);
    const double fitness = loss + cfg_.parsimony * expr.node_count();
    return {std::move(expr), loss, fitness};
  }

  void init_island(Island& island, std::uint64_t island_seed) const {
    island.rng = std::mt19937_64(island_seed);
    island.population.reserve(static_cast<std::size_t>(cfg_.population_per_island));
    const int d = static_cast<int>(features_.size());
    // Building-block seeds: bare variables, then every unary over every
    // variable, then random trees.
    std::vector<Expression> seeds;
    for (int v = 0; v < d; ++v) seeds.push_back(Expression({ExprNode{Op::Var, v, 0.0}}));
    for (Op u : kUnaryOps) {
      for (int v = 0; v < d; ++v) {
        seeds.push_back(Expression({ExprNode{u, -1, 0.0}, ExprNode{Op::Var, v, 0.0}}));
      }
    }
    const int seeded =
        std::min<int>(static_cast<int>(seeds.size()), (2 * cfg_.population_per_island) / 3);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int p = 0; p < cfg_.population_per_island; ++p) {
      if (p < seeded) {
        island.population.push_back(make_individual(seeds[static_cast<std::size_t>(p)]));
      } else if (unit(island.rng) < 0.5) {
        island.population.push_back(make_individual(random_combo(island.rng, d)));
      } else {
        island.population.push_back(
            make_individual(random_expression(island.rng, 9, d)));
      }
    }
    refresh_elite(island);
    for (const auto& ind : island.population) archive_update(island, ind);
  }

  void refresh_elite(Island& island) const {
    int best = 0;
    for (std::size_t i = 1; i < island.population.size(); ++i) {
      if (island.population[i].fitness < island.population[static_cast<std::size_t>(best)].fitness) {
        best = static_cast<int>(i);
      }
    }
    island.elite = best;
  }

  void archive_update(Island& island, const Individual& ind) const {
    const int c = ind.expr.node_count();
    auto it = island.archive.find(c);
    if (it == island.archive.end() || ind.loss < it->second.loss) {
      island.archive.insert_or_assign(c, ind);
    }
  }

  const Individual& tournament(Island& island) const {
    std::uniform_int_distribution<std::size_t> pick(0, island.population.size() - 1);
    std::size_t best = pick(island.rng);
    for (int t = 1; t < cfg_.tournament_size; ++t) {
      const std::size_t candidate = pick(island.rng);
      if (island.population[candidate].fitness < island.population[best].fitness) {
        best = candidate;
      }
    }
    return island.population[best];
  }

  std::optional<Expression> ask_client(Island& island) const {
    if (client_ == nullptr) return std::nullopt;
    stats_->attempted.fetch_add(1, std::memory_order_relaxed);
    SuggestRequest req;
    req.features = features_;
    std::vector<const Individual*> ranked;
    for (const auto& ind : island.population) ranked.push_back(&ind);
    std::sort(ranked.begin(), ranked.end(),
              [](const Individual* a, const Individual* b) { return a->fitness < b->fitness; });
    for (std::size_t i = 0; i < ranked.size() && req.best.size() < 5; ++i) {
      const std::string text = print_canonical(ranked[i]->expr, features_);
      if (std::none_of(req.best.begin(), req.best.end(),
                       [&](const auto& p) { return p.first == text; })) {
        req.best.emplace_back(text, ranked[i]->loss);
      }
    }
    const auto reply = client_->suggest(req);
    if (!reply) {
      stats_->client_failures.fetch_add(1, std::memory_order_relaxed);
      return std::nullopt;
    }
    const std::string text = extract_expr_line(*reply);
    if (text.empty()) {
      stats_->parse_failures.fetch_add(1, std::memory_order_relaxed);
      return std::nullopt;
    }
    try {
      Expression expr = parse(text, features_);
      if (expr.node_count() > cfg_.max_nodes) {
        stats_->parse_failures.fetch_add(1, std::memory_order_relaxed);
        return std::nullopt;
      }
      stats_->accepted.fetch_add(1, std::memory_order_relaxed);
      return expr;
    } catch (const ExprError&) {
      stats_->parse_failures.fetch_add(1, std::memory_order_relaxed);
      return std::nullopt;
    }
  }

  void step_generation(Island& island) const {
    std::vector<Individual> next;
    next.reserve(island.population.size());
    next.push_back(island.population[static_cast<std::size_t>(island.elite)]);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    while (next.size() < island.population.size()) {
      if (cfg_.llm_trigger_prob > 0.0 && unit(island.rng) < cfg_.llm_trigger_prob) {
        if (auto suggested = ask_client(island)) {
          next.push_back(make_individual(std::move(*suggested)));
          continue;
        }
        // Failed suggestions count as a skipped variation slot.
      }
      const double roll = unit(island.rng);
      const Individual& parent = tournament(island);
      if (roll < 0.4) {
        const Individual& mate = tournament(island);
        std::uniform_int_distribution<int> pa(0, parent.expr.node_count() - 1);
        std::uniform_int_distribution<int> pb(0, mate.expr.node_count() - 1);
        auto child = splice(parent.expr, pa(island.rng), mate.expr, pb(island.rng),
                            cfg_.max_nodes);
        next.push_back(child ? make_individual(std::move(*child)) : parent);
      } else if (roll < 0.65) {
        next.push_back(make_individual(
            point_mutate(parent.expr, island.rng, static_cast<int>(features_.size()))));
      } else if (roll < 0.85) {
        auto child = subtree_mutate(parent.expr, island.rng,
                                    static_cast<int>(features_.size()), cfg_.max_nodes);
        next.push_back(child ? make_individual(std::move(*child)) : parent);
      } else {
        next.push_back(make_individual(jitter_constants(parent.expr, island.rng)));
      }
    }
    island.population = std::move(next);
    // Cap structural clones at two per shape so no single structure can
    // flood the island; extras become fresh subtree mutants.
    std::unordered_map<std::uint64_t, int> copies;
    for (std::size_t p = 0; p < island.population.size(); ++p) {
      Individual& ind = island.population[p];
      if (++copies[shape_hash(ind.expr)] <= 2 || p == 0) continue;
      if (auto fresh = subtree_mutate(ind.expr, island.rng,
                                      static_cast<int>(features_.size()), cfg_.max_nodes)) {
        ind = make_individual(std::move(*fresh));
        ++copies[shape_hash(ind.expr)];
      }
    }
    refresh_elite(island);
    for (const auto& ind : island.population) archive_update(island, ind);
  }

  const EvalGuards& guards() const { return guards_; }

 private:
  const RowMajor& X_;
  const std::vector<int>& y_;
  const std::vector<std::string>& features_;
  const SRConfig& cfg_;
  SuggestionClient* client_;
  SharedStats* stats_;
  EvalGuards guards_;
};

void parallel_for_n(int n, int threads, const std::function<void(int)>& work) {
  const int t = std::max(1, std::min(threads, n));
  if (t == 1) {
    for (int i = 0; i < n; ++i) work(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(t));
  std::atomic<int> cursor{0};
  for (int w = 0; w < t; ++w) {
    pool.emplace_back([&]() {
      for (int i = cursor.fetch_add(1); i < n; i = cursor.fetch_add(1)) work(i);
    });
  }
  for (auto& th : pool) th.join();
}

void parallel_over_islands(std::vector<Island>& islands, int threads,
                           const std::function<void(Island&)>& work) {
  parallel_for_n(static_cast<int>(islands.size()), threads,
                 [&](int i) { work(islands[static_cast<std::size_t>(i)]); });
}

}  // namespace

int ParetoFront::knee() const {
  if (entries.empty()) throw InputError("empty front");
  int best = 0;
  double best_score = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const double score = entries[i].loss + 0.005 * entries[i].complexity;
    if (score < best_score) {
      best_score = score;
      best = static_cast<int>(i);
    }
  }
  return best;
}

ParetoFront sr_fit(const Eigen::MatrixXd& X, const std::vector<int>& y,
                   const std::vector<std::string>& feature_names, const SRConfig& config,
                   SuggestionClient* client, SRStats* stats) {
  config.validate();
  if (static_cast<std::size_t>(X.rows()) != y.size()) {
    throw InputError("feature/label row counts disagree");
  }
  if (X.rows() < 10) throw InputError("symbolic regression needs at least 10 rows");
  if (static_cast<Eigen::Index>(feature_names.size()) != X.cols()) {
    throw InputError("feature name count does not match the data width");
  }
  const long positives = std::count(y.begin(), y.end(), 1);
  if (positives == 0 || positives == static_cast<long>(y.size())) {
    throw InputError("labels are single-class; nothing to separate");
  }

  const RowMajor XR = X;
  SharedStats shared;
  Evolver evolver(XR, y, feature_names, config, client, &shared);

  std::vector<Island> islands(static_cast<std::size_t>(config.islands));
  for (int i = 0; i < config.islands; ++i) {
    evolver.init_island(islands[static_cast<std::size_t>(i)],
                        derive_seed(config.seed, static_cast<std::uint64_t>(i)));
  }

  const int threads =
      config.threads > 0 ? config.threads : static_cast<int>(std::thread::hardware_concurrency());
  for (int gen = 0; gen < config.generations; ++gen) {
    parallel_over_islands(islands, threads, [&](Island& island) { evolver.step_generation(island); });
    if (config.islands > 1 && (gen + 1) % config.migration_interval == 0) {
      // Unidirectional ring, one elite per edge, inserted over the worst.
      std::vector<Individual> elites;
      elites.reserve(islands.size());
      for (const auto& island : islands) {
        elites.push_back(island.population[static_cast<std::size_t>(island.elite)]);
      }
      for (std::size_t i = 0; i < islands.size(); ++i) {
        Island& dst = islands[(i + 1) % islands.size()];
        std::size_t worst = 0;
        for (std::size_t p = 1; p < dst.population.size(); ++p) {
          if (dst.population[p].fitness > dst.population[worst].fitness) worst = p;
        }
        dst.population[worst] = elites[i];
        evolver.refresh_elite(dst);
        evolver.archive_update(dst, elites[i]);
      }
    }
  }

  // Constants only get a cheap local fit during evolution, so the best
  // pre-refinement loss per slot is a poor guide to the best structure.
  // Build a candidate pool per complexity out of the island archives,
  // their simplified forms and pruned variants, give each a cheap fit,
  // then give every slot's winner the full multi-restart treatment.
  auto same_shape = [](const Expression& a, const Expression& b) {
    const auto& na = a.nodes();
    const auto& nb = b.nodes();
    if (na.size() != nb.size()) return false;
    for (std::size_t i = 0; i < na.size(); ++i) {
      if (na[i].op != nb[i].op) return false;
      if (na[i].op == Op::Var && na[i].index != nb[i].index) return false;
    }
    return true;
  };

  // Variants with one side of a binary node spliced into its place,
  // iterated breadth-first for a few rounds so a wrapper and an inner
  // nuisance factor can fall away together. Fitted formulas often bury a
  // strong core under a redundant term, scale factor or exponent that
  // costs complexity budget, and the refit absorbs any sign or scale
  // change the deletion introduces.
  auto prune_variants = [&same_shape](const Expression& e) {
    std::vector<Expression> acc{e};
    std::vector<int> rounds{0};
    for (std::size_t s = 0; s < acc.size() && acc.size() < 33; ++s) {
      if (rounds[s] >= 3) continue;
      const Expression src = acc[s];
      const auto& nodes = src.nodes();
      for (int i = 0; i < src.node_count() && acc.size() < 33; ++i) {
        const Op op = nodes[static_cast<std::size_t>(i)].op;
        if (op != Op::Add && op != Op::Sub && op != Op::Mul && op != Op::Div &&
            op != Op::Pow) {
          continue;
        }
        const int left = i + 1;
        const int right = left + src.subtree_size(left);
        const int end = i + src.subtree_size(i);
        auto keep_only = [&](int keep_begin, int keep_end) {
          std::vector<ExprNode> v(nodes.begin(), nodes.begin() + i);
          v.insert(v.end(), nodes.begin() + keep_begin, nodes.begin() + keep_end);
          v.insert(v.end(), nodes.begin() + end, nodes.end());
          const bool grounded = std::any_of(v.begin(), v.end(), [](const ExprNode& n) {
            return n.op == Op::Var;
          });
          if (v.size() < 2 || !grounded) return;
          Expression cand(std::move(v));
          for (const Expression& prev : acc) {
            if (same_shape(prev, cand)) return;
          }
          acc.push_back(std::move(cand));
          rounds.push_back(rounds[s] + 1);
        };
        keep_only(right, end);
        keep_only(left, right);
      }
    }
    acc.erase(acc.begin());
    return acc;
  };

  struct Candidate {
    Expression expr;
    double pre_loss;
  };
  std::map<int, std::vector<Candidate>> pool;
  auto add_with_variants = [&](const Expression& expr, double pre_loss) {
    for (Expression& pruned : prune_variants(expr)) {
      pool[pruned.node_count()].push_back({std::move(pruned), pre_loss});
    }
    pool[expr.node_count()].push_back({expr, pre_loss});
  };
  for (const auto& island : islands) {
    for (const auto& [c, ind] : island.archive) {
      Expression s = simplify(ind.expr, evolver.guards());
      if (s.node_count() < c) add_with_variants(s, ind.loss);
      add_with_variants(ind.expr, ind.loss);
    }
  }
  constexpr int kShapesPerSlot = 28;
  std::vector<Candidate> candidates;
  std::vector<int> candidate_slot;
  for (auto& [c, entries] : pool) {
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Candidate& a, const Candidate& b) { return a.pre_loss < b.pre_loss; });
    int kept = 0;
    for (auto& cand : entries) {
      bool duplicate = false;
      for (std::size_t k = candidates.size(); k-- > 0 && candidate_slot[k] == c;) {
        if (same_shape(candidates[k].expr, cand.expr)) {
          duplicate = true;
          break;
        }
      }
      if (duplicate) continue;
      candidates.push_back(std::move(cand));
      candidate_slot.push_back(c);
      if (++kept >= kShapesPerSlot) break;
    }
  }

  std::vector<std::pair<std::vector<double>, double>> scanned(candidates.size());
  parallel_for_n(static_cast<int>(candidates.size()), threads, [&](int i) {
    const Expression& e = candidates[static_cast<std::size_t>(i)].expr;
    auto fit = adam_polish(e, e.slot_defaults(), XR, y, evolver.guards(), 120);
    auto refit = newton_polish(e, fit.first, XR, y, evolver.guards(), 30);
    scanned[static_cast<std::size_t>(i)] = refit.second < fit.second ? std::move(refit)
                                                                     : std::move(fit);
  });

  std::map<int, std::size_t> winner;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const int c = candidate_slot[i];
    auto it = winner.find(c);
    if (it == winner.end() || scanned[i].second < scanned[it->second].second) {
      winner.insert_or_assign(c, i);
    }
  }

  std::vector<std::pair<int, std::size_t>> winners(winner.begin(), winner.end());
  std::vector<ParetoEntry> refined(winners.size());
  parallel_for_n(static_cast<int>(winners.size()), threads, [&](int w) {
    const auto [c, i] = winners[static_cast<std::size_t>(w)];
    const Expression& shape = candidates[i].expr;
    auto [theta, loss] = optimize_constants_rm(
        shape, XR, y, config.constant_restarts,
        derive_seed(config.seed, 0xF8000 + static_cast<std::uint64_t>(c)), evolver.guards());
    if (scanned[i].second < loss) {
      theta = scanned[i].first;
      loss = scanned[i].second;
    }
    Expression expr = theta.empty() ? shape : shape.with_slot_defaults(theta);
    refined[static_cast<std::size_t>(w)] = {std::move(expr), std::move(theta), loss, c};
  });

  // Pruning pays off most once constants are well fitted, so run a second
  // pass over the polished winners: scan their pruned variants and let any
  // that beats a slot incumbent take the slot over.
  {
    std::vector<Candidate> extras;
    std::vector<int> extra_slot;
    for (const ParetoEntry& entry : refined) {
      if (entry.complexity > 16) continue;
      for (Expression& pruned : prune_variants(entry.expr)) {
        const int c = pruned.node_count();
        bool duplicate = false;
        for (std::size_t k = 0; k < extras.size(); ++k) {
          if (extra_slot[k] == c && same_shape(extras[k].expr, pruned)) {
            duplicate = true;
            break;
          }
        }
        if (duplicate) continue;
        extras.push_back({std::move(pruned), entry.loss});
        extra_slot.push_back(c);
      }
    }
    std::vector<std::pair<std::vector<double>, double>> extra_fit(extras.size());
    parallel_for_n(static_cast<int>(extras.size()), threads, [&](int i) {
      const Expression& e = extras[static_cast<std::size_t>(i)].expr;
      auto fit = adam_polish(e, e.slot_defaults(), XR, y, evolver.guards(), 120);
      auto refit = newton_polish(e, fit.first, XR, y, evolver.guards(), 30);
      extra_fit[static_cast<std::size_t>(i)] = refit.second < fit.second ? std::move(refit)
                                                                         : std::move(fit);
    });
    std::map<int, std::size_t> extra_best;
    for (std::size_t i = 0; i < extras.size(); ++i) {
      auto it = extra_best.find(extra_slot[i]);
      if (it == extra_best.end() || extra_fit[i].second < extra_fit[it->second].second) {
        extra_best.insert_or_assign(extra_slot[i], i);
      }
    }
    for (const auto& [c, i] : extra_best) {
      ParetoEntry* incumbent = nullptr;
      for (auto& entry : refined) {
        if (entry.complexity == c) incumbent = &entry;
      }
      if (incumbent && extra_fit[i].second >= incumbent->loss) continue;
      auto [theta, loss] = optimize_constants_rm(
          extras[i].expr, XR, y, config.constant_restarts,
          derive_seed(config.seed, 0xF9000 + static_cast<std::uint64_t>(c)), evolver.guards());
      if (extra_fit[i].second < loss) {
        theta = extra_fit[i].first;
        loss = extra_fit[i].second;
      }
      if (incumbent && loss >= incumbent->loss) continue;
      Expression expr = theta.empty() ? extras[i].expr
                                      : extras[i].expr.with_slot_defaults(theta);
      ParetoEntry entry{std::move(expr), std::move(theta), loss, c};
      if (incumbent) {
        *incumbent = std::move(entry);
      } else {
        refined.push_back(std::move(entry));
      }
    }
  }

  std::sort(refined.begin(), refined.end(), [](const ParetoEntry& a, const ParetoEntry& b) {
    if (a.complexity != b.complexity) return a.complexity < b.complexity;
    return a.loss < b.loss;
  });
  std::vector<ParetoEntry> front;
  for (auto& entry : refined) {
    if (front.empty() || entry.loss < front.back().loss - 1e-12) {
      front.push_back(std::move(entry));
    }
  }
  if (static_cast<int>(front.size()) > config.pareto_top_k) {
    // Keep the top_k entries by the selection score; order within the front
    // is preserved, so the dominance invariant survives truncation.
    std::vector<std::size_t> order(front.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return front[a].loss + 0.005 * front[a].complexity <
             front[b].loss + 0.005 * front[b].complexity;
    });
    order.resize(static_cast<std::size_t>(config.pareto_top_k));
    std::sort(order.begin(), order.end());
    std::vector<ParetoEntry> trimmed;
    trimmed.reserve(order.size());
    for (std::size_t i : order) trimmed.push_back(std::move(front[i]));
    front = std::move(trimmed);
  }

  if (stats) {
    stats->suggestions_attempted += shared.attempted.load();
    stats->suggestions_accepted += shared.accepted.load();
    stats->parse_failures += shared.parse_failures.load();
    stats->client_failures += shared.client_failures.load();
  }
  ParetoFront result;
  result.entries = std::move(front);
  return result;
}

ExpertLibrary build_expert_library(const Eigen::MatrixXd& X, const std::vector<int>& y,
                                   const std::vector<int>& cluster_labels,
                                   const std::vector<std::string>& feature_names,
                                   const SRConfig& config, SuggestionClient* client,
                                   SRStats* stats) {
  if (!cluster_labels.empty() && cluster_labels.size() != static_cast<std::size_t>(X.rows())) {
    throw InputError("cluster labels do not align with the data rows");
  }

  ExpertLibrary lib;
  lib.feature_names = feature_names;

  auto append_front = [&](const ParetoFront& front, const std::string& provenance) {
    const int knee = front.knee();
    for (std::size_t i = 0; i < front.entries.size(); ++i) {
      const ParetoEntry& e = front.entries[i];
      lib.experts.push_back(ExpertEntry{e.expr, e.expr.slot_defaults(), 1.0, 0.0, provenance,
                                        e.loss, e.complexity,
                                        static_cast<int>(i) == knee});
    }
  };

  append_front(sr_fit(X, y, feature_names, config, client, stats), "GLOBAL");

  int max_label = -1;
  for (int label : cluster_labels) max_label = std::max(max_label, label);
  for (int c = 0; c <= max_label; ++c) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < cluster_labels.size(); ++i) {
      if (cluster_labels[i] == c) idx.push_back(static_cast<int>(i));
    }
    long positives = 0;
    for (int i : idx) positives += y[static_cast<std::size_t>(i)];
    if (idx.size() < 10 || positives == 0 || positives == static_cast<long>(idx.size())) {
      lib.warnings.push_back("cluster " + std::to_string(c) +
                             " skipped (too few rows or single class); global expert serves it");
      continue;
    }
    Eigen::MatrixXd Xc(static_cast<Eigen::Index>(idx.size()), X.cols());
    std::vector<int> yc(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Xc.row(static_cast<Eigen::Index>(i)) = X.row(idx[i]);
      yc[i] = y[static_cast<std::size_t>(idx[i])];
    }
    SRConfig sub = config;
    sub.seed = derive_seed(config.seed, 0xC1000 + static_cast<std::uint64_t>(c));
    append_front(sr_fit(Xc, yc, feature_names, sub, client, stats),
                 "cluster:" + std::to_string(c));
  }
  return lib;
}

}  // namespace pasm
