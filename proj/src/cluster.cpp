#include "pasm/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "pasm/errors.hpp"
#include "pasm/metrics.hpp"
#include "pasm/rng.hpp"

namespace pasm {

namespace {

constexpr double kLambdaDistFloor = 1e-12;

struct Standardized {
  std::vector<int> kept;
  std::vector<double> means, stds;
  Eigen::MatrixXd Z;
};

Standardized standardize(const Eigen::MatrixXd& X, std::vector<std::string>* warnings) {
  const Eigen::Index n = X.rows(), d = X.cols();
  Standardized out;
  for (Eigen::Index j = 0; j < d; ++j) {
    const double mean = X.col(j).mean();
    const double var = (X.col(j).array() - mean).square().sum() / static_cast<double>(n);
    const double sd = std::sqrt(var);
    if (sd > 0.0) {
      out.kept.push_back(static_cast<int>(j));
      out.means.push_back(mean);
      out.stds.push_back(sd);
    } else if (warnings) {
      warnings->push_back("dropping constant feature column " + std::to_string(j));
    }
  }
  if (out.kept.empty()) throw InputError("every feature is constant; nothing to cluster");
  out.Z.resize(n, static_cast<Eigen::Index>(out.kept.size()));
  for (std::size_t j = 0; j < out.kept.size(); ++j) {
    out.Z.col(static_cast<Eigen::Index>(j)) =
        (X.col(out.kept[j]).array() - out.means[j]) / out.stds[j];
  }
  return out;
}

// Principal directions with a deterministic sign: the largest-magnitude
// loading of each column is made positive.
Eigen::MatrixXd principal_basis(const Eigen::MatrixXd& Z, int e) {
  const Eigen::Index d = Z.cols();
  const Eigen::MatrixXd cov =
      Z.transpose() * Z / std::max(1.0, static_cast<double>(Z.rows() - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  const int keep = std::min<int>(e, static_cast<int>(d));
  Eigen::MatrixXd basis(d, keep);
  for (int c = 0; c < keep; ++c) {
    Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - c);  // descending variance
    Eigen::Index imax;
    v.cwiseAbs().maxCoeff(&imax);
    if (v(imax) < 0.0) v = -v;
    basis.col(c) = v;
  }
  return basis;
}

Eigen::MatrixXd load_embedding_csv(const std::string& path, Eigen::Index n_expected) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open embedding file '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw InputError("ragged embedding file '" + path + "'");
    }
    rows.push_back(std::move(row));
  }
  if (static_cast<Eigen::Index>(rows.size()) != n_expected) {
    throw InputError("embedding row count does not match the dataset");
  }
  Eigen::MatrixXd E(n_expected, static_cast<Eigen::Index>(rows.front().size()));
  for (Eigen::Index i = 0; i < E.rows(); ++i) {
    for (Eigen::Index j = 0; j < E.cols(); ++j) {
      E(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
  }
  return E;
}

// Distance to the k-th nearest other point, per point.
std::vector<double> core_distances(const Eigen::MatrixXd& E, int k) {
  const Eigen::Index n = E.rows();
  std::vector<double> core(static_cast<std::size_t>(n), 0.0);
  std::vector<double> dists;
  for (Eigen::Index i = 0; i < n; ++i) {
    dists.clear();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) dists.push_back((E.row(i) - E.row(j)).norm());
    }
    const std::size_t kth = std::min<std::size_t>(static_cast<std::size_t>(k), dists.size()) - 1;
    std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(kth), dists.end());
    core[static_cast<std::size_t>(i)] = dists[kth];
  }
  return core;
}

struct MstEdge {
  int a, b;
  double w;
};

// Prim over the dense mutual-reachability graph.
std::vector<MstEdge> reachability_mst(const Eigen::MatrixXd& E, const std::vector<double>& core) {
  const int n = static_cast<int>(E.rows());
  std::vector<bool> in_tree(static_cast<std::size_t>(n), false);
  std::vector<double> best(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<int> from(static_cast<std::size_t>(n), 0);
  std::vector<MstEdge> edges;
  edges.reserve(static_cast<std::size_t>(n - 1));
  in_tree[0] = true;
  int current = 0;
  for (int added = 1; added < n; ++added) {
    for (int j = 0; j < n; ++j) {
      if (in_tree[static_cast<std::size_t>(j)]) continue;
      const double dist = (E.row(current) - E.row(j)).norm();
      const double mr = std::max({core[static_cast<std::size_t>(current)],
                                  core[static_cast<std::size_t>(j)], dist});
      if (mr < best[static_cast<std::size_t>(j)]) {
        best[static_cast<std::size_t>(j)] = mr;
        from[static_cast<std::size_t>(j)] = current;
      }
    }
    int next = -1;
    double next_w = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      if (!in_tree[static_cast<std::size_t>(j)] && best[static_cast<std::size_t>(j)] < next_w) {
        next_w = best[static_cast<std::size_t>(j)];
        next = j;
      }
    }
    edges.push_back({from[static_cast<std::size_t>(next)], next, next_w});
    in_tree[static_cast<std::size_t>(next)] = true;
    current = next;
  }
  return edges;
}

struct Dendrogram {
  // Internal node i (id n + i) merges children[i] at height dist[i].
  std::vector<int> left, right;
  std::vector<double> dist;
  std::vector<int> size;
};

Dendrogram single_linkage(std::vector<MstEdge> edges, int n) {
  std::sort(edges.begin(), edges.end(), [](const MstEdge& x, const MstEdge& y) {
    if (x.w != y.w) return x.w < y.w;
    if (x.a != y.a) return x.a < y.a;
    return x.b < y.b;
  });
  std::vector<int> parent(static_cast<std::size_t>(2 * n - 1));
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int v) {
    while (parent[static_cast<std::size_t>(v)] != v) {
      parent[static_cast<std::size_t>(v)] =
          parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(v)])];
      v = parent[static_cast<std::size_t>(v)];
    }
    return v;
  };
  Dendrogram d;
  d.left.reserve(static_cast<std::size_t>(n - 1));
  std::vector<int> comp_size(static_cast<std::size_t>(2 * n - 1), 1);
  int next_id = n;
  for (const MstEdge& e : edges) {
    const int ra = find(e.a), rb = find(e.b);
    d.left.push_back(ra);
    d.right.push_back(rb);
    d.dist.push_back(e.w);
    d.size.push_back(comp_size[static_cast<std::size_t>(ra)] +
                     comp_size[static_cast<std::size_t>(rb)]);
    comp_size[static_cast<std::size_t>(next_id)] = d.size.back();
    parent[static_cast<std::size_t>(ra)] = next_id;
    parent[static_cast<std::size_t>(rb)] = next_id;
    ++next_id;
  }
  return d;
}

struct CondensedCluster {
  int parent = -1;
  double birth_lambda = 0.0;
  std::vector<std::pair<int, double>> fallouts;  // (point, exit lambda)
  std::vector<int> children;                     // child cluster ids
  std::vector<double> child_lambda;
  std::vector<int> child_size;
  double stability = 0.0;
};

void collect_points(const Dendrogram& d, int n, int node, std::vector<int>* out) {
  if (node < n) {
    out->push_back(node);
    return;
  }
  const int i = node - n;
  collect_points(d, n, d.left[static_cast<std::size_t>(i)], out);
  collect_points(d, n, d.right[static_cast<std::size_t>(i)], out);
}

std::vector<CondensedCluster> condense(const Dendrogram& d, int n, int min_cluster_size) {
  std::vector<CondensedCluster> clusters(1);  // root cluster id 0, birth 0
  if (n <= 1) return clusters;

  struct Item {
    int node;     // dendrogram id (internal)
    int cluster;  // condensed cluster id carrying this subtree
  };
  std::vector<Item> stack{{2 * n - 2, 0}};
  auto node_size = [&](int node) {
    return node < n ? 1 : d.size[static_cast<std::size_t>(node - n)];
  };

  while (!stack.empty()) {
    const Item item = stack.back();
    stack.pop_back();
    const int i = item.node - n;
    const double lambda =
        1.0 / std::max(d.dist[static_cast<std::size_t>(i)], kLambdaDistFloor);
    const int left = d.left[static_cast<std::size_t>(i)];
    const int right = d.right[static_cast<std::size_t>(i)];
    const int ls = node_size(left), rs = node_size(right);

    auto drop_points = [&](int node) {
      std::vector<int> pts;
      collect_points(d, n, node, &pts);
      for (int p : pts) clusters[static_cast<std::size_t>(item.cluster)].fallouts.push_back({p, lambda});
    };
    auto spawn = [&](int node, int size) {
      const int id = static_cast<int>(clusters.size());
      clusters.push_back({});
      clusters.back().parent = item.cluster;
      clusters.back().birth_lambda = lambda;
      clusters[static_cast<std::size_t>(item.cluster)].children.push_back(id);
      clusters[static_cast<std::size_t>(item.cluster)].child_lambda.push_back(lambda);
      clusters[static_cast<std::size_t>(item.cluster)].child_size.push_back(size);
      if (node < n) {
        clusters[static_cast<std::size_t>(id)].fallouts.push_back(
            {node, std::numeric_limits<double>::infinity()});
      } else {
        stack.push_back({node, id});
      }
      return id;
    };

    if (ls >= min_cluster_size && rs >= min_cluster_size) {
      spawn(left, ls);
      spawn(right, rs);
    } else if (ls >= min_cluster_size) {
      drop_points(right);
      if (left < n) {
        drop_points(left);
      } else {
        stack.push_back({left, item.cluster});
      }
    } else if (rs >= min_cluster_size) {
      drop_points(left);
      if (right < n) {
        drop_points(right);
      } else {
        stack.push_back({right, item.cluster});
      }
    } else {
      drop_points(left);
      drop_points(right);
    }
  }

  for (auto& c : clusters) {
    double s = 0.0;
    for (const auto& [p, lambda] : c.fallouts) {
      if (std::isfinite(lambda)) s += lambda - c.birth_lambda;
    }
    for (std::size_t k = 0; k < c.children.size(); ++k) {
      s += static_cast<double>(c.child_size[k]) * (c.child_lambda[k] - c.birth_lambda);
    }
    c.stability = s;
  }
  return clusters;
}

// Excess-of-mass selection over the condensed tree. The root competes for
// mass like any cluster but is never selectable itself, so a dataset whose
// root outweighs every split (one diffuse blob) selects nothing and falls
// through to the caller's fallback.
std::vector<bool> select_eom(std::vector<CondensedCluster>& clusters) {
  const int m = static_cast<int>(clusters.size());
  std::vector<bool> selected(static_cast<std::size_t>(m), false);
  std::vector<double> subtree(static_cast<std::size_t>(m), 0.0);
  std::function<void(int)> deselect_below = [&](int c) {
    for (int ch : clusters[static_cast<std::size_t>(c)].children) {
      selected[static_cast<std::size_t>(ch)] = false;
      deselect_below(ch);
    }
  };
  for (int c = m - 1; c >= 1; --c) {
    const auto& cl = clusters[static_cast<std::size_t>(c)];
    double child_sum = 0.0;
    for (int ch : cl.children) child_sum += subtree[static_cast<std::size_t>(ch)];
    if (cl.children.empty() || cl.stability >= child_sum) {
      selected[static_cast<std::size_t>(c)] = true;
      deselect_below(c);
      subtree[static_cast<std::size_t>(c)] = std::max(cl.stability, child_sum);
    } else {
      subtree[static_cast<std::size_t>(c)] = child_sum;
    }
  }
  if (m > 1) {
    double root_children = 0.0;
    for (int ch : clusters[0].children) root_children += subtree[static_cast<std::size_t>(ch)];
    if (clusters[0].stability > root_children) deselect_below(0);
  }
  return selected;
}

std::vector<int> label_points(const std::vector<CondensedCluster>& clusters,
                              const std::vector<bool>& selected, int n, int* k_out) {
  std::map<int, int> relabel;  // selected cluster id -> flat label, creation order
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    if (selected[c]) relabel[static_cast<int>(c)] = static_cast<int>(relabel.size());
  }
  std::vector<int> labels(static_cast<std::size_t>(n), kNoiseLabel);
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    for (const auto& [p, lambda] : clusters[c].fallouts) {
      int walk = static_cast<int>(c);
      int label = kNoiseLabel;
      while (walk >= 0) {
        auto it = relabel.find(walk);
        if (it != relabel.end()) {
          label = it->second;
          break;
        }
        walk = clusters[static_cast<std::size_t>(walk)].parent;
      }
      labels[static_cast<std::size_t>(p)] = label;
    }
  }
  *k_out = static_cast<int>(relabel.size());
  return labels;
}

std::vector<int> run_density_clustering(const Eigen::MatrixXd& E, int min_cluster_size,
                                        int min_samples, int* k_out) {
  const int n = static_cast<int>(E.rows());
  const std::vector<double> core = core_distances(E, min_samples);
  const std::vector<MstEdge> mst = reachability_mst(E, core);
  const Dendrogram dendro = single_linkage(mst, n);
  std::vector<CondensedCluster> clusters = condense(dendro, n, min_cluster_size);
  const std::vector<bool> selected = select_eom(clusters);
  return label_points(clusters, selected, n, k_out);
}

}  // namespace

ClusterModel fit_predict(const Eigen::MatrixXd& X, const ClusterParams& params) {
  if (params.min_cluster_size < 2 || params.min_samples < 1 || params.embed_dim < 1) {
    throw InputError("invalid clustering parameters");
  }
  if (X.rows() < 2 * params.min_cluster_size) {
    throw InputError("need at least " + std::to_string(2 * params.min_cluster_size) +
                     " rows to cluster");
  }

  ClusterModel model;
  model.params = params;
  Standardized std_x = standardize(X, &model.warnings);
  model.kept_features = std_x.kept;
  model.means = std_x.means;
  model.stds = std_x.stds;

  if (!params.embedding_csv.empty()) {
    model.embedding = load_embedding_csv(params.embedding_csv, X.rows());
    model.basis.resize(0, 0);
  } else {
    model.basis = principal_basis(std_x.Z, params.embed_dim);
    model.embedding = std_x.Z * model.basis;
  }

  int k = 0;
  model.assignments =
      run_density_clustering(model.embedding, params.min_cluster_size, params.min_samples, &k);
  if (k == 0) {
    // Everything fell to noise: retry once at half the cluster size, then
    // degrade to one all-points cluster.
    const int halved = std::max(2, params.min_cluster_size / 2);
    model.warnings.push_back("no cluster survived selection; retrying with min_cluster_size " +
                             std::to_string(halved));
    model.assignments =
        run_density_clustering(model.embedding, halved, params.min_samples, &k);
    if (k == 0) {
      model.warnings.push_back("fallback to a single cluster");
      std::fill(model.assignments.begin(), model.assignments.end(), 0);
      model.fallback_single_cluster = true;
      k = 1;
    }
  }
  model.k = k;
  model.noise_fraction =
      static_cast<double>(std::count(model.assignments.begin(), model.assignments.end(),
                                     kNoiseLabel)) /
      static_cast<double>(X.rows());
  return model;
}

int assign(const ClusterModel& model, std::span<const double> x) {
  if (model.assignments.empty()) throw InputError("cluster model is not fitted");
  Eigen::RowVectorXd z(static_cast<Eigen::Index>(model.kept_features.size()));
  for (std::size_t j = 0; j < model.kept_features.size(); ++j) {
    const std::size_t col = static_cast<std::size_t>(model.kept_features[j]);
    if (col >= x.size()) throw InputError("input narrower than the fitted feature space");
    z(static_cast<Eigen::Index>(j)) = (x[col] - model.means[j]) / model.stds[j];
  }
  Eigen::RowVectorXd q;
  if (model.basis.size() > 0) {
    q = z * model.basis;
  } else {
    // Precomputed-embedding models fall back to 1-NN in standardized
    // feature space; exemplar coordinates are not reconstructible.
    throw InputError("assign requires a computed embedding basis");
  }

  int best_label = kNoiseLabel;
  double best_dist = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < model.embedding.rows(); ++i) {
    const int label = model.assignments[static_cast<std::size_t>(i)];
    if (label == kNoiseLabel) continue;
    const double dist = (model.embedding.row(i) - q).norm();
    if (dist < best_dist || (dist == best_dist && label < best_label)) {
      best_dist = dist;
      best_label = label;
    }
  }
  return best_label;
}

StabilityReport stability(const Eigen::MatrixXd& X, const ClusterParams& params, int runs,
                          Perturbation mode) {
  if (runs < 2) throw InputError("stability needs at least 2 runs");
  const int n = static_cast<int>(X.rows());

  std::vector<std::vector<int>> labels_by_run;   // full-length, -2 marks unsampled
  std::vector<int> k_by_run;
  double noise_sum = 0.0;
  for (int r = 0; r < runs; ++r) {
    ClusterParams p = params;
    p.seed = derive_seed(params.seed, static_cast<std::uint64_t>(r));
    std::vector<int> row_map(static_cast<std::size_t>(n));
    std::iota(row_map.begin(), row_map.end(), 0);
    Eigen::MatrixXd Xr = X;
    if (mode == Perturbation::Resample) {
      auto rng = make_rng(p.seed, 77);
      std::shuffle(row_map.begin(), row_map.end(), rng);
      row_map.resize(static_cast<std::size_t>(std::floor(0.85 * n)));
      std::sort(row_map.begin(), row_map.end());
      Xr.resize(static_cast<Eigen::Index>(row_map.size()), X.cols());
      for (std::size_t i = 0; i < row_map.size(); ++i) {
        Xr.row(static_cast<Eigen::Index>(i)) = X.row(row_map[i]);
      }
    }
    const ClusterModel m = fit_predict(Xr, p);
    std::vector<int> full(static_cast<std::size_t>(n), -2);
    for (std::size_t i = 0; i < row_map.size(); ++i) {
      full[static_cast<std::size_t>(row_map[i])] = m.assignments[i];
    }
    labels_by_run.push_back(std::move(full));
    k_by_run.push_back(m.k);
    noise_sum += m.noise_fraction;
  }

  double ari_sum = 0.0, nmi_sum = 0.0, jac_sum = 0.0;
  int pairs = 0;
  for (int r = 0; r < runs; ++r) {
    for (int s = r + 1; s < runs; ++s) {
      std::vector<int> a, b;
      for (int i = 0; i < n; ++i) {
        if (labels_by_run[static_cast<std::size_t>(r)][static_cast<std::size_t>(i)] != -2 &&
            labels_by_run[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)] != -2) {
          a.push_back(labels_by_run[static_cast<std::size_t>(r)][static_cast<std::size_t>(i)]);
          b.push_back(labels_by_run[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)]);
        }
      }
      ari_sum += adjusted_rand_index(a, b);
      nmi_sum += normalized_mutual_info(a, b);
      jac_sum += co_clustering_jaccard(a, b);
      ++pairs;
    }
  }

  std::map<int, int> k_counts;
  for (int k : k_by_run) ++k_counts[k];
  int mode_k = k_by_run.front(), mode_count = 0;
  for (const auto& [k, count] : k_counts) {
    if (count > mode_count) {
      mode_count = count;
      mode_k = k;
    }
  }

  StabilityReport report;
  report.ari = ari_sum / pairs;
  report.nmi = nmi_sum / pairs;
  report.co_jaccard = jac_sum / pairs;
  report.cluster_count_mode = mode_k;
  report.noise_fraction = noise_sum / runs;
  report.runs = runs;
  return report;
}

}  // namespace pasm
