#include "arbor/structure.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "arbor/parallel.hpp"

namespace arbor {

namespace {

constexpr double kCorrCap = 1.0 - 1e-12;

int index_of(const std::vector<int>& sorted, int v) {
  auto it = std::lower_bound(sorted.begin(), sorted.end(), v);
  if (it == sorted.end() || *it != v)
    throw DataError("vertex " + std::to_string(v) + " not present");
  return static_cast<int>(it - sorted.begin());
}

}  // namespace

// ---------------------------------------------------------------------------
// Chow-Liu
// ---------------------------------------------------------------------------

void WeightedGraph::validate() const {
  if (w.rows() != w.cols() || w.rows() != m) throw DataError("weight matrix must be m x m");
  for (int i = 0; i < m; ++i) {
    if (w(i, i) != 0.0) throw DataError("weight matrix must have zero diagonal");
    for (int j = i + 1; j < m; ++j) {
      if (w(i, j) != w(j, i)) throw DataError("weights must be symmetric");
      if (!std::isfinite(w(i, j))) throw DataError("weights must be finite");
    }
  }
}

SpanningTree max_weight_spanning_tree(const Eigen::MatrixXd& w) {
  const int n = static_cast<int>(w.rows());
  if (n < 2) throw DataError("spanning tree needs at least two vertices");
  struct Cand {
    double w;
    int i, j;
  };
  std::vector<Cand> cand;
  cand.reserve(n * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) cand.push_back({w(i, j), i, j});
  std::sort(cand.begin(), cand.end(), [](const Cand& a, const Cand& b) {
    if (a.w != b.w) return a.w > b.w;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  const auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  SpanningTree out;
  out.n = n;
  for (const Cand& c : cand) {
    const int a = find(c.i), b = find(c.j);
    if (a == b) continue;
    parent[a] = b;
    out.edges.emplace_back(c.i, c.j);
    out.total_weight += c.w;
    if (static_cast<int>(out.edges.size()) == n - 1) break;
  }
  if (static_cast<int>(out.edges.size()) != n - 1)
    throw NumericalError("weight matrix does not span the vertex set");
  std::sort(out.edges.begin(), out.edges.end());
  return out;
}

SpanningTree chow_liu(const WeightedGraph& w) {
  w.validate();
  if (w.m < 2) throw DataError("Chow-Liu needs at least two variables");
  SpanningTree st = max_weight_spanning_tree(w.w);
  for (Edge& e : st.edges) e = Edge(e.u + 1, e.v + 1);  // 1-based variable ids
  std::sort(st.edges.begin(), st.edges.end());
  return st;
}

namespace {

double table_mutual_information(const Eigen::MatrixXd& joint) {
  const Eigen::VectorXd pi = joint.rowwise().sum();
  const Eigen::VectorXd pj = joint.colwise().sum().transpose();
  double mi = 0;
  for (int a = 0; a < joint.rows(); ++a)
    for (int b = 0; b < joint.cols(); ++b)
      if (joint(a, b) > 0.0) mi += joint(a, b) * std::log(joint(a, b) / (pi(a) * pj(b)));
  return std::max(mi, 0.0);
}

double gaussian_mi_weight(double r) {
  const double r2 = std::min(r * r, kCorrCap);
  return -0.5 * std::log1p(-r2);
}

}  // namespace

WeightedGraph mutual_information_weights(const Dataset& data, SecondOrderKind kind) {
  data.validate();
  if (data.n() < 2) throw DataError("need at least two rows");
  const int m = data.observed_count();
  WeightedGraph g;
  g.m = m;
  g.w = Eigen::MatrixXd::Zero(m, m);
  if (kind == SecondOrderKind::gaussian_correlation) {
    const EmpiricalSecondOrder s = empirical_second_order(data, kind);
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j) g.w(i, j) = g.w(j, i) = gaussian_mi_weight(s.values(i, j));
    return g;
  }
  if (data.kind != Dataset::Kind::discrete) throw DataError("markov-tau needs discrete data");
  const int d = data.d;
  const long n = data.n();
  for (int i = 0; i < m; ++i) {
    std::set<int> seen;
    for (long r = 0; r < n; ++r) seen.insert(data.state(r, i));
    if (seen.size() < 2) throw DataError("constant column x" + std::to_string(i + 1));
  }
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      Eigen::MatrixXd table = Eigen::MatrixXd::Zero(d, d);
      for (long r = 0; r < n; ++r) table(data.state(r, i), data.state(r, j)) += 1.0 / n;
      g.w(i, j) = g.w(j, i) = table_mutual_information(table);
    }
  return g;
}

// ---------------------------------------------------------------------------
// EM on a fixed tree
// ---------------------------------------------------------------------------

namespace {

std::vector<int> dataset_row(const Dataset& data, long r, int m) {
  std::vector<int> row(m);
  for (int i = 0; i < m; ++i) row[i] = data.state(r, i);
  return row;
}

double row_weight(const EmOptions& opts, long r) {
  return opts.row_weights ? (*opts.row_weights)[r] : 1.0;
}

void check_weights(const EmOptions& opts, const Dataset& data) {
  if (opts.row_weights && static_cast<long>(opts.row_weights->size()) != data.n())
    throw DataError("row weight vector does not match the dataset");
}

// ----- discrete -----

struct DiscreteStats {
  Eigen::VectorXd root;
  std::vector<Eigen::MatrixXd> edges;  // per non-root topo position, rows = parent
  double loglik = 0;
  double wsum = 0;
  long bad_row = -1;
};

DiscreteStats discrete_estep(const SumProduct& sp, const Dataset& data, const EmOptions& opts) {
  const MarkovParams& p = sp.params();
  const int m = p.tree.leaf_count();
  const int d = p.d;
  const std::size_t nv = sp.order().size();

  DiscreteStats zero;
  zero.root = Eigen::VectorXd::Zero(d);
  zero.edges.assign(nv, Eigen::MatrixXd::Zero(d, d));

  DiscreteStats total = chunked_reduce<DiscreteStats>(
      data.n(), zero,
      [&](DiscreteStats& acc, std::size_t r) {
        if (acc.bad_row >= 0) return;
        const double w = row_weight(opts, static_cast<long>(r));
        const SumProduct::Result res = sp.posteriors(dataset_row(data, r, m));
        if (res.zero) {
          acc.bad_row = static_cast<long>(r);
          return;
        }
        acc.root += w * res.vertex_posterior[0];
        for (std::size_t c = 1; c < nv; ++c) acc.edges[c] += w * res.edge_posterior[c];
        acc.loglik += w * res.loglik;
        acc.wsum += w;
      },
      [](DiscreteStats& a, const DiscreteStats& b) {
        if (b.bad_row >= 0 && (a.bad_row < 0 || b.bad_row < a.bad_row)) a.bad_row = b.bad_row;
        a.root += b.root;
        for (std::size_t c = 0; c < a.edges.size(); ++c) a.edges[c] += b.edges[c];
        a.loglik += b.loglik;
        a.wsum += b.wsum;
      });
  if (total.bad_row >= 0)
    throw DataError("row " + std::to_string(total.bad_row) +
                    " has probability zero under the current parameters");
  return total;
}

MarkovParams discrete_mstep(const SumProduct& sp, const DiscreteStats& s, double pc) {
  const MarkovParams& p = sp.params();
  const int d = p.d;
  MarkovParams out;
  out.tree = p.tree;
  out.d = d;
  out.root_dist = ((s.root.array() + pc) / (s.root.sum() + pc * d)).matrix();
  for (std::size_t c = 1; c < sp.order().size(); ++c) {
    const int v = sp.order()[c];
    const int u = sp.order()[sp.parent_at(static_cast<int>(c))];
    const Eigen::MatrixXd& counts = s.edges[c];
    Eigen::MatrixXd M(d, d);
    for (int a = 0; a < d; ++a) {
      const double rs = counts.row(a).sum() + pc * d;
      if (rs > 0.0)
        M.row(a) = ((counts.row(a).array() + pc) / rs).matrix();
      else
        M.row(a) = p.transition(Edge(u, v)).row(a);  // no mass: keep the old row
    }
    out.transitions[Edge(u, v)] = std::move(M);
  }
  return out;
}

// ----- Gaussian -----

struct GaussianStats {
  Eigen::MatrixXd too, toh, thh;  // standardized second moments by block
  double loglik = 0;
  double wsum = 0;
};

GaussianStats gaussian_estep(const GaussianConditioner& cond, const GaussianLeafDensity& den,
                             const Dataset& data, const EmOptions& opts) {
  const int m = static_cast<int>(data.observed_count());
  const int h = static_cast<int>(cond.hidden().size());
  GaussianStats zero;
  zero.too = Eigen::MatrixXd::Zero(m, m);
  zero.toh = Eigen::MatrixXd::Zero(m, h);
  zero.thh = Eigen::MatrixXd::Zero(h, h);

  GaussianStats total = chunked_reduce<GaussianStats>(
      data.n(), zero,
      [&](GaussianStats& acc, std::size_t r) {
        const double w = row_weight(opts, static_cast<long>(r));
        const Eigen::VectorXd x = data.values.row(r).head(m).transpose();
        const Eigen::VectorXd y = cond.standardize(x);
        const Eigen::VectorXd mu = cond.gain() * y;
        acc.too += w * y * y.transpose();
        acc.toh += w * y * mu.transpose();
        acc.thh += w * mu * mu.transpose();
        acc.loglik += w * den.row_loglik(x);
        acc.wsum += w;
      },
      [](GaussianStats& a, const GaussianStats& b) {
        a.too += b.too;
        a.toh += b.toh;
        a.thh += b.thh;
        a.loglik += b.loglik;
        a.wsum += b.wsum;
      });
  total.thh += total.wsum * cond.posterior_cov();
  return total;
}

// Full standardized second-moment matrix in ascending vertex order.
Eigen::MatrixXd assemble_full_moments(const GaussianStats& s) {
  const int m = static_cast<int>(s.too.rows());
  const int h = static_cast<int>(s.thh.rows());
  Eigen::MatrixXd T(m + h, m + h);
  T.topLeftCorner(m, m) = s.too;
  T.topRightCorner(m, h) = s.toh;
  T.bottomLeftCorner(h, m) = s.toh.transpose();
  T.bottomRightCorner(h, h) = s.thh;
  return T / s.wsum;
}

GaussianParams gaussian_mstep(const GaussianParams& p, const GaussianStats& s) {
  const Eigen::MatrixXd T = assemble_full_moments(s);
  const std::vector<int>& verts = p.tree.vertices();
  GaussianParams out;
  out.tree = p.tree;
  for (const Edge& e : p.tree.edges()) {
    const int iu = index_of(verts, e.u);
    const int iv = index_of(verts, e.v);
    const double rho = T(iu, iv) / std::sqrt(T(iu, iu) * T(iv, iv));
    out.edge_corr[e] = std::clamp(rho, -kCorrCap, kCorrCap);
  }
  for (int i = 1; i <= p.tree.leaf_count(); ++i)
    out.leaf_var[i] = p.leaf_var.at(i) * T(i - 1, i - 1);
  return out;
}

// ----- shared driver -----

struct EmRun {
  AnyParams params;
  std::vector<double> trace;
};

EmRun run_em(AnyParams params, const Dataset& data, const EmOptions& opts, int max_iter) {
  check_weights(opts, data);
  EmRun run{std::move(params), {}};
  for (int it = 0;; ++it) {
    double ll;
    if (const auto* g = std::get_if<GaussianParams>(&run.params)) {
      const GaussianConditioner cond(*g);
      const GaussianLeafDensity den(*g);
      const GaussianStats stats = gaussian_estep(cond, den, data, opts);
      ll = stats.loglik;
      run.trace.push_back(ll);
      if (it == max_iter) break;
      if (it > 0 && ll - run.trace[it - 1] < opts.tol * (1.0 + std::abs(ll))) break;
      run.params = gaussian_mstep(*g, stats);
    } else {
      const SumProduct sp(std::get<MarkovParams>(run.params));
      const DiscreteStats stats = discrete_estep(sp, data, opts);
      ll = stats.loglik;
      run.trace.push_back(ll);
      if (it == max_iter) break;
      if (it > 0 && ll - run.trace[it - 1] < opts.tol * (1.0 + std::abs(ll))) break;
      run.params = discrete_mstep(sp, stats, opts.pseudocount);
    }
  }
  return run;
}

std::map<int, double> data_leaf_variances(const Dataset& data) {
  std::map<int, double> var;
  const int m = data.observed_count();
  for (int i = 0; i < m; ++i) {
    const double v = data.values.col(i).squaredNorm() / data.n();
    var[i + 1] = std::max(v, 1e-12);
  }
  return var;
}

AnyParams random_params_like(const AnyParams& init, const Dataset& data,
                             const LeafLabeledTree& t, Rng& rng) {
  if (std::holds_alternative<GaussianParams>(init))
    return random_gaussian_params(t, data_leaf_variances(data), rng);
  return random_markov_params(t, std::get<MarkovParams>(init).d, rng);
}

}  // namespace

GaussianParams random_gaussian_params(const LeafLabeledTree& t,
                                      const std::map<int, double>& leaf_var, Rng& rng) {
  std::uniform_real_distribution<double> unif(-0.9, 0.9);
  GaussianParams p;
  p.tree = t;
  for (const Edge& e : t.edges()) p.edge_corr[e] = unif(rng);
  for (int i = 1; i <= t.leaf_count(); ++i) {
    auto it = leaf_var.find(i);
    p.leaf_var[i] = it != leaf_var.end() ? it->second : 1.0;
  }
  p.validate();
  return p;
}

MarkovParams random_markov_params(const LeafLabeledTree& t, int d, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const auto dirichlet_row = [&](int k) {
    Eigen::VectorXd v(k);
    for (int i = 0; i < k; ++i) v(i) = -std::log(1.0 - unif(rng));
    return (v / v.sum()).eval();
  };
  MarkovParams p;
  p.tree = t.root() ? t : t.with_root(canonical_root(t));
  p.d = d;
  p.root_dist = dirichlet_row(d);
  for (const Edge& e : t.edges()) {
    Eigen::MatrixXd M(d, d);
    for (int a = 0; a < d; ++a) M.row(a) = dirichlet_row(d).transpose();
    p.transitions[e] = std::move(M);
  }
  p.validate();
  return p;
}

ScoredModel em_fixed_tree(const LeafLabeledTree& t, const Dataset& data, const AnyParams& init,
                          const EmOptions& opts) {
  std::visit(
      [&](const auto& q) {
        if (q.tree.vertices() != t.vertices() || q.tree.edges() != t.edges())
          throw DataError("init parameters do not live on the given tree");
      },
      init);
  if (opts.restarts < 1) throw DataError("restarts must be at least 1");
  EmRun best;
  int best_r = -1;
  for (int r = 0; r < opts.restarts; ++r) {
    Rng rng = make_rng(opts.seed, "em-restart", static_cast<std::uint64_t>(r));
    AnyParams start = r == 0 ? init : random_params_like(init, data, t, rng);
    EmRun run = run_em(std::move(start), data, opts, opts.max_iter);
    if (best_r < 0 || run.trace.back() > best.trace.back()) {
      best = std::move(run);
      best_r = r;
    }
  }
  ScoredModel out = bic_score(best.params, data);
  out.trace = std::move(best.trace);
  out.loglik = out.trace.back();
  out.bic = out.loglik - 0.5 * out.dim * (data.n() > 0 ? std::log(data.n()) : 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// Tree surgery
// ---------------------------------------------------------------------------

namespace {

struct SurgeryGraph {
  std::set<int> verts;
  std::set<Edge> edges;
  std::map<int, int> observed;  // vertex -> label
  int next_id;

  std::map<int, std::vector<int>> adjacency() const {
    std::map<int, std::vector<int>> adj;
    for (int v : verts) adj[v];
    for (const Edge& e : edges) {
      adj[e.u].push_back(e.v);
      adj[e.v].push_back(e.u);
    }
    for (auto& [v, nb] : adj) std::sort(nb.begin(), nb.end());
    return adj;
  }
  bool hidden(int v) const { return !observed.count(v); }
};

SurgeryGraph make_surgery_graph(const MarkedTree& t) {
  if (t.observed.empty()) throw DataError("surgery input has no observed variables");
  SurgeryGraph g;
  g.verts.insert(t.vertices.begin(), t.vertices.end());
  g.edges.insert(t.edges.begin(), t.edges.end());
  for (const auto& [v, label] : t.observed) {
    if (!g.verts.count(v)) throw DataError("observed vertex not in tree");
    if (label < 1) throw DataError("labels must be positive");
  }
  std::set<int> labels;
  for (const auto& [v, label] : t.observed)
    if (!labels.insert(label).second) throw DataError("duplicate observed label");
  if (g.edges.size() + 1 != g.verts.size()) throw DataError("surgery input is not a tree");
  g.observed = t.observed;
  g.next_id = (g.verts.empty() ? 0 : *g.verts.rbegin()) + 1;
  return g;
}

// Relabels so that observed label l sits at vertex l and hidden vertices get
// m+1.. in ascending order; returns old-id -> new-id.
std::map<int, int> relabel_map(const SurgeryGraph& g) {
  std::map<int, int> out;
  const int m = static_cast<int>(g.observed.size());
  for (const auto& [v, label] : g.observed) out[v] = label;
  int next = m + 1;
  for (int v : g.verts)
    if (g.hidden(v)) out[v] = next++;
  return out;
}

}  // namespace

GaussianParams tree_surgery(const MarkedTree& t, const std::map<Edge, double>& edge_corr,
                            const std::map<int, double>& observed_var, bool trivalent) {
  SurgeryGraph g = make_surgery_graph(t);
  std::map<Edge, double> rho = edge_corr;
  for (const Edge& e : g.edges)
    if (!rho.count(e)) throw DataError("missing correlation for edge " + to_string(e));

  for (;;) {
    const auto adj = g.adjacency();
    int pendant = 0, chain = 0;
    for (const auto& [v, nb] : adj) {
      if (!g.hidden(v)) continue;
      if (nb.size() <= 1 && !pendant) pendant = v;
      if (nb.size() == 2 && !chain) chain = v;
    }
    if (pendant) {
      for (int w : adj.at(pendant)) {
        g.edges.erase(Edge(pendant, w));
        rho.erase(Edge(pendant, w));
      }
      g.verts.erase(pendant);
      continue;
    }
    if (chain) {
      const int a = adj.at(chain)[0], b = adj.at(chain)[1];
      const double merged = rho.at(Edge(chain, a)) * rho.at(Edge(chain, b));
      g.edges.erase(Edge(chain, a));
      g.edges.erase(Edge(chain, b));
      rho.erase(Edge(chain, a));
      rho.erase(Edge(chain, b));
      g.verts.erase(chain);
      g.edges.insert(Edge(a, b));
      rho[Edge(a, b)] = merged;
      continue;
    }
    break;
  }

  {  // observed internal vertices become hidden with a pendant copy
    const auto adj = g.adjacency();
    std::vector<int> internal;
    for (const auto& [v, nb] : adj)
      if (!g.hidden(v) && nb.size() >= 2) internal.push_back(v);
    for (int v : internal) {
      const int copy = g.next_id++;
      g.verts.insert(copy);
      g.edges.insert(Edge(v, copy));
      rho[Edge(v, copy)] = 1.0;
      g.observed[copy] = g.observed.at(v);
      g.observed.erase(v);
    }
  }

  if (trivalent) {
    for (;;) {
      const auto adj = g.adjacency();
      int victim = 0;
      for (const auto& [v, nb] : adj)
        if (g.hidden(v) && nb.size() > 3) {
          victim = v;
          break;
        }
      if (!victim) break;
      const auto nb = g.adjacency().at(victim);
      const int copy = g.next_id++;
      g.verts.insert(copy);
      for (std::size_t k = 2; k < nb.size(); ++k) {
        const double r = rho.at(Edge(victim, nb[k]));
        g.edges.erase(Edge(victim, nb[k]));
        rho.erase(Edge(victim, nb[k]));
        g.edges.insert(Edge(copy, nb[k]));
        rho[Edge(copy, nb[k])] = r;
      }
      g.edges.insert(Edge(victim, copy));
      rho[Edge(victim, copy)] = 1.0;
    }
  }

  const std::map<int, int> map = relabel_map(g);
  GaussianParams out;
  std::vector<Edge> edges;
  for (const Edge& e : g.edges) edges.emplace_back(map.at(e.u), map.at(e.v));
  out.tree = LeafLabeledTree::make(static_cast<int>(g.observed.size()), std::move(edges));
  for (const Edge& e : g.edges) out.edge_corr[Edge(map.at(e.u), map.at(e.v))] = rho.at(e);
  for (const auto& [v, label] : g.observed) {
    auto it = observed_var.find(label);
    out.leaf_var[label] = it != observed_var.end() ? it->second : 1.0;
  }
  out.validate();
  return out;
}

MarkovParams tree_surgery_markov(const MarkedTree& t, int d, int root,
                                 const Eigen::VectorXd& root_dist,
                                 const std::map<Edge, Eigen::MatrixXd>& transitions,
                                 bool trivalent) {
  SurgeryGraph g = make_surgery_graph(t);
  std::map<Edge, Eigen::MatrixXd> trans = transitions;
  for (const Edge& e : g.edges)
    if (!trans.count(e)) throw DataError("missing transition for edge " + to_string(e));
  if (!g.verts.count(root)) throw DataError("root not in tree");

  // Vertex marginals and, when the root is hidden, a reroot to the smallest
  // observed vertex so that every removed vertex is a non-root.
  const auto parents_of = [&](int r) {
    std::map<int, int> parent{{r, 0}};
    std::vector<int> order{r};
    const auto adj = g.adjacency();
    for (std::size_t k = 0; k < order.size(); ++k)
      for (int w : adj.at(order[k]))
        if (!parent.count(w)) {
          parent[w] = order[k];
          order.push_back(w);
        }
    return std::make_pair(parent, order);
  };
  Eigen::VectorXd pi = root_dist;
  if (g.hidden(root)) {
    const int new_root = g.observed.begin()->first;
    auto [parent, order] = parents_of(root);
    std::map<int, Eigen::VectorXd> marg;
    marg[root] = pi;
    for (int v : order)
      if (v != root) marg[v] = trans.at(Edge(parent.at(v), v)).transpose() * marg.at(parent.at(v));
    // Flip the edges on the path from new_root up to the old root.
    for (int v = new_root; v != root;) {
      const int u = parent.at(v);
      const Eigen::MatrixXd& M = trans.at(Edge(u, v));  // rows = u
      Eigen::MatrixXd inv(d, d);
      for (int i = 0; i < d; ++i) {
        if (!(marg.at(v)(i) > 0.0)) throw NumericalError("degenerate marginal while rerooting");
        for (int j = 0; j < d; ++j) inv(i, j) = marg.at(u)(j) * M(j, i) / marg.at(v)(i);
      }
      trans[Edge(u, v)] = std::move(inv);  // rows = v now
      v = u;
    }
    pi = marg.at(new_root);
    root = new_root;
  }

  for (;;) {
    const auto adj = g.adjacency();
    auto [parent, order] = parents_of(root);
    int pendant = 0, chain = 0;
    for (const auto& [v, nb] : adj) {
      if (!g.hidden(v)) continue;
      if (nb.size() <= 1 && !pendant) pendant = v;
      if (nb.size() == 2 && !chain) chain = v;
    }
    if (pendant) {
      for (int w : adj.at(pendant)) {
        g.edges.erase(Edge(pendant, w));
        trans.erase(Edge(pendant, w));
      }
      g.verts.erase(pendant);
      continue;
    }
    if (chain) {
      const int p = parent.at(chain);
      const int c = adj.at(chain)[0] == p ? adj.at(chain)[1] : adj.at(chain)[0];
      const Eigen::MatrixXd merged = trans.at(Edge(p, chain)) * trans.at(Edge(chain, c));
      g.edges.erase(Edge(p, chain));
      g.edges.erase(Edge(chain, c));
      trans.erase(Edge(p, chain));
      trans.erase(Edge(chain, c));
      g.verts.erase(chain);
      g.edges.insert(Edge(p, c));
      trans[Edge(p, c)] = merged;  // rows = p, still the vertex nearer the root
      continue;
    }
    break;
  }

  {  // observed internal vertices: pendant copy with identity transition
    const auto adj = g.adjacency();
    std::vector<int> internal;
    for (const auto& [v, nb] : adj)
      if (!g.hidden(v) && nb.size() >= 2) internal.push_back(v);
    for (int v : internal) {
      const int copy = g.next_id++;
      g.verts.insert(copy);
      g.edges.insert(Edge(v, copy));
      trans[Edge(v, copy)] = Eigen::MatrixXd::Identity(d, d);
      g.observed[copy] = g.observed.at(v);
      g.observed.erase(v);
    }
  }

  if (trivalent) {
    for (;;) {
      const auto adj = g.adjacency();
      auto [parent, order] = parents_of(root);
      int victim = 0;
      for (const auto& [v, nb] : adj)
        if (g.hidden(v) && nb.size() > 3) {
          victim = v;
          break;
        }
      if (!victim) break;
      std::vector<int> kids;
      for (int w : adj.at(victim))
        if (w != parent.at(victim)) kids.push_back(w);
      const int copy = g.next_id++;
      g.verts.insert(copy);
      // Keep the first child (and the parent, if any); the rest move to the copy.
      const std::size_t keep = parent.at(victim) != 0 ? 1 : 2;
      for (std::size_t k = keep; k < kids.size(); ++k) {
        // Transitions away from the root keep their row convention.
        Eigen::MatrixXd M = trans.at(Edge(victim, kids[k]));
        g.edges.erase(Edge(victim, kids[k]));
        trans.erase(Edge(victim, kids[k]));
        g.edges.insert(Edge(copy, kids[k]));
        trans[Edge(copy, kids[k])] = std::move(M);
      }
      g.edges.insert(Edge(victim, copy));
      trans[Edge(victim, copy)] = Eigen::MatrixXd::Identity(d, d);
    }
  }

  const std::map<int, int> map = relabel_map(g);
  MarkovParams out;
  std::vector<Edge> edges;
  for (const Edge& e : g.edges) edges.emplace_back(map.at(e.u), map.at(e.v));
  out.tree = LeafLabeledTree::make(static_cast<int>(g.observed.size()), std::move(edges),
                                   map.at(root));
  out.d = d;
  out.root_dist = pi;
  for (const Edge& e : g.edges) out.transitions[Edge(map.at(e.u), map.at(e.v))] = trans.at(e);
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// BIC
// ---------------------------------------------------------------------------

int model_dimension(const AnyParams& model) {
  if (const auto* g = std::get_if<GaussianParams>(&model))
    return g->tree.leaf_count() + static_cast<int>(g->tree.edges().size());
  const MarkovParams& q = std::get<MarkovParams>(model);
  const int d = q.d;
  return (d - 1) + static_cast<int>(q.tree.edges().size()) * d * (d - 1);
}

ScoredModel bic_score(const AnyParams& model, const Dataset& data) {
  ScoredModel out;
  out.model = model;
  out.loglik = loglik(model, data);
  out.dim = model_dimension(model);
  out.bic = out.loglik - 0.5 * out.dim * (data.n() > 0 ? std::log(data.n()) : 0.0);
  std::visit(
      [&](const auto& q) {
        for (int v : q.tree.internal_vertices())
          if (q.tree.degree(v) < 3) out.a1_warning = true;
      },
      model);
  return out;
}

// ---------------------------------------------------------------------------
// Structural EM
// ---------------------------------------------------------------------------

namespace {

// Expected pairwise statistics over all (observed + hidden) variable pairs.
struct PairStats {
  // Discrete: joint tables indexed by vertex-position pair (a < b), rows =
  // states of the lower position. Gaussian: full standardized moments.
  std::vector<Eigen::MatrixXd> tables;  // flattened upper triangle
  Eigen::VectorXd vmarg_root_like;      // discrete: per-position marginals stacked
  Eigen::MatrixXd moments;              // Gaussian
  double loglik = 0;
  double wsum = 0;
  long bad_row = -1;
};

std::size_t tri_index(std::size_t n, std::size_t a, std::size_t b) {
  // a < b
  return a * n - a * (a + 1) / 2 + (b - a - 1);
}

PairStats discrete_pair_stats(const SumProduct& sp, const Dataset& data, const EmOptions& opts) {
  const MarkovParams& p = sp.params();
  const int m = p.tree.leaf_count();
  const int d = p.d;
  const std::vector<int>& verts = p.tree.vertices();
  const std::size_t nv = verts.size();
  std::vector<int> pos_of_order(sp.order().size());
  for (std::size_t k = 0; k < sp.order().size(); ++k)
    pos_of_order[k] = index_of(verts, sp.order()[k]);

  PairStats zero;
  zero.tables.assign(nv * (nv - 1) / 2, Eigen::MatrixXd::Zero(d, d));
  zero.vmarg_root_like = Eigen::VectorXd::Zero(static_cast<long>(nv) * d);

  // Adjacency in topo positions.
  const std::size_t nk = sp.order().size();
  std::vector<std::vector<int>> nbr(nk);
  for (std::size_t k = 1; k < nk; ++k) {
    nbr[k].push_back(sp.parent_at(static_cast<int>(k)));
    nbr[sp.parent_at(static_cast<int>(k))].push_back(static_cast<int>(k));
  }

  PairStats total = chunked_reduce<PairStats>(
      data.n(), zero,
      [&](PairStats& acc, std::size_t r) {
        if (acc.bad_row >= 0) return;
        const double w = row_weight(opts, static_cast<long>(r));
        const SumProduct::Result res = sp.posteriors(dataset_row(data, r, m));
        if (res.zero) {
          acc.bad_row = static_cast<long>(r);
          return;
        }
        acc.loglik += w * res.loglik;
        acc.wsum += w;
        // Conditional matrices C[k->c] for adjacent topo positions.
        std::vector<Eigen::MatrixXd> cond_down(nk), cond_up(nk);
        for (std::size_t c = 1; c < nk; ++c) {
          const int k = sp.parent_at(static_cast<int>(c));
          const Eigen::MatrixXd& pair = res.edge_posterior[c];  // rows = parent
          cond_down[c].resize(d, d);
          cond_up[c].resize(d, d);
          for (int a = 0; a < d; ++a) {
            const double pk = res.vertex_posterior[k](a);
            cond_down[c].row(a) = pk > 0.0 ? (pair.row(a) / pk).eval()
                                           : Eigen::RowVectorXd::Zero(d).eval();
          }
          for (int b = 0; b < d; ++b) {
            const double pc = res.vertex_posterior[c](b);
            cond_up[c].row(b) = pc > 0.0 ? (pair.col(b) / pc).transpose().eval()
                                         : Eigen::RowVectorXd::Zero(d).eval();
          }
        }
        for (std::size_t k = 0; k < nk; ++k)
          acc.vmarg_root_like.segment(static_cast<long>(pos_of_order[k]) * d, d) +=
              w * res.vertex_posterior[k];
        // Joint posteriors for all pairs: walk outward from each vertex,
        // composing conditionals along the (posterior-Markov) tree.
        for (std::size_t start = 0; start < nk; ++start) {
          std::vector<Eigen::MatrixXd> J(nk);
          std::vector<int> q{static_cast<int>(start)};
          std::vector<char> seen(nk, 0);
          seen[start] = 1;
          J[start] = Eigen::MatrixXd(res.vertex_posterior[start].asDiagonal());
          for (std::size_t qi = 0; qi < q.size(); ++qi) {
            const int at = q[qi];
            for (int nx : nbr[at]) {
              if (seen[nx]) continue;
              seen[nx] = 1;
              const Eigen::MatrixXd& c =
                  sp.parent_at(nx) == at ? cond_down[nx] : cond_up[at];
              J[nx] = J[at] * c;
              q.push_back(nx);
              const int pa = pos_of_order[start];
              const int pb = pos_of_order[nx];
              if (pa < pb)
                acc.tables[tri_index(nv, pa, pb)] += w * J[nx];
            }
          }
        }
      },
      [](PairStats& a, const PairStats& b) {
        if (b.bad_row >= 0 && (a.bad_row < 0 || b.bad_row < a.bad_row)) a.bad_row = b.bad_row;
        for (std::size_t i = 0; i < a.tables.size(); ++i) a.tables[i] += b.tables[i];
        a.vmarg_root_like += b.vmarg_root_like;
        a.loglik += b.loglik;
        a.wsum += b.wsum;
      });
  if (total.bad_row >= 0)
    throw DataError("row " + std::to_string(total.bad_row) +
                    " has probability zero under the current parameters");
  return total;
}

}  // namespace

ScoredModel structural_em(const Dataset& data, const ScoredModel& init, const SemOptions& opts) {
  check_weights(opts.em, data);
  if (opts.max_outer < 1) throw DataError("max_outer must be at least 1");
  const bool gaussian = std::holds_alternative<GaussianParams>(init.model);

  EmOptions inner = opts.em;
  inner.restarts = 1;

  const auto one_start = [&](AnyParams current) {
    std::vector<double> trace;
    for (int outer = 0; outer < opts.max_outer; ++outer) {
      const LeafLabeledTree* tree = nullptr;
      std::visit([&](const auto& q) { tree = &q.tree; }, current);
      const std::vector<int>& verts = tree->vertices();
      const std::size_t nv = verts.size();

      Eigen::MatrixXd weights = Eigen::MatrixXd::Zero(nv, nv);
      double ll = 0;
      AnyParams candidate = current;
      SpanningTree st;

      if (gaussian) {
        const GaussianParams& gp = std::get<GaussianParams>(current);
        const GaussianConditioner cond(gp);
        const GaussianLeafDensity den(gp);
        const GaussianStats stats = gaussian_estep(cond, den, data, inner);
        ll = stats.loglik;
        trace.push_back(ll);
        const Eigen::MatrixXd T = assemble_full_moments(stats);
        for (std::size_t a = 0; a < nv; ++a)
          for (std::size_t b = a + 1; b < nv; ++b) {
            const double r = T(a, b) / std::sqrt(T(a, a) * T(b, b));
            weights(a, b) = weights(b, a) = gaussian_mi_weight(r);
          }
        st = max_weight_spanning_tree(weights);
        // Parameters of the candidate: correlations from expected moments.
        std::map<Edge, double> rho;
        std::vector<Edge> cedges;
        for (const Edge& pe : st.edges) {
          const Edge e(verts[pe.u], verts[pe.v]);
          cedges.push_back(e);
          const double r = T(pe.u, pe.v) / std::sqrt(T(pe.u, pe.u) * T(pe.v, pe.v));
          rho[e] = std::clamp(r, -kCorrCap, kCorrCap);
        }
        MarkedTree marked;
        marked.vertices = verts;
        marked.edges = cedges;
        for (int i = 1; i <= gp.tree.leaf_count(); ++i) marked.observed[i] = i;
        std::map<int, double> ovar;
        for (int i = 1; i <= gp.tree.leaf_count(); ++i)
          ovar[i] = gp.leaf_var.at(i) * T(i - 1, i - 1);
        candidate = tree_surgery(marked, rho, ovar, opts.trivalent);
      } else {
        const MarkovParams& mp = std::get<MarkovParams>(current);
        const SumProduct sp(mp);
        const PairStats stats = discrete_pair_stats(sp, data, inner);
        ll = stats.loglik;
        trace.push_back(ll);
        const int d = mp.d;
        for (std::size_t a = 0; a < nv; ++a)
          for (std::size_t b = a + 1; b < nv; ++b) {
            const Eigen::MatrixXd tab = stats.tables[tri_index(nv, a, b)] / stats.wsum;
            weights(a, b) = weights(b, a) = table_mutual_information(tab);
          }
        st = max_weight_spanning_tree(weights);
        // Candidate parameters: root at the smallest vertex, conditionals
        // from expected tables with pseudocount smoothing.
        const int root = verts.front();
        std::vector<Edge> cedges;
        for (const Edge& pe : st.edges) cedges.emplace_back(verts[pe.u], verts[pe.v]);
        std::map<int, std::vector<int>> adj;
        for (const Edge& e : cedges) {
          adj[e.u].push_back(e.v);
          adj[e.v].push_back(e.u);
        }
        std::map<int, int> parent{{root, 0}};
        std::vector<int> order{root};
        for (std::size_t k = 0; k < order.size(); ++k)
          for (int w2 : adj[order[k]])
            if (!parent.count(w2)) {
              parent[w2] = order[k];
              order.push_back(w2);
            }
        const double pc = opts.em.pseudocount;
        std::map<Edge, Eigen::MatrixXd> trans;
        for (const Edge& e : cedges) {
          const int pu = parent.at(e.u) == e.v ? e.v : e.u;  // vertex nearer root
          const int pv = pu == e.u ? e.v : e.u;
          const int a = index_of(verts, pu), b = index_of(verts, pv);
          Eigen::MatrixXd counts;
          if (a < b)
            counts = stats.tables[tri_index(nv, a, b)];
          else
            counts = stats.tables[tri_index(nv, b, a)].transpose();
          Eigen::MatrixXd M(d, d);
          for (int s = 0; s < d; ++s) {
            const double rs = counts.row(s).sum() + pc * d;
            if (rs > 0.0)
              M.row(s) = ((counts.row(s).array() + pc) / rs).matrix();
            else
              M.row(s) = Eigen::RowVectorXd::Constant(d, 1.0 / d);
          }
          trans[e] = std::move(M);
        }
        Eigen::VectorXd rd =
            stats.vmarg_root_like.segment(static_cast<long>(index_of(verts, root)) * d, d);
        rd = ((rd.array() + pc) / (rd.sum() + pc * d)).matrix();
        MarkedTree marked;
        marked.vertices = verts;
        marked.edges = cedges;
        for (int i = 1; i <= mp.tree.leaf_count(); ++i) marked.observed[i] = i;
        candidate = tree_surgery_markov(marked, d, root, rd, trans, opts.trivalent);
      }

      // Accept only strict spanning-tree weight improvement over the
      // current tree under the same expected statistics; a tied or
      // identical tree means a structural local optimum.
      double current_weight = 0;
      for (const Edge& e : tree->edges())
        current_weight += weights(index_of(verts, e.u), index_of(verts, e.v));
      std::vector<Edge> proposed;
      for (const Edge& pe : st.edges) proposed.emplace_back(verts[pe.u], verts[pe.v]);
      std::sort(proposed.begin(), proposed.end());
      if (proposed == tree->edges() || !(st.total_weight > current_weight)) break;

      EmRun refined = run_em(candidate, data, inner, opts.inner_em_iters);
      for (double v : refined.trace) trace.push_back(v);
      current = std::move(refined.params);
    }
    // No structural move left: finish with a full parameter fit, so the
    // result is a local optimum in the continuous parameter as well.
    EmRun final_fit = run_em(std::move(current), data, inner, opts.em.max_iter);
    for (double v : final_fit.trace) trace.push_back(v);
    return std::make_pair(std::move(final_fit.params), trace);
  };

  AnyParams best;
  std::vector<double> best_trace;
  bool have = false;
  for (int r = 0; r < opts.em.restarts; ++r) {
    Rng rng = make_rng(opts.em.seed, "sem-restart", static_cast<std::uint64_t>(r));
    const LeafLabeledTree* itree = nullptr;
    std::visit([&](const auto& q) { itree = &q.tree; }, init.model);
    AnyParams start = r == 0 ? init.model : random_params_like(init.model, data, *itree, rng);
    auto [params, trace] = one_start(std::move(start));
    if (!have || trace.back() > best_trace.back()) {
      best = std::move(params);
      best_trace = std::move(trace);
      have = true;
    }
  }
  ScoredModel out = bic_score(best, data);
  out.trace = std::move(best_trace);
  return out;
}

}  // namespace arbor
