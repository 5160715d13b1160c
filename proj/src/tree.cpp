#include "arbor/tree.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>

namespace arbor {

LeafLabeledTree LeafLabeledTree::make(int m, std::vector<Edge> edges, std::optional<int> root) {
  if (m < 1) throw DataError("tree must have at least one labeled leaf");
  LeafLabeledTree t;
  t.m_ = m;

  std::set<int> verts;
  for (int k = 1; k <= m; ++k) verts.insert(k);
  for (const Edge& e : edges) {
    if (e.u < 1) throw DataError("vertex ids must be positive");
    if (e.u == e.v) throw DataError("self-loop edge " + to_string(e));
    verts.insert(e.u);
    verts.insert(e.v);
  }
  std::sort(edges.begin(), edges.end());
  if (std::adjacent_find(edges.begin(), edges.end()) != edges.end())
    throw DataError("duplicate edge");
  t.vertices_.assign(verts.begin(), verts.end());
  t.edges_ = std::move(edges);

  if (t.edges_.size() + 1 != t.vertices_.size())
    throw DataError("not a tree: |edges| must equal |vertices| - 1");

  for (int v : t.vertices_) t.adj_[v];
  for (const Edge& e : t.edges_) {
    t.adj_[e.u].push_back(e.v);
    t.adj_[e.v].push_back(e.u);
  }
  for (auto& [v, nb] : t.adj_) std::sort(nb.begin(), nb.end());

  // Connectivity; together with the edge count this implies acyclicity.
  std::set<int> seen{t.vertices_.front()};
  std::deque<int> queue{t.vertices_.front()};
  while (!queue.empty()) {
    int v = queue.front();
    queue.pop_front();
    for (int w : t.adj_[v])
      if (seen.insert(w).second) queue.push_back(w);
  }
  if (seen.size() != t.vertices_.size()) throw DataError("tree is not connected");

  if (t.vertices_.size() > 1) {
    for (int k = 1; k <= m; ++k)
      if (t.adj_[k].size() != 1)
        throw DataError("label " + std::to_string(k) + " must sit at a degree-one vertex");
    for (int v : t.vertices_)
      if (v > m && t.adj_[v].size() == 1)
        throw DataError("unlabeled degree-one vertex " + std::to_string(v));
  }

  if (root) {
    if (!verts.count(*root)) throw DataError("root vertex not in tree");
    t.root_ = root;
  }
  return t;
}

LeafLabeledTree LeafLabeledTree::with_root(int r) const {
  if (!has_vertex(r)) throw DataError("root vertex not in tree");
  LeafLabeledTree t = *this;
  t.root_ = r;
  return t;
}

bool LeafLabeledTree::has_vertex(int v) const { return adj_.count(v) > 0; }

bool LeafLabeledTree::has_edge(Edge e) const {
  return std::binary_search(edges_.begin(), edges_.end(), e);
}

int LeafLabeledTree::degree(int v) const { return static_cast<int>(neighbors(v).size()); }

const std::vector<int>& LeafLabeledTree::neighbors(int v) const {
  auto it = adj_.find(v);
  if (it == adj_.end()) throw DataError("vertex " + std::to_string(v) + " not in tree");
  return it->second;
}

std::vector<int> LeafLabeledTree::internal_vertices() const {
  std::vector<int> out;
  for (int v : vertices_)
    if (v > m_) out.push_back(v);
  return out;
}

int LeafLabeledTree::max_vertex_id() const { return vertices_.back(); }

bool DistanceMatrix::finite() const { return d.allFinite(); }

void DistanceMatrix::validate() const {
  if (d.rows() != d.cols()) throw DataError("distance matrix must be square");
  const int m = size();
  for (int i = 0; i < m; ++i) {
    if (d(i, i) != 0.0) throw DataError("distance matrix must have zero diagonal");
    for (int j = i + 1; j < m; ++j) {
      if (d(i, j) != d(j, i)) throw DataError("distance matrix must be symmetric");
      if (std::isnan(d(i, j)) || d(i, j) < 0.0)
        throw DataError("distances must be nonnegative");
    }
  }
}

Split edge_split(const LeafLabeledTree& t, Edge e) {
  if (!t.has_edge(e)) throw DataError("edge " + to_string(e) + " not in tree");
  if (t.leaf_count() > 64) throw DataError("split encoding supports at most 64 leaves");
  // Component containing e.u when the edge is removed.
  std::set<int> seen{e.u};
  std::deque<int> queue{e.u};
  while (!queue.empty()) {
    int v = queue.front();
    queue.pop_front();
    for (int w : t.neighbors(v)) {
      if (v == e.u && w == e.v) continue;
      if (seen.insert(w).second) queue.push_back(w);
    }
  }
  Split side = 0;
  for (int k = 1; k <= t.leaf_count(); ++k)
    if (seen.count(k)) side |= Split{1} << (k - 1);
  if (side & 1) {  // canonicalize to the side not containing leaf 1
    Split all = t.leaf_count() == 64 ? ~Split{0} : (Split{1} << t.leaf_count()) - 1;
    side = all & ~side;
  }
  return side;
}

std::set<Split> split_set(const LeafLabeledTree& t) {
  std::set<Split> out;
  for (const Edge& e : t.edges()) out.insert(edge_split(t, e));
  return out;
}

std::map<Split, double> split_lengths(const LeafLabeledTree& t, const EdgeLengths& len) {
  std::map<Split, double> out;
  for (const Edge& e : t.edges()) {
    auto it = len.find(e);
    if (it == len.end()) throw DataError("missing length for edge " + to_string(e));
    out[edge_split(t, e)] = it->second;
  }
  return out;
}

bool same_topology(const LeafLabeledTree& a, const LeafLabeledTree& b) {
  return a.leaf_count() == b.leaf_count() && split_set(a) == split_set(b);
}

QuartetCall QuartetCall::make_split(int a, int b, int c, int d) {
  if (a > b) std::swap(a, b);
  if (c > d) std::swap(c, d);
  if (a > c) {
    std::swap(a, c);
    std::swap(b, d);
  }
  return QuartetCall{false, {a, b, c, d}};
}

QuartetCall QuartetCall::make_star(std::array<int, 4> leaves) {
  std::sort(leaves.begin(), leaves.end());
  return QuartetCall{true, leaves};
}

LeafLabeledTree contract_edge(const LeafLabeledTree& t, Edge e) {
  if (!t.has_edge(e)) throw DataError("edge " + to_string(e) + " not in tree");
  if (t.is_leaf(e.u) || t.is_leaf(e.v))
    throw DataError("cannot contract edge " + to_string(e) + ": incident to a labeled leaf");
  const int w = t.max_vertex_id() + 1;
  std::vector<Edge> edges;
  for (const Edge& f : t.edges()) {
    if (f == e) continue;
    int a = (f.u == e.u || f.u == e.v) ? w : f.u;
    int b = (f.v == e.u || f.v == e.v) ? w : f.v;
    edges.emplace_back(a, b);
  }
  std::optional<int> root = t.root();
  if (root && (*root == e.u || *root == e.v)) root = w;
  return LeafLabeledTree::make(t.leaf_count(), std::move(edges), root);
}

LeafLabeledTree suppress_degree_two(const LeafLabeledTree& t) {
  std::vector<Edge> edges = t.edges();
  std::optional<int> root = t.root();
  const int m = t.leaf_count();
  for (;;) {
    std::map<int, std::vector<int>> adj;
    for (const Edge& e : edges) {
      adj[e.u].push_back(e.v);
      adj[e.v].push_back(e.u);
    }
    int victim = 0;
    for (const auto& [v, nb] : adj)
      if (v > m && nb.size() == 2) {
        victim = v;
        break;
      }
    if (victim == 0) break;
    const int a = adj[victim][0];
    const int b = adj[victim][1];
    std::erase_if(edges, [&](const Edge& e) { return e.u == victim || e.v == victim; });
    edges.emplace_back(a, b);
    if (root && *root == victim) root.reset();
  }
  return LeafLabeledTree::make(m, std::move(edges), root);
}

std::vector<int> path_vertices(const LeafLabeledTree& t, int i, int j) {
  if (!t.has_vertex(i)) throw DataError("vertex " + std::to_string(i) + " not in tree");
  if (!t.has_vertex(j)) throw DataError("vertex " + std::to_string(j) + " not in tree");
  if (i == j) throw DataError("path endpoints must differ");
  std::map<int, int> parent;
  parent[i] = i;
  std::deque<int> queue{i};
  while (!queue.empty() && !parent.count(j)) {
    int v = queue.front();
    queue.pop_front();
    for (int w : t.neighbors(v))
      if (!parent.count(w)) {
        parent[w] = v;
        queue.push_back(w);
      }
  }
  std::vector<int> path;
  for (int v = j; v != i; v = parent[v]) path.push_back(v);
  path.push_back(i);
  std::reverse(path.begin(), path.end());
  return path;
}

std::vector<Edge> path_between(const LeafLabeledTree& t, int i, int j) {
  const std::vector<int> verts = path_vertices(t, i, j);
  std::vector<Edge> out;
  for (std::size_t k = 0; k + 1 < verts.size(); ++k) out.emplace_back(verts[k], verts[k + 1]);
  return out;
}

int tree_depth(const LeafLabeledTree& t) {
  int depth = 0;
  for (int v : t.internal_vertices()) {
    // BFS until the nearest leaf.
    std::map<int, int> dist{{v, 0}};
    std::deque<int> queue{v};
    int nearest = 0;
    while (!queue.empty()) {
      int x = queue.front();
      queue.pop_front();
      if (t.is_leaf(x)) {
        nearest = dist[x];
        break;
      }
      for (int w : t.neighbors(x))
        if (!dist.count(w)) {
          dist[w] = dist[x] + 1;
          queue.push_back(w);
        }
    }
    depth = std::max(depth, nearest);
  }
  return depth;
}

QuartetCall quartet_topology(const LeafLabeledTree& t, std::array<int, 4> leaves) {
  std::sort(leaves.begin(), leaves.end());
  for (int x : leaves)
    if (!t.is_leaf(x) || !t.has_vertex(x))
      throw DataError("label " + std::to_string(x) + " is not a leaf of the tree");
  if (std::adjacent_find(leaves.begin(), leaves.end()) != leaves.end())
    throw DataError("quartet leaves must be distinct");
  const auto [a, b, c, d] = leaves;
  const std::array<std::array<int, 4>, 3> pairings = {{{a, b, c, d}, {a, c, b, d}, {a, d, b, c}}};
  for (const auto& p : pairings) {
    const std::vector<int> p1 = path_vertices(t, p[0], p[1]);
    const std::vector<int> p2 = path_vertices(t, p[2], p[3]);
    const std::set<int> s1(p1.begin(), p1.end());
    bool disjoint = true;
    for (int v : p2)
      if (s1.count(v)) {
        disjoint = false;
        break;
      }
    if (disjoint) return QuartetCall::make_split(p[0], p[1], p[2], p[3]);
  }
  return QuartetCall::make_star(leaves);
}

DistanceMatrix leaf_distances(const LeafLabeledTree& t, const EdgeLengths& len) {
  for (const Edge& e : t.edges())
    if (!len.count(e)) throw DataError("missing length for edge " + to_string(e));
  const int m = t.leaf_count();
  DistanceMatrix D;
  D.d = Eigen::MatrixXd::Zero(m, m);
  for (int i = 1; i <= m; ++i) {
    std::map<int, double> dist{{i, 0.0}};
    std::deque<int> queue{i};
    while (!queue.empty()) {
      int v = queue.front();
      queue.pop_front();
      for (int w : t.neighbors(v))
        if (!dist.count(w)) {
          dist[w] = dist[v] + len.at(Edge(v, w));
          queue.push_back(w);
        }
    }
    for (int j = i + 1; j <= m; ++j) D.d(i - 1, j - 1) = D.d(j - 1, i - 1) = dist[j];
  }
  return D;
}

bool four_point_check(const DistanceMatrix& D, double tol) {
  D.validate();
  const int m = D.size();
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j)
      for (int k = j + 1; k < m; ++k)
        for (int l = k + 1; l < m; ++l) {
          std::array<double, 3> s = {D.d(i, j) + D.d(k, l), D.d(i, k) + D.d(j, l),
                                     D.d(i, l) + D.d(j, k)};
          if (!std::isfinite(s[0]) || !std::isfinite(s[1]) || !std::isfinite(s[2]))
            continue;  // quadruples with infinite entries are excluded
          std::sort(s.begin(), s.end());
          if (s[2] - s[1] > tol) return false;
        }
  return true;
}

int canonical_root(const LeafLabeledTree& t) {
  const std::vector<int> internal = t.internal_vertices();
  return internal.empty() ? 1 : internal.front();
}

namespace {

void min_leaf_below(const LeafLabeledTree& t, int v, int parent, std::map<int, int>& out) {
  int best = t.is_leaf(v) ? v : std::numeric_limits<int>::max();
  for (int w : t.neighbors(v))
    if (w != parent) {
      min_leaf_below(t, w, v, out);
      best = std::min(best, out[w]);
    }
  out[v] = best;
}

void preorder(const LeafLabeledTree& t, int v, int parent, const std::map<int, int>& minleaf,
              std::vector<int>& out) {
  out.push_back(v);
  std::vector<int> kids;
  for (int w : t.neighbors(v))
    if (w != parent) kids.push_back(w);
  std::sort(kids.begin(), kids.end(),
            [&](int a, int b) { return minleaf.at(a) < minleaf.at(b); });
  for (int w : kids) preorder(t, w, v, minleaf, out);
}

}  // namespace

std::vector<int> canonical_order(const LeafLabeledTree& t) {
  int r = canonical_root(t);
  if (t.root() && !t.is_leaf(*t.root())) r = *t.root();
  std::map<int, int> minleaf;
  min_leaf_below(t, r, 0, minleaf);
  std::vector<int> out;
  preorder(t, r, 0, minleaf, out);
  return out;
}

std::map<int, std::string> vertex_names(const LeafLabeledTree& t) {
  std::map<int, std::string> names;
  int next = 1;
  for (int v : canonical_order(t)) {
    if (t.is_leaf(v))
      names[v] = std::to_string(v);
    else
      names[v] = "h" + std::to_string(next++);
  }
  return names;
}

std::map<int, int> rooted_parents(const LeafLabeledTree& t, int root) {
  if (!t.has_vertex(root)) throw DataError("root vertex not in tree");
  std::map<int, int> parent{{root, 0}};
  std::deque<int> queue{root};
  while (!queue.empty()) {
    int v = queue.front();
    queue.pop_front();
    for (int w : t.neighbors(v))
      if (!parent.count(w)) {
        parent[w] = v;
        queue.push_back(w);
      }
  }
  return parent;
}

std::vector<int> topo_order(const LeafLabeledTree& t, int root) {
  if (!t.has_vertex(root)) throw DataError("root vertex not in tree");
  std::vector<int> order{root};
  std::set<int> seen{root};
  for (std::size_t k = 0; k < order.size(); ++k)
    for (int w : t.neighbors(order[k]))
      if (seen.insert(w).second) order.push_back(w);
  return order;
}

}  // namespace arbor
