#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "arbor/common.hpp"

namespace arbor {

// Undirected tree whose leaves carry labels 1..m. By convention the leaf
// with label k is the vertex with id k; internal vertices use synthetic ids
// outside 1..m. Trees are immutable values: all operations return new trees.
class LeafLabeledTree {
 public:
  LeafLabeledTree() = default;

  // Validates connectivity and acyclicity, that every label 1..m sits at a
  // distinct degree-one vertex, and that no unlabeled degree-one vertex
  // exists. Throws DataError otherwise.
  static LeafLabeledTree make(int m, std::vector<Edge> edges,
                              std::optional<int> root = std::nullopt);

  int leaf_count() const { return m_; }
  const std::vector<int>& vertices() const { return vertices_; }  // ascending
  const std::vector<Edge>& edges() const { return edges_; }       // sorted
  std::optional<int> root() const { return root_; }
  LeafLabeledTree with_root(int r) const;

  bool has_vertex(int v) const;
  bool has_edge(Edge e) const;
  bool is_leaf(int v) const { return v >= 1 && v <= m_; }
  int degree(int v) const;
  const std::vector<int>& neighbors(int v) const;  // ascending
  std::vector<int> internal_vertices() const;      // ascending
  int max_vertex_id() const;

 private:
  int m_ = 0;
  std::vector<int> vertices_;
  std::vector<Edge> edges_;
  std::optional<int> root_;
  std::map<int, std::vector<int>> adj_;
};

// Nonnegative edge lengths keyed by the edges of an associated tree.
using EdgeLengths = std::map<Edge, double>;

// Symmetric nonnegative leaf-to-leaf distances with zero diagonal. Entries
// may be +inf (zero correlation); consumers decide whether to accept those.
struct DistanceMatrix {
  Eigen::MatrixXd d;
  int size() const { return static_cast<int>(d.rows()); }
  bool finite() const;
  void validate() const;
};

// Bipartition of the leaf set induced by an edge, encoded as a bitmask over
// labels (bit k-1 = leaf k) of the side not containing leaf 1.
using Split = std::uint64_t;

Split edge_split(const LeafLabeledTree& t, Edge e);
std::set<Split> split_set(const LeafLabeledTree& t);
std::map<Split, double> split_lengths(const LeafLabeledTree& t, const EdgeLengths& len);
// Topology comparison through canonical split sets.
bool same_topology(const LeafLabeledTree& a, const LeafLabeledTree& b);

// Result of resolving four leaves against a tree or against second-order
// values: either the split ab|cd (canonical: a<b, c<d, a<c) or a star.
struct QuartetCall {
  bool star = false;
  std::array<int, 4> split{};
  static QuartetCall make_split(int a, int b, int c, int d);
  static QuartetCall make_star(std::array<int, 4> leaves);
  friend bool operator==(const QuartetCall&, const QuartetCall&) = default;
};

LeafLabeledTree contract_edge(const LeafLabeledTree& t, Edge e);
LeafLabeledTree suppress_degree_two(const LeafLabeledTree& t);
std::vector<Edge> path_between(const LeafLabeledTree& t, int i, int j);
std::vector<int> path_vertices(const LeafLabeledTree& t, int i, int j);
int tree_depth(const LeafLabeledTree& t);
QuartetCall quartet_topology(const LeafLabeledTree& t, std::array<int, 4> leaves);
DistanceMatrix leaf_distances(const LeafLabeledTree& t, const EdgeLengths& len);
bool four_point_check(const DistanceMatrix& D, double tol);

// Root used when an operation needs an orientation and none is set: the
// smallest internal vertex, or vertex 1 for trees without internal vertices.
int canonical_root(const LeafLabeledTree& t);

// Deterministic vertex ordering: preorder from the root (stored root if
// internal, else canonical), children ordered by smallest descendant leaf.
// Fixes Newick output, JSON vertex names, and hidden column order.
std::vector<int> canonical_order(const LeafLabeledTree& t);

// Vertex names used in files: leaves by label, internal vertices "h1","h2",..
// numbered along canonical_order.
std::map<int, std::string> vertex_names(const LeafLabeledTree& t);

// Parent map and breadth-first order of the tree rooted at `root`.
std::map<int, int> rooted_parents(const LeafLabeledTree& t, int root);
std::vector<int> topo_order(const LeafLabeledTree& t, int root);

}  // namespace arbor
