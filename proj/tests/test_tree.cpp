#include <doctest.h>

#include "arbor/tree.hpp"
#include "test_util.hpp"

using namespace arbor;
using namespace arbor::testutil;

namespace {

// Quartet 12|34: internal vertices 5 (near 1,2) and 6 (near 3,4).
LeafLabeledTree quartet_tree() {
  return LeafLabeledTree::make(4, {Edge(1, 5), Edge(2, 5), Edge(5, 6), Edge(3, 6), Edge(4, 6)});
}

LeafLabeledTree star_tree(int m) {
  std::vector<Edge> edges;
  for (int i = 1; i <= m; ++i) edges.emplace_back(i, m + 1);
  return LeafLabeledTree::make(m, std::move(edges));
}

// Trivalent 6-leaf caterpillar.
LeafLabeledTree six_leaf_trivalent() {
  return LeafLabeledTree::make(6, {Edge(1, 7), Edge(2, 7), Edge(7, 8), Edge(3, 8), Edge(8, 9),
                                   Edge(4, 9), Edge(9, 10), Edge(5, 10), Edge(6, 10)});
}

}  // namespace

TEST_CASE("tree construction validates invariants") {
  CHECK_THROWS_AS(LeafLabeledTree::make(2, {Edge(1, 2), Edge(2, 3)}), DataError);  // unlabeled leaf
  CHECK_THROWS_AS(LeafLabeledTree::make(3, {Edge(1, 2), Edge(2, 3)}), DataError);  // label not leaf
  CHECK_THROWS_AS(LeafLabeledTree::make(4, {Edge(1, 5), Edge(2, 5), Edge(3, 6), Edge(4, 6)}),
                  DataError);  // disconnected
  const LeafLabeledTree t = quartet_tree();
  CHECK(t.leaf_count() == 4);
  CHECK(t.degree(5) == 3);
  CHECK(t.internal_vertices() == std::vector<int>{5, 6});
}

TEST_CASE("contract_edge") {
  const LeafLabeledTree q = quartet_tree();
  const LeafLabeledTree star = contract_edge(q, Edge(5, 6));
  CHECK(same_topology(star, star_tree(4)));
  CHECK(star.internal_vertices().size() == 1);

  CHECK_THROWS_AS(contract_edge(q, Edge(1, 5)), DataError);  // incident to a leaf
  CHECK_THROWS_AS(contract_edge(q, Edge(1, 6)), DataError);  // absent
  CHECK_THROWS_AS(contract_edge(star_tree(4), Edge(1, 5)), DataError);

  // Contracting one inner edge of a trivalent tree makes one degree-4 vertex.
  const LeafLabeledTree six = six_leaf_trivalent();
  const LeafLabeledTree c = contract_edge(six, Edge(7, 8));
  std::map<int, int> degree_count;
  for (int v : c.vertices()) ++degree_count[c.degree(v)];
  CHECK(degree_count[4] == 1);
  CHECK(degree_count[3] == 2);
  CHECK(degree_count[1] == 6);
}

TEST_CASE("suppress_degree_two") {
  // path 1 - a - 2
  const LeafLabeledTree p = LeafLabeledTree::make(2, {Edge(1, 3), Edge(3, 2)});
  const LeafLabeledTree s = suppress_degree_two(p);
  CHECK(s.edges() == std::vector<Edge>{Edge(1, 2)});

  // chain 1 - a - b - 2
  const LeafLabeledTree c = LeafLabeledTree::make(2, {Edge(1, 3), Edge(3, 4), Edge(4, 2)});
  CHECK(suppress_degree_two(c).edges() == std::vector<Edge>{Edge(1, 2)});

  // trivalent tree is a fixpoint
  const LeafLabeledTree q = quartet_tree();
  CHECK(suppress_degree_two(q).edges() == q.edges());
}

TEST_CASE("contract then suppress preserves the leaf label set") {
  Rng rng = make_rng(1, "contract-suppress");
  for (int rep = 0; rep < 20; ++rep) {
    std::uniform_int_distribution<int> msize(4, 10);
    const int m = msize(rng);
    LeafLabeledTree t = random_trivalent(m, rng);
    std::vector<Edge> inner;
    for (const Edge& e : t.edges())
      if (!t.is_leaf(e.u) && !t.is_leaf(e.v)) inner.push_back(e);
    if (!inner.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, inner.size() - 1);
      t = suppress_degree_two(contract_edge(t, inner[pick(rng)]));
    }
    CHECK(t.leaf_count() == m);
    for (int k = 1; k <= m; ++k) CHECK(t.degree(k) == 1);
  }
}

TEST_CASE("path_between") {
  const LeafLabeledTree q = quartet_tree();
  const std::vector<Edge> path = path_between(q, 1, 3);
  CHECK(path == std::vector<Edge>{Edge(1, 5), Edge(5, 6), Edge(3, 6)});
  CHECK(path_between(star_tree(4), 1, 2).size() == 2);
  CHECK(path_between(q, 5, 6) == std::vector<Edge>{Edge(5, 6)});
  CHECK_THROWS_AS(path_between(q, 1, 99), DataError);
}

TEST_CASE("tree_depth") {
  // Caterpillar HMM tree: hidden chain, one leaf per hidden vertex.
  std::vector<Edge> hmm;
  const int m = 5;
  for (int i = 1; i <= m; ++i) hmm.emplace_back(i, m + i);
  for (int i = 1; i < m; ++i) hmm.emplace_back(m + i, m + i + 1);
  CHECK(tree_depth(LeafLabeledTree::make(m, std::move(hmm))) == 1);

  // Complete binary rooted tree on 4 leaves: the root is two steps from leaves.
  const LeafLabeledTree bin = LeafLabeledTree::make(
      4, {Edge(1, 5), Edge(2, 5), Edge(3, 6), Edge(4, 6), Edge(5, 7), Edge(6, 7)});
  CHECK(tree_depth(bin) == 2);

  CHECK(tree_depth(star_tree(5)) == 1);
  CHECK(tree_depth(LeafLabeledTree::make(2, {Edge(1, 2)})) == 0);
}

TEST_CASE("quartet_topology") {
  const LeafLabeledTree q = quartet_tree();
  CHECK(quartet_topology(q, {1, 2, 3, 4}) == QuartetCall::make_split(1, 2, 3, 4));
  CHECK(quartet_topology(q, {3, 1, 4, 2}) == QuartetCall::make_split(1, 2, 3, 4));

  const LeafLabeledTree s5 = star_tree(5);
  CHECK(quartet_topology(s5, {1, 2, 4, 5}).star);

  CHECK_THROWS_AS(quartet_topology(q, {1, 2, 3, 5}), DataError);
  CHECK_THROWS_AS(quartet_topology(q, {1, 1, 2, 3}), DataError);

  // Cross-check on a 6-leaf trivalent tree: the call must be the unique
  // vertex-disjoint pairing, found here by brute-force path enumeration.
  const LeafLabeledTree six = six_leaf_trivalent();
  CHECK(quartet_topology(six, {1, 2, 5, 6}) == QuartetCall::make_split(1, 2, 5, 6));
  for (int i = 1; i <= 6; ++i)
    for (int j = i + 1; j <= 6; ++j)
      for (int k = j + 1; k <= 6; ++k)
        for (int l = k + 1; l <= 6; ++l) {
          const QuartetCall call = quartet_topology(six, {i, j, k, l});
          CHECK(!call.star);  // trivalent: every quartet resolves
          int disjoint = 0;
          const std::array<std::array<int, 4>, 3> pairings = {
              {{i, j, k, l}, {i, k, j, l}, {i, l, j, k}}};
          for (const auto& pr : pairings) {
            const auto pv1 = path_vertices(six, pr[0], pr[1]);
            const auto pv2 = path_vertices(six, pr[2], pr[3]);
            const std::set<int> s1(pv1.begin(), pv1.end());
            bool hit = false;
            for (int v : pv2) hit = hit || s1.count(v);
            if (!hit) {
              ++disjoint;
              CHECK(call == QuartetCall::make_split(pr[0], pr[1], pr[2], pr[3]));
            }
          }
          CHECK(disjoint == 1);
        }
}

TEST_CASE("leaf_distances") {
  const LeafLabeledTree q = quartet_tree();
  EdgeLengths len;
  for (const Edge& e : q.edges()) len[e] = 1.0;
  const DistanceMatrix D = leaf_distances(q, len);
  CHECK(D.d(0, 1) == doctest::Approx(2.0));
  CHECK(D.d(0, 2) == doctest::Approx(3.0));

  const LeafLabeledTree s3 = star_tree(3);
  EdgeLengths len3{{Edge(1, 4), 1.0}, {Edge(2, 4), 1.0}, {Edge(3, 4), 1.0}};
  const DistanceMatrix D3 = leaf_distances(s3, len3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(D3.d(i, j) == doctest::Approx(i == j ? 0.0 : 2.0));

  len.erase(Edge(5, 6));
  CHECK_THROWS_AS(leaf_distances(q, len), DataError);
}

TEST_CASE("leaf_distances matches a per-pair path oracle") {
  Rng rng = make_rng(2, "dist-oracle");
  std::uniform_real_distribution<double> length(0.1, 3.0);
  const LeafLabeledTree t = random_tree(8, rng);
  EdgeLengths len;
  for (const Edge& e : t.edges()) len[e] = length(rng);
  const DistanceMatrix D = leaf_distances(t, len);
  for (int i = 1; i <= 8; ++i)
    for (int j = i + 1; j <= 8; ++j) {
      double sum = 0;
      for (const Edge& e : path_between(t, i, j)) sum += len.at(e);
      CHECK(D.d(i - 1, j - 1) == doctest::Approx(sum).epsilon(1e-12));
    }
}

TEST_CASE("four_point_check") {
  const LeafLabeledTree q = quartet_tree();
  EdgeLengths len;
  for (const Edge& e : q.edges()) len[e] = 0.7;
  CHECK(four_point_check(leaf_distances(q, len), 1e-12));

  DistanceMatrix bad;
  bad.d.resize(4, 4);
  bad.d << 0, 1, 2, 1.5,  //
      1, 0, 3, 3,         //
      2, 3, 0, 1,         //
      1.5, 3, 1, 0;
  // sums: d12+d34 = 2, d13+d24 = 5, d14+d23 = 4.5
  CHECK_FALSE(four_point_check(bad, 1e-9));

  // Perturbed tree metric passes at a loose tolerance.
  DistanceMatrix noisy = leaf_distances(q, len);
  Rng rng = make_rng(3, "noise");
  std::uniform_real_distribution<double> nz(-1e-9, 1e-9);
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) {
      const double eps = nz(rng);
      noisy.d(i, j) += eps;
      noisy.d(j, i) += eps;
    }
  CHECK(four_point_check(noisy, 1e-6));
}

TEST_CASE("tree metrics satisfy the four-point condition exhaustively") {
  Rng rng = make_rng(4, "fourpoint");
  std::uniform_real_distribution<double> length(0.05, 2.0);
  for (int m : {5, 8, 12}) {
    const LeafLabeledTree t = random_tree(m, rng);
    EdgeLengths len;
    for (const Edge& e : t.edges()) len[e] = length(rng);
    CHECK(four_point_check(leaf_distances(t, len), 1e-10));
  }
}

TEST_CASE("split sets and topology comparison") {
  const LeafLabeledTree q = quartet_tree();
  // Same topology under a different internal numbering.
  const LeafLabeledTree q2 =
      LeafLabeledTree::make(4, {Edge(1, 9), Edge(2, 9), Edge(9, 7), Edge(3, 7), Edge(4, 7)});
  CHECK(same_topology(q, q2));
  const LeafLabeledTree alt =
      LeafLabeledTree::make(4, {Edge(1, 5), Edge(3, 5), Edge(5, 6), Edge(2, 6), Edge(4, 6)});
  CHECK_FALSE(same_topology(q, alt));
  CHECK_FALSE(same_topology(q, star_tree(4)));
}
