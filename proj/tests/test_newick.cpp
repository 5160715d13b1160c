#include <doctest.h>

#include "arbor/newick.hpp"
#include "test_util.hpp"

using namespace arbor;
using namespace arbor::testutil;

TEST_CASE("newick_parse basics") {
  const NewickTree q = newick_parse("((1:1.0,2:1.0):1.0,3:1.0,4:1.0);");
  CHECK(q.tree.leaf_count() == 4);
  CHECK(q.tree.internal_vertices().size() == 2);
  CHECK(quartet_topology(q.tree, {1, 2, 3, 4}) == QuartetCall::make_split(1, 2, 3, 4));
  CHECK(q.lengths.size() == 5);
  for (const auto& [e, len] : q.lengths) CHECK(len == doctest::Approx(1.0));

  const NewickTree s = newick_parse("(1,2,3);");
  CHECK(s.tree.leaf_count() == 3);
  CHECK(s.tree.internal_vertices().size() == 1);
  CHECK(s.lengths.empty());

  // Rooted binary input: the degree-two top vertex folds away, lengths sum.
  const NewickTree b = newick_parse("((1:1,2:1):0.25,(3:1,4:1):0.75);");
  CHECK(b.tree.internal_vertices().size() == 2);
  const auto inner = std::find_if(b.tree.edges().begin(), b.tree.edges().end(), [&](Edge e) {
    return !b.tree.is_leaf(e.u) && !b.tree.is_leaf(e.v);
  });
  REQUIRE(inner != b.tree.edges().end());
  CHECK(b.lengths.at(*inner) == doctest::Approx(1.0));

  // Whitespace tolerated.
  CHECK_NOTHROW(newick_parse(" ( 1 , 2 , 3 ) ; "));
}

TEST_CASE("newick_parse errors carry positions") {
  CHECK_THROWS_AS(newick_parse("((1,2,3);"), ParseError);   // unbalanced
  CHECK_THROWS_AS(newick_parse("(1,2,3)"), ParseError);     // missing ';'
  CHECK_THROWS_AS(newick_parse("(1,2,3); x"), ParseError);  // trailing junk
  CHECK_THROWS_AS(newick_parse("(1,2,)"), ParseError);      // empty label
  CHECK_THROWS_AS(newick_parse("(a,b,c);"), ParseError);    // non-integer labels
  CHECK_THROWS_AS(newick_parse("(1,3,4);"), ParseError);    // labels not 1..m
  CHECK_THROWS_AS(newick_parse("(1,1,2);"), ParseError);    // duplicate
  CHECK_THROWS_AS(newick_parse("(1:-2,2,3);"), ParseError); // negative length
  CHECK_THROWS_AS(newick_parse("((1),2,3);"), ParseError);  // unary internal node

  try {
    newick_parse("(1,2,3) x;");
  } catch (const ParseError& e) {
    CHECK(e.position == 8);
  }
}

TEST_CASE("newick two-leaf and one-leaf forms") {
  const NewickTree two = newick_parse("(1:1.5,2:0.5);");
  CHECK(two.tree.leaf_count() == 2);
  CHECK(two.tree.edges() == std::vector<Edge>{Edge(1, 2)});
  CHECK(two.lengths.at(Edge(1, 2)) == doctest::Approx(2.0));
  CHECK(newick_parse(newick_write(two.tree, two.lengths)).lengths.at(Edge(1, 2)) ==
        doctest::Approx(2.0));
  CHECK(newick_parse("1;").tree.leaf_count() == 1);
}

TEST_CASE("newick round trip preserves topology and lengths") {
  Rng rng = make_rng(5, "newick-roundtrip");
  std::uniform_real_distribution<double> length(0.01, 5.0);
  for (int rep = 0; rep < 25; ++rep) {
    std::uniform_int_distribution<int> msize(3, 20);
    const int m = msize(rng);
    const LeafLabeledTree t = random_tree(m, rng);
    EdgeLengths len;
    for (const Edge& e : t.edges()) len[e] = length(rng);
    const std::string text = newick_write(t, len);
    const NewickTree back = newick_parse(text);
    CHECK(same_topology(t, back.tree));
    const auto a = split_lengths(t, len);
    const auto b = split_lengths(back.tree, back.lengths);
    REQUIRE(a.size() == b.size());
    for (const auto& [split, l] : a) {
      REQUIRE(b.count(split));
      CHECK(b.at(split) == doctest::Approx(l).epsilon(1e-11));  // 12 significant digits
    }
  }
}

TEST_CASE("newick write is deterministic and parses back without lengths") {
  Rng rng = make_rng(6, "newick-bare");
  const LeafLabeledTree t = random_tree(10, rng);
  const std::string a = newick_write(t);
  const std::string b = newick_write(t);
  CHECK(a == b);
  CHECK(same_topology(newick_parse(a).tree, t));
  CHECK(newick_parse(a).lengths.empty());
}

TEST_CASE("newick lengths keep 12 significant digits") {
  const LeafLabeledTree t = LeafLabeledTree::make(3, {Edge(1, 4), Edge(2, 4), Edge(3, 4)});
  EdgeLengths len{{Edge(1, 4), 0.123456789012345}, {Edge(2, 4), 1e-7}, {Edge(3, 4), 12345.6789}};
  const NewickTree back = newick_parse(newick_write(t, len));
  const auto sl = split_lengths(back.tree, back.lengths);
  for (const auto& [split, l] : split_lengths(t, len)) {
    CHECK(sl.at(split) == doctest::Approx(l).epsilon(1e-11));
  }
}
