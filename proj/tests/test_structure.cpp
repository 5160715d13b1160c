#include <doctest.h>

#include <bit>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "arbor/structure.hpp"
#include "test_util.hpp"

using namespace arbor;
using namespace arbor::testutil;

namespace {

LeafLabeledTree quartet_tree() {
  return LeafLabeledTree::make(4, {Edge(1, 5), Edge(2, 5), Edge(5, 6), Edge(3, 6), Edge(4, 6)});
}

Dataset discrete_dataset(const std::vector<std::vector<int>>& rows, int d) {
  Dataset data;
  data.kind = Dataset::Kind::discrete;
  data.d = d;
  const int m = static_cast<int>(rows[0].size());
  for (int i = 1; i <= m; ++i) data.columns.push_back("x" + std::to_string(i));
  data.values.resize(static_cast<long>(rows.size()), m);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (int c = 0; c < m; ++c) data.values(static_cast<long>(r), c) = rows[r][c];
  return data;
}

// Uniform random labeled tree on vertices 1..k (Prufer decode).
std::vector<Edge> random_prufer_tree(int k, Rng& rng) {
  if (k == 2) return {Edge(1, 2)};
  std::uniform_int_distribution<int> pick(1, k);
  std::vector<int> prufer(k - 2);
  for (int& x : prufer) x = pick(rng);
  std::vector<int> degree(k + 1, 1);
  for (int x : prufer) ++degree[x];
  std::vector<Edge> edges;
  std::vector<bool> used(k + 1, false);
  for (int x : prufer) {
    for (int v = 1; v <= k; ++v)
      if (!used[v] && degree[v] == 1) {
        edges.emplace_back(v, x);
        used[v] = true;
        --degree[x];
        break;
      }
  }
  int a = 0, b = 0;
  for (int v = 1; v <= k; ++v)
    if (!used[v] && degree[v] >= 1) (a == 0 ? a : b) = v;
  edges.emplace_back(a, b);
  return edges;
}

// Random marked tree: k vertices, m of them observed (random subset).
MarkedTree random_marked_tree(int k, int m, Rng& rng) {
  MarkedTree t;
  for (int v = 1; v <= k; ++v) t.vertices.push_back(v);
  t.edges = random_prufer_tree(k, rng);
  std::vector<int> verts = t.vertices;
  std::shuffle(verts.begin(), verts.end(), rng);
  std::vector<int> chosen(verts.begin(), verts.begin() + m);
  std::sort(chosen.begin(), chosen.end());
  for (int i = 0; i < m; ++i) t.observed[chosen[i]] = i + 1;
  return t;
}

// Observed covariance of a marked Gaussian tree: standardized path products
// scaled by the observed variances. Independent oracle for surgery tests.
Eigen::MatrixXd marked_observed_covariance(const MarkedTree& t,
                                           const std::map<Edge, double>& rho,
                                           const std::map<int, double>& var) {
  const int m = static_cast<int>(t.observed.size());
  std::map<int, std::vector<std::pair<int, double>>> adj;
  for (const Edge& e : t.edges) {
    adj[e.u].push_back({e.v, rho.at(e)});
    adj[e.v].push_back({e.u, rho.at(e)});
  }
  Eigen::MatrixXd sigma(m, m);
  for (const auto& [vi, li] : t.observed) {
    std::map<int, double> prod{{vi, 1.0}};
    std::vector<int> stack{vi};
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      for (const auto& [w, r] : adj[v])
        if (!prod.count(w)) {
          prod[w] = prod[v] * r;
          stack.push_back(w);
        }
    }
    for (const auto& [vj, lj] : t.observed) {
      const double vi_var = var.count(li) ? var.at(li) : 1.0;
      const double vj_var = var.count(lj) ? var.at(lj) : 1.0;
      sigma(li - 1, lj - 1) = prod.at(vj) * std::sqrt(vi_var * vj_var);
    }
  }
  return sigma;
}

// Observed joint of a marked discrete tree by full enumeration.
Eigen::VectorXd marked_observed_joint(const MarkedTree& t, int d, int root,
                                      const Eigen::VectorXd& root_dist,
                                      const std::map<Edge, Eigen::MatrixXd>& trans) {
  const int k = static_cast<int>(t.vertices.size());
  const int m = static_cast<int>(t.observed.size());
  std::map<int, int> pos;
  for (int i = 0; i < k; ++i) pos[t.vertices[i]] = i;
  std::map<int, std::vector<int>> adj;
  for (const Edge& e : t.edges) {
    adj[e.u].push_back(e.v);
    adj[e.v].push_back(e.u);
  }
  std::map<int, int> parent{{root, 0}};
  std::vector<int> order{root};
  for (std::size_t i = 0; i < order.size(); ++i)
    for (int w : adj[order[i]])
      if (!parent.count(w)) {
        parent[w] = order[i];
        order.push_back(w);
      }
  long total = 1, mt = 1;
  for (int i = 0; i < k; ++i) total *= d;
  for (int i = 0; i < m; ++i) mt *= d;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(mt);
  std::vector<int> state(k);
  for (long idx = 0; idx < total; ++idx) {
    long rem = idx;
    for (int i = k - 1; i >= 0; --i) {
      state[i] = static_cast<int>(rem % d);
      rem /= d;
    }
    double pr = root_dist(state[pos.at(root)]);
    for (const Edge& e : t.edges) {
      const int pu = parent.at(e.u) == e.v ? e.v : e.u;
      const int pv = pu == e.u ? e.v : e.u;
      pr *= trans.at(e)(state[pos.at(pu)], state[pos.at(pv)]);
    }
    long li = 0;
    std::map<int, int> by_label;
    for (const auto& [v, l] : t.observed) by_label[l] = state[pos.at(v)];
    for (const auto& [l, s] : by_label) li = li * d + s;
    out(li) += pr;
  }
  return out;
}

}  // namespace

TEST_CASE("mutual_information_weights") {
  // Independent columns with an exactly uniform empirical table: MI = 0.
  const Dataset ind = discrete_dataset({{0, 0}, {0, 1}, {1, 0}, {1, 1}}, 2);
  const WeightedGraph g = mutual_information_weights(ind, SecondOrderKind::markov_tau);
  CHECK(g.w(0, 1) == doctest::Approx(0.0));

  // Four-term arithmetic oracle for the table [[.4,.1],[.1,.4]].
  std::vector<std::vector<int>> rows;
  for (int r = 0; r < 4; ++r) rows.push_back({0, 0});
  rows.push_back({0, 1});
  rows.push_back({1, 0});
  for (int r = 0; r < 4; ++r) rows.push_back({1, 1});
  const WeightedGraph g2 =
      mutual_information_weights(discrete_dataset(rows, 2), SecondOrderKind::markov_tau);
  const double oracle = 2 * 0.4 * std::log(0.4 / 0.25) + 2 * 0.1 * std::log(0.1 / 0.25);
  CHECK(g2.w(0, 1) == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(g2.w(0, 1) == doctest::Approx(0.1927).epsilon(1e-3));

  // Gaussian: rho = 0 gives weight 0.
  Dataset cont;
  cont.kind = Dataset::Kind::continuous;
  cont.columns = {"x1", "x2"};
  cont.values.resize(4, 2);
  cont.values << 1, 1, -1, 1, 1, -1, -1, -1;  // exactly uncorrelated
  const WeightedGraph g3 = mutual_information_weights(cont, SecondOrderKind::gaussian_correlation);
  CHECK(g3.w(0, 1) == doctest::Approx(0.0));

  const Dataset constant = discrete_dataset({{0, 0}, {0, 1}}, 2);
  CHECK_THROWS_AS(mutual_information_weights(constant, SecondOrderKind::markov_tau), DataError);
}

TEST_CASE("chow_liu on three vertices and tie-breaking") {
  WeightedGraph g;
  g.m = 3;
  g.w = Eigen::MatrixXd::Zero(3, 3);
  g.w(0, 1) = g.w(1, 0) = 0.5;
  g.w(1, 2) = g.w(2, 1) = 0.4;
  g.w(0, 2) = g.w(2, 0) = 0.1;
  const SpanningTree st = chow_liu(g);
  CHECK(st.edges == std::vector<Edge>{Edge(1, 2), Edge(2, 3)});
  CHECK(st.total_weight == doctest::Approx(0.9));

  // All weights equal: the lexicographically first spanning tree (a star
  // at vertex 1).
  WeightedGraph eq;
  eq.m = 4;
  eq.w = Eigen::MatrixXd::Constant(4, 4, 1.0);
  eq.w.diagonal().setZero();
  const SpanningTree st2 = chow_liu(eq);
  CHECK(st2.edges == std::vector<Edge>{Edge(1, 2), Edge(1, 3), Edge(1, 4)});
}

TEST_CASE("chow_liu attains the exhaustive spanning-tree maximum") {
  Rng rng = make_rng(40, "chow-liu");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int rep = 0; rep < 25; ++rep) {
    const int m = 4 + rep % 3;  // 4..6
    WeightedGraph g;
    g.m = m;
    g.w = Eigen::MatrixXd::Zero(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j) g.w(i, j) = g.w(j, i) = unif(rng);
    const SpanningTree st = chow_liu(g);
    CHECK(st.total_weight ==
          doctest::Approx(max_spanning_tree_weight_exhaustive(g.w)).epsilon(1e-12));
  }
}

TEST_CASE("gaussian Kruskal invariance: MI weights and squared correlations") {
  Rng rng = make_rng(41, "kruskal-invariance");
  const LeafLabeledTree t = random_trivalent(6, rng);
  const GaussianParams p = random_gaussian(t, rng, 0.25, 0.9);
  const Dataset data = simulate(p, 2000, 8);
  const WeightedGraph mi = mutual_information_weights(data, SecondOrderKind::gaussian_correlation);
  const EmpiricalSecondOrder s =
      empirical_second_order(data, SecondOrderKind::gaussian_correlation);
  Eigen::MatrixXd rho2 = s.values.cwiseProduct(s.values);
  rho2.diagonal().setZero();
  const SpanningTree a = max_weight_spanning_tree(mi.w);
  const SpanningTree b = max_weight_spanning_tree(rho2);
  CHECK(a.edges == b.edges);
}

TEST_CASE("em_fixed_tree: max_iter = 0 returns the init with its loglik") {
  Rng rng = make_rng(42, "em-zero");
  const LeafLabeledTree t = quartet_tree();
  const MarkovParams init = random_markov(t, 2, rng);
  const Dataset data = simulate(init, 200, 5);
  EmOptions opts;
  opts.max_iter = 0;
  opts.restarts = 1;
  const ScoredModel out = em_fixed_tree(t, data, init, opts);
  CHECK(out.trace.size() == 1);
  CHECK(out.loglik == doctest::Approx(loglik(init, data)).epsilon(1e-12));
  const MarkovParams& got = std::get<MarkovParams>(out.model);
  for (const Edge& e : t.edges())
    CHECK((got.transition(e) - init.transition(e)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("em_fixed_tree: exact-fit parameters are a fixed point (discrete)") {
  Rng rng = make_rng(43, "em-fixpoint");
  const LeafLabeledTree t = quartet_tree();
  const MarkovParams truth = strong_markov(t, 2, 0.3, rng);
  // Weighted dataset: every leaf configuration, weighted by its exact model
  // probability, so the empirical distribution equals the model's.
  const Eigen::VectorXd lj = leaf_joint(truth, full_joint(truth));
  std::vector<std::vector<int>> rows;
  std::vector<double> weights;
  for (long idx = 0; idx < lj.size(); ++idx) {
    long rem = idx;
    std::vector<int> row(4);
    for (int i = 3; i >= 0; --i) {
      row[i] = static_cast<int>(rem % 2);
      rem /= 2;
    }
    rows.push_back(row);
    weights.push_back(2000.0 * lj(idx));
  }
  const Dataset data = discrete_dataset(rows, 2);
  EmOptions opts;
  opts.max_iter = 3;
  opts.restarts = 1;
  opts.pseudocount = 0.0;
  opts.tol = 0.0;
  opts.row_weights = &weights;
  const ScoredModel out = em_fixed_tree(t, data, truth, opts);
  for (std::size_t i = 1; i < out.trace.size(); ++i)
    CHECK(std::abs(out.trace[i] - out.trace[0]) <= 1e-10 * (1.0 + std::abs(out.trace[0])));
  const MarkovParams& got = std::get<MarkovParams>(out.model);
  for (const Edge& e : t.edges())
    CHECK((got.transition(e) - truth.transition(e)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("em_fixed_tree: exact-fit parameters are a fixed point (gaussian)") {
  Rng rng = make_rng(44, "em-fixpoint-g");
  const LeafLabeledTree t = quartet_tree();
  const GaussianParams truth = random_gaussian(t, rng, 0.3, 0.8);
  // Transform a sample so its second-moment matrix is exactly the model's
  // leaf covariance.
  Dataset data = simulate(truth, 500, 11);
  const Eigen::MatrixXd target = [&] {
    const Eigen::MatrixXd R = gaussian_leaf_correlations(truth);
    Eigen::VectorXd sd(4);
    for (int i = 1; i <= 4; ++i) sd(i - 1) = std::sqrt(truth.leaf_var.at(i));
    return Eigen::MatrixXd(sd.asDiagonal() * R * sd.asDiagonal());
  }();
  const Eigen::MatrixXd sample = data.values.transpose() * data.values / data.n();
  const auto sqrt_of = [](const Eigen::MatrixXd& s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    return Eigen::MatrixXd(es.operatorSqrt());
  };
  data.values = (data.values * sqrt_of(sample).inverse() * sqrt_of(target)).eval();

  EmOptions opts;
  opts.max_iter = 3;
  opts.restarts = 1;
  opts.tol = 0.0;
  const ScoredModel out = em_fixed_tree(t, data, truth, opts);
  for (std::size_t i = 1; i < out.trace.size(); ++i)
    CHECK(std::abs(out.trace[i] - out.trace[0]) <= 1e-10 * (1.0 + std::abs(out.trace[0])));
  const GaussianParams& got = std::get<GaussianParams>(out.model);
  for (const Edge& e : t.edges())
    CHECK(got.edge_corr.at(e) == doctest::Approx(truth.edge_corr.at(e)).epsilon(1e-8));
}

TEST_CASE("em_fixed_tree improves the loglik and keeps a monotone trace") {
  Rng rng = make_rng(45, "em-improve");
  const LeafLabeledTree t = quartet_tree();
  const MarkovParams truth = strong_markov(t, 2, 0.2, rng);
  const Dataset data = simulate(truth, 10000, 21);
  const MarkovParams init = random_markov(t, 2, rng);
  EmOptions opts;
  opts.max_iter = 60;
  opts.restarts = 2;
  opts.seed = 3;
  const ScoredModel out = em_fixed_tree(t, data, init, opts);
  CHECK(out.loglik >= loglik(init, data));
  for (std::size_t i = 1; i < out.trace.size(); ++i)
    CHECK(out.trace[i] >= out.trace[i - 1] - 1e-9 * (1.0 + std::abs(out.trace[i])));
  // Not far from the generating model's likelihood.
  CHECK(out.loglik >= loglik(truth, data) - 20.0);
}

TEST_CASE("em_fixed_tree reports the offending row on a degenerate init") {
  const LeafLabeledTree t = quartet_tree();
  MarkovParams init;
  init.tree = t.with_root(5);
  init.d = 2;
  init.root_dist = Eigen::VectorXd::Constant(2, 0.5);
  for (const Edge& e : t.edges()) init.transitions[e] = Eigen::MatrixXd::Identity(2, 2);
  const Dataset data = discrete_dataset({{0, 0, 0, 0}, {0, 1, 0, 0}}, 2);
  EmOptions opts;
  opts.restarts = 1;
  try {
    em_fixed_tree(t, data, init, opts);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }
}

TEST_CASE("gaussian EM improves over a random init") {
  Rng rng = make_rng(46, "em-gauss");
  const LeafLabeledTree t = quartet_tree();
  const GaussianParams truth = random_gaussian(t, rng, 0.4, 0.85);
  const Dataset data = simulate(truth, 5000, 13);
  const GaussianParams init = random_gaussian(t, rng, 0.1, 0.6);
  EmOptions opts;
  opts.max_iter = 80;
  opts.restarts = 2;
  const ScoredModel out = em_fixed_tree(t, data, init, opts);
  for (std::size_t i = 1; i < out.trace.size(); ++i)
    CHECK(out.trace[i] >= out.trace[i - 1] - 1e-9 * (1.0 + std::abs(out.trace[i])));
  CHECK(out.loglik >= loglik(AnyParams(init), data));
  CHECK(out.loglik >= loglik(AnyParams(truth), data) - 20.0);
}

TEST_CASE("tree_surgery: pendant, chain, and observed-internal rules") {
  // Hidden pendant vertex is removed.
  {
    MarkedTree t;
    t.vertices = {1, 2, 3, 4};
    t.edges = {Edge(1, 3), Edge(2, 3), Edge(3, 4)};  // 4 is a hidden pendant
    t.observed = {{1, 1}, {2, 2}};
    std::map<Edge, double> rho{{Edge(1, 3), 0.5}, {Edge(2, 3), 0.6}, {Edge(3, 4), 0.7}};
    const GaussianParams out = tree_surgery(t, rho, {{1, 1.0}, {2, 1.0}});
    CHECK(out.tree.leaf_count() == 2);
    // 3 then has degree two and the chain rule fires: single edge 1-2.
    CHECK(out.tree.edges() == std::vector<Edge>{Edge(1, 2)});
    CHECK(out.edge_corr.at(Edge(1, 2)) == doctest::Approx(0.3).epsilon(1e-12));
  }
  // Chain of hidden degree-two vertices: correlations multiply.
  {
    MarkedTree t;
    t.vertices = {1, 2, 3, 4, 5, 6, 7};
    t.edges = {Edge(1, 5), Edge(2, 5), Edge(5, 7), Edge(7, 6), Edge(3, 6), Edge(4, 6)};
    t.observed = {{1, 1}, {2, 2}, {3, 3}, {4, 4}};
    std::map<Edge, double> rho{{Edge(1, 5), 0.9}, {Edge(2, 5), 0.8}, {Edge(5, 7), 0.5},
                               {Edge(7, 6), 0.5}, {Edge(3, 6), 0.7}, {Edge(4, 6), 0.6}};
    const GaussianParams out = tree_surgery(t, rho, {});
    CHECK(out.tree.leaf_count() == 4);
    CHECK(out.tree.internal_vertices().size() == 2);
    const Eigen::MatrixXd R = gaussian_leaf_correlations(out);
    CHECK(R(0, 2) == doctest::Approx(0.9 * 0.25 * 0.7).epsilon(1e-12));
  }
  // Observed internal vertex becomes a pendant copy with correlation one.
  {
    MarkedTree t;
    t.vertices = {1, 2, 3};
    t.edges = {Edge(1, 3), Edge(2, 3)};
    t.observed = {{1, 1}, {2, 2}, {3, 3}};  // 3 is observed and internal
    std::map<Edge, double> rho{{Edge(1, 3), 0.5}, {Edge(2, 3), 0.4}};
    const GaussianParams out = tree_surgery(t, rho, {{1, 1.}, {2, 1.}, {3, 1.}});
    CHECK(out.tree.leaf_count() == 3);
    CHECK(out.tree.internal_vertices().size() == 1);
    const int h = out.tree.internal_vertices()[0];
    CHECK(out.edge_corr.at(Edge(3, h)) == doctest::Approx(1.0));
    const Eigen::MatrixXd R = gaussian_leaf_correlations(out);
    CHECK(R(0, 2) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(R(0, 1) == doctest::Approx(0.2).epsilon(1e-12));
  }
}

TEST_CASE("tree_surgery preserves the observed likelihood (gaussian)") {
  Rng rng = make_rng(47, "surgery-gauss");
  std::uniform_real_distribution<double> mag(0.25, 0.9);
  std::uniform_real_distribution<double> var(0.5, 2.0);
  std::bernoulli_distribution flip(0.5);
  for (int rep = 0; rep < 25; ++rep) {
    std::uniform_int_distribution<int> ksize(5, 9);
    const int k = ksize(rng);
    std::uniform_int_distribution<int> msize(3, k - 2);
    const int m = msize(rng);
    const MarkedTree t = random_marked_tree(k, m, rng);
    std::map<Edge, double> rho;
    for (const Edge& e : t.edges) rho[e] = flip(rng) ? -mag(rng) : mag(rng);
    std::map<int, double> ovar;
    for (int l = 1; l <= m; ++l) ovar[l] = var(rng);

    for (bool trivalent : {false, true}) {
      const GaussianParams out = tree_surgery(t, rho, ovar, trivalent);
      // Oracle: equal observed covariances mean equal likelihoods.
      const Eigen::MatrixXd want = marked_observed_covariance(t, rho, ovar);
      const GaussianLeafDensity den(out);
      CHECK((den.covariance() - want).cwiseAbs().maxCoeff() < 1e-10);
      if (trivalent)
        for (int v : out.tree.internal_vertices()) CHECK(out.tree.degree(v) == 3);
    }
  }
}

TEST_CASE("tree_surgery preserves the observed likelihood (markov)") {
  Rng rng = make_rng(48, "surgery-markov");
  for (int rep = 0; rep < 25; ++rep) {
    std::uniform_int_distribution<int> ksize(5, 8);
    const int k = ksize(rng);
    std::uniform_int_distribution<int> msize(2, k - 2);
    const int m = msize(rng);
    const int d = 2 + rep % 2;
    const MarkedTree t = random_marked_tree(k, m, rng);
    std::uniform_int_distribution<int> rootpick(1, k);
    const int root = rootpick(rng);
    const Eigen::VectorXd pi = random_simplex(d, rng);
    std::map<Edge, Eigen::MatrixXd> trans;
    for (const Edge& e : t.edges) {
      Eigen::MatrixXd M(d, d);
      for (int a = 0; a < d; ++a) M.row(a) = random_simplex(d, rng).transpose();
      trans[e] = std::move(M);
    }

    for (bool trivalent : {false, true}) {
      const MarkovParams out = tree_surgery_markov(t, d, root, pi, trans, trivalent);
      const Eigen::VectorXd want = marked_observed_joint(t, d, root, pi, trans);
      const Eigen::VectorXd got = leaf_joint(out, full_joint(out));
      CHECK((want - got).cwiseAbs().maxCoeff() < 1e-12);
      if (trivalent)
        for (int v : out.tree.internal_vertices()) CHECK(out.tree.degree(v) == 3);
    }
  }
}

TEST_CASE("bic_score dimensions and trivia") {
  Rng rng = make_rng(49, "bic");
  // Gaussian quartet: m = 4, |E| = 5 -> dim 9.
  {
    const LeafLabeledTree t = quartet_tree();
    const GaussianParams p = random_gaussian(t, rng, 0.3, 0.8);
    const Dataset data = simulate(p, 100, 3);
    const ScoredModel s = bic_score(p, data);
    CHECK(s.dim == 9);
    CHECK_FALSE(s.a1_warning);
    CHECK(s.bic == doctest::Approx(s.loglik - 4.5 * std::log(100.0)));
  }
  // n = 1: the penalty vanishes.
  {
    const LeafLabeledTree t = quartet_tree();
    const MarkovParams p = random_markov(t, 2, rng);
    Dataset one = simulate(p, 1, 4);
    const ScoredModel s = bic_score(p, one);
    CHECK(s.bic == doctest::Approx(s.loglik));
  }
  // Discrete 3-leaf star, d = 2: dim = 1 + 3 * 2 = 7.
  {
    const LeafLabeledTree star = LeafLabeledTree::make(3, {Edge(1, 4), Edge(2, 4), Edge(3, 4)});
    const MarkovParams p = random_markov(star, 2, rng);
    const Dataset data = simulate(p, 50, 5);
    const ScoredModel s = bic_score(p, data);
    CHECK(s.dim == 7);
  }
  // Hidden vertex of degree two triggers the (A1) warning.
  {
    const LeafLabeledTree path = LeafLabeledTree::make(2, {Edge(1, 3), Edge(3, 2)});
    const MarkovParams p = random_markov(path, 2, rng);
    const Dataset data = simulate(p, 50, 6);
    CHECK(bic_score(p, data).a1_warning);
  }
}

TEST_CASE("discrete parameter count matches the numerical Jacobian rank") {
  // 3-leaf star latent class model, d = 2: the map theta -> leaf joint has
  // generic rank 7 = (d-1) + |E| d (d-1).
  const LeafLabeledTree star = LeafLabeledTree::make(3, {Edge(1, 4), Edge(2, 4), Edge(3, 4)});
  Rng rng = make_rng(50, "jacobian");
  const MarkovParams p0 = random_markov(star, 2, rng);

  const auto pack = [&](const MarkovParams& p) {
    Eigen::VectorXd theta(7);
    theta(0) = p.root_dist(0);
    int k = 1;
    for (const Edge& e : star.edges()) {
      theta(k++) = p.transition(e)(0, 0);
      theta(k++) = p.transition(e)(1, 0);
    }
    return theta;
  };
  const auto unpack = [&](const Eigen::VectorXd& theta) {
    MarkovParams p = p0;
    p.root_dist << theta(0), 1 - theta(0);
    int k = 1;
    for (const Edge& e : star.edges()) {
      Eigen::MatrixXd M(2, 2);
      M << theta(k), 1 - theta(k), theta(k + 1), 1 - theta(k + 1);
      k += 2;
      p.transitions[e] = M;
    }
    return p;
  };
  const auto leafprobs = [&](const Eigen::VectorXd& theta) {
    const MarkovParams p = unpack(theta);
    return leaf_joint(p, full_joint(p));
  };

  const Eigen::VectorXd theta0 = pack(p0);
  const double h = 1e-6;
  Eigen::MatrixXd J(8, 7);
  for (int j = 0; j < 7; ++j) {
    Eigen::VectorXd up = theta0, dn = theta0;
    up(j) += h;
    dn(j) -= h;
    J.col(j) = (leafprobs(up) - leafprobs(dn)) / (2 * h);
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(J);
  int rank = 0;
  for (int i = 0; i < svd.singularValues().size(); ++i)
    if (svd.singularValues()(i) > 1e-7 * svd.singularValues()(0)) ++rank;
  CHECK(rank == 7);
}

TEST_CASE("bic is monotone in loglik for fixed dim and n") {
  Rng rng = make_rng(51, "bic-monotone");
  const LeafLabeledTree t = quartet_tree();
  const MarkovParams truth = strong_markov(t, 2, 0.2, rng);
  const Dataset data = simulate(truth, 500, 9);
  const ScoredModel a = bic_score(truth, data);
  const ScoredModel b = bic_score(random_markov(t, 2, rng), data);
  CHECK(a.dim == b.dim);
  CHECK((a.loglik > b.loglik) == (a.bic > b.bic));
}

TEST_CASE("structural_em stays put at a structural local optimum") {
  Rng rng = make_rng(52, "sem-fixpoint");
  const LeafLabeledTree t = quartet_tree();
  const MarkovParams truth = strong_markov(t, 2, 0.15, rng);
  const Dataset data = simulate(truth, 5000, 17);
  // Fit parameters on the true tree first, then hand the fit to SEM.
  EmOptions em;
  em.max_iter = 100;
  em.restarts = 1;
  const ScoredModel fitted = em_fixed_tree(t, data, truth, em);
  SemOptions sem;
  sem.em.restarts = 1;
  sem.max_outer = 10;
  const ScoredModel out = structural_em(data, fitted, sem);
  const LeafLabeledTree& result = std::get<MarkovParams>(out.model).tree;
  CHECK(same_topology(result, t));
  CHECK(out.loglik >= fitted.loglik - 1e-6 * (1 + std::abs(fitted.loglik)));
}

TEST_CASE("structural_em recovers the quartet split from a wrong init") {
  const Split want = edge_split(quartet_tree(), Edge(5, 6));
  int hits = 0;
  const int seeds = 5;
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng = make_rng(53, "sem-recover", seed);
    const MarkovParams truth = strong_markov(quartet_tree().with_root(5), 2, 0.12, rng);
    const Dataset data = simulate(truth, 10000, derive_seed(54, "sem-data", seed));
    // Wrong topology 13|24 with random parameters.
    const LeafLabeledTree wrong =
        LeafLabeledTree::make(4, {Edge(1, 5), Edge(3, 5), Edge(5, 6), Edge(2, 6), Edge(4, 6)});
    const MarkovParams init = random_markov(wrong, 2, rng);
    SemOptions sem;
    sem.em.restarts = 2;
    sem.em.seed = seed;
    sem.max_outer = 15;
    const ScoredModel out = structural_em(data, bic_score(init, data), sem);
    const LeafLabeledTree& result = std::get<MarkovParams>(out.model).tree;
    std::set<Split> nontrivial;
    for (const Split s : split_set(result))
      if (std::popcount(s) > 1 && std::popcount(s) < static_cast<unsigned>(result.leaf_count() - 1))
        nontrivial.insert(s);
    if (nontrivial == std::set<Split>{want}) ++hits;
    // The trace never decreases.
    for (std::size_t i = 1; i < out.trace.size(); ++i)
      CHECK(out.trace[i] >= out.trace[i - 1] - 1e-8 * (1.0 + std::abs(out.trace[i])));
  }
  CHECK(hits >= 4);
}
