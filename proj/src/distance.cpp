#include "arbor/distance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace arbor {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

void EmpiricalSecondOrder::validate() const {
  if (values.rows() != values.cols()) throw DataError("second-order matrix must be square");
  const int m = static_cast<int>(values.rows());
  for (int i = 0; i < m; ++i) {
    if (values(i, i) != 1.0) throw DataError("second-order matrix must have unit diagonal");
    for (int j = i + 1; j < m; ++j) {
      if (values(i, j) != values(j, i)) throw DataError("second-order matrix must be symmetric");
      if (!(std::abs(values(i, j)) <= 1.0))
        throw DataError("second-order entries must lie in [-1, 1]");
    }
  }
}

EmpiricalSecondOrder empirical_second_order(const Dataset& data, SecondOrderKind kind) {
  data.validate();
  if (data.n() < 2) throw DataError("need at least two rows");
  const int m = data.observed_count();
  const long n = data.n();
  EmpiricalSecondOrder out;
  out.kind = kind;
  out.n = n;
  out.values = Eigen::MatrixXd::Identity(m, m);

  if (kind == SecondOrderKind::gaussian_correlation) {
    if (data.kind != Dataset::Kind::continuous)
      throw DataError("gaussian-correlation needs continuous data");
    const Eigen::MatrixXd X = data.values.leftCols(m);
    const Eigen::RowVectorXd mean = X.colwise().mean();
    const Eigen::MatrixXd C = X.rowwise() - mean;
    Eigen::VectorXd sd(m);
    for (int i = 0; i < m; ++i) {
      sd(i) = std::sqrt(C.col(i).squaredNorm() / n);
      if (!(sd(i) > 0.0))
        throw DataError("constant column x" + std::to_string(i + 1) + ": zero variance");
    }
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j) {
        const double r = C.col(i).dot(C.col(j)) / (n * sd(i) * sd(j));
        out.values(i, j) = out.values(j, i) = std::clamp(r, -1.0, 1.0);
      }
    return out;
  }

  if (data.kind != Dataset::Kind::discrete) throw DataError("markov-tau needs discrete data");
  const int d = data.d;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      Eigen::MatrixXd table = Eigen::MatrixXd::Zero(d, d);
      for (long r = 0; r < n; ++r) table(data.state(r, i), data.state(r, j)) += 1.0 / n;
      double den = 1.0;
      for (int s = 0; s < d; ++s) den *= table.row(s).sum() * table.col(s).sum();
      if (!(den > 0.0))
        throw DataError("degenerate empirical table for pair (x" + std::to_string(i + 1) + ", x" +
                        std::to_string(j + 1) + "): some state was never observed");
      const double tau = table.determinant() / std::sqrt(den);
      out.values(i, j) = out.values(j, i) = std::clamp(tau, -1.0, 1.0);
    }
  return out;
}

EmpiricalSecondOrder exact_second_order(const AnyParams& p) {
  EmpiricalSecondOrder out;
  out.n = 0;
  if (const auto* g = std::get_if<GaussianParams>(&p)) {
    out.kind = SecondOrderKind::gaussian_correlation;
    out.values = gaussian_leaf_correlations(*g);
  } else {
    out.kind = SecondOrderKind::markov_tau;
    out.values = tau_matrix(std::get<MarkovParams>(p));
  }
  return out;
}

DistanceMatrix distances_from_second_order(const EmpiricalSecondOrder& s) {
  s.validate();
  const int m = static_cast<int>(s.values.rows());
  DistanceMatrix D;
  D.d = Eigen::MatrixXd::Zero(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      const double a = std::abs(s.values(i, j));
      D.d(i, j) = D.d(j, i) = a > 0.0 ? -std::log(a) : kInf;
    }
  return D;
}

NJResult neighbor_joining(const DistanceMatrix& D) {
  D.validate();
  const int m = D.size();
  if (m < 3) throw DataError("neighbor joining needs at least three leaves");
  if (!D.finite())
    throw DataError("infinite distances (zero correlations) are not supported: "
                    "the input decomposes into a forest");

  NJResult res;
  std::vector<Edge> edges;
  EdgeLengths lengths;

  // Active node ids in creation order: leaves 1..m, then m+1, m+2, ..
  std::vector<int> node(m);
  std::iota(node.begin(), node.end(), 1);
  Eigen::MatrixXd dist = D.d;
  int next_id = m + 1;

  const auto add_edge = [&](int a, int b, double len) {
    if (len < 0.0) {
      len = 0.0;
      ++res.clamped;
    }
    const Edge e(a, b);
    edges.push_back(e);
    lengths[e] = len;
  };

  while (node.size() > 3) {
    const int r = static_cast<int>(node.size());
    Eigen::VectorXd rowsum = dist.rowwise().sum();
    int bi = -1, bj = -1;
    double best = kInf;
    for (int i = 0; i < r; ++i)
      for (int j = i + 1; j < r; ++j) {
        const double q = (r - 2) * dist(i, j) - rowsum(i) - rowsum(j);
        if (q < best) {
          best = q;
          bi = i;
          bj = j;
        }
      }
    const double dij = dist(bi, bj);
    const double li = 0.5 * dij + (rowsum(bi) - rowsum(bj)) / (2.0 * (r - 2));
    const double lj = dij - li;
    const int u = next_id++;
    add_edge(node[bi], u, li);
    add_edge(node[bj], u, lj);

    // Replace i with the new node, drop j.
    Eigen::MatrixXd nd(r - 1, r - 1);
    std::vector<int> nn;
    std::vector<int> keep;
    for (int k = 0; k < r; ++k)
      if (k != bi && k != bj) keep.push_back(k);
    for (int a = 0; a < static_cast<int>(keep.size()); ++a) {
      nn.push_back(node[keep[a]]);
      for (int b = 0; b < static_cast<int>(keep.size()); ++b)
        nd(a, b) = dist(keep[a], keep[b]);
    }
    const int last = static_cast<int>(keep.size());
    for (int a = 0; a < last; ++a) {
      const double duk = 0.5 * (dist(keep[a], bi) + dist(keep[a], bj) - dij);
      nd(a, last) = nd(last, a) = duk;
    }
    nd(last, last) = 0.0;
    nn.push_back(u);
    node = std::move(nn);
    dist = std::move(nd);
  }

  // Final three nodes joined at a central vertex.
  const int w = next_id++;
  const double la = 0.5 * (dist(0, 1) + dist(0, 2) - dist(1, 2));
  const double lb = 0.5 * (dist(0, 1) + dist(1, 2) - dist(0, 2));
  const double lc = 0.5 * (dist(0, 2) + dist(1, 2) - dist(0, 1));
  add_edge(node[0], w, la);
  add_edge(node[1], w, lb);
  add_edge(node[2], w, lc);

  res.tree = LeafLabeledTree::make(m, std::move(edges));
  res.lengths = std::move(lengths);
  return res;
}

QuartetCall quartet_select(const EmpiricalSecondOrder& s, std::array<int, 4> leaves,
                           double star_tol) {
  s.validate();
  std::sort(leaves.begin(), leaves.end());
  if (std::adjacent_find(leaves.begin(), leaves.end()) != leaves.end())
    throw DataError("quartet indices must be distinct");
  const int m = static_cast<int>(s.values.rows());
  for (int x : leaves)
    if (x < 1 || x > m) throw DataError("quartet index out of range");
  const auto [a, b, c, d] = leaves;
  const auto v = [&](int i, int j) { return s.values(i - 1, j - 1); };
  const std::array<double, 3> prod = {std::abs(v(a, b) * v(c, d)), std::abs(v(a, c) * v(b, d)),
                                      std::abs(v(a, d) * v(b, c))};
  const double mx = *std::max_element(prod.begin(), prod.end());
  const double mn = *std::min_element(prod.begin(), prod.end());
  if (mx - mn <= star_tol * mx) return QuartetCall::make_star(leaves);
  if (prod[0] >= prod[1] && prod[0] >= prod[2]) return QuartetCall::make_split(a, b, c, d);
  if (prod[1] >= prod[2]) return QuartetCall::make_split(a, c, b, d);
  return QuartetCall::make_split(a, d, b, c);
}

GaussianParams edge_correlations_from_lengths(const LeafLabeledTree& t, const EdgeLengths& len) {
  GaussianParams p;
  p.tree = t;
  for (const Edge& e : t.edges()) {
    auto it = len.find(e);
    if (it == len.end()) throw DataError("missing length for edge " + to_string(e));
    if (!(it->second >= 0.0)) throw DataError("lengths must be nonnegative");
    p.edge_corr[e] = std::exp(-it->second);
  }
  for (int i = 1; i <= t.leaf_count(); ++i) p.leaf_var[i] = 1.0;
  p.validate();
  return p;
}

TripleResult triple_recover(double rho12, double rho13, double rho23) {
  const int zeros = (rho12 == 0.0) + (rho13 == 0.0) + (rho23 == 0.0);
  if (zeros >= 2)
    throw NumericalError("non-identifiable: the parameter fiber is a positive-dimensional set");
  if (zeros == 1)
    throw NumericalError("inconsistent correlations: exactly one of them cannot vanish");
  const double r1sq = rho12 * rho13 / rho23;
  if (!(r1sq > 0.0) || r1sq > 1.0 + 1e-12)
    throw NumericalError("inconsistent correlations: rho12*rho13/rho23 outside (0, 1]");
  const double rho1 = std::sqrt(std::min(r1sq, 1.0));
  const double rho2 = rho12 / rho1;
  const double rho3 = rho13 / rho1;
  if (std::abs(rho2) > 1.0 + 1e-12 || std::abs(rho3) > 1.0 + 1e-12)
    throw NumericalError("inconsistent correlations: implied edge correlation exceeds 1");
  return {rho1, std::clamp(rho2, -1.0, 1.0), std::clamp(rho3, -1.0, 1.0)};
}

MarkovParams symmetric_discrete_recover(const LeafLabeledTree& t,
                                        const std::map<Edge, double>& tau, int d) {
  if (d < 2) throw DataError("state count must be at least 2");
  MarkovParams p;
  p.tree = t.root() ? t : t.with_root(canonical_root(t));
  p.d = d;
  p.root_dist = Eigen::VectorXd::Constant(d, 1.0 / d);
  const double lambda_min = -1.0 / (d - 1);
  for (const Edge& e : t.edges()) {
    auto it = tau.find(e);
    if (it == tau.end()) throw DataError("missing tau for edge " + to_string(e));
    const double tv = it->second;
    if (tv == 0.0 || std::abs(tv) > 1.0)
      throw NumericalError("edge tau must have |tau| in (0, 1]");
    // The symmetric matrix has eigenvalues {1, lambda,..,lambda} with
    // det = lambda^{d-1}; invert for lambda.
    double lambda;
    if ((d - 1) % 2 == 0) {
      if (tv < 0.0)
        throw NumericalError("negative tau unreachable by a symmetric matrix when d is odd");
      lambda = std::pow(tv, 1.0 / (d - 1));
    } else {
      lambda = std::copysign(std::pow(std::abs(tv), 1.0 / (d - 1)), tv);
    }
    if (lambda < lambda_min - 1e-12)
      throw NumericalError("tau below the determinant bound of symmetric stochastic matrices");
    lambda = std::max(lambda, lambda_min);
    const double eps = (1.0 - lambda) * (d - 1) / d;
    Eigen::MatrixXd M = Eigen::MatrixXd::Constant(d, d, eps / (d - 1));
    M.diagonal().setConstant(1.0 - eps);
    p.transitions[e] = std::move(M);
  }
  p.validate();
  return p;
}

}  // namespace arbor
