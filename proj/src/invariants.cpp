#include "arbor/invariants.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/SVD>

#include "arbor/parallel.hpp"
#include "arbor/rng.hpp"

namespace arbor {

InvariantReport tetrad_residuals(const EmpiricalSecondOrder& s, const LeafLabeledTree& t) {
  s.validate();
  const int m = t.leaf_count();
  if (m < 4) throw DataError("tetrad residuals need at least four leaves");
  if (s.values.rows() != m) throw DataError("second-order matrix does not match the tree");
  const auto v = [&](int i, int j) { return s.values(i - 1, j - 1); };
  InvariantReport rep;
  for (int i = 1; i <= m; ++i)
    for (int j = i + 1; j <= m; ++j)
      for (int k = j + 1; k <= m; ++k)
        for (int l = k + 1; l <= m; ++l) {
          const QuartetCall q = quartet_topology(t, {i, j, k, l});
          if (q.star) continue;
          const auto [a, b, c, d] = q.split;
          TetradRecord rec;
          rec.quartet = q.split;
          rec.pairing = {a, c, b, d};
          const double m1 = v(a, c) * v(b, d);
          const double m2 = v(a, d) * v(b, c);
          rec.residual = m1 - m2;
          rec.scale = std::max(std::abs(m1), std::abs(m2));
          rep.tetrads.push_back(rec);
        }
  return rep;
}

namespace {

SplitRecord rank_distance_of_flattening(Eigen::MatrixXd flat, int d,
                                        std::vector<int> side_a) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(flat);
  const Eigen::VectorXd sv = svd.singularValues();
  double tail = 0;
  for (int i = d; i < sv.size(); ++i) tail += sv(i) * sv(i);
  SplitRecord rec;
  rec.side_a = std::move(side_a);
  rec.singular_values.assign(sv.data(), sv.data() + sv.size());
  rec.rank_distance = std::sqrt(tail);
  return rec;
}

// side_a must be a nonempty proper subset of {1..m}; returns it sorted.
std::vector<int> check_split(const std::vector<int>& side_a, int m) {
  std::vector<int> a = side_a;
  std::sort(a.begin(), a.end());
  if (a.empty() || static_cast<int>(a.size()) >= m)
    throw DataError("split side must be a nonempty proper subset of the leaves");
  if (std::adjacent_find(a.begin(), a.end()) != a.end())
    throw DataError("split side has repeated labels");
  if (a.front() < 1 || a.back() > m) throw DataError("split side label out of range");
  return a;
}

long power_checked(int d, std::size_t k) {
  long p = 1;
  for (std::size_t i = 0; i < k; ++i) {
    p *= d;
    if (p > 4096) throw DataError("flattening too large: d^|side| must not exceed 4096");
  }
  return p;
}

}  // namespace

SplitRecord edge_rank_test(const Dataset& data, const std::vector<int>& side_a, int d) {
  data.validate();
  if (data.kind != Dataset::Kind::discrete) throw DataError("edge rank test needs discrete data");
  if (d != data.d) throw DataError("state count does not match the dataset");
  const int m = data.observed_count();
  const std::vector<int> a = check_split(side_a, m);
  std::vector<int> b;
  for (int i = 1; i <= m; ++i)
    if (!std::binary_search(a.begin(), a.end(), i)) b.push_back(i);

  const long ra = power_checked(d, a.size());
  const long rb = power_checked(d, b.size());
  Eigen::MatrixXd flat = Eigen::MatrixXd::Zero(ra, rb);
  const long n = data.n();
  for (long r = 0; r < n; ++r) {
    long ia = 0, ib = 0;
    for (int x : a) ia = ia * d + data.state(r, x - 1);
    for (int x : b) ib = ib * d + data.state(r, x - 1);
    flat(ia, ib) += 1.0 / n;
  }
  return rank_distance_of_flattening(std::move(flat), d, a);
}

SplitRecord edge_rank_test_joint(const Eigen::VectorXd& joint, int m, int d,
                                 const std::vector<int>& side_a) {
  long total = 1;
  for (int i = 0; i < m; ++i) {
    total *= d;
    if (total > (1L << 24)) throw DataError("joint too large");
  }
  if (joint.size() != total) throw DataError("joint has wrong length");
  const std::vector<int> a = check_split(side_a, m);
  std::vector<int> b;
  for (int i = 1; i <= m; ++i)
    if (!std::binary_search(a.begin(), a.end(), i)) b.push_back(i);
  const long ra = power_checked(d, a.size());
  const long rb = power_checked(d, b.size());
  Eigen::MatrixXd flat = Eigen::MatrixXd::Zero(ra, rb);
  std::vector<int> state(m, 0);
  for (long idx = 0; idx < total; ++idx) {
    long rem = idx;
    for (int i = m - 1; i >= 0; --i) {
      state[i] = static_cast<int>(rem % d);
      rem /= d;
    }
    long ia = 0, ib = 0;
    for (int x : a) ia = ia * d + state[x - 1];
    for (int x : b) ib = ib * d + state[x - 1];
    flat(ia, ib) += joint(idx);
  }
  return rank_distance_of_flattening(std::move(flat), d, a);
}

QuartetInequality quartet_inequality_check(const EmpiricalSecondOrder& s,
                                           std::array<int, 4> leaves, const QuartetCall& split,
                                           double tol) {
  s.validate();
  std::sort(leaves.begin(), leaves.end());
  if (std::adjacent_find(leaves.begin(), leaves.end()) != leaves.end())
    throw DataError("quartet indices must be distinct");
  std::array<int, 4> sp = split.split;
  {
    std::array<int, 4> sorted = sp;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != leaves) throw DataError("split does not involve the given leaves");
  }
  const auto v = [&](int i, int j) { return s.values(i - 1, j - 1); };
  const auto [a, b, c, d] = sp;
  const double own = std::abs(v(a, b) * v(c, d));
  const double x1 = std::abs(v(a, c) * v(b, d));
  const double x2 = std::abs(v(a, d) * v(b, c));
  QuartetInequality out;
  out.dominance_slack = own - std::max(x1, x2);
  out.equality_gap = std::abs(x1 - x2);
  out.ok = out.dominance_slack >= -tol && out.equality_gap <= tol;
  return out;
}

InvariantReport tetrad_bootstrap(const Dataset& data, SecondOrderKind kind,
                                 const LeafLabeledTree& t, int B, std::uint64_t seed) {
  if (B < 2) throw DataError("need at least two bootstrap replicates");
  const EmpiricalSecondOrder point = empirical_second_order(data, kind);
  InvariantReport rep = tetrad_residuals(point, t);
  const std::size_t nq = rep.tetrads.size();
  const long n = data.n();

  // residuals[b] aligned with rep.tetrads; NaN marks a degenerate resample.
  std::vector<std::vector<double>> residuals(B);
  parallel_for(B, [&](std::ptrdiff_t b) {
    Rng rng = make_rng(seed, "bootstrap", static_cast<std::uint64_t>(b));
    std::uniform_int_distribution<long> pick(0, n - 1);
    Dataset re = data;
    for (long r = 0; r < n; ++r) re.values.row(r) = data.values.row(pick(rng));
    std::vector<double>& out = residuals[b];
    try {
      const EmpiricalSecondOrder s = empirical_second_order(re, kind);
      const InvariantReport rb = tetrad_residuals(s, t);
      out.resize(nq);
      for (std::size_t q = 0; q < nq; ++q) out[q] = rb.tetrads[q].residual;
    } catch (const DataError&) {
      out.assign(nq, std::numeric_limits<double>::quiet_NaN());
    }
  });

  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<double> vals;
    for (int b = 0; b < B; ++b)
      if (!std::isnan(residuals[b][q])) vals.push_back(residuals[b][q]);
    if (vals.size() < 2) continue;
    std::sort(vals.begin(), vals.end());
    const std::size_t lo = static_cast<std::size_t>(std::floor(0.025 * (vals.size() - 1)));
    const std::size_t hi = static_cast<std::size_t>(std::ceil(0.975 * (vals.size() - 1)));
    rep.tetrads[q].boot_lo = vals[lo];
    rep.tetrads[q].boot_hi = vals[hi];
    rep.tetrads[q].has_band = true;
  }
  return rep;
}

}  // namespace arbor
