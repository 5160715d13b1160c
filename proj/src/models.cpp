#include "arbor/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <unsupported/Eigen/MatrixFunctions>

#include "arbor/parallel.hpp"
#include "arbor/rng.hpp"

namespace arbor {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

// ---------------------------------------------------------------------------
// Parameter types
// ---------------------------------------------------------------------------

void GaussianParams::validate() const {
  if (edge_corr.size() != tree.edges().size())
    throw DataError("edge_corr must cover exactly the tree edges");
  for (const Edge& e : tree.edges()) {
    auto it = edge_corr.find(e);
    if (it == edge_corr.end()) throw DataError("missing correlation for edge " + to_string(e));
    if (!(std::abs(it->second) <= 1.0))
      throw DataError("correlation on edge " + to_string(e) + " outside [-1, 1]");
  }
  for (int i = 1; i <= tree.leaf_count(); ++i) {
    auto it = leaf_var.find(i);
    if (it == leaf_var.end()) throw DataError("missing variance for leaf " + std::to_string(i));
    if (!(it->second > 0.0)) throw DataError("leaf variances must be positive");
  }
}

bool GaussianParams::parsimonious() const {
  for (const auto& [e, rho] : edge_corr) {
    const double a = std::abs(rho);
    if (a <= 0.0 || a >= 1.0) return false;
  }
  for (int v : tree.internal_vertices())
    if (tree.degree(v) < 3) return false;
  return true;
}

void MarkovParams::validate() const {
  if (!tree.root()) throw DataError("Markov model requires a rooted tree");
  if (d < 2) throw DataError("state count must be at least 2");
  if (root_dist.size() != d) throw DataError("root distribution has wrong length");
  if (std::abs(root_dist.sum() - 1.0) > 1e-9)
    throw DataError("root distribution must sum to 1");
  for (int s = 0; s < d; ++s)
    if (!(root_dist(s) > 0.0)) throw DataError("root distribution must be strictly positive (A3)");
  if (transitions.size() != tree.edges().size())
    throw DataError("transitions must cover exactly the tree edges");
  for (const Edge& e : tree.edges()) {
    auto it = transitions.find(e);
    if (it == transitions.end()) throw DataError("missing transition for edge " + to_string(e));
    const Eigen::MatrixXd& M = it->second;
    if (M.rows() != d || M.cols() != d)
      throw DataError("transition on edge " + to_string(e) + " has wrong shape");
    for (int a = 0; a < d; ++a) {
      if (std::abs(M.row(a).sum() - 1.0) > 1e-12)
        throw DataError("transition rows must sum to 1 within 1e-12 (edge " + to_string(e) + ")");
      for (int b = 0; b < d; ++b)
        if (M(a, b) < 0.0) throw DataError("transition entries must be nonnegative");
    }
  }
}

int MarkovParams::root() const {
  if (!tree.root()) throw DataError("Markov model requires a rooted tree");
  return *tree.root();
}

const Eigen::MatrixXd& MarkovParams::transition(Edge e) const {
  auto it = transitions.find(e);
  if (it == transitions.end()) throw DataError("missing transition for edge " + to_string(e));
  return it->second;
}

void RateModel::validate() const {
  if (Q.rows() != Q.cols() || Q.rows() < 2) throw DataError("rate matrix must be square, d >= 2");
  const int d = static_cast<int>(Q.rows());
  for (int a = 0; a < d; ++a) {
    if (std::abs(Q.row(a).sum()) > 1e-9 * (1.0 + Q.cwiseAbs().maxCoeff()))
      throw DataError("rate matrix rows must sum to zero");
    for (int b = 0; b < d; ++b)
      if (a != b && Q(a, b) < 0.0) throw DataError("off-diagonal rates must be nonnegative");
  }
  for (const auto& [e, t] : edge_times)
    if (!(t > 0.0)) throw DataError("edge time on " + to_string(e) + " must be positive");
}

Eigen::MatrixXd jukes_cantor_rate(int d, double rate) {
  if (d < 2) throw DataError("state count must be at least 2");
  Eigen::MatrixXd Q = Eigen::MatrixXd::Constant(d, d, rate);
  Q.diagonal().setConstant(-rate * (d - 1));
  return Q;
}

int Dataset::observed_count() const {
  int m = 0;
  while (m < static_cast<int>(columns.size()) &&
         columns[m] == "x" + std::to_string(m + 1))
    ++m;
  return m;
}

int Dataset::state(long row, int col) const {
  const double v = values(row, col);
  const long s = std::lround(v);
  if (std::abs(v - static_cast<double>(s)) > 1e-9)
    throw DataError("non-integer state at row " + std::to_string(row));
  if (s < 0 || s >= d) throw DataError("state out of range at row " + std::to_string(row));
  return static_cast<int>(s);
}

void Dataset::validate() const {
  if (static_cast<long>(columns.size()) != values.cols())
    throw DataError("column names do not match data width");
  if (observed_count() == 0) throw DataError("dataset must start with columns x1..xm");
  if (kind == Kind::discrete) {
    if (d < 2) throw DataError("discrete dataset requires a state count of at least 2");
    for (long r = 0; r < n(); ++r)
      for (int c = 0; c < values.cols(); ++c) (void)state(r, c);
  } else if (!values.allFinite()) {
    throw DataError("continuous dataset contains non-finite values");
  }
}

void VectorMoments::set(int u, int v, Eigen::MatrixXd sigma) {
  if (k == 0) k = static_cast<int>(sigma.rows());
  if (sigma.rows() != k || sigma.cols() != k) throw DataError("moment block has wrong shape");
  if (u <= v)
    cross[{u, v}] = std::move(sigma);
  else
    cross[{v, u}] = sigma.transpose();
}

Eigen::MatrixXd VectorMoments::moment(int u, int v) const {
  auto it = cross.find(u <= v ? std::make_pair(u, v) : std::make_pair(v, u));
  if (it == cross.end())
    throw DataError("missing moment block (" + std::to_string(u) + "," + std::to_string(v) + ")");
  return u <= v ? it->second : Eigen::MatrixXd(it->second.transpose());
}

VectorMoments discrete_embedding_moments(const Eigen::MatrixXd& joint, int u, int v) {
  const int d = static_cast<int>(joint.rows());
  if (joint.cols() != d || d < 2) throw DataError("joint table must be square, d >= 2");
  if (std::abs(joint.sum() - 1.0) > 1e-9) throw DataError("joint table must sum to 1");
  const int k = d - 1;
  const Eigen::VectorXd pu = joint.rowwise().sum().tail(k);
  const Eigen::VectorXd pv = joint.colwise().sum().tail(k).transpose();
  VectorMoments mo;
  mo.k = k;
  Eigen::MatrixXd suu = Eigen::MatrixXd(pu.asDiagonal()) - pu * pu.transpose();
  Eigen::MatrixXd svv = Eigen::MatrixXd(pv.asDiagonal()) - pv * pv.transpose();
  Eigen::MatrixXd suv = joint.bottomRightCorner(k, k) - pu * pv.transpose();
  mo.set(u, u, std::move(suu));
  mo.set(v, v, std::move(svv));
  mo.set(u, v, std::move(suv));
  return mo;
}

// ---------------------------------------------------------------------------
// Second-order structure
// ---------------------------------------------------------------------------

namespace {

// Path products of edge correlations from vertex `from` to every vertex.
void correlation_sweep(const LeafLabeledTree& t, const std::map<Edge, double>& corr, int from,
                       std::map<int, double>& out) {
  out[from] = 1.0;
  std::vector<int> stack{from};
  std::set<int> seen{from};
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    for (int w : t.neighbors(v))
      if (seen.insert(w).second) {
        out[w] = out[v] * corr.at(Edge(v, w));
        stack.push_back(w);
      }
  }
}

}  // namespace

Eigen::MatrixXd gaussian_leaf_correlations(const GaussianParams& p) {
  p.validate();
  const int m = p.tree.leaf_count();
  Eigen::MatrixXd R = Eigen::MatrixXd::Identity(m, m);
  for (int i = 1; i <= m; ++i) {
    std::map<int, double> prod;
    correlation_sweep(p.tree, p.edge_corr, i, prod);
    for (int j = i + 1; j <= m; ++j) R(i - 1, j - 1) = R(j - 1, i - 1) = prod[j];
  }
  return R;
}

namespace {

// Vertex marginals pushed from the root.
std::map<int, Eigen::VectorXd> vertex_marginals(const MarkovParams& p) {
  const int root = p.root();
  std::map<int, Eigen::VectorXd> marg;
  marg[root] = p.root_dist;
  const std::map<int, int> parent = rooted_parents(p.tree, root);
  for (int v : topo_order(p.tree, root)) {
    if (v == root) continue;
    const int u = parent.at(v);
    marg[v] = p.transition(Edge(u, v)).transpose() * marg.at(u);
  }
  return marg;
}

// Conditional matrix P(y_b | y_a) for adjacent a, b, regardless of how the
// edge is oriented in the stored rooted parameterization.
Eigen::MatrixXd oriented_transition(const MarkovParams& p, const std::map<int, int>& parent,
                                    const std::map<int, Eigen::VectorXd>& marg, int a, int b) {
  const Edge e(a, b);
  const Eigen::MatrixXd& M = p.transition(e);
  if (parent.at(b) == a) return M;
  // Bayes inversion: rows of the stored matrix are b's states.
  const Eigen::VectorXd& ma = marg.at(a);
  const Eigen::VectorXd& mb = marg.at(b);
  const int d = p.d;
  Eigen::MatrixXd out(d, d);
  for (int i = 0; i < d; ++i) {
    if (!(ma(i) > 0.0)) throw NumericalError("degenerate marginal while inverting an edge");
    for (int j = 0; j < d; ++j) out(i, j) = mb(j) * M(j, i) / ma(i);
  }
  return out;
}

}  // namespace

PairwiseTable markov_pairwise(const MarkovParams& p, int u, int v) {
  p.validate();
  if (u == v) throw DataError("pairwise table requires two distinct vertices");
  const std::map<int, Eigen::VectorXd> marg = vertex_marginals(p);
  const std::map<int, int> parent = rooted_parents(p.tree, p.root());
  const std::vector<int> path = path_vertices(p.tree, u, v);
  Eigen::MatrixXd cond = Eigen::MatrixXd::Identity(p.d, p.d);
  for (std::size_t k = 0; k + 1 < path.size(); ++k)
    cond = cond * oriented_transition(p, parent, marg, path[k], path[k + 1]);
  PairwiseTable out;
  out.marg_u = marg.at(u);
  out.marg_v = marg.at(v);
  out.joint = out.marg_u.asDiagonal() * cond;
  return out;
}

double tau_pair(const MarkovParams& p, int u, int v) {
  const PairwiseTable t = markov_pairwise(p, u, v);
  double den = 1.0;
  for (int s = 0; s < p.d; ++s) den *= t.marg_u(s) * t.marg_v(s);
  if (!(den > 0.0)) throw NumericalError("degenerate marginal: zero determinant in tau denominator");
  return t.joint.determinant() / std::sqrt(den);
}

double tau_edge(const MarkovParams& p, Edge e) {
  if (!p.tree.has_edge(e)) throw DataError("edge " + to_string(e) + " not in tree");
  return tau_pair(p, e.u, e.v);
}

Eigen::MatrixXd tau_matrix(const MarkovParams& p) {
  p.validate();
  std::map<Edge, double> edge_tau;
  for (const Edge& e : p.tree.edges()) edge_tau[e] = tau_edge(p, e);
  const int m = p.tree.leaf_count();
  Eigen::MatrixXd T = Eigen::MatrixXd::Identity(m, m);
  for (int i = 1; i <= m; ++i) {
    std::map<int, double> prod;
    correlation_sweep(p.tree, edge_tau, i, prod);
    for (int j = i + 1; j <= m; ++j) T(i - 1, j - 1) = T(j - 1, i - 1) = prod[j];
  }
  return T;
}

double linear_tau(const VectorMoments& mo, int u, int v) {
  const Eigen::MatrixXd suu = mo.moment(u, u);
  const Eigen::MatrixXd svv = mo.moment(v, v);
  const Eigen::MatrixXd suv = mo.moment(u, v);
  const auto pd_logdet = [](const Eigen::MatrixXd& s, const char* which) {
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success)
      throw DataError(std::string("diagonal block for ") + which + " is not positive definite");
    double logdet = 0;
    for (int i = 0; i < s.rows(); ++i) logdet += std::log(llt.matrixLLT()(i, i));
    return 2.0 * logdet;
  };
  const double logden = 0.5 * (pd_logdet(suu, "u") + pd_logdet(svv, "v"));
  return suv.determinant() * std::exp(-logden);
}

Eigen::MatrixXd transition_from_rate(const Eigen::MatrixXd& Q, double t) {
  RateModel probe{Q, {}};
  probe.validate();
  if (t < 0.0) throw DataError("edge time must be nonnegative");
  Eigen::MatrixXd M = (t * Q).exp();
  return M;
}

Eigen::MatrixXd rate_transition(const RateModel& r, Edge e) {
  r.validate();
  auto it = r.edge_times.find(e);
  if (it == r.edge_times.end()) throw DataError("missing edge time for " + to_string(e));
  return transition_from_rate(r.Q, it->second);
}

MarkovParams reroot(const MarkovParams& p, int new_root) {
  p.validate();
  if (!p.tree.has_vertex(new_root)) throw DataError("new root not in tree");
  if (new_root == p.root()) return p;
  const std::map<int, Eigen::VectorXd> marg = vertex_marginals(p);
  const std::map<int, int> old_parent = rooted_parents(p.tree, p.root());
  const std::map<int, int> new_parent = rooted_parents(p.tree, new_root);
  MarkovParams out;
  out.tree = p.tree.with_root(new_root);
  out.d = p.d;
  out.root_dist = marg.at(new_root);
  for (const Edge& e : p.tree.edges()) {
    // The stored rows index the old parent; re-express with the new parent.
    const int old_p = old_parent.at(e.u) == e.v ? e.v : e.u;
    const int new_p = new_parent.at(e.u) == e.v ? e.v : e.u;
    if (old_p == new_p) {
      out.transitions[e] = p.transition(e);
      continue;
    }
    const Eigen::MatrixXd& M = p.transition(e);
    const Eigen::VectorXd& mp = marg.at(new_p);    // marginal of the new parent
    const Eigen::VectorXd& mc = marg.at(old_p);    // marginal of the new child
    Eigen::MatrixXd inv(p.d, p.d);
    for (int i = 0; i < p.d; ++i) {
      if (!(mp(i) > 0.0)) throw NumericalError("degenerate marginal while rerooting");
      for (int j = 0; j < p.d; ++j) inv(i, j) = mc(j) * M(j, i) / mp(i);
    }
    out.transitions[e] = std::move(inv);
  }
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

namespace {

std::vector<int> hidden_in_canonical_order(const LeafLabeledTree& t) {
  std::vector<int> out;
  for (int v : canonical_order(t))
    if (!t.is_leaf(v)) out.push_back(v);
  return out;
}

int draw_categorical(const Eigen::VectorXd& p, double u) {
  double acc = 0;
  for (int s = 0; s + 1 < p.size(); ++s) {
    acc += p(s);
    if (u < acc) return s;
  }
  return static_cast<int>(p.size()) - 1;
}

}  // namespace

Dataset simulate(const AnyParams& p, long n, std::uint64_t seed, bool include_hidden) {
  if (n < 1) throw DataError("sample count must be at least 1");

  const LeafLabeledTree* tree = nullptr;
  std::visit([&](const auto& q) { tree = &q.tree; }, p);
  const int m = tree->leaf_count();
  const std::vector<int> hidden = hidden_in_canonical_order(*tree);
  const std::map<int, std::string> names = vertex_names(*tree);

  Dataset out;
  for (int i = 1; i <= m; ++i) out.columns.push_back("x" + std::to_string(i));
  if (include_hidden)
    for (int v : hidden) out.columns.push_back(names.at(v));
  out.values.resize(n, m + (include_hidden ? static_cast<int>(hidden.size()) : 0));

  // Precompute position-indexed structures; per-row work then touches no
  // associative containers.
  if (const auto* g = std::get_if<GaussianParams>(&p)) {
    g->validate();
    out.kind = Dataset::Kind::continuous;
    const int root = g->tree.root() ? *g->tree.root() : canonical_root(g->tree);
    const std::vector<int> order = topo_order(g->tree, root);
    const std::map<int, int> parent = rooted_parents(g->tree, root);
    const std::size_t nv = order.size();
    std::map<int, int> pos;
    for (std::size_t k = 0; k < nv; ++k) pos[order[k]] = static_cast<int>(k);
    std::vector<int> parent_pos(nv, -1);
    std::vector<double> rho(nv, 0), noise(nv, 1);
    for (std::size_t k = 1; k < nv; ++k) {
      parent_pos[k] = pos.at(parent.at(order[k]));
      rho[k] = g->edge_corr.at(Edge(parent.at(order[k]), order[k]));
      noise[k] = std::sqrt(std::max(0.0, 1.0 - rho[k] * rho[k]));
    }
    std::vector<double> leaf_sd(m);
    for (int i = 1; i <= m; ++i) leaf_sd[i - 1] = std::sqrt(g->leaf_var.at(i));
    std::vector<int> hidden_pos;
    for (int v : hidden) hidden_pos.push_back(pos.at(v));
    parallel_for(n, [&](std::ptrdiff_t r) {
      Rng rng = make_rng(seed, "simulate", static_cast<std::uint64_t>(r));
      std::normal_distribution<double> gauss(0.0, 1.0);
      std::vector<double> y(nv);
      y[0] = gauss(rng);
      for (std::size_t k = 1; k < nv; ++k)
        y[k] = rho[k] * y[parent_pos[k]] + noise[k] * gauss(rng);
      for (int i = 1; i <= m; ++i) out.values(r, i - 1) = leaf_sd[i - 1] * y[pos.at(i)];
      if (include_hidden)
        for (std::size_t k = 0; k < hidden_pos.size(); ++k)
          out.values(r, m + static_cast<int>(k)) = y[hidden_pos[k]];
    });
  } else {
    const MarkovParams& q = std::get<MarkovParams>(p);
    q.validate();
    out.kind = Dataset::Kind::discrete;
    out.d = q.d;
    const int root = q.root();
    const std::vector<int> order = topo_order(q.tree, root);
    const std::map<int, int> parent = rooted_parents(q.tree, root);
    const std::size_t nv = order.size();
    std::map<int, int> pos;
    for (std::size_t k = 0; k < nv; ++k) pos[order[k]] = static_cast<int>(k);
    std::vector<int> parent_pos(nv, -1);
    std::vector<Eigen::MatrixXd> trans(nv);
    for (std::size_t k = 1; k < nv; ++k) {
      parent_pos[k] = pos.at(parent.at(order[k]));
      trans[k] = q.transition(Edge(parent.at(order[k]), order[k]));
    }
    std::vector<int> leaf_pos(m), hidden_pos;
    for (int i = 1; i <= m; ++i) leaf_pos[i - 1] = pos.at(i);
    for (int v : hidden) hidden_pos.push_back(pos.at(v));
    parallel_for(n, [&](std::ptrdiff_t r) {
      Rng rng = make_rng(seed, "simulate", static_cast<std::uint64_t>(r));
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      std::vector<int> y(nv);
      y[0] = draw_categorical(q.root_dist, unif(rng));
      for (std::size_t k = 1; k < nv; ++k) {
        const double u = unif(rng);
        const auto row = trans[k].row(y[parent_pos[k]]);
        double acc = 0;
        int s = q.d - 1;
        for (int c = 0; c + 1 < q.d; ++c) {
          acc += row(c);
          if (u < acc) {
            s = c;
            break;
          }
        }
        y[k] = s;
      }
      for (int i = 1; i <= m; ++i) out.values(r, i - 1) = y[leaf_pos[i - 1]];
      if (include_hidden)
        for (std::size_t k = 0; k < hidden_pos.size(); ++k)
          out.values(r, m + static_cast<int>(k)) = y[hidden_pos[k]];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sum-product on the tree
// ---------------------------------------------------------------------------

SumProduct::SumProduct(const MarkovParams& p) : params_(p) {
  params_.validate();
  const int root = params_.root();
  order_ = topo_order(params_.tree, root);
  const std::map<int, int> parent = rooted_parents(params_.tree, root);
  std::map<int, int> pos;
  for (std::size_t k = 0; k < order_.size(); ++k) pos[order_[k]] = static_cast<int>(k);
  parent_pos_.assign(order_.size(), -1);
  kid_pos_.assign(order_.size(), {});
  trans_.assign(order_.size(), {});
  for (std::size_t k = 1; k < order_.size(); ++k) {
    const int v = order_[k];
    const int u = parent.at(v);
    parent_pos_[k] = pos.at(u);
    kid_pos_[pos.at(u)].push_back(static_cast<int>(k));
    trans_[k] = params_.transition(Edge(u, v));
  }
}

void SumProduct::check_row(const std::vector<int>& leaf_states) const {
  if (static_cast<int>(leaf_states.size()) != params_.tree.leaf_count())
    throw DataError("row length does not match the leaf count");
  for (int s : leaf_states)
    if (s < 0 || s >= params_.d) throw DataError("observation outside the state space");
}

SumProduct::Result SumProduct::posteriors(const std::vector<int>& leaf_states) const {
  check_row(leaf_states);
  const int d = params_.d;
  const std::size_t nv = order_.size();
  Result res;
  res.vertex_posterior.assign(nv, {});
  res.edge_posterior.assign(nv, {});

  const auto evidence = [&](std::size_t k) -> Eigen::VectorXd {
    const int v = order_[k];
    if (!params_.tree.is_leaf(v)) return Eigen::VectorXd::Ones(d);
    Eigen::VectorXd e = Eigen::VectorXd::Zero(d);
    e(leaf_states[v - 1]) = 1.0;
    return e;
  };

  // Upward pass with per-step normalization. kid_msg[c] is the message a
  // child c sends to its parent: trans_[c] * up[c].
  Eigen::MatrixXd up(d, nv), kid_msg(d, nv), down(d, nv);
  Eigen::VectorXd b(d), tmp(d);
  double logz = 0;
  for (std::size_t k = nv; k-- > 0;) {
    b = evidence(k);
    for (int c : kid_pos_[k]) {
      kid_msg.col(c).noalias() = trans_[c] * up.col(c);
      b.array() *= kid_msg.col(c).array();
    }
    const double s = b.sum();
    if (!(s > 0.0)) {
      res.zero = true;
      res.loglik = kNegInf;
      return res;
    }
    logz += std::log(s);
    up.col(k) = b / s;
  }
  const double total = params_.root_dist.dot(up.col(0));
  if (!(total > 0.0)) {
    res.zero = true;
    res.loglik = kNegInf;
    return res;
  }
  res.loglik = std::log(total) + logz;

  // Downward pass. down[k] carries the evidence outside the subtree of k.
  down.col(0) = params_.root_dist;
  for (std::size_t k = 0; k < nv; ++k) {
    const Eigen::VectorXd ev = evidence(k);
    for (int c : kid_pos_[k]) {
      tmp = down.col(k).cwiseProduct(ev);
      for (int c2 : kid_pos_[k])
        if (c2 != c) tmp.array() *= kid_msg.col(c2).array();
      Eigen::MatrixXd pair = tmp.asDiagonal() * trans_[c] * up.col(c).asDiagonal();
      const double s = pair.sum();
      if (!(s > 0.0)) throw NumericalError("inconsistent messages in the downward pass");
      pair /= s;
      res.vertex_posterior[c] = pair.colwise().sum().transpose();
      res.edge_posterior[c] = std::move(pair);
      Eigen::VectorXd dn = trans_[c].transpose() * tmp;
      down.col(c) = dn / dn.sum();
    }
  }
  // Root posterior.
  Eigen::VectorXd rp = params_.root_dist.cwiseProduct(up.col(0));
  res.vertex_posterior[0] = rp / rp.sum();
  return res;
}

double SumProduct::row_loglik(const std::vector<int>& leaf_states) const {
  check_row(leaf_states);
  const int d = params_.d;
  const std::size_t nv = order_.size();
  // One buffer for all messages keeps allocator traffic off the row loop.
  Eigen::MatrixXd up(d, nv);
  Eigen::VectorXd b(d), msg(d);
  double logz = 0;
  for (std::size_t k = nv; k-- > 0;) {
    const int v = order_[k];
    if (params_.tree.is_leaf(v)) {
      b.setZero();
      b(leaf_states[v - 1]) = 1.0;
    } else {
      b.setOnes();
    }
    for (int c : kid_pos_[k]) {
      msg.noalias() = trans_[c] * up.col(c);
      b.array() *= msg.array();
    }
    const double s = b.sum();
    if (!(s > 0.0)) return kNegInf;
    logz += std::log(s);
    up.col(k) = b / s;
  }
  const double total = params_.root_dist.dot(up.col(0));
  return total > 0.0 ? std::log(total) + logz : kNegInf;
}

std::vector<int> SumProduct::max_product(const std::vector<int>& leaf_states) const {
  check_row(leaf_states);
  const int d = params_.d;
  const std::size_t nv = order_.size();
  std::vector<Eigen::VectorXd> mu(nv);
  std::vector<Eigen::MatrixXi> back(nv);
  for (std::size_t k = nv; k-- > 0;) {
    const int v = order_[k];
    Eigen::VectorXd b;
    if (params_.tree.is_leaf(v)) {
      b = Eigen::VectorXd::Zero(d);
      b(leaf_states[v - 1]) = 1.0;
    } else {
      b = Eigen::VectorXd::Ones(d);
    }
    for (int c : kid_pos_[k]) {
      Eigen::VectorXd best = Eigen::VectorXd::Zero(d);
      Eigen::MatrixXi arg = Eigen::MatrixXi::Zero(d, 1);
      for (int a = 0; a < d; ++a) {
        double bv = -1;
        int bs = 0;
        for (int s = 0; s < d; ++s) {
          const double val = trans_[c](a, s) * mu[c](s);
          if (val > bv) {
            bv = val;
            bs = s;
          }
        }
        best(a) = bv;
        arg(a, 0) = bs;
      }
      back[c] = arg;
      b = b.cwiseProduct(best);
    }
    const double s = b.maxCoeff();
    mu[k] = s > 0.0 ? (b / s).eval() : b;
  }
  std::vector<int> state(nv, 0);
  {
    const Eigen::VectorXd r = params_.root_dist.cwiseProduct(mu[0]);
    double bv = -1;
    for (int s = 0; s < d; ++s)
      if (r(s) > bv) {
        bv = r(s);
        state[0] = s;
      }
  }
  for (std::size_t k = 1; k < nv; ++k) state[k] = back[k](state[parent_pos_[k]], 0);
  return state;
}

// ---------------------------------------------------------------------------
// Gaussian conditioning and density
// ---------------------------------------------------------------------------

namespace {

Eigen::MatrixXd full_correlation_matrix(const GaussianParams& p) {
  const std::vector<int>& verts = p.tree.vertices();
  const int nv = static_cast<int>(verts.size());
  Eigen::MatrixXd R = Eigen::MatrixXd::Identity(nv, nv);
  for (int i = 0; i < nv; ++i) {
    std::map<int, double> prod;
    correlation_sweep(p.tree, p.edge_corr, verts[i], prod);
    for (int j = 0; j < nv; ++j)
      if (j != i) R(i, j) = prod.at(verts[j]);
  }
  return R;
}

}  // namespace

GaussianConditioner::GaussianConditioner(const GaussianParams& p) : params_(p) {
  params_.validate();
  const int m = params_.tree.leaf_count();
  hidden_ = params_.tree.internal_vertices();
  full_corr_ = full_correlation_matrix(params_);
  const int h = static_cast<int>(hidden_.size());
  const Eigen::MatrixXd roo = full_corr_.topLeftCorner(m, m);
  const Eigen::MatrixXd roh = full_corr_.topRightCorner(m, h);
  Eigen::LLT<Eigen::MatrixXd> llt(roo);
  if (llt.info() != Eigen::Success)
    throw NumericalError("observed correlation matrix is singular");
  gain_ = llt.solve(roh).transpose();
  cov_ = full_corr_.bottomRightCorner(h, h) - gain_ * roh;
  leaf_sd_.resize(m);
  for (int i = 1; i <= m; ++i) leaf_sd_(i - 1) = std::sqrt(params_.leaf_var.at(i));
}

Eigen::VectorXd GaussianConditioner::standardize(const Eigen::VectorXd& leaf_row) const {
  if (leaf_row.size() != leaf_sd_.size()) throw DataError("row length does not match leaf count");
  return leaf_row.cwiseQuotient(leaf_sd_);
}

Eigen::VectorXd GaussianConditioner::posterior_mean(const Eigen::VectorXd& leaf_row) const {
  return gain_ * standardize(leaf_row);
}

GaussianLeafDensity::GaussianLeafDensity(const GaussianParams& p) {
  p.validate();
  m_ = p.tree.leaf_count();
  const Eigen::MatrixXd R = gaussian_leaf_correlations(p);
  Eigen::VectorXd sd(m_);
  for (int i = 1; i <= m_; ++i) sd(i - 1) = std::sqrt(p.leaf_var.at(i));
  sigma_ = sd.asDiagonal() * R * sd.asDiagonal();
  llt_.compute(sigma_);
  if (llt_.info() != Eigen::Success)
    throw NumericalError("leaf covariance is singular; cannot evaluate the density");
  logdet_ = 0;
  for (int i = 0; i < m_; ++i) logdet_ += 2.0 * std::log(llt_.matrixLLT()(i, i));
}

double GaussianLeafDensity::row_loglik(const Eigen::VectorXd& leaf_row) const {
  if (leaf_row.size() != m_) throw DataError("row length does not match leaf count");
  const double quad = leaf_row.dot(llt_.solve(leaf_row));
  return -0.5 * (m_ * std::log(2.0 * M_PI) + logdet_ + quad);
}

DiscretePosterior infer_hidden(const MarkovParams& p, const std::vector<int>& row) {
  const SumProduct sp(p);
  const SumProduct::Result res = sp.posteriors(row);
  if (res.zero) throw NumericalError("observation has probability zero under the model");
  DiscretePosterior out;
  out.row_loglik = res.loglik;
  const std::vector<int> map_states = sp.max_product(row);
  for (std::size_t k = 0; k < sp.order().size(); ++k) {
    const int v = sp.order()[k];
    if (p.tree.is_leaf(v)) continue;
    out.marginals[v] = res.vertex_posterior[k];
    out.max_product_states[v] = map_states[k];
  }
  return out;
}

GaussianPosterior infer_hidden(const GaussianParams& p, const Eigen::VectorXd& row) {
  const GaussianConditioner cond(p);
  const Eigen::VectorXd mean = cond.posterior_mean(row);
  GaussianPosterior out;
  for (std::size_t k = 0; k < cond.hidden().size(); ++k) {
    out.mean[cond.hidden()[k]] = mean(static_cast<int>(k));
    out.var[cond.hidden()[k]] = cond.posterior_cov()(static_cast<int>(k), static_cast<int>(k));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Log-likelihood
// ---------------------------------------------------------------------------

namespace {

void check_data_against(const AnyParams& p, const Dataset& data) {
  data.validate();
  std::visit(
      [&](const auto& q) {
        if (data.observed_count() != q.tree.leaf_count())
          throw DataError("dataset columns do not match the model leaves");
      },
      p);
  if (std::holds_alternative<MarkovParams>(p)) {
    if (data.kind != Dataset::Kind::discrete) throw DataError("discrete model needs discrete data");
    if (data.d != std::get<MarkovParams>(p).d)
      throw DataError("dataset state count does not match the model");
  } else if (data.kind != Dataset::Kind::continuous) {
    throw DataError("Gaussian model needs continuous data");
  }
}

}  // namespace

Eigen::VectorXd row_logliks(const AnyParams& p, const Dataset& data) {
  check_data_against(p, data);
  const long n = data.n();
  Eigen::VectorXd out(n);
  if (const auto* g = std::get_if<GaussianParams>(&p)) {
    const GaussianLeafDensity den(*g);
    const int m = g->tree.leaf_count();
    parallel_for(n, [&](std::ptrdiff_t r) {
      out(r) = den.row_loglik(data.values.row(r).head(m).transpose());
    });
  } else {
    const MarkovParams& q = std::get<MarkovParams>(p);
    const SumProduct sp(q);
    const int m = q.tree.leaf_count();
    parallel_for(n, [&](std::ptrdiff_t r) {
      std::vector<int> row(m);
      for (int i = 0; i < m; ++i) row[i] = data.state(r, i);
      out(r) = sp.row_loglik(row);
    });
  }
  return out;
}

double loglik(const AnyParams& p, const Dataset& data) {
  if (data.n() == 0) return 0.0;
  const Eigen::VectorXd rows = row_logliks(p, data);
  double acc = 0;
  for (long r = 0; r < rows.size(); ++r) acc += rows(r);
  return acc;
}

double loglik_serial(const AnyParams& p, const Dataset& data) {
  if (data.n() == 0) return 0.0;
  check_data_against(p, data);
  double acc = 0;
  if (const auto* g = std::get_if<GaussianParams>(&p)) {
    const GaussianLeafDensity den(*g);
    const int m = g->tree.leaf_count();
    for (long r = 0; r < data.n(); ++r)
      acc += den.row_loglik(data.values.row(r).head(m).transpose());
  } else {
    const MarkovParams& q = std::get<MarkovParams>(p);
    const SumProduct sp(q);
    const int m = q.tree.leaf_count();
    for (long r = 0; r < data.n(); ++r) {
      std::vector<int> row(m);
      for (int i = 0; i < m; ++i) row[i] = data.state(r, i);
      acc += sp.row_loglik(row);
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// State-space diagnostics
// ---------------------------------------------------------------------------

bool regularity_check(const LeafLabeledTree& t, const std::map<int, int>& state_space) {
  for (int v : t.vertices())
    if (!state_space.count(v))
      throw DataError("missing state space size for vertex " + std::to_string(v));
  for (int v : t.internal_vertices()) {
    long double prod = 1.0L;
    long mx = 1;
    for (int u : t.neighbors(v)) {
      const int s = state_space.at(u);
      if (s < 1) throw DataError("state space sizes must be positive");
      prod *= s;
      mx = std::max<long>(mx, s);
    }
    if (!(static_cast<long double>(state_space.at(v)) * mx < prod)) return false;
  }
  return true;
}

long saturation_bound(const std::vector<int>& observed_spaces) {
  if (observed_spaces.empty()) throw DataError("need at least one observed state space");
  unsigned long long prod = 1;
  unsigned long long mx = 1;
  for (int s : observed_spaces) {
    if (s < 1) throw DataError("state space sizes must be positive");
    if (prod > std::numeric_limits<unsigned long long>::max() / static_cast<unsigned>(s))
      throw DataError("observed state space too large");
    prod *= static_cast<unsigned>(s);
    mx = std::max<unsigned long long>(mx, static_cast<unsigned>(s));
  }
  return static_cast<long>((prod + mx - 1) / mx);
}

}  // namespace arbor
