#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "arbor/common.hpp"
#include "arbor/tree.hpp"

namespace arbor {

// ---------------------------------------------------------------------------
// Parameter types
// ---------------------------------------------------------------------------

// Gaussian latent tree model: zero means, unit variances at internal
// vertices, per-edge correlations and per-leaf variances.
struct GaussianParams {
  LeafLabeledTree tree;
  std::map<Edge, double> edge_corr;  // rho in [-1, 1] per edge
  std::map<int, double> leaf_var;    // label -> variance > 0
  void validate() const;
  // (A2): every edge correlation strictly inside (0, 1) in absolute value.
  bool parsimonious() const;
};

// Discrete general Markov model: rooted tree, root distribution, and one
// row-stochastic transition matrix per edge, rows indexed by the endpoint
// nearer the root.
struct MarkovParams {
  LeafLabeledTree tree;  // must carry a root
  int d = 0;
  Eigen::VectorXd root_dist;
  std::map<Edge, Eigen::MatrixXd> transitions;
  void validate() const;
  int root() const;
  const Eigen::MatrixXd& transition(Edge e) const;
};

using AnyParams = std::variant<GaussianParams, MarkovParams>;

// Continuous-time rate parameterization M^{uv} = exp(t_uv Q).
struct RateModel {
  Eigen::MatrixXd Q;                  // rows sum to zero, off-diagonal >= 0
  std::map<Edge, double> edge_times;  // > 0
  void validate() const;
};

// Rate matrix with all off-diagonal entries equal.
Eigen::MatrixXd jukes_cantor_rate(int d, double rate = 1.0);

// n i.i.d. observations of the observed variables x1..xm, optionally
// followed by hidden columns (simulation traces for test oracles).
struct Dataset {
  enum class Kind { continuous, discrete };
  Kind kind = Kind::continuous;
  int d = 0;  // states per column when discrete
  std::vector<std::string> columns;
  Eigen::MatrixXd values;
  long n() const { return values.rows(); }
  int observed_count() const;  // leading x-columns
  int state(long row, int col) const;
  void validate() const;
};

// Cross-moment matrices of vector-valued vertices (linear latent tree view).
struct VectorMoments {
  int k = 0;
  std::map<std::pair<int, int>, Eigen::MatrixXd> cross;  // keyed with u <= v
  void set(int u, int v, Eigen::MatrixXd sigma);
  Eigen::MatrixXd moment(int u, int v) const;  // Sigma_vu = Sigma_uv^T
};

// Moments of the basis embedding {0, e_1, .., e_{d-1}} of a discrete pair
// with joint table `joint` (rows = states of u).
VectorMoments discrete_embedding_moments(const Eigen::MatrixXd& joint, int u, int v);

// ---------------------------------------------------------------------------
// Exact second-order and pairwise computations
// ---------------------------------------------------------------------------

// Leaf correlation matrix: path products of edge correlations, unit diagonal.
Eigen::MatrixXd gaussian_leaf_correlations(const GaussianParams& p);

struct PairwiseTable {
  Eigen::MatrixXd joint;  // d x d, rows = states of u
  Eigen::VectorXd marg_u, marg_v;
};

// Exact joint of (Y_u, Y_v) and the two marginals, from the rooted
// factorization.
PairwiseTable markov_pairwise(const MarkovParams& p, int u, int v);

// tau of a vertex pair computed directly from the pairwise table:
// det(P^{uv}) / sqrt(det(P^{uu} P^{vv})).
double tau_pair(const MarkovParams& p, int u, int v);
double tau_edge(const MarkovParams& p, Edge e);
// Leaf tau matrix via the path-product formula over edge taus.
Eigen::MatrixXd tau_matrix(const MarkovParams& p);

// det(Sigma_uu^{-1/2} Sigma_uv Sigma_vv^{-1/2}); blocks must be positive
// definite.
double linear_tau(const VectorMoments& mo, int u, int v);

Eigen::MatrixXd transition_from_rate(const Eigen::MatrixXd& Q, double t);
Eigen::MatrixXd rate_transition(const RateModel& r, Edge e);

// Re-expresses the model with edges directed away from new_root (Bayes
// inversion of the affected transitions). The observed distribution is
// unchanged.
MarkovParams reroot(const MarkovParams& p, int new_root);

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

// Root-first ancestral sampling; deterministic given the seed and
// independent of the parallel schedule (one derived stream per row).
Dataset simulate(const AnyParams& p, long n, std::uint64_t seed, bool include_hidden = false);

// ---------------------------------------------------------------------------
// Inference on a fully specified model
// ---------------------------------------------------------------------------

// Exact sum-product engine for a discrete model; immutable after
// construction, rows are independent, safe for concurrent use.
class SumProduct {
 public:
  explicit SumProduct(const MarkovParams& p);

  struct Result {
    double loglik = 0;  // -inf when the row has probability zero
    bool zero = false;
    // Indexed by position in topo order / child topo position.
    std::vector<Eigen::VectorXd> vertex_posterior;
    std::vector<Eigen::MatrixXd> edge_posterior;  // rows = parent states
  };

  double row_loglik(const std::vector<int>& leaf_states) const;
  Result posteriors(const std::vector<int>& leaf_states) const;
  // Max-product (MAP) configuration over all vertices; ties resolved to the
  // lowest state index.
  std::vector<int> max_product(const std::vector<int>& leaf_states) const;

  const std::vector<int>& order() const { return order_; }
  int parent_at(int pos) const { return parent_pos_[pos]; }
  const MarkovParams& params() const { return params_; }

 private:
  void check_row(const std::vector<int>& leaf_states) const;
  MarkovParams params_;
  std::vector<int> order_;                  // topo order, root first
  std::vector<int> parent_pos_;             // position of the parent, -1 for root
  std::vector<std::vector<int>> kid_pos_;   // child positions
  std::vector<Eigen::MatrixXd> trans_;      // trans_[pos]: parent -> order_[pos]
};

// Exact Gaussian conditioning of hidden vertices on the observed leaves via
// the standardized path-product correlation matrix.
class GaussianConditioner {
 public:
  explicit GaussianConditioner(const GaussianParams& p);

  const std::vector<int>& hidden() const { return hidden_; }
  const Eigen::MatrixXd& posterior_cov() const { return cov_; }  // row-independent
  // Posterior means given one observation of the leaves (original scale).
  Eigen::VectorXd posterior_mean(const Eigen::VectorXd& leaf_row) const;
  // Standardized leaf values x_i / sigma_i.
  Eigen::VectorXd standardize(const Eigen::VectorXd& leaf_row) const;
  const Eigen::MatrixXd& gain() const { return gain_; }
  const Eigen::MatrixXd& full_correlation() const { return full_corr_; }

 private:
  GaussianParams params_;
  std::vector<int> hidden_;
  Eigen::MatrixXd full_corr_;  // over all vertices, vertex order ascending
  Eigen::MatrixXd gain_;       // R_HO R_OO^{-1}
  Eigen::MatrixXd cov_;        // R_HH - gain R_OH
  Eigen::VectorXd leaf_sd_;
};

// log N(x; 0, Sigma_leaves) with Sigma from the path-product correlations
// and the leaf variances.
class GaussianLeafDensity {
 public:
  explicit GaussianLeafDensity(const GaussianParams& p);
  double row_loglik(const Eigen::VectorXd& leaf_row) const;
  const Eigen::MatrixXd& covariance() const { return sigma_; }

 private:
  Eigen::MatrixXd sigma_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  double logdet_ = 0;
  int m_ = 0;
};

struct DiscretePosterior {
  std::map<int, Eigen::VectorXd> marginals;  // hidden vertex -> distribution
  std::map<int, int> max_product_states;     // hidden vertex -> MAP state
  double row_loglik = 0;
};

struct GaussianPosterior {
  std::map<int, double> mean;  // hidden vertex -> posterior mean (unit-variance scale)
  std::map<int, double> var;
};

DiscretePosterior infer_hidden(const MarkovParams& p, const std::vector<int>& row);
GaussianPosterior infer_hidden(const GaussianParams& p, const Eigen::VectorXd& row);

// Observed-data log-likelihood. Discrete rows of probability zero contribute
// an explicit -inf. Rows are computed in parallel and summed in row order,
// so the value is independent of the thread count.
double loglik(const AnyParams& p, const Dataset& data);
Eigen::VectorXd row_logliks(const AnyParams& p, const Dataset& data);
// Plain-loop reference implementation kept for tests and benchmarks; agrees
// bitwise with loglik().
double loglik_serial(const AnyParams& p, const Dataset& data);

// ---------------------------------------------------------------------------
// State-space diagnostics
// ---------------------------------------------------------------------------

// Regularity: at every hidden vertex v,
// |Y_v| < prod_{u in N_v} |Y_u| / max_u |Y_u|.
bool regularity_check(const LeafLabeledTree& t, const std::map<int, int>& state_space);

// Latent class saturation threshold ceil(|X| / max_i |X_i|): the model can
// be saturated once the hidden state count reaches this value.
long saturation_bound(const std::vector<int>& observed_spaces);

}  // namespace arbor
