#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "arbor/distance.hpp"
#include "arbor/models.hpp"
#include "arbor/rng.hpp"
#include "arbor/tree.hpp"

namespace arbor {

// Complete graph over observed variables with mutual-information weights.
struct WeightedGraph {
  int m = 0;
  Eigen::MatrixXd w;  // symmetric, finite, zero diagonal
  void validate() const;
};

// Plug-in mutual information of empirical pairwise tables (discrete) or
// -1/2 log(1 - rho^2) (Gaussian); the Gaussian weight is monotone in rho^2,
// so Kruskal gives the same tree either way.
WeightedGraph mutual_information_weights(const Dataset& data, SecondOrderKind kind);

struct SpanningTree {
  int n = 0;
  std::vector<Edge> edges;
  double total_weight = 0;
};

// Maximum-weight spanning tree via Kruskal; equal weights are broken by
// lexicographic edge order.
SpanningTree chow_liu(const WeightedGraph& w);
SpanningTree max_weight_spanning_tree(const Eigen::MatrixXd& w);

struct EmOptions {
  int max_iter = 500;
  double tol = 1e-8;  // absolute-plus-relative log-likelihood gain
  int restarts = 10;
  std::uint64_t seed = 0;
  double pseudocount = 1e-6;  // discrete expected-count smoothing (keeps A3)
  const std::vector<double>* row_weights = nullptr;  // optional per-row weights
};

struct ScoredModel {
  AnyParams model;
  double loglik = 0;
  int dim = 0;
  double bic = 0;
  std::vector<double> trace;  // per-iteration observed log-likelihood
  bool a1_warning = false;    // a hidden vertex has degree < 3: dim unreliable
};

// EM on a fixed tree. Restart 0 starts from `init`; further restarts draw
// random parameters on the same tree. The best final log-likelihood wins,
// ties resolved by the lowest restart index.
ScoredModel em_fixed_tree(const LeafLabeledTree& t, const Dataset& data, const AnyParams& init,
                          const EmOptions& opts = {});

struct SemOptions {
  EmOptions em;
  int max_outer = 50;
  int inner_em_iters = 5;  // parameter-EM iterations between structure moves
  bool trivalent = false;
};

// Structural EM: alternates the E-step with a Chow-Liu step over expected
// pairwise statistics of all (observed + hidden) variables, applies the
// tree surgery, then runs a few parameter-EM iterations. Structure moves
// are accepted only on strict spanning-tree weight improvement.
ScoredModel structural_em(const Dataset& data, const ScoredModel& init,
                          const SemOptions& opts = {});

// Tree over arbitrary vertices where some vertices carry observed variables.
struct MarkedTree {
  std::vector<int> vertices;
  std::vector<Edge> edges;
  std::map<int, int> observed;  // vertex -> variable label 1..m
};

// Post-processing of an M-step tree: removes hidden pendants, contracts
// hidden degree-two chains (correlations multiply), and moves observed
// internal variables to pendant copies with correlation 1. The observed
// likelihood is unchanged. With trivalent=true, hidden vertices of degree
// above three are expanded into chains of copies joined by correlation-1
// edges.
GaussianParams tree_surgery(const MarkedTree& t, const std::map<Edge, double>& edge_corr,
                            const std::map<int, double>& observed_var, bool trivalent = false);

// Discrete analog: chains compose transition matrices, copies get identity
// transitions. Transition rows index the endpoint nearer `root`.
MarkovParams tree_surgery_markov(const MarkedTree& t, int d, int root,
                                 const Eigen::VectorXd& root_dist,
                                 const std::map<Edge, Eigen::MatrixXd>& transitions,
                                 bool trivalent = false);

// BIC = loglik - dim/2 log n with dim = m + |E| (Gaussian) or
// (d-1) + |E| d (d-1) (discrete).
int model_dimension(const AnyParams& model);
ScoredModel bic_score(const AnyParams& model, const Dataset& data);

// Random parameters on a fixed tree (EM restarts, test harnesses).
GaussianParams random_gaussian_params(const LeafLabeledTree& t,
                                      const std::map<int, double>& leaf_var, Rng& rng);
MarkovParams random_markov_params(const LeafLabeledTree& t, int d, Rng& rng);

}  // namespace arbor
