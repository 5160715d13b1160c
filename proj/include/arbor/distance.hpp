#pragma once

#include <array>
#include <map>

#include "arbor/models.hpp"
#include "arbor/tree.hpp"

namespace arbor {

enum class SecondOrderKind { gaussian_correlation, markov_tau };

// Sample second-order association matrix: Pearson correlations (Gaussian)
// or determinant-based tau values (discrete). Symmetric, unit diagonal,
// entries in [-1, 1].
struct EmpiricalSecondOrder {
  SecondOrderKind kind = SecondOrderKind::gaussian_correlation;
  Eigen::MatrixXd values;
  long n = 0;
  void validate() const;
};

EmpiricalSecondOrder empirical_second_order(const Dataset& data, SecondOrderKind kind);

// Second-order values of an exact model, packaged for the same consumers.
EmpiricalSecondOrder exact_second_order(const AnyParams& p);

// d_ij = -log|value|; zero values map to +inf.
DistanceMatrix distances_from_second_order(const EmpiricalSecondOrder& s);

struct NJResult {
  LeafLabeledTree tree;
  EdgeLengths lengths;
  int clamped = 0;  // edge lengths that came out negative and were set to 0
};

// Classical Saitou-Nei neighbor joining; Q-matrix ties broken by the lowest
// pair of node ids, so the output is deterministic.
NJResult neighbor_joining(const DistanceMatrix& D);

// Picks the pairing maximizing |rho_ij rho_kl|; returns a star when all
// three products agree within star_tol (relative).
QuartetCall quartet_select(const EmpiricalSecondOrder& s, std::array<int, 4> leaves,
                           double star_tol = 0.0);

// |rho_uv| = exp(-d_uv) per edge; signs are not recoverable from distances,
// so the returned correlations are magnitudes. Leaf variances default to 1.
GaussianParams edge_correlations_from_lengths(const LeafLabeledTree& t, const EdgeLengths& len);

// Parameters of the 3-leaf star reproducing the three observed correlations,
// up to a global sign flip; the returned solution has rho1 > 0.
struct TripleResult {
  double rho1, rho2, rho3;
};
TripleResult triple_recover(double rho12, double rho13, double rho23);

// Symmetric discrete submodel (uniform root, equal off-diagonal transition
// entries) whose edge taus match the given values.
MarkovParams symmetric_discrete_recover(const LeafLabeledTree& t,
                                        const std::map<Edge, double>& tau, int d);

}  // namespace arbor
