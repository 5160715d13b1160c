#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "arbor/distance.hpp"
#include "arbor/models.hpp"
#include "arbor/tree.hpp"

namespace arbor {

// One tetrad record per 4-subset that forms a quartet in the hypothesis
// tree: for split ab|cd, pairing = {a,c,b,d} and
// residual = v(a,c) v(b,d) - v(a,d) v(b,c), which vanishes on the model.
struct TetradRecord {
  std::array<int, 4> quartet;  // {a,b,c,d} with split ab|cd
  std::array<int, 4> pairing;
  double residual = 0;
  double scale = 0;  // max magnitude of the two monomials
  // Bootstrap percentile band (filled by tetrad_bootstrap).
  double boot_lo = 0, boot_hi = 0;
  bool has_band = false;
};

struct SplitRecord {
  std::vector<int> side_a;  // sorted leaf labels
  std::vector<double> singular_values;
  double rank_distance = 0;
};

struct InvariantReport {
  std::vector<TetradRecord> tetrads;
  std::vector<SplitRecord> splits;
};

// Tetrad residuals of every 4-subset of leaves that forms a quartet in t
// (star quartets carry no tetrad constraint and are skipped).
InvariantReport tetrad_residuals(const EmpiricalSecondOrder& s, const LeafLabeledTree& t);

// Frobenius distance of the flattened joint to the set of rank-d matrices:
// sqrt of the sum of squared singular values beyond the d-th. Rows are
// indexed by the states of side_a in row-major order of sorted labels.
SplitRecord edge_rank_test(const Dataset& data, const std::vector<int>& side_a, int d);
// Same test on an explicit joint distribution over m leaves (index = states
// in row-major order of leaf labels 1..m); used with exact model joints.
SplitRecord edge_rank_test_joint(const Eigen::VectorXd& joint, int m, int d,
                                 const std::vector<int>& side_a);

struct QuartetInequality {
  bool ok = false;
  double dominance_slack = 0;  // |v_ab v_cd| - max of the other two products
  double equality_gap = 0;     // | |v_ac v_bd| - |v_ad v_bc| |
};

// Checks |rho_ab rho_cd| >= |rho_ac rho_bd| = |rho_ad rho_bc| for the
// hypothesized split ab|cd, within an absolute tolerance.
QuartetInequality quartet_inequality_check(const EmpiricalSecondOrder& s,
                                           std::array<int, 4> leaves, const QuartetCall& split,
                                           double tol = 1e-12);

// Bootstrap percentile bands (2.5%..97.5%) for the tetrad residuals, from B
// row resamples of the data. Replicates use split seed streams and run in
// parallel without changing the result.
InvariantReport tetrad_bootstrap(const Dataset& data, SecondOrderKind kind,
                                 const LeafLabeledTree& t, int B, std::uint64_t seed);

}  // namespace arbor
