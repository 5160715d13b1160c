#pragma once

#include <optional>
#include <string>

#include <json.hpp>

#include "arbor/invariants.hpp"
#include "arbor/models.hpp"
#include "arbor/structure.hpp"
#include "arbor/tree.hpp"

namespace arbor {

using Json = nlohmann::json;

// ----- datasets (headered CSV; discrete states as integers 0..d-1) -----

Dataset read_csv(const std::string& path, std::optional<int> states = std::nullopt);
void write_csv(const Dataset& data, const std::string& path);

// ----- distance matrices (square CSV with a header row) -----

DistanceMatrix read_distance_csv(const std::string& path);
void write_distance_csv(const DistanceMatrix& D, const std::string& path);

// ----- trees -----

Json tree_to_json(const LeafLabeledTree& t, const EdgeLengths& len = {});
std::pair<LeafLabeledTree, EdgeLengths> tree_from_json(const Json& j);

// ----- model parameter files -----
// {newick, type: "gaussian"|"markov", edge_corr | {root_dist, transitions},
//  leaf_var}; vertices are named by label (leaves) and h1,h2,.. (internal).

Json model_to_json(const AnyParams& p);
AnyParams model_from_json(const Json& j);
AnyParams read_model_json(const std::string& path);
void write_model_json(const AnyParams& p, const std::string& path);

Json scored_model_to_json(const ScoredModel& s);

// ----- invariant reports -----

// One JSON object per line: tetrad records then edge-split records.
std::string invariant_report_jsonl(const InvariantReport& rep);
std::string invariant_report_table(const InvariantReport& rep);

// ----- small file helpers -----

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
// FNV-1a 64-bit digest of a file's bytes, as "fnv1a64:<hex>".
std::string file_digest(const std::string& path);

}  // namespace arbor
