#pragma once

#include <string>
#include <string_view>

#include "arbor/tree.hpp"

namespace arbor {

struct NewickTree {
  LeafLabeledTree tree;
  EdgeLengths lengths;  // only edges that carried a ':length'; may be empty
};

// Parses a Newick string whose leaf labels are the integers 1..m. Internal
// node labels are ignored. Unlabeled degree-two vertices (including a rooted
// top node) are suppressed with their lengths summed. Throws ParseError with
// the byte offset of the offending character.
NewickTree newick_parse(std::string_view text);

// Lengths are optional; present entries are written with 12 significant
// digits. Children are emitted in canonical order so output is deterministic.
std::string newick_write(const LeafLabeledTree& t, const EdgeLengths& len = {});

}  // namespace arbor
